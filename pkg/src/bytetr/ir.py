"""SSA-form intermediate representation, ABI descriptor, and their text/JSON codecs.

Two document formats are accepted by :func:`parse_module`:

* JSON (the interchange format written by the synthetic generator)::

    {"name": ..., "arch": ..., "functions": [{"name", "address"?, "entry",
      "blocks": [{"label", "succs": [...], "instrs": [...]}]}]}

* the canonical text form emitted by :func:`pretty_print`::

    module demo arch x86_64
    func main @0x401000 entry bb0
      block bb0 -> bb1 bb2
        RAX.1 = +(RBX.0, 0x1:64)
        @64[+(RBP.0, -0x28:64)] = RDI.0
        call $read #cs1
        call &handle #cs2

Expression syntax in the text form: registers are bare names (``EAX.1:32``
when not 64 bits wide), integers are ``hex:size``, memory is ``@size[addr]``,
operators are ``op(arg, ...)``, conditionals ``?(c, t, e)`` and code labels
``&label``.  Call targets are expressions, or ``$name`` for a named external.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Union

VALID_SIZES = frozenset({1, 8, 16, 32, 64, 128})


class IRError(ValueError):
    """Malformed IR document or expression."""


class IRSyntaxError(IRError):
    def __init__(self, msg: str, line: int, col: int):
        super().__init__(f"{line}:{col}: {msg}")
        self.line = line
        self.col = col


def _check_size(size: int) -> None:
    if size not in VALID_SIZES:
        raise IRError(f"invalid size {size!r}; expected one of {sorted(VALID_SIZES)}")


# -- expressions -------------------------------------------------------------


@dataclass(frozen=True)
class Reg:
    name: str
    size: int = 64

    def __post_init__(self):
        _check_size(self.size)

    @property
    def base(self) -> str:
        return self.name.split(".", 1)[0]

    @property
    def version(self) -> int | None:
        _, _, v = self.name.partition(".")
        return int(v) if v.isdigit() else None


@dataclass(frozen=True)
class Int:
    value: int
    size: int

    def __post_init__(self):
        _check_size(self.size)


@dataclass(frozen=True)
class Mem:
    addr: "Expr"
    size: int

    def __post_init__(self):
        _check_size(self.size)


@dataclass(frozen=True)
class Op:
    opname: str
    args: tuple["Expr", ...]

    def __post_init__(self):
        if not self.args:
            raise IRError(f"operator {self.opname!r} needs at least one argument")
        if self.opname == "?" or not self.opname:
            raise IRError(f"invalid operator name {self.opname!r}")
        object.__setattr__(self, "args", tuple(self.args))


@dataclass(frozen=True)
class Cond:
    cond: "Expr"
    then: "Expr"
    else_: "Expr"


@dataclass(frozen=True)
class Loc:
    label: str


Expr = Union[Reg, Int, Mem, Op, Cond, Loc]


def children(e: Expr) -> tuple[Expr, ...]:
    if isinstance(e, Mem):
        return (e.addr,)
    if isinstance(e, Op):
        return e.args
    if isinstance(e, Cond):
        return (e.cond, e.then, e.else_)
    return ()


def walk(e: Expr, path: tuple[int, ...] = ()) -> Iterator[tuple[tuple[int, ...], Expr]]:
    """Pre-order traversal yielding ``(path, subexpr)``; paths index children."""
    yield path, e
    for i, c in enumerate(children(e)):
        yield from walk(c, path + (i,))


def subexpr(e: Expr, path: tuple[int, ...]) -> Expr:
    for i in path:
        e = children(e)[i]
    return e


# -- instructions and containers ---------------------------------------------


@dataclass(frozen=True)
class Assign:
    dst: Expr
    src: Expr

    def __post_init__(self):
        if not isinstance(self.dst, (Reg, Mem)):
            raise IRError(f"assignment destination must be a register or memory, got {self.dst!r}")


@dataclass(frozen=True)
class External:
    name: str


@dataclass(frozen=True)
class Call:
    target: Union[Expr, External]
    site_id: str


Instruction = Union[Assign, Call]


@dataclass(frozen=True)
class BasicBlock:
    label: str
    instrs: tuple[Instruction, ...] = ()
    succs: tuple[str, ...] = ()


@dataclass(frozen=True)
class FunctionIR:
    name: str
    entry: str
    blocks: tuple[BasicBlock, ...]
    address: int | None = None
    # parameter registers carrying a dummy definition at entry (see dataflow)
    dummy_params: tuple[str, ...] = ()

    def block(self, label: str) -> BasicBlock:
        for b in self.blocks:
            if b.label == label:
                return b
        raise KeyError(label)

    @property
    def block_map(self) -> dict[str, BasicBlock]:
        return {b.label: b for b in self.blocks}

    def instructions(self) -> Iterator[tuple[str, int, Instruction]]:
        for b in self.blocks:
            for i, ins in enumerate(b.instrs):
                yield b.label, i, ins

    def exit_blocks(self) -> list[str]:
        return [b.label for b in self.blocks if not b.succs]


@dataclass(frozen=True)
class AbiSpec:
    param_regs: tuple[str, ...]
    callee_saved: frozenset[str]
    caller_saved: frozenset[str]
    ret_reg: str
    stack_reg: str
    frame_reg: str

    def __post_init__(self):
        object.__setattr__(self, "param_regs", tuple(self.param_regs))
        object.__setattr__(self, "callee_saved", frozenset(self.callee_saved))
        object.__setattr__(self, "caller_saved", frozenset(self.caller_saved))
        if len(set(self.param_regs)) != len(self.param_regs):
            raise IRError("ABI parameter registers must be unique")
        overlap = self.callee_saved & self.caller_saved
        if overlap:
            raise IRError(f"registers both callee- and caller-saved: {sorted(overlap)}")

    @property
    def registers(self) -> frozenset[str]:
        return (frozenset(self.param_regs) | self.callee_saved | self.caller_saved
                | {self.ret_reg, self.stack_reg, self.frame_reg})

    @classmethod
    def from_dict(cls, d: dict) -> "AbiSpec":
        try:
            return cls(
                param_regs=tuple(d["param_regs"]),
                callee_saved=frozenset(d["callee_saved"]),
                caller_saved=frozenset(d["caller_saved"]),
                ret_reg=d["ret_reg"],
                stack_reg=d["stack_reg"],
                frame_reg=d["frame_reg"],
            )
        except KeyError as exc:
            raise IRError(f"ABI file missing field {exc.args[0]!r}") from None

    def to_dict(self) -> dict:
        return {
            "param_regs": list(self.param_regs),
            "callee_saved": sorted(self.callee_saved),
            "caller_saved": sorted(self.caller_saved),
            "ret_reg": self.ret_reg,
            "stack_reg": self.stack_reg,
            "frame_reg": self.frame_reg,
        }


SYSV_X64 = AbiSpec(
    param_regs=("RDI", "RSI", "RDX", "RCX", "R8", "R9"),
    callee_saved=frozenset({"RBX", "RBP", "RSP", "R12", "R13", "R14", "R15"}),
    caller_saved=frozenset({"RAX", "RCX", "RDX", "RSI", "RDI", "R8", "R9", "R10", "R11",
                            "XMM0", "XMM1", "XMM2", "XMM3", "XMM4", "XMM5", "XMM6", "XMM7"}),
    ret_reg="RAX",
    stack_reg="RSP",
    frame_reg="RBP",
)


def load_abi(path: str | Path | None = None) -> AbiSpec:
    if path is None:
        return SYSV_X64
    return AbiSpec.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ModuleIR:
    name: str
    arch: str
    functions: tuple[FunctionIR, ...]
    abi: AbiSpec = field(default=SYSV_X64, compare=False)

    def function(self, name: str) -> FunctionIR:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)

    def resolve_target(self, target) -> FunctionIR | None:
        """Internal function a call target refers to, or None for externals."""
        if isinstance(target, External):
            name = target.name
        elif isinstance(target, Loc):
            name = target.label
        elif isinstance(target, Int):
            for f in self.functions:
                if f.address is not None and f.address == target.value:
                    return f
            return None
        else:
            return None
        for f in self.functions:
            if f.name == name:
                return f
        return None


# -- validation ---------------------------------------------------------------


def validate_module(m: ModuleIR, mode: str = "ssa") -> list[str]:
    """Return diagnostics; an empty list means the module is valid in ``mode``."""
    if mode not in ("ssa", "relaxed"):
        raise ValueError(f"unknown validation mode {mode!r}")
    diags = []
    seen_fn = set()
    seen_sites: dict[str, str] = {}
    for f in m.functions:
        if f.name in seen_fn:
            diags.append(f"duplicate function name {f.name!r}")
        seen_fn.add(f.name)
        labels = [b.label for b in f.blocks]
        if len(set(labels)) != len(labels):
            diags.append(f"{f.name}: duplicate block labels")
        if f.entry not in labels:
            diags.append(f"{f.name}: entry block {f.entry!r} does not exist")
        assigned: dict[str, int] = {}
        for b in f.blocks:
            for s in b.succs:
                if s not in labels:
                    diags.append(f"{f.name}: block {b.label!r} has dangling successor {s!r}")
            for ins in b.instrs:
                if isinstance(ins, Call):
                    if ins.site_id in seen_sites:
                        diags.append(f"{f.name}: call site id {ins.site_id!r} reused "
                                     f"(first in {seen_sites[ins.site_id]})")
                    seen_sites.setdefault(ins.site_id, f.name)
                elif isinstance(ins.dst, Reg):
                    assigned[ins.dst.name] = assigned.get(ins.dst.name, 0) + 1
        if mode == "ssa":
            for name, n in assigned.items():
                if n > 1:
                    diags.append(f"{f.name}: register {name} assigned {n} times")
    return diags


# -- text printing --------------------------------------------------------------


def _hex(v: int) -> str:
    return f"-0x{-v:x}" if v < 0 else f"0x{v:x}"


def format_expr(e: Expr) -> str:
    if isinstance(e, Reg):
        return e.name if e.size == 64 else f"{e.name}:{e.size}"
    if isinstance(e, Int):
        return f"{_hex(e.value)}:{e.size}"
    if isinstance(e, Mem):
        return f"@{e.size}[{format_expr(e.addr)}]"
    if isinstance(e, Op):
        return f"{e.opname}({', '.join(format_expr(a) for a in e.args)})"
    if isinstance(e, Cond):
        return f"?({format_expr(e.cond)}, {format_expr(e.then)}, {format_expr(e.else_)})"
    if isinstance(e, Loc):
        return f"&{e.label}"
    raise IRError(f"not an expression: {e!r}")


def format_instr(ins: Instruction) -> str:
    if isinstance(ins, Assign):
        return f"{format_expr(ins.dst)} = {format_expr(ins.src)}"
    t = f"${ins.target.name}" if isinstance(ins.target, External) else format_expr(ins.target)
    return f"call {t} #{ins.site_id}"


def pretty_print(m: ModuleIR) -> str:
    lines = [f"module {m.name} arch {m.arch}"]
    for f in m.functions:
        addr = f" @{_hex(f.address)}" if f.address is not None else ""
        lines.append(f"func {f.name}{addr} entry {f.entry}")
        for b in f.blocks:
            succ = (" -> " + " ".join(b.succs)) if b.succs else ""
            lines.append(f"  block {b.label}{succ}")
            lines.extend(f"    {format_instr(ins)}" for ins in b.instrs)
    return "\n".join(lines) + "\n"


# -- text parsing ---------------------------------------------------------------

_INT_RE = re.compile(r"-?(0x[0-9a-fA-F]+|\d+):(\d+)")
_ATOM_RE = re.compile(r"[^\s()\[\],:]+")
_SIZE_RE = re.compile(r":(\d+)")


class _ExprParser:
    def __init__(self, text: str, line: int, col0: int):
        self.s = text
        self.i = 0
        self.line = line
        self.col0 = col0

    def error(self, msg: str):
        raise IRSyntaxError(msg, self.line, self.col0 + self.i + 1)

    def ws(self):
        while self.i < len(self.s) and self.s[self.i] in " \t":
            self.i += 1

    def expect(self, ch: str):
        self.ws()
        if not self.s.startswith(ch, self.i):
            self.error(f"expected {ch!r}")
        self.i += len(ch)

    def size(self) -> int:
        mt = _SIZE_RE.match(self.s, self.i)
        if not mt:
            self.error("expected ':size'")
        self.i = mt.end()
        return int(mt.group(1))

    def wrap(self, fn, *args):
        start = self.i
        try:
            return fn(*args)
        except IRSyntaxError:
            raise
        except IRError as exc:
            self.i = start
            self.error(str(exc))

    def expr(self) -> Expr:
        self.ws()
        s, i = self.s, self.i
        if i >= len(s):
            self.error("unexpected end of expression")
        mt = _INT_RE.match(s, i)
        if mt:
            self.i = mt.end()
            return self.wrap(Int, int(mt.group(0).rsplit(":", 1)[0], 0), int(mt.group(2)))
        if s[i] == "@":
            mt = re.compile(r"@(\d+)\[").match(s, i)
            if not mt:
                self.error("malformed memory expression")
            self.i = mt.end()
            addr = self.expr()
            self.expect("]")
            return self.wrap(Mem, addr, int(mt.group(1)))
        if s[i] == "&":
            mt = _ATOM_RE.match(s, i + 1)
            if not mt:
                self.error("expected label after '&'")
            self.i = mt.end()
            return Loc(mt.group(0))
        mt = _ATOM_RE.match(s, i)
        if not mt:
            self.error(f"unexpected character {s[i]!r}")
        atom = mt.group(0)
        self.i = mt.end()
        if self.i < len(s) and s[self.i] == "(":
            self.i += 1
            args = [self.expr()]
            self.ws()
            while self.i < len(s) and s[self.i] == ",":
                self.i += 1
                args.append(self.expr())
                self.ws()
            self.expect(")")
            if atom == "?":
                if len(args) != 3:
                    self.error("conditional takes exactly 3 operands")
                return Cond(*args)
            return self.wrap(Op, atom, tuple(args))
        size = 64
        if self.i < len(s) and s[self.i] == ":":
            size = self.size()
        return self.wrap(Reg, atom, size)

    def end(self):
        self.ws()
        if self.i != len(self.s):
            self.error("trailing characters")


def _parse_instr(text: str, line: int, col0: int) -> Instruction:
    if text.startswith("call "):
        rest = text[5:]
        target_txt, sep, site = rest.rpartition("#")
        if not sep or not site.strip():
            raise IRSyntaxError("call needs a '#site' id", line, col0 + len(text))
        target_txt = target_txt.strip()
        if target_txt.startswith("$"):
            target = External(target_txt[1:])
        else:
            p = _ExprParser(target_txt, line, col0 + 5)
            target = p.expr()
            p.end()
        return Call(target, site.strip())
    depth = 0
    eq = -1
    for k, ch in enumerate(text):
        if ch in "([":
            depth += 1
        elif ch in ")]":
            depth -= 1
        elif ch == "=" and depth == 0 and text[k - 1:k] == " " and text[k + 1:k + 2] == " ":
            eq = k
            break
    if eq < 0:
        raise IRSyntaxError("expected 'dst = src' or 'call'", line, col0 + 1)
    p = _ExprParser(text[:eq], line, col0)
    dst = p.expr()
    p.end()
    q = _ExprParser(text[eq + 1:], line, col0 + eq + 1)
    src = q.expr()
    q.end()
    if not isinstance(dst, (Reg, Mem)):
        raise IRSyntaxError("assignment destination must be a register or memory", line, col0 + 1)
    return Assign(dst, src)


def _parse_text(doc: str, abi: AbiSpec) -> ModuleIR:
    header = None
    funcs: list[dict] = []
    for ln, raw in enumerate(doc.splitlines(), 1):
        stripped = raw.strip()
        if not stripped or stripped.startswith(";"):
            continue
        col0 = len(raw) - len(raw.lstrip())
        words = stripped.split()
        if header is None:
            if len(words) != 4 or words[0] != "module" or words[2] != "arch":
                raise IRSyntaxError("expected 'module NAME arch ARCH'", ln, col0 + 1)
            header = (words[1], words[3])
        elif words[0] == "func":
            mt = re.fullmatch(r"func (\S+)(?: @(-?0x[0-9a-fA-F]+))? entry (\S+)", stripped)
            if not mt:
                raise IRSyntaxError("expected 'func NAME [@ADDR] entry LABEL'", ln, col0 + 1)
            addr = int(mt.group(2), 0) if mt.group(2) else None
            funcs.append({"name": mt.group(1), "address": addr, "entry": mt.group(3),
                          "blocks": [], "line": ln})
        elif words[0] == "block":
            if not funcs:
                raise IRSyntaxError("block outside of a function", ln, col0 + 1)
            mt = re.fullmatch(r"block (\S+)(?: -> (.+))?", stripped)
            if not mt:
                raise IRSyntaxError("expected 'block LABEL [-> SUCC ...]'", ln, col0 + 1)
            succs = tuple(mt.group(2).split()) if mt.group(2) else ()
            funcs[-1]["blocks"].append({"label": mt.group(1), "succs": succs, "instrs": [],
                                        "line": ln})
        else:
            if not funcs or not funcs[-1]["blocks"]:
                raise IRSyntaxError("instruction outside of a block", ln, col0 + 1)
            funcs[-1]["blocks"][-1]["instrs"].append(_parse_instr(stripped, ln, col0))
    if header is None:
        raise IRSyntaxError("empty document", 1, 1)
    return _link(header[0], header[1], funcs, abi)


def _link(name: str, arch: str, funcs: list[dict], abi: AbiSpec) -> ModuleIR:
    out = []
    for f in funcs:
        labels = {b["label"] for b in f["blocks"]}
        for b in f["blocks"]:
            for s in b["succs"]:
                if s not in labels:
                    raise IRError(f"line {b.get('line', '?')}: function {f['name']!r} block "
                                  f"{b['label']!r}: dangling successor label {s!r}")
        if f["entry"] not in labels:
            raise IRError(f"function {f['name']!r}: dangling entry label {f['entry']!r}")
        blocks = tuple(BasicBlock(b["label"], tuple(b["instrs"]), tuple(b["succs"]))
                       for b in f["blocks"])
        out.append(FunctionIR(f["name"], f["entry"], blocks, f["address"]))
    return ModuleIR(name, arch, tuple(out), abi)


# -- JSON codec -----------------------------------------------------------------


def expr_from_json(d) -> Expr:
    if not isinstance(d, dict) or not d:
        raise IRError(f"malformed expression {d!r}")
    if "reg" in d:
        return Reg(d["reg"], d.get("size", 64))
    if "int" in d:
        if "size" not in d:
            raise IRError(f"integer without size: {d!r}")
        return Int(int(d["int"]), d["size"])
    if "mem" in d:
        mem = d["mem"]
        if "size" not in mem:
            raise IRError(f"memory reference without size: {d!r}")
        return Mem(expr_from_json(mem["addr"]), mem["size"])
    if "op" in d:
        return Op(d["op"], tuple(expr_from_json(a) for a in d.get("args", ())))
    if "cond" in d:
        c = d["cond"]
        return Cond(expr_from_json(c["c"]), expr_from_json(c["t"]), expr_from_json(c["e"]))
    if "loc" in d:
        return Loc(d["loc"])
    raise IRError(f"unknown expression kind {sorted(d)!r}")


def expr_to_json(e: Expr) -> dict:
    if isinstance(e, Reg):
        return {"reg": e.name, "size": e.size}
    if isinstance(e, Int):
        return {"int": e.value, "size": e.size}
    if isinstance(e, Mem):
        return {"mem": {"addr": expr_to_json(e.addr), "size": e.size}}
    if isinstance(e, Op):
        return {"op": e.opname, "args": [expr_to_json(a) for a in e.args]}
    if isinstance(e, Cond):
        return {"cond": {"c": expr_to_json(e.cond), "t": expr_to_json(e.then),
                         "e": expr_to_json(e.else_)}}
    if isinstance(e, Loc):
        return {"loc": e.label}
    raise IRError(f"not an expression: {e!r}")


def _instr_from_json(d) -> Instruction:
    if "assign" in d:
        a = d["assign"]
        return Assign(expr_from_json(a["dst"]), expr_from_json(a["src"]))
    if "call" in d:
        c = d["call"]
        t = c["target"]
        target = External(t["ext"]) if isinstance(t, dict) and "ext" in t else expr_from_json(t)
        return Call(target, str(c["site"]))
    raise IRError(f"unknown instruction kind {sorted(d)!r}")


def _instr_to_json(ins: Instruction) -> dict:
    if isinstance(ins, Assign):
        return {"assign": {"dst": expr_to_json(ins.dst), "src": expr_to_json(ins.src)}}
    t = {"ext": ins.target.name} if isinstance(ins.target, External) else expr_to_json(ins.target)
    return {"call": {"target": t, "site": ins.site_id}}


def module_to_json(m: ModuleIR) -> dict:
    funcs = []
    for f in m.functions:
        fd = {"name": f.name, "entry": f.entry,
              "blocks": [{"label": b.label, "succs": list(b.succs),
                          "instrs": [_instr_to_json(i) for i in b.instrs]} for b in f.blocks]}
        if f.address is not None:
            fd["address"] = f.address
        funcs.append(fd)
    return {"name": m.name, "arch": m.arch, "functions": funcs}


def dump_module(m: ModuleIR) -> str:
    return json.dumps(module_to_json(m), sort_keys=True, separators=(",", ":")) + "\n"


def _parse_json(doc: str, abi: AbiSpec) -> ModuleIR:
    try:
        d = json.loads(doc)
    except json.JSONDecodeError as exc:
        raise IRSyntaxError(exc.msg, exc.lineno, exc.colno) from None
    try:
        funcs = []
        for f in d["functions"]:
            blocks = [{"label": b["label"], "succs": tuple(b.get("succs", ())),
                       "instrs": [_instr_from_json(i) for i in b.get("instrs", ())]}
                      for b in f["blocks"]]
            funcs.append({"name": f["name"], "address": f.get("address"), "entry": f["entry"],
                          "blocks": blocks})
        return _link(d["name"], d.get("arch", "x86_64"), funcs, abi)
    except (KeyError, TypeError) as exc:
        raise IRError(f"malformed module document: {exc!r}") from None


def parse_module(doc: str | bytes, abi: AbiSpec = SYSV_X64) -> ModuleIR:
    """Parse a JSON or canonical-text module document into a linked ModuleIR."""
    if isinstance(doc, bytes):
        doc = doc.decode("utf-8")
    if doc.lstrip().startswith("{"):
        return _parse_json(doc, abi)
    return _parse_text(doc, abi)


def load_module(path: str | Path, abi: AbiSpec = SYSV_X64) -> ModuleIR:
    return parse_module(Path(path).read_bytes(), abi)
