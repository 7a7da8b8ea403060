"""Synthetic IR corpora with planted type evidence.

Each variable lives in a stack slot (or a callee-saved register) of a
"defining" function.  Its type is evidenced by characteristic instruction
idioms: float arithmetic, dereferences through a loaded pointer, multi-offset
field accesses, comparisons against 0/1, and so on.  A configurable fraction
of variables is instead handed to an internal callee through a
type-neutral load/copy/call sequence, so that the only evidence sits one (or,
for ``deep_fraction`` of them, two) call levels down.  ``posix_fraction``
variables are evidenced only by being passed to a known libc API.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ir import (SYSV_X64, Assign, BasicBlock, Call, Cond, External, FunctionIR, Int, Loc, Mem,
                 ModuleIR, Op, Reg, dump_module)
from .typelabels import GroundTruthVar, LocationExpr, TypeLabel, parse_c_type, sidecar_to_json

DEFAULT_CLASSES = ("float*0", "int*0", "int*1", "struct_*0", "struct_*1", "bool*0")

TYPE_TEXTS = {
    "float*0": ["float"],
    "double*0": ["double"],
    "int*0": ["int", "int32_t", "signed int"],
    "int*1": ["int *", "const int *", "int32_t *"],
    "struct_*0": ["struct point", "point_t", "struct pair"],
    "struct_*1": ["struct node *", "FILE *", "node_t *"],
    "bool*0": ["_Bool", "bool"],
    "char*1": ["char *", "const char *"],
    "long*0": ["long", "ssize_t"],
}

ALIASES = {
    "int32_t": "int",
    "point_t": "struct point",
    "node_t": "struct node",
    "FILE": "struct _IO_FILE",
    "ssize_t": "long int",
}


@dataclass
class GenSpec:
    classes: tuple[str, ...] = DEFAULT_CLASSES
    n_variables: int = 1000
    vars_per_function: tuple[int, int] = (1, 3)
    cross_function: float = 0.5
    deep_fraction: float = 0.0  # of cross-function variables, evidence two calls down
    posix_fraction: float = 0.0
    register_fraction: float = 0.15
    n_projects: int = 8
    functions_per_module: int = 40
    branch_prob: float = 0.3
    noise_calls: float = 0.3

    @classmethod
    def from_dict(cls, d: dict) -> "GenSpec":
        d = dict(d)
        if "classes" in d:
            d["classes"] = tuple(d["classes"])
        if "vars_per_function" in d:
            d["vars_per_function"] = tuple(d["vars_per_function"])
        return cls(**d)


CALLER_SAVED = sorted(SYSV_X64.caller_saved)
VAR_REGS = ("RBX", "R12", "R13", "R14", "R15")


class _Fn:
    """Incremental SSA function builder."""

    def __init__(self, name: str, address: int, sites):
        self.name = name
        self.address = address
        self.ver: dict[str, int] = defaultdict(int)
        self.blocks: list[list] = [["bb0", [], []]]
        self.cur = self.blocks[0]
        self.sites = sites

    def reg(self, r: str, size: int = 64) -> Reg:
        return Reg(f"{r}.{self.ver[r]}", size)

    def fresh(self, r: str, size: int = 64) -> Reg:
        self.ver[r] += 1
        return Reg(f"{r}.{self.ver[r]}", size)

    def assign(self, dst, src):
        self.cur[1].append(Assign(dst, src))

    def call(self, target):
        self.cur[1].append(Call(target, self.sites()))
        for r in CALLER_SAVED:
            self.ver[r] += 1

    def new_block(self) -> list:
        b = [f"bb{len(self.blocks)}", [], []]
        self.blocks.append(b)
        return b

    def diamond(self):
        """Split control flow; returns (then, else, join) blocks."""
        head = self.cur
        t, e, j = self.new_block(), self.new_block(), self.new_block()
        head[2].extend([t[0], e[0]])
        t[2].append(j[0])
        e[2].append(j[0])
        return t, e, j

    def build(self) -> FunctionIR:
        blocks = tuple(BasicBlock(lbl, tuple(ins), tuple(succ)) for lbl, ins, succ in self.blocks)
        return FunctionIR(self.name, "bb0", blocks, self.address)


def _slot(off: int) -> Op:
    return Op("+", (Reg("RBP.0"), Int(off, 64)))


class _Var:
    """Accessor for a variable held in a stack slot or a callee-saved register."""

    def __init__(self, fn: _Fn, off: int | None, reg: str | None, size: int = 64):
        self.fn = fn
        self.off = off
        self.reg = reg
        self.size = size  # every slot access uses one width so def-use keys line up

    def load(self, size: int | None = None):
        if self.reg:
            return self.fn.reg(self.reg)
        return Mem(_slot(self.off), self.size)

    def store(self, value, size: int | None = None):
        if self.reg:
            self.fn.assign(self.fn.fresh(self.reg), value)
        else:
            self.fn.assign(Mem(_slot(self.off), self.size), value)

    def to_reg(self, r: str, size: int | None = None) -> Reg:
        dst = self.fn.fresh(r, size or self.size)
        self.fn.assign(dst, self.load())
        return dst


# -- evidence patterns: each emits instructions that read/write the variable ----


def _p_float(fn: _Fn, v: _Var, rng):
    x = v.to_reg("XMM0", 32)
    for _ in range(rng.integers(1, 3)):
        op = str(rng.choice(["fadd", "fmul", "fsub", "fdiv"]))
        other = rng.choice(3)
        if other == 0:
            rhs = Mem(Int(int(rng.integers(0x402000, 0x403000)) & ~3, 64), 32)
        elif other == 1:
            rhs = fn.reg("XMM1", 32)
        else:
            rhs = Op("int2float", (fn.reg("RDX", 32),))
        y = fn.fresh("XMM0", 32)
        fn.assign(y, Op(op, (x, rhs)))
        x = y
    if rng.random() < 0.6:
        v.store(x, 32)
    else:
        fn.assign(fn.fresh("RAX", 32), Op("float2int", (x,)))


def _p_int(fn: _Fn, v: _Var, rng):
    x = v.to_reg("RAX", 32)
    for _ in range(rng.integers(1, 3)):
        op = str(rng.choice(["+", "-", "*", "<<", "a>>", "%"]))
        c = int(rng.choice([1, 2, 3, 4, 7, 10, 100, int(rng.integers(5, 5000))]))
        y = fn.fresh("RAX", 32)
        fn.assign(y, Op(op, (x, Int(c, 32))))
        x = y
    if rng.random() < 0.6:
        v.store(x, 32)
    else:
        fn.assign(fn.fresh("RDX", 32), Op("<s", (x, Int(int(rng.integers(2, 1000)), 32))))


def _p_int_ptr(fn: _Fn, v: _Var, rng):
    p = v.to_reg("RAX", 64)
    for _ in range(rng.integers(1, 3)):
        kind = rng.choice(3)
        if kind == 0:
            x = fn.fresh("RDX", 32)
            fn.assign(x, Mem(p, 32))
            y = fn.fresh("RDX", 32)
            fn.assign(y, Op("+", (x, Int(int(rng.choice([1, 2, 10])), 32))))
            fn.assign(Mem(p, 32), y)
        elif kind == 1:
            q = fn.fresh("RAX", 64)
            fn.assign(q, Op("+", (p, Int(4 * int(rng.integers(1, 4)), 64))))
            fn.assign(fn.fresh("RCX", 32), Mem(q, 32))
            p = q
        else:
            fn.assign(Mem(p, 32), Int(int(rng.choice([0, 1, -1])), 32))
    if rng.random() < 0.3:
        v.store(p, 64)


def _p_struct(fn: _Fn, v: _Var, rng):
    if v.size != 128:
        x = v.to_reg("RAX", 64)
        hi = fn.fresh("RDX", 64)
        fn.assign(hi, Op(">>", (x, Int(32, 64))))
        lo = fn.fresh("RCX", 32)
        fn.assign(lo, Op("&", (x, Int(0xFFFFFFFF, 64))))
        fn.assign(fn.fresh("RSI", 32), Op("+", (lo, hi)))
    else:
        x = v.to_reg("XMM0", 128)
        fn.assign(fn.fresh("XMM1", 128), x)
        fn.assign(Mem(Op("+", (Reg("RBP.0"), Int(int(rng.integers(-0x200, -0x120)) & ~0xF, 64))), 128),
                  fn.reg("XMM1", 128))


def _p_struct_ptr(fn: _Fn, v: _Var, rng):
    p = v.to_reg("RAX", 64)
    offs = rng.choice([8, 16, 24, 32, 40, 0x48], size=int(rng.integers(2, 4)), replace=False)
    for off in offs:
        size = int(rng.choice([32, 64, 8]))
        addr = Op("+", (p, Int(int(off), 64)))
        if rng.random() < 0.5:
            fn.assign(fn.fresh("RDX", size), Mem(addr, size))
        else:
            fn.assign(Mem(addr, size), fn.reg("RCX", size) if rng.random() < 0.5 else Int(0, size))


def _p_bool(fn: _Fn, v: _Var, rng):
    x = v.to_reg("RAX", 8)
    kind = rng.choice(3)
    if kind == 0:
        fn.assign(fn.fresh("ZF", 1), Op("==", (x, Int(0, 8))))
    elif kind == 1:
        y = fn.fresh("RAX", 8)
        fn.assign(y, Op("^", (x, Int(1, 8))))
        v.store(Op("&", (y, Int(1, 8))), 8)
    else:
        fn.assign(fn.fresh("RDX", 32), Cond(Op("==", (x, Int(0, 8))), Int(0, 32), Int(1, 32)))
    if rng.random() < 0.4:
        fn.assign(fn.fresh("ZF", 1), Op("!=", (fn.reg("RAX", 8), Int(1, 8))))


def _p_double(fn, v, rng):
    x = v.to_reg("XMM0", 64)
    y = fn.fresh("XMM0", 64)
    fn.assign(y, Op(str(rng.choice(["dadd", "dmul"])), (x, fn.reg("XMM1", 64))))
    v.store(y, 64)


def _p_char_ptr(fn, v, rng):
    p = v.to_reg("RAX", 64)
    fn.assign(fn.fresh("RDX", 8), Mem(Op("+", (p, Int(1, 64))), 8))
    fn.assign(fn.fresh("ZF", 1), Op("==", (fn.reg("RDX", 8), Int(0, 8))))


def _p_long(fn, v, rng):
    x = v.to_reg("RAX", 64)
    y = fn.fresh("RAX", 64)
    fn.assign(y, Op("+", (x, Int(int(rng.integers(1, 100)), 64))))
    v.store(y, 64)


PATTERNS = {
    "float*0": _p_float, "int*0": _p_int, "int*1": _p_int_ptr, "struct_*0": _p_struct,
    "struct_*1": _p_struct_ptr, "bool*0": _p_bool, "double*0": _p_double,
    "char*1": _p_char_ptr, "long*0": _p_long,
}

# natural storage width of each class when the defining function initializes it
DEF_SIZE = {"float*0": 32, "int*0": 32, "bool*0": 8, "double*0": 64}


def _natural_size(lab: str, rng) -> int:
    if lab == "struct_*0":
        return int(rng.choice([64, 128]))
    return DEF_SIZE.get(lab, 64)


# -- POSIX evidence: the variable's value is handed to a libc API ---------------


def _x_close(fn: _Fn, v: _Var, rng):
    fn.assign(fn.fresh("RDI", 32), v.load(32))
    fn.call(External(str(rng.choice(["close", "listen"]))))


def _x_read_deref(fn: _Fn, v: _Var, rng):
    p = v.to_reg("RAX", 64)
    fn.assign(fn.fresh("RDI", 32), Mem(p, 32))
    fn.assign(fn.fresh("RSI", 64), Op("+", (Reg("RBP.0"), Int(-0x120 - 16 * int(rng.integers(0, 8)), 64))))
    fn.assign(fn.fresh("RDX", 64), Int(int(rng.choice([0x100, 0x40, 0x1000])), 64))
    fn.call(External(str(rng.choice(["read", "write"]))))


def _x_file(fn: _Fn, v: _Var, rng):
    api = str(rng.choice(["fclose", "fputs", "fgets"]))
    if api == "fclose":
        fn.assign(fn.fresh("RDI", 64), v.load(64))
    elif api == "fputs":
        fn.assign(fn.fresh("RDI", 64), Int(int(rng.integers(0x402000, 0x403000)), 64))
        fn.assign(fn.fresh("RSI", 64), v.load(64))
    else:
        fn.assign(fn.fresh("RDI", 64), Op("+", (Reg("RBP.0"), Int(-0x110, 64))))
        fn.assign(fn.fresh("RSI", 32), Int(0x100, 32))
        fn.assign(fn.fresh("RDX", 64), v.load(64))
    fn.call(External(api))


def _x_strlen(fn, v, rng):
    fn.assign(fn.fresh("RDI", 64), v.load(64))
    fn.call(External(str(rng.choice(["strlen", "puts", "atoi"]))))


POSIX_PATTERNS = {"int*0": _x_close, "int*1": _x_read_deref, "struct_*1": _x_file,
                  "char*1": _x_strlen}


def _neutral_pass(fn: _Fn, v: _Var, callee: _Fn, rng, slot: int):
    """Type-neutral hand-off of the variable to an internal callee."""
    regs = SYSV_X64.param_regs
    for i in range(slot):
        fn.assign(fn.fresh(regs[i], 64), Int(int(rng.integers(0, 16)), 64))
    t = v.to_reg("RAX", 64)
    fn.assign(fn.fresh(regs[slot], 64), t)
    fn.call(Loc(callee.name) if rng.random() < 0.5 else Int(callee.address, 64))


def _neutral_init(fn: _Fn, v: _Var, rng, slot_param: int | None = None):
    if slot_param is not None:
        v.store(Reg(f"{SYSV_X64.param_regs[slot_param]}.0"))
        return
    fn.call(External("get_value"))
    v.store(fn.reg("RAX"))


class _Gen:
    def __init__(self, spec: GenSpec, seed: int):
        self.spec = spec
        self.rng = np.random.default_rng(seed)
        self.site = 0

    def next_site(self) -> str:
        self.site += 1
        return f"cs{self.site}"

    def module(self, mname: str, labels: list[str], base_addr: int):
        """Build one module containing defining functions for ``labels``."""
        rng, spec = self.rng, self.spec
        funcs: list[_Fn] = []
        records: list[GroundTruthVar] = []
        addr = [base_addr]

        def new_fn(prefix):
            f = _Fn(f"{prefix}_{addr[0]:x}", addr[0], self.next_site)
            addr[0] += 0x40 + 0x10 * int(rng.integers(0, 8))
            funcs.append(f)
            return f

        i = 0
        while i < len(labels):
            k = int(rng.integers(spec.vars_per_function[0], spec.vars_per_function[1] + 1))
            group = labels[i:i + k]
            i += k
            fn = new_fn("fn")
            offs = rng.choice(np.arange(1, 30), size=len(group), replace=False) * -8
            free_regs = list(VAR_REGS)
            vars_ = []
            for lab, off in zip(group, offs):
                r = rng.random()
                mode = ("cross" if r < spec.cross_function else
                        "posix" if lab in POSIX_PATTERNS and rng.random() < spec.posix_fraction
                        else "local")
                use_reg = mode == "local" and rng.random() < spec.register_fraction and free_regs
                reg = free_regs.pop(int(rng.integers(len(free_regs)))) if use_reg else None
                size = 64 if mode == "cross" else _natural_size(lab, rng)
                v = _Var(fn, None if reg else int(off), reg, size)
                vars_.append((lab, v, mode))
                tname = str(rng.choice(TYPE_TEXTS[lab]))
                loc = LocationExpr("reg", reg=reg) if reg else LocationExpr("stack", "RBP", int(off))
                records.append(GroundTruthVar(fn.name, f"v{len(records)}", loc, tname))
            # definitions
            for j, (lab, v, mode) in enumerate(vars_):
                if v.reg is None and j < 2 and rng.random() < 0.3:
                    _neutral_init(fn, v, rng, slot_param=j)
                elif rng.random() < 0.5 or v.reg or v.size == 128:
                    _neutral_init(fn, v, rng)
                else:
                    v.store(Int(int(rng.choice([0, 1, 0, int(rng.integers(2, 100))])), v.size))
            # uses
            for lab, v, mode in vars_:
                if mode == "cross":
                    self._cross(fn, v, lab, rng.random() < spec.deep_fraction, new_fn)
                elif mode == "posix":
                    POSIX_PATTERNS[lab](fn, v, rng)
                else:
                    self._local(fn, v, lab)
                if rng.random() < spec.noise_calls:
                    fn.assign(fn.fresh("RDI", 64), v.load(64))
                    fn.call(External(str(rng.choice(["log_value", "sub_unknown", "report"]))))
        funcs.sort(key=lambda f: f.address)
        mod = ModuleIR(mname, "x86_64", tuple(f.build() for f in funcs))
        return mod, records

    def _local(self, fn: _Fn, v: _Var, lab: str):
        rng = self.rng
        pattern = PATTERNS[lab]
        if rng.random() < self.spec.branch_prob:
            t, e, j = fn.diamond()
            fn.cur = t
            pattern(fn, v, rng)
            fn.cur = e
            if rng.random() < 0.5:
                pattern(fn, v, rng)
            fn.cur = j
            if rng.random() < 0.5:
                pattern(fn, v, rng)
        else:
            pattern(fn, v, rng)

    def _cross(self, fn: _Fn, v: _Var, lab: str, deep: bool, new_fn):
        rng = self.rng
        callee = new_fn("sub")
        slot = int(rng.integers(0, 2))
        _neutral_pass(fn, v, callee, rng, slot)
        size = _natural_size(lab, rng)
        pv = _Var(callee, -8 * int(rng.integers(2, 6)), None, 64 if deep else size)
        for i in range(slot):
            callee.assign(callee.fresh("RAX", 64), Op("+", (Reg(f"{SYSV_X64.param_regs[i]}.0"), Int(1, 64))))
        pv.store(Reg(f"{SYSV_X64.param_regs[slot]}.0"))
        if deep:
            inner = new_fn("sub")
            _neutral_pass(callee, pv, inner, rng, 0)
            qv = _Var(inner, -8 * int(rng.integers(2, 6)), None, size)
            qv.store(Reg("RDI.0"))
            PATTERNS[lab](inner, qv, rng)
        else:
            PATTERNS[lab](callee, pv, rng)


def generate(spec: GenSpec, seed: int = 0) -> list[tuple[str, ModuleIR, list[GroundTruthVar]]]:
    """Returns (project id, module, ground-truth records) triples."""
    g = _Gen(spec, seed)
    rng = g.rng
    labels = [spec.classes[i % len(spec.classes)] for i in range(spec.n_variables)]
    order = rng.permutation(len(labels))
    labels = [labels[i] for i in order]
    per_module = max(1, spec.functions_per_module)
    out = []
    chunk = 0
    for start in range(0, len(labels), per_module):
        project = f"proj{chunk % spec.n_projects:02d}"
        mname = f"{project}_m{chunk // spec.n_projects:03d}"
        mod, recs = g.module(mname, labels[start:start + per_module], 0x401000)
        out.append((project, mod, recs))
        chunk += 1
    return out


def write_corpus(out_dir, spec: GenSpec, seed: int = 0) -> Path:
    """Write modules and sidecars under ``out_dir/<project>/``; returns the index path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for project, mod, recs in generate(spec, seed):
        pdir = out_dir / project
        pdir.mkdir(exist_ok=True)
        ir_path = pdir / f"{mod.name}.ir.json"
        sc_path = pdir / f"{mod.name}.vars.json"
        ir_path.write_text(dump_module(mod))
        sc_path.write_text(json.dumps(sidecar_to_json(mod.name, recs, ALIASES), sort_keys=True,
                                      indent=1) + "\n")
        index.append({"module": f"{project}/{ir_path.name}", "sidecar": f"{project}/{sc_path.name}",
                      "project": project})
    idx_path = out_dir / "corpus.json"
    idx_path.write_text(json.dumps({"spec": asdict(spec), "seed": seed, "entries": index},
                                   sort_keys=True, indent=1) + "\n")
    return idx_path


def label_of_text(text: str) -> TypeLabel:
    return parse_c_type(text, ALIASES)
