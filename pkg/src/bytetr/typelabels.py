"""Prediction targets: C type text -> (base kind, pointer depth) labels and class indices."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Mapping

BASES = (
    "void", "bool", "char", "schar", "uchar", "short", "ushort", "int", "uint",
    "long", "ulong", "longlong", "ulonglong", "float", "double", "longdouble",
    "struct_", "union_", "enum_", "func",
)
MAX_PTR_DEPTH = 2

QUALIFIERS = frozenset({"const", "volatile", "restrict", "__restrict", "__restrict__",
                        "static", "extern", "register", "inline", "_Atomic"})


class CTypeError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class TypeLabel:
    base: str
    ptr_depth: int = 0

    def __post_init__(self):
        if self.base not in BASES:
            raise CTypeError(f"unknown base kind {self.base!r}")
        if not 0 <= self.ptr_depth <= MAX_PTR_DEPTH:
            raise CTypeError(f"pointer depth {self.ptr_depth} outside 0..{MAX_PTR_DEPTH}")

    @property
    def text(self) -> str:
        """Token form, e.g. ``int*1`` for ``int *``."""
        return f"{self.base}*{self.ptr_depth}"

    @classmethod
    def from_text(cls, s: str) -> "TypeLabel":
        base, _, depth = s.rpartition("*")
        if not base or not depth.isdigit():
            raise CTypeError(f"malformed label text {s!r}")
        return cls(base, int(depth))

    def c_name(self) -> str:
        names = {"struct_": "struct", "union_": "union", "enum_": "enum",
                 "schar": "signed char", "uchar": "unsigned char",
                 "ushort": "unsigned short", "uint": "unsigned int", "ulong": "unsigned long",
                 "longlong": "long long", "ulonglong": "unsigned long long",
                 "longdouble": "long double"}
        return names.get(self.base, self.base) + (" " + "*" * self.ptr_depth if self.ptr_depth else "")


FORBIDDEN = frozenset({TypeLabel("void", 0)})

# class index table: bases in declaration order, depths 0..2, forbidden pairs skipped
_CLASS_TABLE: tuple[TypeLabel, ...] = tuple(
    TypeLabel(b, d) for b in BASES for d in range(MAX_PTR_DEPTH + 1)
    if TypeLabel(b, d) not in FORBIDDEN
)
_CLASS_INDEX = {lab: i for i, lab in enumerate(_CLASS_TABLE)}
NUM_CLASSES = len(_CLASS_TABLE)


def canonicalize_label(label: TypeLabel) -> int:
    if label in FORBIDDEN:
        raise CTypeError(f"{label.text} is not a valid variable label")
    return _CLASS_INDEX[label]


def label_of(index: int) -> TypeLabel:
    return _CLASS_TABLE[index]


def class_table() -> list[str]:
    return [lab.text for lab in _CLASS_TABLE]


def collapse_label(label: TypeLabel, *, enum_to_int=False, union_to_struct=False) -> TypeLabel:
    base = label.base
    if enum_to_int and base == "enum_":
        base = "int"
    if union_to_struct and base == "union_":
        base = "struct_"
    return TypeLabel(base, label.ptr_depth)


# -- C declaration parsing ------------------------------------------------------

_TOKEN_RE = re.compile(r"[A-Za-z_][A-Za-z_0-9]*|\*|\[[^\]]*\]|\(|\)|,|\.\.\.|\S")

_INT_WORDS = frozenset({"signed", "unsigned", "short", "long", "int", "char"})
_KEYWORDS = _INT_WORDS | {"void", "float", "double", "_Bool", "bool", "struct", "union", "enum"}


def _primitive(words: list[str]) -> str | None:
    """Map a multiset of primitive specifier words to a base kind."""
    ws = sorted(words)
    if ws in (["_Bool"], ["bool"]):
        return "bool"
    if ws == ["void"]:
        return "void"
    if ws == ["float"]:
        return "float"
    if ws == ["double"]:
        return "double"
    if ws == ["double", "long"]:
        return "longdouble"
    if not ws or not set(ws) <= _INT_WORDS:
        return None
    unsigned = "unsigned" in ws
    signed = "signed" in ws
    if unsigned and signed:
        return None
    rest = [w for w in ws if w not in ("signed", "unsigned")]
    longs = rest.count("long")
    if "char" in rest:
        if rest != ["char"]:
            return None
        return "uchar" if unsigned else "schar" if signed else "char"
    if "short" in rest:
        if [w for w in rest if w != "int"] != ["short"] or rest.count("int") > 1:
            return None
        return "ushort" if unsigned else "short"
    if rest.count("int") > 1 or longs > 2 or len(rest) - rest.count("int") != longs:
        return None
    if longs == 2:
        return "ulonglong" if unsigned else "longlong"
    if longs == 1:
        return "ulong" if unsigned else "long"
    return "uint" if unsigned else "int"


@dataclass
class _Resolution:
    base: str
    depth: int
    unknown: list[str] = field(default_factory=list)


def _strip_parens_declarator(tokens: list[str]) -> tuple[list[str], int, bool]:
    """Split ``spec ( * ) ( args )`` style function/pointer declarators.

    Returns (specifier tokens, extra pointer depth, is_function).
    """
    if "(" not in tokens:
        return tokens, 0, False
    i = tokens.index("(")
    spec = tokens[:i]
    rest = tokens[i:]
    # function type: spec ( args )
    depth = 0
    close = None
    for k, t in enumerate(rest):
        if t == "(":
            depth += 1
        elif t == ")":
            depth -= 1
            if depth == 0:
                close = k
                break
    if close is None:
        raise CTypeError("unbalanced parentheses")
    inner = rest[1:close]
    after = rest[close + 1:]
    if after and after[0] == "(":
        # (*name)(args) -> pointer(s) to function
        stars = sum(1 for t in inner if t == "*")
        if any(t not in ("*",) and not re.fullmatch(r"[A-Za-z_]\w*", t) for t in inner):
            raise CTypeError("unsupported declarator")
        return spec, stars, True
    # plain parameter list: int (int, char)
    return spec, 0, True


def _resolve(text: str, aliases: Mapping[str, str], stack: tuple[str, ...]) -> _Resolution:
    text = text.strip()
    if not text:
        raise CTypeError("empty type")
    tokens = _TOKEN_RE.findall(text)
    tokens = [t for t in tokens if t not in QUALIFIERS]
    if not tokens:
        raise CTypeError(f"no type specifier in {text!r}")
    spec, fn_stars, is_func = _strip_parens_declarator(tokens)
    stars = 0
    words: list[str] = []
    for t in spec:
        if t == "*":
            stars += 1
        elif t.startswith("["):
            stars += 1
        elif re.fullmatch(r"[A-Za-z_]\w*", t):
            if stars and t not in QUALIFIERS:
                # a declarator name after the stars, e.g. "char *name"
                continue
            words.append(t)
        else:
            raise CTypeError(f"unexpected token {t!r} in {text!r}")
    if not words:
        raise CTypeError(f"no type specifier in {text!r}")
    if is_func:
        return _Resolution("func", fn_stars)
    if words[0] in ("struct", "union", "enum"):
        if len(words) > 3:
            raise CTypeError(f"unparseable declarator {text!r}")
        return _Resolution(words[0] + "_", stars)
    base = _primitive(words)
    if base is None and len(words) >= 2 and words[-1] not in _KEYWORDS:
        # trailing declarator name: "unsigned int count"
        base = _primitive(words[:-1])
    if base is not None:
        return _Resolution(base, stars)
    if len(words) > 2 or words[0] in _KEYWORDS:
        raise CTypeError(f"unparseable declarator {text!r}")
    name = words[0]
    if name in aliases:
        if name in stack:
            raise CTypeError(f"typedef cycle: {' -> '.join(stack + (name,))}")
        inner = _resolve(aliases[name], aliases, stack + (name,))
        return _Resolution(inner.base, inner.depth + stars, inner.unknown)
    return _Resolution("struct_", stars, [name])


def resolve_c_type(s: str, aliases: Mapping[str, str] | None = None) -> tuple[TypeLabel, tuple[str, ...]]:
    """Like :func:`parse_c_type` but also returns identifiers that fell back to ``struct_``."""
    r = _resolve(s, aliases or {}, ())
    return TypeLabel(r.base, min(r.depth, MAX_PTR_DEPTH)), tuple(r.unknown)


def parse_c_type(s: str, aliases: Mapping[str, str] | None = None) -> TypeLabel:
    return resolve_c_type(s, aliases)[0]


def strip_qualifiers(s: str) -> str:
    return " ".join(t for t in _TOKEN_RE.findall(s) if t not in QUALIFIERS)


# -- ground truth sidecar ---------------------------------------------------------


class SidecarError(ValueError):
    pass


@dataclass(frozen=True)
class LocationExpr:
    kind: str
    reg: str = ""
    offset: int = 0
    addr: int = 0

    def __post_init__(self):
        if self.kind not in ("reg", "stack", "addr"):
            raise SidecarError(f"unknown location kind {self.kind!r}")

    @classmethod
    def from_json(cls, d: dict) -> "LocationExpr":
        if not isinstance(d, dict) or "kind" not in d:
            raise SidecarError(f"malformed location {d!r}")
        kind = d["kind"]
        try:
            if kind == "reg":
                return cls("reg", reg=d["reg"])
            if kind == "stack":
                return cls("stack", reg=d["base"], offset=int(d["offset"]))
            if kind == "addr":
                return cls("addr", addr=int(d["addr"]))
        except KeyError as exc:
            raise SidecarError(f"location {d!r} missing {exc.args[0]!r}") from None
        raise SidecarError(f"unknown location kind {kind!r}")

    def to_json(self) -> dict:
        if self.kind == "reg":
            return {"kind": "reg", "reg": self.reg}
        if self.kind == "stack":
            return {"kind": "stack", "base": self.reg, "offset": self.offset}
        return {"kind": "addr", "addr": self.addr}

    def __str__(self):
        if self.kind == "reg":
            return self.reg
        if self.kind == "stack":
            return f"{self.reg}{self.offset:+#x}"
        return f"{self.addr:#x}"


@dataclass(frozen=True)
class GroundTruthVar:
    function: str
    var_name: str
    loc: LocationExpr
    type_string: str
    resolved_label: TypeLabel | None = None
    flagged: bool = False
    note: str = ""


def parse_ground_truth_sidecar(doc: str | bytes, known_regs=None) -> tuple[list[GroundTruthVar], dict]:
    """Parse a sidecar document. Returns (records, alias table).

    Records whose types fall back to ``struct_`` or fail to parse are kept with
    ``flagged=True``.  ``known_regs`` (e.g. ``abi.registers``) checks stack bases.
    """
    try:
        d = json.loads(doc)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SidecarError(f"malformed sidecar: {exc}") from None
    if not isinstance(d, dict) or not isinstance(d.get("functions"), list):
        raise SidecarError("sidecar must be an object with a 'functions' list")
    aliases = d.get("aliases") or {}
    out = []
    for f in d["functions"]:
        try:
            fname = f["name"]
            vars_ = f.get("vars", [])
        except (KeyError, TypeError):
            raise SidecarError(f"malformed function entry {f!r}") from None
        for v in vars_:
            if not isinstance(v, dict) or "name" not in v or "loc" not in v:
                raise SidecarError(f"malformed variable entry {v!r}")
            loc = LocationExpr.from_json(v["loc"])
            if known_regs is not None and loc.kind == "stack" and loc.reg not in known_regs:
                raise SidecarError(f"stack base {loc.reg!r} is not an ABI register")
            tstr = v.get("type", "")
            if not isinstance(tstr, str) or not tstr.strip():
                raise SidecarError(f"variable {v['name']!r} has an empty type")
            try:
                label, unknown = resolve_c_type(tstr, aliases)
            except CTypeError as exc:
                out.append(GroundTruthVar(fname, v["name"], loc, tstr, None, True, str(exc)))
                continue
            note = f"unresolved identifiers: {', '.join(unknown)}" if unknown else ""
            out.append(GroundTruthVar(fname, v["name"], loc, tstr, label, bool(unknown), note))
    return out, aliases


def sidecar_to_json(module: str, records: list[GroundTruthVar], aliases=None) -> dict:
    funcs: dict[str, list] = {}
    for r in records:
        funcs.setdefault(r.function, []).append(
            {"name": r.var_name, "loc": r.loc.to_json(), "type": r.type_string})
    return {"module": module, "aliases": dict(aliases or {}),
            "functions": [{"name": k, "vars": v} for k, v in funcs.items()]}
