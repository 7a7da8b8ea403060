"""Call-site resolution, argument windows, and depth-bounded variable propagation graphs."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .dataflow import (DUMMY_INDEX, DefSite, DefUse, ReachingDefs, actual_parameters,
                       build_def_use, cell_of, insert_dummy_defs, locate_variable_defs,
                       reaching_definitions)
from .ir import AbiSpec, Assign, Call, External, FunctionIR, Int, Loc, ModuleIR
from .typelabels import CTypeError, GroundTruthVar, TypeLabel, parse_c_type

INTERNAL, EXTERNAL, UNRESOLVED = "internal", "external", "unresolved"


@dataclass(frozen=True)
class CallSite:
    site_id: str
    caller: str
    block: str
    index: int
    kind: str
    callee: str = ""  # internal function name or external symbol
    # ordered (param register, caller definitions reaching the call); empty set = none
    window: tuple[tuple[str, frozenset], ...] = ()

    def slot_of(self, d: DefSite) -> list[int]:
        return [i for i, (_, defs) in enumerate(self.window) if d in defs]


def resolve_call_sites(m: ModuleIR) -> list[CallSite]:
    out = []
    for f in m.functions:
        for label, i, ins in f.instructions():
            if not isinstance(ins, Call):
                continue
            callee = m.resolve_target(ins.target)
            if callee is not None:
                out.append(CallSite(ins.site_id, f.name, label, i, INTERNAL, callee.name))
            elif isinstance(ins.target, External):
                out.append(CallSite(ins.site_id, f.name, label, i, EXTERNAL, ins.target.name))
            elif isinstance(ins.target, Loc):
                out.append(CallSite(ins.site_id, f.name, label, i, EXTERNAL, ins.target.label))
            else:
                tag = f"{ins.target.value:#x}" if isinstance(ins.target, Int) else ""
                out.append(CallSite(ins.site_id, f.name, label, i, UNRESOLVED, tag))
    return out


def recover_call_window(cs: CallSite, caller_rd: ReachingDefs, callee_actuals, abi: AbiSpec) -> CallSite:
    """Fill the argument window of a call site.

    ``callee_actuals`` is the prefix-completed parameter list of an internal
    callee (ignored for external calls).
    """
    state = caller_rd.before(cs.block, cs.index)
    if cs.kind == INTERNAL:
        regs = list(callee_actuals)
    elif cs.kind == EXTERNAL:
        defined = [i for i, r in enumerate(abi.param_regs) if state.get(r)]
        regs = list(abi.param_regs[:max(defined) + 1]) if defined else []
    else:
        regs = []
    window = tuple((r, frozenset(state.get(cell_of(r), ()))) for r in regs)
    return CallSite(cs.site_id, cs.caller, cs.block, cs.index, cs.kind, cs.callee, window)


# -- POSIX knowledge base --------------------------------------------------------


@dataclass(frozen=True)
class PosixEntry:
    params: tuple[TypeLabel | None, ...]
    ret: TypeLabel | None
    variadic: bool = False


class PosixKB:
    def __init__(self, entries: dict[str, PosixEntry]):
        self.entries = entries

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self):
        return len(self.entries)

    @classmethod
    def from_dict(cls, d: dict) -> "PosixKB":
        aliases = dict(d.get("_aliases", {}))
        entries = {}
        for name, spec in d.items():
            if name.startswith("_"):
                continue
            entries[name] = PosixEntry(tuple(_label_or_none(t, aliases) for t in spec["params"]),
                                       _label_or_none(spec.get("ret", "void"), aliases),
                                       bool(spec.get("variadic", False)))
        return cls(entries)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "PosixKB":
        if path is None:
            text = resources.files("bytetr").joinpath("data/posix_kb.json").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_dict(json.loads(text))

    def param_label(self, name: str, index: int) -> TypeLabel | None:
        e = self.entries.get(name)
        if e is None or not 0 <= index < len(e.params):
            return None
        return e.params[index]

    def ret_label(self, name: str) -> TypeLabel | None:
        e = self.entries.get(name)
        return e.ret if e else None


def _label_or_none(text: str, aliases) -> TypeLabel | None:
    try:
        lab = parse_c_type(text, aliases)
    except CTypeError:
        return None
    return None if lab == TypeLabel("void", 0) else lab


_DEFAULT_KB: PosixKB | None = None


def default_kb() -> PosixKB:
    global _DEFAULT_KB
    if _DEFAULT_KB is None:
        _DEFAULT_KB = PosixKB.load()
    return _DEFAULT_KB


def posix_param_label(name: str, index: int, kb: PosixKB | None = None) -> TypeLabel | None:
    return (kb or default_kb()).param_label(name, index)


# -- per-module analysis memo -----------------------------------------------------


@dataclass
class FunctionFacts:
    function: FunctionIR
    rd: ReachingDefs
    du: DefUse
    referenced_params: list[str]
    params: list[str]


class ModuleAnalysis:
    """Lazily computed per-function facts and call windows for one module.

    Safe for concurrent readers; each entry is computed under a lock once.
    """

    def __init__(self, module: ModuleIR, abi: AbiSpec | None = None):
        self.module = module
        self.abi = abi or module.abi
        self._facts: dict[str, FunctionFacts] = {}
        self._calls: dict[str, list[CallSite]] | None = None
        self._lock = threading.RLock()

    def facts(self, name: str) -> FunctionFacts:
        got = self._facts.get(name)
        if got is not None:
            return got
        with self._lock:
            if name not in self._facts:
                f = insert_dummy_defs(self.module.function(name), self.abi)
                rd = reaching_definitions(f, self.abi)
                du = build_def_use(f, rd)
                referenced, params = actual_parameters(f, du, self.abi)
                self._facts[name] = FunctionFacts(f, rd, du, referenced, params)
            return self._facts[name]

    def call_sites(self, caller: str) -> list[CallSite]:
        with self._lock:
            if self._calls is None:
                by_caller: dict[str, list[CallSite]] = {f.name: [] for f in self.module.functions}
                for cs in resolve_call_sites(self.module):
                    facts = self.facts(cs.caller)
                    actuals = self.facts(cs.callee).params if cs.kind == INTERNAL else ()
                    by_caller[cs.caller].append(recover_call_window(cs, facts.rd, actuals, self.abi))
                self._calls = by_caller
            return self._calls[caller]

    def call_at(self, caller: str, block: str, index: int) -> CallSite | None:
        for cs in self.call_sites(caller):
            if cs.block == block and cs.index == index:
                return cs
        return None


# -- variable propagation graph ---------------------------------------------------


@dataclass(frozen=True, order=True)
class VpgNode:
    function: str
    block: str
    index: int  # -1 for a dummy parameter definition
    param: str = ""  # register of a dummy parameter node

    def __str__(self):
        if self.index == DUMMY_INDEX:
            return f"{self.function}:param:{self.param}"
        return f"{self.function}:{self.block}:{self.index}"


@dataclass(frozen=True, order=True)
class VpgEdge:
    src: VpgNode
    dst: VpgNode
    kind: str  # def_use | arg_pass | ret_pass
    key: str = ""  # storage key read (def_use) or parameter register (arg_pass)
    path: tuple[int, ...] = ()  # operand path of the use (def_use)
    site: str = ""
    external: str = ""  # callee symbol for external arg_pass edges


@dataclass
class VPG:
    var: str
    function: str
    roots: list[VpgNode]
    nodes: list[VpgNode]
    edges: list[VpgEdge]
    layers: dict[VpgNode, int] = field(default_factory=dict)
    depth_limit: int = 2

    @property
    def empty(self) -> bool:
        return not self.nodes

    @property
    def depth(self) -> int:
        return max(self.layers.values(), default=0)

    @property
    def functions(self) -> list[str]:
        return sorted({n.function for n in self.nodes})

    def to_json(self) -> dict:
        return {
            "var": self.var, "function": self.function, "depth_limit": self.depth_limit,
            "roots": [str(r) for r in self.roots],
            "nodes": [[str(n), self.layers[n]] for n in self.nodes],
            "edges": [[str(e.src), str(e.dst), e.kind, e.key, list(e.path), e.site, e.external]
                      for e in self.edges],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))


def _node(d: DefSite) -> VpgNode:
    if d.dummy:
        return VpgNode(d.function, d.block, DUMMY_INDEX, d.cell)
    return VpgNode(d.function, d.block, d.index)


def build_vpg(analysis: ModuleAnalysis | ModuleIR, var: GroundTruthVar, depth_limit: int = 2) -> VPG:
    """Depth-bounded inter-procedural propagation graph rooted at a variable's definitions.

    ``depth_limit`` counts functions on the call path; 1 keeps the graph inside
    the defining function.  A function already on the current path is never
    re-entered.
    """
    if depth_limit < 1:
        raise ValueError("depth_limit must be >= 1")
    if isinstance(analysis, ModuleIR):
        analysis = ModuleAnalysis(analysis)
    abi = analysis.abi
    var_id = f"{var.function}/{var.var_name}"
    try:
        owner = analysis.facts(var.function)
    except KeyError:
        return VPG(var_id, var.function, [], [], [], {}, depth_limit)
    seeds = sorted(locate_variable_defs(owner.function, owner.rd, var))
    if not seeds:
        return VPG(var_id, var.function, [], [], [], {}, depth_limit)

    layers: dict[VpgNode, int] = {}
    edges: set[VpgEdge] = set()

    def add(n: VpgNode, layer: int):
        if n not in layers or layer < layers[n]:
            layers[n] = layer

    # state: (definition, stack of (caller fn, call site block, index))
    work = [(d, ()) for d in seeds]
    seen = set(work)
    while work:
        d, stack = work.pop()
        layer = len(stack) + 1
        facts = analysis.facts(d.function)
        f = facts.function
        dn = _node(d)
        add(dn, layer)
        nxt = []
        for u in facts.du.direct.get(d, ()):
            un = VpgNode(f.name, u.block, u.index)
            add(un, layer)
            edges.add(VpgEdge(dn, un, "def_use", u.key, u.path))
            ins = f.block(u.block).instrs[u.index]
            if isinstance(ins, Assign) and u.path[0] == 0:
                nxt.extend((nd, stack) for nd in facts.rd.defs_at[(u.block, u.index)])
        on_path = {fn for fn, _, _ in stack} | {f.name}
        for cs in analysis.call_sites(f.name):
            slots = cs.slot_of(d)
            if not slots:
                continue
            cn = VpgNode(f.name, cs.block, cs.index)
            for s in slots:
                reg = cs.window[s][0]
                ext = cs.callee if cs.kind == EXTERNAL else ""
                add(cn, layer)
                edges.add(VpgEdge(dn, cn, "arg_pass", reg, (), cs.site_id, ext))
                if cs.kind != INTERNAL or layer >= depth_limit or cs.callee in on_path:
                    continue
                callee = analysis.facts(cs.callee).function
                target = DefSite(callee.name, callee.entry, DUMMY_INDEX, f"{reg}.0", True)
                tn = _node(target)
                add(tn, layer + 1)
                edges.add(VpgEdge(cn, tn, "arg_pass", reg, (), cs.site_id))
                nxt.append((target, stack + ((f.name, cs.block, cs.index),)))
        # value returned to the call site we came from
        if stack and d.cell == abi.ret_reg and d in facts.rd.exit_state().get(abi.ret_reg, ()):
            caller, cblock, cindex = stack[-1]
            cn = VpgNode(caller, cblock, cindex)
            add(cn, layer - 1)
            cs = analysis.call_at(caller, cblock, cindex)
            edges.add(VpgEdge(dn, cn, "ret_pass", abi.ret_reg, (), cs.site_id if cs else ""))
            nxt.append((DefSite(caller, cblock, cindex, abi.ret_reg), stack[:-1]))
        for st in nxt:
            if st not in seen:
                seen.add(st)
                work.append(st)
    nodes = sorted(layers)
    return VPG(var_id, var.function, sorted({_node(d) for d in seeds}), nodes,
               sorted(edges), layers, depth_limit)
