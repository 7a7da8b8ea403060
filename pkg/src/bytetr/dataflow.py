"""Intra-procedural analyses: reaching definitions, variable localization, def-use chains.

Storage cells.  A register cell is the physical register (``RAX`` for any of
``RAX.1``, ``RAX.7``...): assigning any version overwrites the register and
kills every earlier definition of it.  A memory cell is the canonical text of
the address plus the access size; only an identical key kills it (no alias
analysis).  Definition sites still record the full versioned key.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

from .ir import (AbiSpec, Assign, Call, Cond, Expr, External, FunctionIR, Int, Loc, Mem, Op, Reg,
                 children, walk)
from .typelabels import GroundTruthVar

DUMMY_INDEX = -1


# -- storage keys ---------------------------------------------------------------


def _addr_text(e: Expr, nested: bool = False) -> str:
    if isinstance(e, Reg):
        return e.name if "." in e.name else f"{e.name}.0"
    if isinstance(e, Int):
        return f"-0x{-e.value:x}" if e.value < 0 else f"0x{e.value:x}"
    if isinstance(e, Mem):
        return f"@{e.size}[{_addr_text(e.addr)}]"
    if isinstance(e, Op):
        if len(e.args) == 2:
            s = f"{_addr_text(e.args[0], True)}{e.opname}{_addr_text(e.args[1], True)}"
            return f"({s})" if nested else s
        return f"{e.opname}({','.join(_addr_text(a) for a in e.args)})"
    if isinstance(e, Cond):
        return f"?({_addr_text(e.cond)},{_addr_text(e.then)},{_addr_text(e.else_)})"
    if isinstance(e, Loc):
        return f"&{e.label}"
    raise TypeError(e)


def storage_key(e: Expr) -> str | None:
    """Canonical key of the storage an expression denotes, None for non-storage."""
    if isinstance(e, Reg):
        return e.name if "." in e.name else f"{e.name}.0"
    if isinstance(e, Mem):
        return f"@{e.size}[{_addr_text(e.addr)}]"
    return None


def cell_of(key: str) -> str:
    """Kill granularity of a key: physical register for registers, the key itself for memory."""
    if key.startswith("@"):
        return key
    return key.split(".", 1)[0]


# -- sites ------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class DefSite:
    function: str
    block: str
    index: int
    key: str
    dummy: bool = False

    @property
    def cell(self) -> str:
        return cell_of(self.key)

    def __str__(self):
        tag = "dummy " if self.dummy else ""
        return f"{tag}{self.function}:{self.block}:{self.index}:{self.key}"


@dataclass(frozen=True, order=True)
class UseSite:
    function: str
    block: str
    index: int
    path: tuple[int, ...]  # (0, ...) into the src / call target, (1, ...) into a Mem dst
    key: str

    def __str__(self):
        return f"{self.function}:{self.block}:{self.index}:{'.'.join(map(str, self.path))}:{self.key}"


def insert_dummy_defs(f: FunctionIR, abi: AbiSpec) -> FunctionIR:
    """Attach a dummy entry definition for every ABI parameter register (idempotent)."""
    if f.dummy_params == abi.param_regs:
        return f
    return replace(f, dummy_params=tuple(abi.param_regs))


def dummy_defs(f: FunctionIR) -> list[DefSite]:
    return [DefSite(f.name, f.entry, DUMMY_INDEX, f"{r}.0", True) for r in f.dummy_params]


def instr_defs(f: FunctionIR, block: str, index: int, ins, abi: AbiSpec) -> list[DefSite]:
    if isinstance(ins, Assign):
        return [DefSite(f.name, block, index, storage_key(ins.dst))]
    # a call (re)defines the return register
    return [DefSite(f.name, block, index, abi.ret_reg)]


def instr_uses(f: FunctionIR, block: str, index: int, ins) -> list[UseSite]:
    """Every storage read by an instruction, with its operand path."""
    out = []
    if isinstance(ins, Assign):
        roots = [((0,), ins.src)]
        if isinstance(ins.dst, Mem):
            roots.append(((1, 0), ins.dst.addr))
    elif isinstance(ins.target, External):
        roots = []
    else:
        roots = [((0,), ins.target)]
    for prefix, root in roots:
        for path, e in walk(root, prefix):
            k = storage_key(e)
            if k is not None:
                out.append(UseSite(f.name, block, index, path, k))
    return out


# -- CFG order --------------------------------------------------------------------


def reverse_post_order(f: FunctionIR) -> list[str]:
    blocks = f.block_map
    seen: set[str] = set()
    post: list[str] = []
    stack = [(f.entry, iter(sorted(blocks[f.entry].succs)))]
    seen.add(f.entry)
    while stack:
        label, it = stack[-1]
        nxt = next(it, None)
        if nxt is None:
            post.append(label)
            stack.pop()
        elif nxt not in seen:
            seen.add(nxt)
            stack.append((nxt, iter(sorted(blocks[nxt].succs))))
    order = post[::-1]
    # unreachable blocks follow, lexicographically
    order.extend(sorted(set(blocks) - seen))
    return order


def predecessors(f: FunctionIR) -> dict[str, list[str]]:
    preds: dict[str, list[str]] = {b.label: [] for b in f.blocks}
    for b in f.blocks:
        for s in b.succs:
            preds[s].append(b.label)
    return preds


# -- reaching definitions ---------------------------------------------------------

State = Mapping[str, frozenset]  # cell -> set of DefSite


def transfer(state: dict, defs: list[DefSite], ins, abi: AbiSpec) -> dict:
    """Apply one instruction's kill/gen to a state (returns a new dict)."""
    out = dict(state)
    if isinstance(ins, Call):
        for reg in abi.caller_saved:
            out.pop(reg, None)
    for d in defs:
        out[d.cell] = frozenset((d,))
    return out


def _merge(states: Iterable[Mapping]) -> dict:
    acc: dict[str, set] = defaultdict(set)
    for s in states:
        for k, v in s.items():
            acc[k] |= v
    return {k: frozenset(v) for k, v in acc.items()}


@dataclass
class ReachingDefs:
    function: FunctionIR
    abi: AbiSpec
    block_in: dict[str, dict]
    # states[label][i] is the state before instruction i; [-1] is the block exit
    states: dict[str, list[dict]]
    defs_at: dict[tuple[str, int], list[DefSite]]
    iterations: int = 0

    def before(self, block: str, index: int) -> dict:
        return self.states[block][index]

    def after(self, block: str, index: int) -> dict:
        return self.states[block][index + 1]

    def reaching(self, block: str, index: int, key: str) -> frozenset:
        return self.states[block][index].get(cell_of(key), frozenset())

    def all_defs(self) -> list[DefSite]:
        out = [d for ds in self.defs_at.values() for d in ds]
        return sorted(out)

    def exit_state(self) -> dict:
        return _merge(self.states[b][-1] for b in self.function.exit_blocks())

    def dump(self) -> str:
        """Debug table ``point -> {cell: [defsites]}``."""
        lines = []
        for b in reverse_post_order(self.function):
            for i, st in enumerate(self.states[b]):
                cells = ", ".join(f"{k}: [{', '.join(str(d) for d in sorted(v))}]"
                                  for k, v in sorted(st.items()))
                lines.append(f"{b}:{i} -> {{{cells}}}")
        return "\n".join(lines)


def reaching_definitions(f: FunctionIR, abi: AbiSpec) -> ReachingDefs:
    """Iterative worklist fixpoint in reverse post-order."""
    blocks = f.block_map
    preds = predecessors(f)
    order = reverse_post_order(f)
    rank = {b: i for i, b in enumerate(order)}
    defs_at: dict[tuple[str, int], list[DefSite]] = {}
    entry_defs = dummy_defs(f)
    if entry_defs:
        defs_at[(f.entry, DUMMY_INDEX)] = entry_defs
    for label, i, ins in f.instructions():
        defs_at[(label, i)] = instr_defs(f, label, i, ins, abi)

    entry_state = {d.cell: frozenset((d,)) for d in entry_defs}
    out: dict[str, dict] = {b: {} for b in blocks}
    block_in: dict[str, dict] = {b: {} for b in blocks}
    states: dict[str, list[dict]] = {}
    work = set(order)
    iterations = 0
    while work:
        label = min(work, key=rank.__getitem__)
        work.discard(label)
        iterations += 1
        st = _merge([out[p] for p in preds[label]] + ([entry_state] if label == f.entry else []))
        block_in[label] = st
        seq = [st]
        for i, ins in enumerate(blocks[label].instrs):
            st = transfer(st, defs_at[(label, i)], ins, abi)
            seq.append(st)
        states[label] = seq
        if st != out[label]:
            out[label] = st
            work.update(blocks[label].succs)
    return ReachingDefs(f, abi, block_in, states, defs_at, iterations)


# -- variable localization ---------------------------------------------------------


def _frame_offset(addr: Expr) -> tuple[str, int] | None:
    """(base register, offset) of ``REG``, ``+(REG, off)`` or ``-(REG, off)``."""
    if isinstance(addr, Reg):
        return addr.base, 0
    if isinstance(addr, Op) and len(addr.args) == 2 and addr.opname in ("+", "-"):
        a, b = addr.args
        if isinstance(a, Int) and addr.opname == "+":
            a, b = b, a
        if isinstance(a, Reg) and isinstance(b, Int):
            return a.base, b.value if addr.opname == "+" else -b.value
    return None


def key_matches_location(key: str, expr: Expr | None, loc) -> bool:
    if loc.kind == "reg":
        return not key.startswith("@") and cell_of(key) == loc.reg
    if not isinstance(expr, Mem):
        return False
    if loc.kind == "stack":
        fo = _frame_offset(expr.addr)
        return fo == (loc.reg, loc.offset)
    return isinstance(expr.addr, Int) and expr.addr.value == loc.addr


def locate_variable_defs(f: FunctionIR, rd: ReachingDefs, v: GroundTruthVar) -> set[DefSite]:
    """All definition sites in ``f`` whose storage is the variable's location."""
    out = set()
    blocks = f.block_map
    for (label, i), defs in rd.defs_at.items():
        for d in defs:
            if i == DUMMY_INDEX or not isinstance(blocks[label].instrs[i], Assign):
                expr = None
            else:
                expr = blocks[label].instrs[i].dst
            if key_matches_location(d.key, expr, v.loc):
                out.add(d)
    return out


# -- def-use ---------------------------------------------------------------------


@dataclass
class DefUseChain:
    root: DefSite
    edges: list[tuple[DefSite, UseSite]] = field(default_factory=list)

    @property
    def uses(self) -> list[UseSite]:
        return [u for _, u in self.edges]


@dataclass
class DefUse:
    """Direct def->use relation plus lazily closed chains."""
    function: FunctionIR
    direct: dict[DefSite, list[UseSite]]
    defs_at: dict[tuple[str, int], list[DefSite]]

    def chain(self, root: DefSite) -> DefUseChain:
        edges = []
        seen = {root}
        frontier = [root]
        while frontier:
            d = frontier.pop(0)
            for u in self.direct.get(d, ()):
                edges.append((d, u))
                for nd in self.defs_at.get((u.block, u.index), ()):
                    ins = self.function.block(u.block).instrs[u.index]
                    # only assignments relay the value; a call's return def does not
                    if isinstance(ins, Assign) and u.path[0] == 0 and nd not in seen:
                        seen.add(nd)
                        frontier.append(nd)
        return DefUseChain(root, edges)

    def chains(self) -> dict[DefSite, DefUseChain]:
        return {d: self.chain(d) for d in sorted(self.all_defs())}

    def all_defs(self) -> list[DefSite]:
        return sorted(d for ds in self.defs_at.values() for d in ds)


def build_def_use(f: FunctionIR, rd: ReachingDefs) -> DefUse:
    direct: dict[DefSite, list[UseSite]] = {d: [] for d in rd.all_defs()}
    for label, i, ins in f.instructions():
        for u in instr_uses(f, label, i, ins):
            for d in rd.reaching(label, i, u.key):
                direct[d].append(u)
    for uses in direct.values():
        uses.sort()
    return DefUse(f, direct, rd.defs_at)


def actual_parameters(f: FunctionIR, du: DefUse, abi: AbiSpec) -> tuple[list[str], list[str]]:
    """(referenced parameter registers, prefix-completed parameter list)."""
    used = {d.cell for d in du.direct if d.dummy and du.direct[d]}
    referenced = [r for r in abi.param_regs if r in used]
    if not referenced:
        return [], []
    last = max(abi.param_regs.index(r) for r in referenced)
    return referenced, list(abi.param_regs[:last + 1])
