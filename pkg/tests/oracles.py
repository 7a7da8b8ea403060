"""Brute-force reference analyses used to cross-check the fixpoint implementations.

Everything here works on (block, index) coordinates and expression objects,
independent of the storage-key text used by the library.
"""

from bytetr.ir import Assign, Cond, External, Mem, Op, Reg

ENTRY_INDEX = -1


def _cell(e):
    if isinstance(e, Reg):
        return ("reg", e.name.split(".")[0])
    if isinstance(e, Mem):
        return ("mem", e)
    return None


def _sub(e, path):
    yield path, e
    if isinstance(e, Mem):
        yield from _sub(e.addr, path + (0,))
    elif isinstance(e, Op):
        for i, a in enumerate(e.args):
            yield from _sub(a, path + (i,))
    elif isinstance(e, Cond):
        for i, a in enumerate((e.cond, e.then, e.else_)):
            yield from _sub(a, path + (i,))


def defs_of(f, abi):
    """{(block, index): cell} for every definition, dummies at (entry, -1)."""
    out = {}
    for r in f.dummy_params:
        out[(f.entry, ENTRY_INDEX, r)] = ("reg", r)
    for b in f.blocks:
        for i, ins in enumerate(b.instrs):
            if isinstance(ins, Assign):
                out[(b.label, i, None)] = _cell(ins.dst)
            else:
                out[(b.label, i, None)] = ("reg", abi.ret_reg)
    return out


def kills(ins, cell, abi) -> bool:
    if isinstance(ins, Assign):
        return _cell(ins.dst) == cell
    return cell[0] == "reg" and (cell[1] in abi.caller_saved or cell[1] == abi.ret_reg)


def _simple_paths(succs, start, goal, avoid):
    """Every acyclic block path start -> ... -> goal whose interior avoids ``avoid``."""
    stack = [(start, (start,))]
    while stack:
        node, path = stack.pop()
        for s in succs[node]:
            if s == goal:
                yield path + (s,)
            elif s not in path and s not in avoid:
                stack.append((s, path + (s,)))


def reaches(f, abi, d, point, cell=None) -> bool:
    """Does definition ``d`` = (block, index, _) reach the point before instruction ``point``?"""
    blocks = f.block_map
    succs = {b.label: b.succs for b in f.blocks}
    bd, i, _ = d
    b, k = point
    if cell is None:
        cell = defs_of(f, abi)[d]

    def clean(label, lo, hi):
        return not any(kills(ins, cell, abi) for ins in blocks[label].instrs[lo:hi])

    if bd == b and i < k:
        return clean(b, i + 1, k)
    if not clean(bd, i + 1, len(blocks[bd].instrs)):
        return False
    if not clean(b, 0, k):
        return False
    for path in _simple_paths(succs, bd, b, {bd, b}):
        if all(clean(x, 0, len(blocks[x].instrs)) for x in path[1:-1]):
            return True
    return False


def reaching_sets(f, abi):
    """{(block, k): {(def block, def index, dummy reg or None)}} for every program point."""
    ds = defs_of(f, abi)
    out = {}
    for blk in f.blocks:
        for k in range(len(blk.instrs) + 1):
            out[(blk.label, k)] = {d for d, c in ds.items() if reaches(f, abi, d, (blk.label, k), c)}
    return out


def uses_of(f):
    """[(block, index, path, cell)] for every storage read."""
    out = []
    for blk in f.blocks:
        for i, ins in enumerate(blk.instrs):
            roots = []
            if isinstance(ins, Assign):
                roots.append(((0,), ins.src))
                if isinstance(ins.dst, Mem):
                    roots.append(((1, 0), ins.dst.addr))
            elif not isinstance(ins.target, External):
                roots.append(((0,), ins.target))
            for prefix, root in roots:
                for path, e in _sub(root, prefix):
                    c = _cell(e)
                    if c is not None:
                        out.append((blk.label, i, path, c))
    return out


def direct_def_use(f, abi):
    """{(def, use)} with def as in :func:`reaching_sets` and use = (block, index, path)."""
    rs = reaching_sets(f, abi)
    ds = defs_of(f, abi)
    pairs = set()
    for b, i, path, c in uses_of(f):
        for d in rs[(b, i)]:
            if ds[d] == c:
                pairs.add((d, (b, i, path)))
    return pairs


def chain_closure(f, abi, root, direct=None):
    """Def-use edges transitively reachable from ``root``, relaying only through assignment sources."""
    if direct is None:
        direct = direct_def_use(f, abi)
    by_def = {}
    for d, u in direct:
        by_def.setdefault(d, []).append(u)
    blocks = f.block_map
    seen, frontier, edges = {root}, [root], set()
    while frontier:
        d = frontier.pop()
        for u in by_def.get(d, ()):
            edges.add((d, u))
            b, i, path = u
            if isinstance(blocks[b].instrs[i], Assign) and path[0] == 0:
                nd = (b, i, None)
                if nd not in seen:
                    seen.add(nd)
                    frontier.append(nd)
    return edges


def as_triple(defsite):
    """Library DefSite -> oracle definition coordinate."""
    if defsite.dummy:
        return (defsite.block, ENTRY_INDEX, defsite.key.split(".")[0])
    return (defsite.block, defsite.index, None)
