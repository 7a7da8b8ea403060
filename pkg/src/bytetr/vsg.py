"""Variable semantic graphs: token-level graphs built from propagation graphs."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .dataflow import DUMMY_INDEX
from .interproc import VPG, ModuleAnalysis, PosixKB, VpgNode, default_kb
from .ir import Assign, Call, Cond, Expr, External, Int, Loc, Mem, Op, Reg, children
from .typelabels import label_of

PAD, UNK, CONST, LOC = "<PAD>", "<UNK>", "<CONST>", "<LOC>"
SPECIALS = (PAD, UNK, CONST, LOC)
CONST_WHITELIST = (-1, 0, 1, 2, 4, 8, 16, 32, 64, 128)
MAX_SLOT = 3  # ast_child slots >= 3 share one edge kind

EDGE_KINDS = tuple(f"ast_child:{i}" for i in range(MAX_SLOT + 1)) + (
    "assign", "def_use", "arg_pass_internal", "arg_pass_external", "ret_pass", "posix_type")
EDGE_INDEX = {k: i for i, k in enumerate(EDGE_KINDS)}


def ast_child(slot: int) -> str:
    return f"ast_child:{min(slot, MAX_SLOT)}"


@dataclass(frozen=True)
class VsgNode:
    token: str
    kind: str = "tok"  # op|int|reg|mem|cond|loc|assign|call|param|type|tok
    origin: tuple = ()  # (function, block, index, path)


@dataclass
class Vsg:
    nodes: list[VsgNode]
    edges: list[tuple[int, int, str]]
    roots: list[int]
    label: int | None = None
    id: str = ""
    # index of the VPG edge each VSG edge realizes (None for intra-instruction edges)
    provenance: list[int | None] = field(default_factory=list)

    @property
    def tokens(self) -> list[str]:
        return [n.token for n in self.nodes]

    def to_json(self) -> dict:
        d = {"id": self.id, "nodes": self.tokens,
             "edges": [[s, t, k] for s, t, k in self.edges], "roots": list(self.roots)}
        if self.label is not None:
            d["label"] = self.label
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, d: dict) -> "Vsg":
        return cls([VsgNode(t) for t in d["nodes"]], [tuple(e) for e in d["edges"]],
                   list(d.get("roots", [])), d.get("label"), d.get("id", ""))


# -- instruction fragments --------------------------------------------------------


@dataclass
class Fragment:
    nodes: list[VsgNode]
    edges: list[tuple[int, int, str]]
    at: dict[tuple[int, ...], int]  # instruction operand path -> node id
    lvar: int | None  # node receiving the defined value (assign dst or call relay)


def _token(e: Expr) -> tuple[str, str]:
    if isinstance(e, Reg):
        return e.base, "reg"
    if isinstance(e, Int):
        return str(e.value), "int"
    if isinstance(e, Mem):
        return f"@{e.size}", "mem"
    if isinstance(e, Op):
        return e.opname, "op"
    if isinstance(e, Cond):
        return "?:", "cond"
    return e.label, "loc"


def _add_tree(frag: Fragment, e: Expr, path: tuple[int, ...], origin: tuple) -> int:
    tok, kind = _token(e)
    nid = len(frag.nodes)
    frag.nodes.append(VsgNode(tok, kind, origin + (path,)))
    frag.at[path] = nid
    for slot, c in enumerate(children(e)):
        cid = _add_tree(frag, c, path + (slot,), origin)
        frag.edges.append((cid, nid, ast_child(slot)))
    return nid


def expr_to_subgraph(ins, origin: tuple = ()) -> Fragment:
    """Tokenize one instruction; edges point from operands toward the defined value."""
    frag = Fragment([], [], {}, None)
    if isinstance(ins, Assign):
        src = _add_tree(frag, ins.src, (0,), origin)
        a = len(frag.nodes)
        frag.nodes.append(VsgNode("assign", "assign", origin + ("assign",)))
        dst = _add_tree(frag, ins.dst, (1,), origin)
        frag.edges.append((src, a, "assign"))
        frag.edges.append((a, dst, "assign"))
        frag.lvar = dst
    elif isinstance(ins, Call):
        relay = 0
        frag.nodes.append(VsgNode("call", "call", origin + ((),)))
        frag.at[()] = relay
        if not isinstance(ins.target, External):
            t = _add_tree(frag, ins.target, (0,), origin)
            frag.edges.append((t, relay, ast_child(0)))
        frag.lvar = relay
    else:
        raise TypeError(f"not an instruction: {ins!r}")
    return frag


# -- VPG -> VSG ------------------------------------------------------------------


def vpg_to_vsg(vpg: VPG, analysis: ModuleAnalysis, kb: PosixKB | None = None,
               label: int | None = None) -> Vsg:
    kb = kb or default_kb()
    abi = analysis.abi
    nodes: list[VsgNode] = []
    edges: list[tuple[int, int, str]] = []
    prov: list[int | None] = []
    frags: dict[VpgNode, tuple[int, Fragment | None]] = {}

    for n in vpg.nodes:
        base = len(nodes)
        if n.index == DUMMY_INDEX:
            nodes.append(VsgNode(n.param, "param", (n.function, n.block, n.index, ())))
            frags[n] = (base, None)
            continue
        ins = analysis.module.function(n.function).block(n.block).instrs[n.index]
        frag = expr_to_subgraph(ins, (n.function, n.block, n.index))
        nodes.extend(frag.nodes)
        for s, t, k in frag.edges:
            edges.append((s + base, t + base, k))
            prov.append(None)
        frags[n] = (base, frag)

    def lvar(n: VpgNode) -> int:
        base, frag = frags[n]
        return base if frag is None else base + frag.lvar

    def leaf(n: VpgNode, path) -> int:
        base, frag = frags[n]
        return base + frag.at[path]

    type_nodes: dict[tuple, int] = {}

    def type_node(key: tuple, lab) -> int:
        if key not in type_nodes:
            type_nodes[key] = len(nodes)
            nodes.append(VsgNode(lab.text, "type", key))
        return type_nodes[key]

    ext_ret_done = set()
    for ei, e in enumerate(vpg.edges):
        if e.kind == "def_use":
            edges.append((lvar(e.src), leaf(e.dst, e.path), "def_use"))
            prov.append(ei)
            src_frag = frags[e.src][1]
            if src_frag is not None and src_frag.nodes[src_frag.lvar].kind == "call":
                cs = analysis.call_at(e.src.function, e.src.block, e.src.index)
                if cs is not None and cs.kind == "external" and e.src not in ext_ret_done:
                    ext_ret_done.add(e.src)
                    lab = kb.ret_label(cs.callee)
                    if lab is not None:
                        t = type_node((e.src.function, e.src.block, e.src.index, "ret"), lab)
                        edges.append((t, lvar(e.src), "posix_type"))
                        prov.append(ei)
        elif e.kind == "arg_pass":
            if e.dst.index != DUMMY_INDEX:
                # caller side: argument definition -> call relay
                kind = "arg_pass_external" if e.external else "arg_pass_internal"
                edges.append((lvar(e.src), lvar(e.dst), kind))
                prov.append(ei)
                if e.external:
                    slot = abi.param_regs.index(e.key) if e.key in abi.param_regs else -1
                    lab = kb.param_label(e.external, slot)
                    if lab is not None:
                        t = type_node((e.dst.function, e.dst.block, e.dst.index, slot), lab)
                        edges.append((t, lvar(e.src), "posix_type"))
                        prov.append(ei)
            else:
                # callee side: call relay -> callee parameter
                edges.append((lvar(e.src), lvar(e.dst), "arg_pass_internal"))
                prov.append(ei)
        elif e.kind == "ret_pass":
            edges.append((lvar(e.src), lvar(e.dst), "ret_pass"))
            prov.append(ei)
        else:
            raise ValueError(f"unknown VPG edge kind {e.kind!r}")
    roots = [lvar(r) for r in vpg.roots]
    return Vsg(nodes, edges, roots, label, vpg.var, prov)


# -- vocabulary and normalization -----------------------------------------------

_WHITELIST_TOKENS = frozenset(str(c) for c in CONST_WHITELIST)


def _pre_normal(n: VsgNode) -> str:
    if n.kind == "int" and n.token not in _WHITELIST_TOKENS:
        return CONST
    if n.kind == "loc":
        return LOC
    return n.token


@dataclass
class Vocab:
    tokens: list[str]
    min_freq: int = 2
    whitelist: tuple[int, ...] = CONST_WHITELIST
    edge_kinds: tuple[str, ...] = EDGE_KINDS
    freqs: dict[str, int] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate vocabulary tokens")
        missing = [s for s in SPECIALS if s not in self.index]
        if missing:
            raise ValueError(f"vocabulary lacks special tokens {missing}")
        self.edge_index = {k: i for i, k in enumerate(self.edge_kinds)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.index

    def to_json(self) -> dict:
        return {"tokens": self.tokens, "edge_kinds": list(self.edge_kinds),
                "min_freq": self.min_freq, "whitelist": list(self.whitelist)}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, d: dict) -> "Vocab":
        return cls(list(d["tokens"]), d.get("min_freq", 2), tuple(d.get("whitelist", CONST_WHITELIST)),
                   tuple(d.get("edge_kinds", EDGE_KINDS)))

    def hash(self) -> str:
        import hashlib
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


def build_vocab(corpus: Iterable[Vsg], min_freq: int = 2) -> Vocab:
    counts: Counter = Counter()
    n = 0
    for g in corpus:
        n += 1
        counts.update(_pre_normal(node) for node in g.nodes)
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    # whitelisted constants survive any frequency cut, but only if seen at all
    keep = {t for t, c in counts.items() if c >= min_freq or t in _WHITELIST_TOKENS}
    keep -= set(SPECIALS)
    ordered = sorted(keep, key=lambda t: (-counts.get(t, 0), t))
    return Vocab(list(SPECIALS) + ordered, min_freq, freqs=dict(counts))


def normalize_vsg(g: Vsg, vocab: Vocab) -> Vsg:
    nodes = []
    for n in g.nodes:
        tok = _pre_normal(n)
        if tok not in vocab.index:
            tok = UNK
        nodes.append(VsgNode(tok, n.kind, n.origin))
    return Vsg(nodes, list(g.edges), list(g.roots), g.label, g.id, list(g.provenance))


# -- encoding -------------------------------------------------------------------


@dataclass
class EncodedGraph:
    tokens: np.ndarray  # int64 [N]
    src: np.ndarray  # int64 [E]
    dst: np.ndarray
    kind: np.ndarray
    roots: np.ndarray
    label: int | None = None
    id: str = ""

    @property
    def num_nodes(self) -> int:
        return len(self.tokens)


def encode_graph(g: Vsg, vocab: Vocab) -> EncodedGraph:
    try:
        toks = [vocab.index[t] for t in g.tokens]
    except KeyError as exc:
        raise AssertionError(f"token {exc.args[0]!r} not in vocabulary; normalize first") from None
    e = np.asarray(g.edges, dtype=object).reshape(-1, 3)
    src = np.asarray(e[:, 0], dtype=np.int64)
    dst = np.asarray(e[:, 1], dtype=np.int64)
    kind = np.asarray([vocab.edge_index[k] for k in e[:, 2]], dtype=np.int64)
    return EncodedGraph(np.asarray(toks, dtype=np.int64), src, dst, kind,
                        np.asarray(g.roots, dtype=np.int64), g.label, g.id)


def decode_graph(eg: EncodedGraph, vocab: Vocab) -> Vsg:
    nodes = [VsgNode(vocab.tokens[i]) for i in eg.tokens]
    edges = [(int(s), int(t), vocab.edge_kinds[k]) for s, t, k in zip(eg.src, eg.dst, eg.kind)]
    return Vsg(nodes, edges, [int(r) for r in eg.roots], eg.label, eg.id)


# -- corpus files -----------------------------------------------------------------


def write_corpus(path, graphs: Iterable[Vsg]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for g in graphs:
            fh.write(g.dumps() + "\n")
            n += 1
    return n


def read_corpus(path) -> Iterator[Vsg]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield Vsg.from_json(json.loads(line))


def label_text(index: int) -> str:
    return label_of(index).text
