"""Gated graph neural network for graph-level type classification (numpy, float64).

Per propagation step every node receives

    m_i = sum over edges (j -> i, kind k) of  e_k * (theta @ h_j)

and is updated with a GRU cell, h_i <- GRU(m_i, h_i).  Initial states are the
token embeddings zero-padded to the hidden width.  Node states are pooled per
graph (sum, mean or max) and classified by a one-hidden-layer ReLU MLP.
Gradients are derived by hand; see ``tests/test_ggnn.py`` for the
finite-difference checks.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _core
from .typelabels import NUM_CLASSES
from .vsg import EDGE_KINDS, EncodedGraph


class NumericError(RuntimeError):
    """Non-finite loss or state during training."""


@dataclass
class GgnnConfig:
    d_in: int = 64
    hidden: int = 128
    steps: int = 5
    aggregation: str = "sum"
    mlp_hidden: int = 128
    num_classes: int = NUM_CLASSES
    edge_weight: str = "scalar"  # scalar | vector (per-kind diagonal scale)
    seed: int = 0

    def __post_init__(self):
        if self.d_in > self.hidden:
            raise ValueError("d_in must not exceed the hidden width")
        if self.steps < 1:
            raise ValueError("at least one propagation step is required")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.aggregation not in ("sum", "mean", "max"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.edge_weight not in ("scalar", "vector"):
            raise ValueError(f"unknown edge weight mode {self.edge_weight!r}")


PARAM_ORDER = ("embed", "theta", "edge", "gru_z_w", "gru_z_b", "gru_r_w", "gru_r_b",
               "gru_n_w", "gru_n_b", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")


def init_params(cfg: GgnnConfig, vocab_size: int, num_edge_kinds: int = len(EDGE_KINDS),
                seed: int | None = None) -> dict[str, np.ndarray]:
    """Glorot-uniform matrices, zero biases, edge scales at 1."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    D, H, C = cfg.hidden, cfg.mlp_hidden, cfg.num_classes

    def glorot(rows, cols):
        a = np.sqrt(6.0 / (rows + cols))
        return rng.uniform(-a, a, size=(rows, cols))

    p = {"embed": glorot(vocab_size, cfg.d_in), "theta": glorot(D, D)}
    p["edge"] = np.ones(num_edge_kinds) if cfg.edge_weight == "scalar" else np.ones((num_edge_kinds, D))
    for g in ("z", "r", "n"):
        p[f"gru_{g}_w"] = glorot(D, 2 * D)
        p[f"gru_{g}_b"] = np.zeros(D)
    p["mlp_w1"] = glorot(H, D)
    p["mlp_b1"] = np.zeros(H)
    p["mlp_w2"] = glorot(C, H)
    p["mlp_b2"] = np.zeros(C)
    return {k: p[k] for k in PARAM_ORDER}


# -- batching -----------------------------------------------------------------


@dataclass
class Batch:
    tokens: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    kind: np.ndarray
    seg: np.ndarray  # graph index of every node
    sizes: np.ndarray
    labels: np.ndarray | None

    @property
    def num_graphs(self) -> int:
        return len(self.sizes)


def make_batch(graphs: Sequence[EncodedGraph]) -> Batch:
    if not graphs:
        raise ValueError("empty batch")
    sizes = np.array([g.num_nodes for g in graphs], dtype=np.int64)
    if (sizes == 0).any():
        raise ValueError("graphs must have at least one node")
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    src = np.concatenate([g.src + o for g, o in zip(graphs, offsets)]).astype(np.int64)
    dst = np.concatenate([g.dst + o for g, o in zip(graphs, offsets)]).astype(np.int64)
    for g in graphs:
        n = g.num_nodes
        if len(g.src) and (g.src.min() < 0 or g.src.max() >= n or g.dst.min() < 0 or g.dst.max() >= n):
            raise IndexError(f"edge endpoint out of range in graph {g.id!r}")
    labels = None
    if all(g.label is not None for g in graphs):
        labels = np.array([g.label for g in graphs], dtype=np.int64)
    return Batch(np.concatenate([g.tokens for g in graphs]).astype(np.int64), src, dst,
                 np.concatenate([g.kind for g in graphs]).astype(np.int64),
                 np.repeat(np.arange(len(graphs)), sizes), sizes, labels)


# -- forward / backward ---------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class _StepCache:
    h: np.ndarray
    th: np.ndarray
    m: np.ndarray
    a: np.ndarray
    z: np.ndarray
    r: np.ndarray
    an: np.ndarray
    n: np.ndarray


@dataclass
class ForwardCache:
    batch: Batch
    coef: np.ndarray
    steps: list[_StepCache]
    h: np.ndarray
    pooled: np.ndarray
    argmax: np.ndarray | None
    u: np.ndarray
    a1: np.ndarray
    logits: np.ndarray


def _edge_coef(params, cfg, kind) -> np.ndarray:
    e = params["edge"][kind]
    width = 1 if cfg.edge_weight == "scalar" else cfg.hidden
    return np.ascontiguousarray(e.reshape(len(kind), width))


def forward_batch(params: dict, cfg: GgnnConfig, batch: Batch) -> ForwardCache:
    emb = params["embed"]
    if batch.tokens.size and (batch.tokens.min() < 0 or batch.tokens.max() >= len(emb)):
        raise IndexError("token index out of range for the embedding table")
    if batch.kind.size and (batch.kind.min() < 0 or batch.kind.max() >= len(params["edge"])):
        raise IndexError("edge kind index out of range")
    N, D = len(batch.tokens), cfg.hidden
    h = np.zeros((N, D))
    h[:, :cfg.d_in] = emb[batch.tokens]
    coef = _edge_coef(params, cfg, batch.kind)
    theta = params["theta"]
    Wz, bz = params["gru_z_w"], params["gru_z_b"]
    Wr, br = params["gru_r_w"], params["gru_r_b"]
    Wn, bn = params["gru_n_w"], params["gru_n_b"]
    steps = []
    for _ in range(cfg.steps):
        th = np.ascontiguousarray(h @ theta.T)
        m = np.zeros((N, D))
        _core.scatter_rows(m, th, batch.src, batch.dst, coef)
        a = np.concatenate([m, h], axis=1)
        z = _sigmoid(a @ Wz.T + bz)
        r = _sigmoid(a @ Wr.T + br)
        an = np.concatenate([m, r * h], axis=1)
        n = np.tanh(an @ Wn.T + bn)
        h_new = (1.0 - z) * n + z * h
        steps.append(_StepCache(h, th, m, a, z, r, an, n))
        h = h_new
    B = batch.num_graphs
    argmax = None
    if cfg.aggregation == "max":
        pooled = np.empty((B, D))
        argmax = np.empty((B, D), dtype=np.int64)
        start = 0
        for g, size in enumerate(batch.sizes):
            block = h[start:start + size]
            idx = block.argmax(axis=0)
            argmax[g] = idx + start
            pooled[g] = block[idx, np.arange(D)]
            start += size
    else:
        pooled = np.zeros((B, D))
        np.add.at(pooled, batch.seg, h)
        if cfg.aggregation == "mean":
            pooled /= batch.sizes[:, None]
    u = pooled @ params["mlp_w1"].T + params["mlp_b1"]
    a1 = np.maximum(u, 0.0)
    logits = a1 @ params["mlp_w2"].T + params["mlp_b2"]
    return ForwardCache(batch, coef, steps, h, pooled, argmax, u, a1, logits)


def forward(params: dict, cfg: GgnnConfig, g: EncodedGraph) -> tuple[np.ndarray, np.ndarray]:
    """(logits [C], final node states [N, D]) for one graph."""
    fc = forward_batch(params, cfg, make_batch([g]))
    return fc.logits[0], fc.h


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def loss(logits: np.ndarray, labels) -> float:
    """Mean softmax cross-entropy; ``logits`` is [C] or [B, C]."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    C = logits.shape[1]
    if labels.shape[0] != logits.shape[0] or (labels < 0).any() or (labels >= C).any():
        raise ValueError(f"labels must be in [0, {C}) with one per row")
    return float(-log_softmax(logits)[np.arange(len(labels)), labels].mean())


def backward(params: dict, cfg: GgnnConfig, fc: ForwardCache,
             labels: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Exact gradients of the mean cross-entropy w.r.t. every parameter."""
    batch = fc.batch
    labels = batch.labels if labels is None else labels
    if labels is None:
        raise ValueError("batch has no labels")
    B = batch.num_graphs
    grads = {k: np.zeros_like(v) for k, v in params.items()}

    dlogits = softmax(fc.logits)
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B
    grads["mlp_w2"] = dlogits.T @ fc.a1
    grads["mlp_b2"] = dlogits.sum(axis=0)
    du = (dlogits @ params["mlp_w2"]) * (fc.u > 0)
    grads["mlp_w1"] = du.T @ fc.pooled
    grads["mlp_b1"] = du.sum(axis=0)
    dpooled = du @ params["mlp_w1"]

    N, D = fc.h.shape
    if cfg.aggregation == "max":
        dh = np.zeros((N, D))
        cols = np.broadcast_to(np.arange(D), fc.argmax.shape)
        np.add.at(dh, (fc.argmax.ravel(), cols.ravel()), dpooled.ravel())
    else:
        if cfg.aggregation == "mean":
            dpooled = dpooled / batch.sizes[:, None]
        dh = dpooled[batch.seg]

    theta = params["theta"]
    Wz, Wr, Wn = params["gru_z_w"], params["gru_r_w"], params["gru_n_w"]
    coef = fc.coef
    dcoef = np.zeros_like(coef)
    ecoef = np.empty_like(coef)
    for st in reversed(fc.steps):
        h = st.h
        dn = dh * (1.0 - st.z)
        dz = dh * (h - st.n)
        dh_prev = dh * st.z
        dpre_n = dn * (1.0 - st.n ** 2)
        grads["gru_n_w"] += dpre_n.T @ st.an
        grads["gru_n_b"] += dpre_n.sum(axis=0)
        dan = dpre_n @ Wn
        dm = dan[:, :D].copy()
        drh = dan[:, D:]
        dh_prev += drh * st.r
        dr = drh * h
        dpre_r = dr * st.r * (1.0 - st.r)
        dpre_z = dz * st.z * (1.0 - st.z)
        grads["gru_z_w"] += dpre_z.T @ st.a
        grads["gru_z_b"] += dpre_z.sum(axis=0)
        grads["gru_r_w"] += dpre_r.T @ st.a
        grads["gru_r_b"] += dpre_r.sum(axis=0)
        da = dpre_z @ Wz + dpre_r @ Wr
        dm += da[:, :D]
        dh_prev += da[:, D:]
        # messages: m[dst] += coef * th[src]
        dm = np.ascontiguousarray(dm)
        dth = np.zeros((N, D))
        _core.scatter_rows(dth, dm, batch.dst, batch.src, coef)
        _core.edge_products(dm, st.th, batch.dst, batch.src, ecoef)
        dcoef += ecoef
        grads["theta"] += dth.T @ h
        dh_prev += dth @ theta
        dh = dh_prev
    if cfg.edge_weight == "scalar":
        grads["edge"] = np.bincount(batch.kind, weights=dcoef[:, 0], minlength=len(params["edge"]))
    else:
        np.add.at(grads["edge"], batch.kind, dcoef)
    np.add.at(grads["embed"], batch.tokens, dh[:, :cfg.d_in])
    return grads


def loss_and_grads(params, cfg, batch: Batch) -> tuple[float, dict[str, np.ndarray], ForwardCache]:
    fc = forward_batch(params, cfg, batch)
    return loss(fc.logits, batch.labels), backward(params, cfg, fc), fc


def predict(params: dict, cfg: GgnnConfig, g: EncodedGraph) -> tuple[int, np.ndarray]:
    """(class index, probability vector); ties go to the lowest index."""
    logits, _ = forward(params, cfg, g)
    prob = softmax(logits)
    return int(np.argmax(prob)), prob


def predict_batch(params, cfg, graphs: Sequence[EncodedGraph], batch_size: int = 64):
    preds, probs = [], []
    for i in range(0, len(graphs), batch_size):
        fc = forward_batch(params, cfg, make_batch(graphs[i:i + batch_size]))
        p = softmax(fc.logits)
        probs.append(p)
        preds.append(p.argmax(axis=1))
    if not preds:
        return np.zeros(0, dtype=np.int64), np.zeros((0, cfg.num_classes))
    return np.concatenate(preds), np.concatenate(probs)


# -- optimizer -------------------------------------------------------------------


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k in PARAM_ORDER:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}


def train_step(params: dict, cfg: GgnnConfig, batch: Batch, opt: Adam) -> float:
    """One Adam step on a batch; returns the pre-update loss."""
    value, grads, _ = loss_and_grads(params, cfg, batch)
    if not np.isfinite(value) or not all(np.isfinite(g).all() for g in grads.values()):
        bad = [k for k, g in grads.items() if not np.isfinite(g).all()]
        raise NumericError(f"non-finite loss {value!r} (non-finite gradients: {bad})")
    opt.step(params, grads)
    return value


# -- checkpoint container -------------------------------------------------------
#
# layout: b"BYTRCKPT" | u32 version | u64 header length | JSON header | raw <f8 data
# The header lists every tensor (name, shape, byte offset) in a fixed order.

MAGIC = b"BYTRCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict, cfg: GgnnConfig, vocab_hash: str,
                    opt: Adam | None = None, extra: dict | None = None) -> None:
    tensors = [(f"param/{k}", params[k]) for k in PARAM_ORDER]
    if opt is not None:
        for k in PARAM_ORDER:
            if k in opt.m:
                tensors.append((f"adam_m/{k}", opt.m[k]))
                tensors.append((f"adam_v/{k}", opt.v[k]))
    index = []
    offset = 0
    for name, arr in tensors:
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {"version": CKPT_VERSION, "config": asdict(cfg), "vocab_hash": vocab_hash,
              "optimizer": opt.hyper() if opt is not None else None,
              "tensors": index, "extra": extra or {}}
    hb = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", CKPT_VERSION, len(hb)))
    buf.write(hb)
    for _, arr in tensors:
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, vocab_hash: str | None = None):
    """Returns (params, cfg, optimizer or None, header)."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(data[start:start + hlen])
    if vocab_hash is not None and header["vocab_hash"] != vocab_hash:
        raise CheckpointError("checkpoint was trained against a different vocabulary")
    body = data[start + hlen:]
    tensors = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=t["offset"])
        tensors[t["name"]] = arr.reshape(t["shape"]).astype(np.float64)
    cfg = GgnnConfig(**header["config"])
    params = {k: tensors[f"param/{k}"] for k in PARAM_ORDER}
    opt = None
    if header.get("optimizer"):
        h = header["optimizer"]
        opt = Adam(h["lr"], h["beta1"], h["beta2"], h["eps"], h["t"])
        for k in PARAM_ORDER:
            if f"adam_m/{k}" in tensors:
                opt.m[k] = tensors[f"adam_m/{k}"]
                opt.v[k] = tensors[f"adam_v/{k}"]
    return params, cfg, opt, header


def params_digest(params: dict) -> str:
    h = hashlib.sha256()
    for k in PARAM_ORDER:
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()
