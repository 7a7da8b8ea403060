"""Training loop, evaluation metrics and prediction reports."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import ggnn
from .dataset import DatasetError, load_split, load_vocab
from .ggnn import Adam, GgnnConfig, NumericError
from .typelabels import label_of
from .vsg import EncodedGraph, Vocab, Vsg, encode_graph

UNTRACEABLE = -1


def encode_split(graphs: list[Vsg], vocab: Vocab) -> list[EncodedGraph | None]:
    """Encoded graphs; ``None`` marks an untraceable (empty) variable."""
    return [encode_graph(g, vocab) if g.nodes else None for g in graphs]


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def evaluate_graphs(params, cfg, encoded: list[EncodedGraph | None], batch_size: int = 64):
    """(predictions, probabilities of the prediction); untraceable rows get -1 and 0.0."""
    preds = np.full(len(encoded), UNTRACEABLE, dtype=np.int64)
    probs = np.zeros(len(encoded))
    idx = [i for i, g in enumerate(encoded) if g is not None]
    for chunk in _batches(len(idx), batch_size, None):
        sel = [idx[i] for i in chunk]
        fc = ggnn.forward_batch(params, cfg, ggnn.make_batch([encoded[i] for i in sel]))
        p = ggnn.softmax(fc.logits)
        arg = np.argmax(p, axis=1)
        preds[sel] = arg
        probs[sel] = p[np.arange(len(sel)), arg]
    return preds, probs


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    # a fresh stream per epoch keeps resumed runs on the same batch order
    return np.random.default_rng([seed, epoch])


def train(dataset_dir, out_dir, cfg: GgnnConfig | None = None, tc: TrainConfig | None = None,
          resume=None, log=None) -> dict:
    """Train on ``train.jsonl``, validate each epoch, keep ``best.ckpt`` and ``last.ckpt``."""
    tc = tc or TrainConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = load_vocab(dataset_dir)
    vhash = vocab.hash()
    train_set = [g for g in encode_split(load_split(dataset_dir, "train"), vocab) if g is not None]
    if not train_set:
        raise DatasetError("training split has no traceable variables")
    val_graphs = load_split(dataset_dir, "val")
    val_set = encode_split(val_graphs, vocab)
    val_labels = np.array([g.label for g in val_graphs], dtype=np.int64)

    if resume is not None:
        params, cfg, opt, header = ggnn.load_checkpoint(resume, vhash)
        history = header["extra"]["history"]
        start = header["extra"]["epoch"]
        best = header["extra"]["best_val"]
    else:
        cfg = cfg or GgnnConfig(seed=tc.seed)
        params = ggnn.init_params(cfg, len(vocab), len(vocab.edge_kinds), cfg.seed)
        opt = Adam(lr=tc.lr)
        history, start, best = [], 0, -1.0
        init_loss = _mean_loss(params, cfg, train_set, tc.batch_size)
        history.append({"epoch": 0, "train_loss": init_loss, "val_accuracy": None})
    timing = []
    for epoch in range(start + 1, tc.epochs + 1):
        t0 = time.perf_counter()
        losses, weights = [], []
        for chunk in _batches(len(train_set), tc.batch_size, _epoch_rng(tc.seed, epoch)):
            batch = ggnn.make_batch([train_set[i] for i in chunk])
            losses.append(ggnn.train_step(params, cfg, batch, opt))
            weights.append(len(chunk))
        train_loss = float(np.average(losses, weights=weights))
        val_acc = None
        if len(val_set):
            preds, _ = evaluate_graphs(params, cfg, val_set)
            val_acc = float(np.mean(preds == val_labels))
        history.append({"epoch": epoch, "train_loss": train_loss, "val_accuracy": val_acc})
        extra = {"epoch": epoch, "history": history, "best_val": best, "train": asdict(tc),
                 "vocab": vocab.to_json()}
        score = val_acc if val_acc is not None else -train_loss
        if score > best:
            best = score
            extra["best_val"] = best
            ggnn.save_checkpoint(out / "best.ckpt", params, cfg, vhash, opt, extra)
        ggnn.save_checkpoint(out / "last.ckpt", params, cfg, vhash, opt, extra)
        timing.append({"epoch": epoch, "seconds": time.perf_counter() - t0})
        if log:
            log(f"epoch {epoch}: train loss {train_loss:.4f}"
                + (f", val accuracy {val_acc:.4f}" if val_acc is not None else ""))
    metrics = {"history": history, "best_val": best, "config": asdict(cfg), "train": asdict(tc),
               "vocab_hash": vhash}
    (out / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=1) + "\n")
    with open(out / "timing.json", "a", encoding="utf-8") as fh:
        fh.write(json.dumps(timing) + "\n")
    return metrics


def _mean_loss(params, cfg, graphs, batch_size) -> float:
    total, n = 0.0, 0
    for chunk in _batches(len(graphs), batch_size, None):
        b = ggnn.make_batch([graphs[i] for i in chunk])
        fc = ggnn.forward_batch(params, cfg, b)
        total += ggnn.loss(fc.logits, b.labels) * len(chunk)
        n += len(chunk)
    if not math.isfinite(total):
        raise NumericError("non-finite loss")
    return total / n


# -- metrics ---------------------------------------------------------------------------


def classification_report(y_true, y_pred) -> dict:
    """Per-class and averaged metrics; ``y_pred == -1`` marks an untraceable (wrong) row."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if len(y_true) == 0:
        raise DatasetError("cannot evaluate an empty split")
    classes = sorted(set(y_true.tolist()) | set(y_pred[y_pred >= 0].tolist()))
    col = {c: i for i, c in enumerate(classes)}
    k = len(classes)
    # last column collects untraceable rows
    cm = np.zeros((k, k + 1), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[col[t], col[p] if p >= 0 else k] += 1
    per_class = {}
    for c in classes:
        i = col[c]
        tp = int(cm[i, i])
        predicted = int(cm[:, i].sum())
        support = int(cm[i].sum())
        prec = tp / predicted if predicted else 0.0
        rec = tp / support if support else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        per_class[label_of(c).text] = {"precision": prec, "recall": rec, "f1": f1,
                                        "support": support}
    tp = int(np.trace(cm[:, :k]))
    n = len(y_true)
    acc = tp / n
    micro_p = tp / int(cm.sum())  # untraceable rows count as (wrong) predictions
    micro_r = tp / int(cm.sum(axis=1).sum())
    micro_f = 2 * micro_p * micro_r / (micro_p + micro_r) if micro_p + micro_r else 0.0
    macro = {m: float(np.mean([v[m] for v in per_class.values()]))
             for m in ("precision", "recall", "f1")}
    return {
        "classes": [label_of(c).text for c in classes],
        "per_class": per_class,
        "macro": macro,
        "micro": {"precision": micro_p, "recall": micro_r, "f1": micro_f},
        "accuracy": acc,
        "confusion": cm.tolist(),
        "confusion_columns": [label_of(c).text for c in classes] + ["untraceable"],
        "n": n,
        "untraceable": int((y_pred < 0).sum()),
    }


def format_report(rep: dict) -> str:
    lines = [f"variables: {rep['n']}  untraceable: {rep['untraceable']}",
             f"accuracy (micro P = R = F1): {rep['accuracy']:.4f}",
             "macro precision {precision:.4f}  recall {recall:.4f}  f1 {f1:.4f}".format(**rep["macro"]),
             "", f"{'class':<14}{'prec':>8}{'recall':>8}{'f1':>8}{'support':>9}"]
    for c, v in rep["per_class"].items():
        lines.append(f"{c:<14}{v['precision']:>8.4f}{v['recall']:>8.4f}{v['f1']:>8.4f}{v['support']:>9d}")
    lines.append("")
    lines.append("confusion (rows true, columns predicted):")
    cols = rep["confusion_columns"]
    lines.append(" " * 14 + "".join(f"{c[:11]:>12}" for c in cols))
    for c, row in zip(rep["classes"], rep["confusion"]):
        lines.append(f"{c:<14}" + "".join(f"{x:>12d}" for x in row))
    return "\n".join(lines) + "\n"


def evaluate(checkpoint, dataset_dir, split: str = "test") -> dict:
    vocab = load_vocab(dataset_dir)
    params, cfg, _, header = ggnn.load_checkpoint(checkpoint, vocab.hash())
    graphs = load_split(dataset_dir, split)
    if not graphs:
        raise DatasetError(f"split {split!r} is empty")
    preds, _ = evaluate_graphs(params, cfg, encode_split(graphs, vocab))
    rep = classification_report([g.label for g in graphs], preds)
    rep["split"] = split
    rep["checkpoint_epoch"] = header["extra"].get("epoch")
    return rep
