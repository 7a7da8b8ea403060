"""Power-law statistics of type-label corpora: rank/frequency and vocabulary growth."""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

MIN_SAMPLES = 100


class DegenerateCorpusError(ValueError):
    pass


@dataclass
class FitResult:
    law: str  # "zipf" or "heaps"
    params: dict
    r2: float
    n: int
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def _linfit(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """Least squares y = c0 + c1 x; returns (c0, c1, R^2)."""
    A = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), float(coef[1]), r2


def _check(labels: Sequence) -> Counter:
    if len(labels) < MIN_SAMPLES:
        raise DegenerateCorpusError(f"need at least {MIN_SAMPLES} label instances, got {len(labels)}")
    counts = Counter(labels)
    if len(counts) < 2:
        raise DegenerateCorpusError("corpus has a single unique label")
    return counts


def fit_zipf(labels: Sequence, b_max: float = 10.0, b_step: float = 0.1,
             min_count: int = 10) -> FitResult:
    """Fit F(r) = C / (r + b)^a; ``b`` by grid search maximizing R^2 of the log-log fit.

    Ranks whose count is below ``min_count`` are left out of the regression.
    """
    counts = _check(labels)
    freqs = np.array(sorted(counts.values(), reverse=True), dtype=np.float64)
    ranks = np.arange(1, len(freqs) + 1, dtype=np.float64)
    keep = freqs >= min_count
    if keep.sum() < 2:
        raise DegenerateCorpusError("fewer than two ranks above the count threshold")
    logf = np.log(freqs[keep])
    best = None
    for b in np.round(np.arange(0.0, b_max + b_step / 2, b_step), 10):
        c0, c1, r2 = _linfit(np.log(ranks[keep] + b), logf)
        if best is None or r2 > best[3] + 1e-15:
            best = (float(b), -c1, float(np.exp(c0)), r2)
    b, a, c, r2 = best
    warn = [] if a > 0 else ["exponent a is not positive"]
    return FitResult("zipf", {"a": a, "b": b, "C": c}, r2, len(labels), warn)


def vocabulary_growth(stream: Sequence, points: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Distinct-item counts V(n) at geometrically spaced prefix lengths n."""
    n = len(stream)
    ns = np.unique(np.geomspace(1, n, points).round().astype(np.int64))
    seen = set()
    vs = np.empty(len(ns), dtype=np.int64)
    j = 0
    for i, item in enumerate(stream, 1):
        seen.add(item)
        if i == ns[j]:
            vs[j] = len(seen)
            j += 1
            if j == len(ns):
                break
    return ns, vs


def fit_heaps(stream: Sequence, points: int = 50) -> FitResult:
    """Fit V(n) = K n^beta over a prefix sweep of the stream."""
    _check(stream)
    ns, vs = vocabulary_growth(stream, points)
    c0, beta, r2 = _linfit(np.log(ns.astype(np.float64)), np.log(vs.astype(np.float64)))
    k = float(np.exp(c0))
    warn = []
    if not 0 < beta <= 1:
        warn.append("beta outside (0, 1]")
    return FitResult("heaps", {"K": k, "beta": beta}, r2, len(stream), warn)


# -- planted-law generators --------------------------------------------------------


def zipf_sample(n: int, a: float = 1.1, b: float = 0.0, vocab: int = 1000, seed: int = 0) -> list[str]:
    """``n`` draws from a finite rank distribution p(r) proportional to 1/(r+b)^a."""
    r = np.arange(1, vocab + 1, dtype=np.float64)
    p = 1.0 / (r + b) ** a
    p /= p.sum()
    rng = np.random.default_rng(seed)
    return [f"t{i}" for i in rng.choice(vocab, size=n, p=p)]


def heaps_stream(n: int, k: float = 1.41, beta: float = 0.7, seed: int = 0) -> list[str]:
    """Stream whose distinct-item count after i items is max(1, floor(k i^beta))."""
    rng = np.random.default_rng(seed)
    out = []
    distinct = 0
    for i in range(1, n + 1):
        target = max(1, int(np.floor(k * i ** beta)))
        if target > distinct:
            out.append(f"w{distinct}")
            distinct += 1
        else:
            out.append(f"w{int(rng.integers(distinct))}")
    return out


def format_fit(fit: FitResult) -> str:
    ps = ", ".join(f"{k}={v:.4f}" for k, v in fit.params.items())
    s = f"{fit.law}: {ps}  R^2={fit.r2:.4f}  n={fit.n}"
    if fit.warnings:
        s += "  [" + "; ".join(fit.warnings) + "]"
    return s
