import random
from pathlib import Path

import pytest

from bytetr.ir import SYSV_X64, Assign, BasicBlock, Call, External, FunctionIR, Int, Mem, Op, Reg

FIXTURES = Path(__file__).parent / "fixtures"

_RESULTS: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(name, ok, detail)."""
    def record(name, ok, detail=""):
        _RESULTS.append((name, bool(ok), detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


# -- random CFGs for the data-flow oracles ------------------------------------------

REGS = ("RAX", "RBX", "RCX", "RDI", "RSI", "R12", "RDX")
SLOTS = (-8, -16, -24)


class _Versions:
    def __init__(self):
        self.v = {}

    def fresh(self, r):
        self.v[r] = self.v.get(r, 0) + 1
        return Reg(f"{r}.{self.v[r]}")

    def cur(self, r):
        return Reg(f"{r}.{self.v.get(r, 0)}")


def _rand_expr(rng, ver, depth=0):
    k = rng.random()
    if k < 0.35 or depth > 1:
        return ver.cur(rng.choice(REGS))
    if k < 0.5:
        return Int(rng.randrange(-4, 300), 64)
    if k < 0.7:
        return Mem(Op("+", (Reg("RBP.0"), Int(rng.choice(SLOTS), 64))), 64)
    return Op(rng.choice(["+", "*", "^"]), (_rand_expr(rng, ver, depth + 1), _rand_expr(rng, ver, depth + 1)))


def random_function(rng: random.Random, max_blocks=8, max_instrs=30, acyclic=False, call_prob=0.1,
                    name="f") -> FunctionIR:
    nb = rng.randint(1, max_blocks)
    labels = [f"b{i}" for i in range(nb)]
    budget = rng.randint(nb, max(nb, max_instrs))
    sizes = [1] * nb
    for _ in range(budget - nb):
        sizes[rng.randrange(nb)] += 1
    ver = _Versions()
    blocks = []
    site = 0
    for bi, label in enumerate(labels):
        instrs = []
        for _ in range(sizes[bi]):
            if rng.random() < call_prob:
                site += 1
                instrs.append(Call(External(rng.choice(["ext_a", "ext_b"])), f"s{site}"))
                for r in SYSV_X64.caller_saved:
                    ver.v[r] = ver.v.get(r, 0) + 1
                continue
            src = _rand_expr(rng, ver)
            if rng.random() < 0.3:
                dst = Mem(Op("+", (Reg("RBP.0"), Int(rng.choice(SLOTS), 64))), 64)
            else:
                dst = ver.fresh(rng.choice(REGS))
            instrs.append(Assign(dst, src))
        if acyclic:
            cands = labels[bi + 1:]
        else:
            cands = labels
        succs = sorted(set(rng.sample(cands, min(len(cands), rng.randint(0, 2)))))
        if bi + 1 < nb and not succs and rng.random() < 0.7:
            succs = [labels[bi + 1]]
        blocks.append(BasicBlock(label, tuple(instrs), tuple(succs)))
    return FunctionIR(name, "b0", tuple(blocks), None, SYSV_X64.param_regs)


@pytest.fixture
def fixtures_dir():
    return FIXTURES


# -- random encoded graphs and finite differences for the GGNN --------------------------


def random_graph(rng, n_nodes, vocab_size, num_kinds, label=None, edge_factor=2.0, gid=""):
    import numpy as np

    from bytetr.vsg import EncodedGraph

    n_edges = int(rng.integers(0, int(edge_factor * n_nodes) + 1))
    return EncodedGraph(rng.integers(0, vocab_size, n_nodes).astype(np.int64),
                        rng.integers(0, n_nodes, n_edges).astype(np.int64),
                        rng.integers(0, n_nodes, n_edges).astype(np.int64),
                        rng.integers(0, num_kinds, n_edges).astype(np.int64),
                        np.zeros(1, dtype=np.int64), label, gid)


def grad_rel_errors(params, cfg, batch, rng, per_param=12, eps=1e-6, floor=1e-5):
    """{parameter: largest relative error} between analytic and central-difference gradients.

    Checks ``per_param`` random entries of every tensor (all entries if smaller).
    The denominator is floored at ``floor`` so that entries whose true gradient is
    essentially zero are compared absolutely rather than against rounding noise.
    """
    import numpy as np

    from bytetr.ggnn import forward_batch, loss, loss_and_grads

    _, grads, _ = loss_and_grads(params, cfg, batch)
    out = {}
    for k, p in params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size) if flat.size <= per_param else rng.choice(flat.size, per_param, replace=False)
        worst = 0.0
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            lp = loss(forward_batch(params, cfg, batch).logits, batch.labels)
            flat[i] = old - eps
            lm = loss(forward_batch(params, cfg, batch).logits, batch.labels)
            flat[i] = old
            num = (lp - lm) / (2 * eps)
            ana = grads[k].reshape(-1)[i]
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), floor))
        out[k] = worst
    return out


def max_grad_rel_error(params, cfg, batch, rng, **kw):
    return max(grad_rel_errors(params, cfg, batch, rng, **kw).values())
