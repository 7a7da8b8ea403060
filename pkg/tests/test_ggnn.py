import math

import numpy as np
import pytest

from bytetr import _core
from bytetr._core import _pykernels
from bytetr.ggnn import (MAGIC, Adam, CheckpointError, GgnnConfig, NumericError, forward,
                         forward_batch, init_params, load_checkpoint, loss, loss_and_grads,
                         make_batch, params_digest, predict, predict_batch, save_checkpoint,
                         train_step)
from bytetr.vsg import EncodedGraph

from conftest import max_grad_rel_error, random_graph

V, K, C = 10, 10, 5


def small_cfg(**kw):
    base = dict(d_in=4, hidden=6, steps=2, mlp_hidden=7, num_classes=C)
    base.update(kw)
    return GgnnConfig(**base)


def jitter(params, rng, scale=0.1):
    # move off the zero-bias / unit-edge initialization so every path carries gradient
    return {k: v + rng.normal(0, scale, v.shape) for k, v in params.items()}


@pytest.mark.parametrize("agg", ["sum", "mean", "max"])
@pytest.mark.parametrize("edge_weight", ["scalar", "vector"])
def test_gradients_match_finite_differences(agg, edge_weight):
    rng = np.random.default_rng(7)
    cfg = small_cfg(aggregation=agg, edge_weight=edge_weight)
    params = jitter(init_params(cfg, V), rng)
    graphs = [random_graph(rng, n, V, K, int(rng.integers(0, C))) for n in (3, 7, 1)]
    assert max_grad_rel_error(params, cfg, make_batch(graphs), rng, per_param=10 ** 6) <= 1e-4


def _permute(g, perm):
    inv = np.argsort(perm)
    return EncodedGraph(g.tokens[perm], inv[g.src], inv[g.dst], g.kind, inv[g.roots], g.label)


@pytest.mark.parametrize("agg", ["sum", "mean", "max"])
def test_permutation_invariance(agg):
    rng = np.random.default_rng(1)
    cfg = small_cfg(aggregation=agg)
    params = jitter(init_params(cfg, V), rng)
    for _ in range(10):
        g = random_graph(rng, int(rng.integers(2, 12)), V, K)
        perm = rng.permutation(g.num_nodes)
        a, _ = forward(params, cfg, g)
        b, _ = forward(params, cfg, _permute(g, perm))
        assert np.max(np.abs(a - b)) <= 1e-10


def test_uniform_logits_give_log_c():
    cfg = small_cfg()
    params = init_params(cfg, V)
    params["mlp_w2"][:] = 0.0
    g = random_graph(np.random.default_rng(0), 5, V, K, 2)
    logits, _ = forward(params, cfg, g)
    assert loss(logits, 2) == pytest.approx(math.log(C), abs=1e-12)


def test_duplicated_batch_has_identical_loss_and_gradients():
    rng = np.random.default_rng(3)
    cfg = small_cfg()
    params = jitter(init_params(cfg, V), rng)
    g = random_graph(rng, 6, V, K, 1)
    l1, g1, _ = loss_and_grads(params, cfg, make_batch([g]))
    l2, g2, _ = loss_and_grads(params, cfg, make_batch([g, g]))
    assert abs(l1 - l2) <= 1e-12
    for k in g1:
        assert np.max(np.abs(g1[k] - g2[k])) <= 1e-12


def test_batching_does_not_mix_graphs():
    rng = np.random.default_rng(4)
    for agg in ("sum", "mean", "max"):
        cfg = small_cfg(aggregation=agg)
        params = jitter(init_params(cfg, V), rng)
        gs = [random_graph(rng, int(rng.integers(1, 9)), V, K) for _ in range(5)]
        together = forward_batch(params, cfg, make_batch(gs)).logits
        for i, g in enumerate(gs):
            alone, _ = forward(params, cfg, g)
            assert np.max(np.abs(together[i] - alone)) <= 1e-12


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def test_single_gru_step_by_hand():
    cfg = GgnnConfig(d_in=1, hidden=2, steps=1, mlp_hidden=2, num_classes=2)
    p = init_params(cfg, 2, num_edge_kinds=1)
    p["embed"][:] = [[0.5], [-1.0]]
    p["theta"][:] = [[1.0, 2.0], [0.5, -1.0]]
    p["edge"][:] = [0.8]
    p["gru_z_w"][:] = [[0.1, 0.2, 0.3, 0.4], [-0.2, 0.1, 0.0, 0.5]]
    p["gru_z_b"][:] = [0.05, -0.05]
    p["gru_r_w"][:] = [[0.3, -0.1, 0.2, 0.2], [0.0, 0.4, -0.3, 0.1]]
    p["gru_r_b"][:] = [0.0, 0.1]
    p["gru_n_w"][:] = [[0.2, 0.2, -0.5, 0.3], [0.6, -0.4, 0.1, 0.0]]
    p["gru_n_b"][:] = [0.01, 0.02]
    g = EncodedGraph(np.array([0, 1]), np.array([0]), np.array([1]), np.array([0]), np.array([0]))
    _, h = forward(p, cfg, g)

    def step(hv, mv):
        a = mv + hv
        z = [_sig(sum(p["gru_z_w"][i][j] * a[j] for j in range(4)) + p["gru_z_b"][i]) for i in range(2)]
        r = [_sig(sum(p["gru_r_w"][i][j] * a[j] for j in range(4)) + p["gru_r_b"][i]) for i in range(2)]
        an = mv + [r[0] * hv[0], r[1] * hv[1]]
        n = [math.tanh(sum(p["gru_n_w"][i][j] * an[j] for j in range(4)) + p["gru_n_b"][i]) for i in range(2)]
        return [(1 - z[i]) * n[i] + z[i] * hv[i] for i in range(2)]

    h0, h1 = [0.5, 0.0], [-1.0, 0.0]
    msg = [0.8 * (1.0 * h0[0] + 2.0 * h0[1]), 0.8 * (0.5 * h0[0] - 1.0 * h0[1])]
    assert h[0] == pytest.approx(step(h0, [0.0, 0.0]), abs=1e-14)
    assert h[1] == pytest.approx(step(h1, msg), abs=1e-14)


def test_unused_rows_and_edge_kinds_get_zero_gradient():
    rng = np.random.default_rng(5)
    cfg = small_cfg()
    params = jitter(init_params(cfg, V), rng)
    gs = [EncodedGraph(rng.integers(0, 4, 6), rng.integers(0, 6, 9), rng.integers(0, 6, 9),
                       rng.integers(0, 3, 9), np.zeros(1, dtype=np.int64), 1) for _ in range(3)]
    _, grads, _ = loss_and_grads(params, cfg, make_batch(gs))
    assert not grads["embed"][4:].any()
    assert not grads["edge"][3:].any()
    assert grads["embed"][:4].any() and grads["edge"][:3].any()


def test_train_step_reduces_loss():
    rng = np.random.default_rng(6)
    cfg = small_cfg()
    params = init_params(cfg, V)
    batch = make_batch([random_graph(rng, 5, V, K, int(rng.integers(0, C))) for _ in range(8)])
    opt = Adam(lr=1e-4)
    first = train_step(params, cfg, batch, opt)
    for _ in range(20):
        train_step(params, cfg, batch, opt)
    after = loss(forward_batch(params, cfg, batch).logits, batch.labels)
    assert after < first
    assert opt.t == 21


def test_non_finite_state_raises():
    cfg = small_cfg()
    params = init_params(cfg, V)
    params["mlp_b2"][0] = np.nan
    batch = make_batch([random_graph(np.random.default_rng(0), 3, V, K, 0)])
    with pytest.raises(NumericError):
        train_step(params, cfg, batch, Adam())


def test_loss_rejects_bad_labels():
    with pytest.raises(ValueError):
        loss(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ValueError):
        loss(np.zeros((2, 3)), [0])


def test_batch_validation():
    with pytest.raises(ValueError):
        make_batch([])
    empty = EncodedGraph(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64),
                         np.zeros(0, np.int64), np.zeros(0, np.int64))
    with pytest.raises(ValueError):
        make_batch([empty])
    bad = EncodedGraph(np.array([0]), np.array([0]), np.array([3]), np.array([0]), np.array([0]))
    with pytest.raises(IndexError):
        make_batch([bad])
    with pytest.raises(IndexError):
        forward(init_params(small_cfg(), 2), small_cfg(), EncodedGraph(
            np.array([5]), np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64), np.array([0])))


def test_config_validation():
    with pytest.raises(ValueError):
        GgnnConfig(d_in=10, hidden=5)
    with pytest.raises(ValueError):
        GgnnConfig(aggregation="attention")
    with pytest.raises(ValueError):
        GgnnConfig(steps=0)


def test_initialization_is_seeded():
    cfg = small_cfg(seed=11)
    assert params_digest(init_params(cfg, V)) == params_digest(init_params(cfg, V))
    assert params_digest(init_params(cfg, V)) != params_digest(init_params(cfg, V, seed=12))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    cfg = small_cfg(edge_weight="vector", aggregation="mean")
    params = init_params(cfg, V)
    opt = Adam(lr=3e-4)
    batch = make_batch([random_graph(rng, 4, V, K, 1)])
    train_step(params, cfg, batch, opt)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, cfg, "abc", opt, extra={"epoch": 3})
    assert path.read_bytes()[:8] == MAGIC
    p2, cfg2, opt2, header = load_checkpoint(path, "abc")
    assert cfg2 == cfg and header["extra"] == {"epoch": 3}
    assert params_digest(p2) == params_digest(params)
    assert opt2.hyper() == opt.hyper()
    for k in opt.m:
        assert np.array_equal(opt.m[k], opt2.m[k]) and np.array_equal(opt.v[k], opt2.v[k])
    # identical bytes after a reload and resave
    again = tmp_path / "again.ckpt"
    save_checkpoint(again, p2, cfg2, "abc", opt2, extra={"epoch": 3})
    assert again.read_bytes() == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    cfg = small_cfg()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, init_params(cfg, V), cfg, "abc")
    with pytest.raises(CheckpointError):
        load_checkpoint(path, "different")
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(junk)
    _, _, opt, _ = load_checkpoint(path)
    assert opt is None


def test_predict_helpers_agree():
    rng = np.random.default_rng(9)
    cfg = small_cfg()
    params = jitter(init_params(cfg, V), rng)
    gs = [random_graph(rng, int(rng.integers(1, 6)), V, K) for _ in range(5)]
    preds, probs = predict_batch(params, cfg, gs, batch_size=2)
    for g, c, pr in zip(gs, preds, probs):
        c1, p1 = predict(params, cfg, g)
        assert c1 == c
        assert np.allclose(p1, pr, atol=1e-12) and p1.sum() == pytest.approx(1.0)
    empty_preds, empty_probs = predict_batch(params, cfg, [])
    assert empty_preds.shape == (0,) and empty_probs.shape == (0, C)


@pytest.mark.skipif(_core.BACKEND != "cython", reason="compiled kernels not built")
@pytest.mark.parametrize("width", [1, 8])
def test_compiled_kernels_match_numpy(width):
    from bytetr._core import _ckernels

    rng = np.random.default_rng(width)
    N, D, E = 30, 8, 200
    x = rng.normal(size=(N, D))
    src, dst = rng.integers(0, N, E), rng.integers(0, N, E)
    coef = np.ascontiguousarray(rng.normal(size=(E, width)))
    a, b = np.zeros((N, D)), np.zeros((N, D))
    _pykernels.scatter_rows(a, x, src, dst, coef)
    _ckernels.scatter_rows(b, x, src, dst, coef)
    assert np.array_equal(a, b)
    y = rng.normal(size=(N, D))
    oa, ob = np.empty((E, width)), np.empty((E, width))
    _pykernels.edge_products(x, y, src, dst, oa)
    _ckernels.edge_products(x, y, src, dst, ob)
    assert np.array_equal(oa, ob)


def test_backend_is_named():
    assert _core.BACKEND in ("cython", "python")
