"""Acceptance criteria; each test records one PASS/FAIL line in the terminal summary."""

import json
import math
import random
import time
from collections import Counter

import numpy as np
import pytest

from bytetr import cli
from bytetr.dataflow import build_def_use, insert_dummy_defs, reaching_definitions
from bytetr.dataset import build_dataset, load_split, load_vocab
from bytetr.ggnn import (GgnnConfig, forward, forward_batch, init_params, loss, loss_and_grads,
                         make_batch)
from bytetr.interproc import ModuleAnalysis, build_vpg
from bytetr.ir import SYSV_X64, BasicBlock, Call, External, FunctionIR, load_module
from bytetr.predict import parse_var_list, predict_module
from bytetr.stats import fit_heaps, fit_zipf, heaps_stream, zipf_sample
from bytetr.synthetic import ALIASES, GenSpec, generate, write_corpus
from bytetr.training import TrainConfig, evaluate, train
from bytetr.typelabels import NUM_CLASSES, parse_ground_truth_sidecar, sidecar_to_json
from bytetr.vsg import CONST_WHITELIST, SPECIALS, vpg_to_vsg

from conftest import FIXTURES, grad_rel_errors, random_function, random_graph
from oracles import as_triple, chain_closure, direct_def_use, reaching_sets


def _sidecar_vars(mod, recs):
    parsed, _ = parse_ground_truth_sidecar(json.dumps(sidecar_to_json(mod.name, recs, ALIASES)))
    return parsed


# 1 ---------------------------------------------------------------------------------------


def test_c1_dataflow_oracle_equivalence(criterion):
    t0 = time.perf_counter()
    rd_bad = du_bad = 0
    for seed in range(200):
        f = random_function(random.Random(seed), max_blocks=8, max_instrs=30, call_prob=0.1)
        rd = reaching_definitions(f, SYSV_X64)
        for (b, k), want in reaching_sets(f, SYSV_X64).items():
            got = {as_triple(d) for defs in rd.states[b][k].values() for d in defs}
            rd_bad += got != want
    for seed in range(200):
        f = random_function(random.Random(10_000 + seed), max_blocks=8, max_instrs=30, acyclic=True)
        du = build_def_use(f, reaching_definitions(f, SYSV_X64))
        want = direct_def_use(f, SYSV_X64)
        got = {(as_triple(d), (u.block, u.index, u.path)) for d, us in du.direct.items() for u in us}
        du_bad += got != want
        for d in du.all_defs():
            chain = {(as_triple(a), (u.block, u.index, u.path)) for a, u in du.chain(d).edges}
            du_bad += chain != chain_closure(f, SYSV_X64, as_triple(d), want)
    dt = time.perf_counter() - t0
    ok = rd_bad == 0 and du_bad == 0 and dt < 60
    criterion("1 data-flow oracle equivalence", ok,
              f"reaching mismatches={rd_bad} def-use mismatches={du_bad} time={dt:.1f}s")
    assert ok


# 2 ---------------------------------------------------------------------------------------


def _inject_call(f, rng, site):
    blocks = list(f.blocks)
    bi = rng.randrange(len(blocks))
    b = blocks[bi]
    pos = rng.randint(0, len(b.instrs))
    instrs = b.instrs[:pos] + (Call(External("ext_call"), site),) + b.instrs[pos:]
    blocks[bi] = BasicBlock(b.label, instrs, b.succs)
    return FunctionIR(f.name, f.entry, tuple(blocks), f.address, f.dummy_params), b.label, pos


def test_c2_call_semantics(criterion):
    abi = SYSV_X64
    bad = 0
    for seed in range(100):
        rng = random.Random(500 + seed)
        f, label, pos = _inject_call(random_function(rng, call_prob=0.0), rng, "inj")
        f = insert_dummy_defs(f, abi)
        rd = reaching_definitions(f, abi)
        before, after = rd.before(label, pos), rd.after(label, pos)
        expect = {k: v for k, v in before.items() if k not in abi.caller_saved}
        got = {k: v for k, v in after.items() if k != abi.ret_reg}
        (ret,) = after[abi.ret_reg]
        bad += got != expect
        bad += (ret.block, ret.index) != (label, pos)
        bad += any(after.get(r) != before.get(r) for r in abi.callee_saved)
        bad += any(r in after for r in abi.caller_saved if r != abi.ret_reg)
    criterion("2 call semantics", bad == 0, f"violations={bad} over 100 functions")
    assert bad == 0


# 3 ---------------------------------------------------------------------------------------


def test_c3_gradient_check(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = Counter()
    modes = [(a, e) for a in ("sum", "mean", "max") for e in ("scalar", "vector")]
    n_graphs = 0
    for i in range(24):
        agg, ew = modes[i % len(modes)]
        D = int(rng.integers(4, 17))
        cfg = GgnnConfig(d_in=int(rng.integers(2, D + 1)), hidden=D, steps=int(rng.integers(1, 4)),
                         aggregation=agg, mlp_hidden=8, num_classes=6, edge_weight=ew, seed=i)
        graph = random_graph(rng, int(rng.integers(2, 13)), 12, 10, int(rng.integers(0, 6)),
                             edge_factor=2.5)
        n_graphs += 1
        params = {k: v + rng.normal(0, 0.1, v.shape) for k, v in init_params(cfg, 12).items()}
        for k, e in grad_rel_errors(params, cfg, make_batch([graph]), rng, per_param=40).items():
            worst[k] = max(worst[k], e)
    dt = time.perf_counter() - t0
    top = max(worst.values())
    ok = top <= 1e-4 and n_graphs >= 20 and dt < 120
    criterion("3 gradient check", ok, f"graphs={n_graphs} max rel-err={top:.2e} "
              f"(worst class {max(worst, key=worst.get)}) time={dt:.1f}s")
    assert ok


# 4 ---------------------------------------------------------------------------------------


def test_c4_permutation_invariance(criterion):
    from bytetr.vsg import EncodedGraph

    rng = np.random.default_rng(4)
    cfg = GgnnConfig(d_in=8, hidden=16, steps=3, mlp_hidden=16, aggregation="sum")
    params = init_params(cfg, 30)
    worst = 0.0
    for _ in range(100):
        g = random_graph(rng, int(rng.integers(2, 25)), 30, 10)
        perm = rng.permutation(g.num_nodes)
        inv = np.argsort(perm)
        h = EncodedGraph(g.tokens[perm], inv[g.src], inv[g.dst], g.kind, inv[g.roots])
        worst = max(worst, float(np.max(np.abs(forward(params, cfg, g)[0] - forward(params, cfg, h)[0]))))
    criterion("4 permutation invariance", worst <= 1e-10, f"max |dlogit|={worst:.1e} over 100 graphs")
    assert worst <= 1e-10


# 5 ---------------------------------------------------------------------------------------


def test_c5_loss_anchors(criterion):
    rng = np.random.default_rng(5)
    cfg = GgnnConfig()
    params = init_params(cfg, 200)
    graphs = [random_graph(rng, int(rng.integers(3, 30)), 200, 10, int(rng.integers(0, NUM_CLASSES)))
              for _ in range(64)]
    batch = make_batch(graphs)
    init_loss = loss(forward_batch(params, cfg, batch).logits, batch.labels)
    rel = abs(init_loss - math.log(NUM_CLASSES)) / math.log(NUM_CLASSES)
    # exactly uniform logits
    flat = {k: v.copy() for k, v in params.items()}
    flat["mlp_w2"][:] = 0.0
    exact = loss(forward_batch(flat, cfg, batch).logits, batch.labels)
    g = graphs[0]
    l1, g1, _ = loss_and_grads(params, cfg, make_batch([g]))
    l2, g2, _ = loss_and_grads(params, cfg, make_batch([g, g, g]))
    dup = max(abs(l1 - l2), max(float(np.max(np.abs(g1[k] - g2[k]))) for k in g1))
    ok = rel <= 0.05 and abs(exact - math.log(NUM_CLASSES)) <= 1e-12 and dup <= 1e-12
    criterion("5 analytic loss anchors", ok, f"init loss={init_loss:.4f} ln C={math.log(NUM_CLASSES):.4f} "
              f"rel={rel:.3f} duplication diff={dup:.1e}")
    assert ok


# 6 ---------------------------------------------------------------------------------------


@pytest.mark.slow
def test_c6_end_to_end_synthetic_learning(criterion, tmp_path):
    t0 = time.perf_counter()
    spec = GenSpec(n_variables=5000)
    write_corpus(tmp_path / "corpus", spec, seed=0)
    build_dataset(tmp_path / "corpus", tmp_path / "ds", (0.8, 0.1, 0.1), seed=0)
    epochs = 3
    train(tmp_path / "ds", tmp_path / "run", GgnnConfig(seed=0),
          TrainConfig(epochs=epochs, batch_size=32, lr=1e-3, seed=0))
    rep = evaluate(tmp_path / "run" / "best.ckpt", tmp_path / "ds", "test")
    dt = time.perf_counter() - t0
    ok = rep["accuracy"] >= 0.95 and epochs <= 20 and dt < 600
    criterion("6 end-to-end synthetic learning", ok,
              f"test accuracy={rep['accuracy']:.4f} n={rep['n']} epochs={epochs} time={dt:.0f}s")
    assert ok


# 7 ---------------------------------------------------------------------------------------

ABLATION = GenSpec(n_variables=3000, cross_function=0.6, deep_fraction=0.25)
SMALL = dict(d_in=32, hidden=64, steps=5, mlp_hidden=64)


@pytest.mark.slow
def test_c7_depth_ablation(criterion, tmp_path):
    # node sets grow with depth on every variable
    mono_bad = 0
    for _, mod, recs in generate(ABLATION, seed=7):
        an = ModuleAnalysis(mod)
        for v in _sidecar_vars(mod, recs):
            prev = set()
            for d in (1, 2, 3, 4):
                nodes = set(build_vpg(an, v, d).nodes)
                mono_bad += not prev <= nodes
                prev = nodes
    write_corpus(tmp_path / "corpus", ABLATION, seed=7)
    acc = {}
    for depth in (1, 2, 3):
        ds = tmp_path / f"ds{depth}"
        build_dataset(tmp_path / "corpus", ds, (0.8, 0.1, 0.1), seed=0, depth=depth)
        train(ds, tmp_path / f"run{depth}", GgnnConfig(seed=0, **SMALL),
              TrainConfig(epochs=4, batch_size=32, lr=1e-3, seed=0))
        acc[depth] = evaluate(tmp_path / f"run{depth}" / "best.ckpt", ds, "test")["accuracy"]
    gain = 100 * (acc[2] - acc[1])
    ok = gain >= 10 and acc[3] >= acc[2] - 0.01 and mono_bad == 0
    criterion("7 depth ablation", ok, f"acc d1={acc[1]:.3f} d2={acc[2]:.3f} d3={acc[3]:.3f} "
              f"gain={gain:.1f}pt monotonicity violations={mono_bad}")
    assert ok


# 8 ---------------------------------------------------------------------------------------


@pytest.mark.slow
def test_c8_posix_evidence(criterion, tmp_path):
    spec = GenSpec(n_variables=2000, posix_fraction=0.6, cross_function=0.2)
    write_corpus(tmp_path / "corpus", spec, seed=8)
    build_dataset(tmp_path / "corpus", tmp_path / "ds", (0.8, 0.1, 0.1), seed=0)
    assert any(t.endswith("*0") or t.endswith("*1") for t in load_vocab(tmp_path / "ds").tokens)
    train(tmp_path / "ds", tmp_path / "run", GgnnConfig(seed=0, **SMALL),
          TrainConfig(epochs=3, batch_size=32, lr=1e-3, seed=0))
    variables = parse_var_list((FIXTURES / "posix_read.vars.json").read_text())
    rep = predict_module(tmp_path / "run" / "best.ckpt", FIXTURES / "posix_read.ir", variables)
    (row,) = rep["variables"]
    ok = row["status"] == "ok" and row["label"] == "int*1"
    criterion("8 POSIX evidence", ok, f"predicted {row['label']} p={row['probability']}")
    assert ok


# 9 ---------------------------------------------------------------------------------------


def test_c9_statistics_fits(criterion):
    t0 = time.perf_counter()
    z = fit_zipf(zipf_sample(100_000, a=1.1, b=0.0, seed=9))
    h = fit_heaps(heaps_stream(100_000, k=1.41, beta=0.7, seed=9))
    dt = time.perf_counter() - t0
    ok = abs(z.params["a"] - 1.1) <= 0.05 and abs(h.params["beta"] - 0.7) <= 0.05 and dt < 10
    criterion("9 statistics fits", ok, f"zipf a={z.params['a']:.4f} heaps beta={h.params['beta']:.4f} "
              f"time={dt:.1f}s")
    assert ok


# 10 --------------------------------------------------------------------------------------


def _pre_normal_token(node) -> str:
    if node.kind == "int":
        return node.token if int(node.token) in CONST_WHITELIST else "<CONST>"
    if node.kind == "loc":
        return "<LOC>"
    return node.token


def test_c10_hygiene(criterion, tmp_path):
    root = tmp_path / "corpus"
    write_corpus(root, GenSpec(n_variables=300, n_projects=3, functions_per_module=25), seed=10)
    res = build_dataset(root, tmp_path / "ds", (0.6, 0.2, 0.2), seed=0)
    m = res.manifest
    # leakage: every sample's project sits in exactly the split it was written to
    leaks = 0
    for split in ("train", "val", "test"):
        for g in load_split(tmp_path / "ds", split):
            project = g.id.split(":")[0].rsplit("_m", 1)[0]
            leaks += m["projects"][project] != split
    kept = [f["hash"] for f in m["functions"] if f["duplicate_of"] is None]
    dup_hashes = len(kept) - len(set(kept))
    # vocabulary recount from raw graphs of the kept train functions
    train_fns = {(f["module"], f["function"]) for f in m["functions"]
                 if f["duplicate_of"] is None and f["split"] == "train"}
    counts, test_tokens = Counter(), set()
    for entry in m["inputs"]:
        mod = load_module(root / entry["module"])
        an = ModuleAnalysis(mod)
        recs, _ = parse_ground_truth_sidecar((root / entry["sidecar"]).read_text())
        split = m["projects"][entry["project"]]
        for v in recs:
            g = vpg_to_vsg(build_vpg(an, v, 2), an)
            toks = [_pre_normal_token(n) for n in g.nodes]
            if split == "train" and (entry["module"], v.function) in train_fns:
                counts.update(toks)
            elif split == "test":
                test_tokens.update(toks)
    expect = {t for t, c in counts.items() if c >= 2 or (t.lstrip("-").isdigit() and int(t) in CONST_WHITELIST)}
    vocab = set(load_vocab(tmp_path / "ds").tokens) - set(SPECIALS)
    test_only = (test_tokens - set(counts)) & vocab
    ok = leaks == 0 and dup_hashes == 0 and vocab == expect - set(SPECIALS) and not test_only
    criterion("10 hygiene", ok, f"projects={len(m['projects'])} leaks={leaks} duplicate hashes={dup_hashes} "
              f"vocab={len(vocab)} recount match={vocab == expect - set(SPECIALS)} test-only={len(test_only)}")
    assert ok


# 11 --------------------------------------------------------------------------------------


def _pipeline(root):
    argv = [
        ["gen-synthetic", "--variables", "400", "--projects", "4", "--seed", "11", "--out", str(root / "corpus")],
        ["dataset", str(root / "corpus"), "--split", "50/25/25", "--seed", "3", "--out", str(root / "ds")],
        ["train", str(root / "ds"), "--epochs", "2", "--d-in", "8", "--hidden", "16", "--steps", "3",
         "--mlp-hidden", "16", "--seed", "5", "--out", str(root / "run")],
        ["eval", str(root / "run" / "best.ckpt"), str(root / "ds"), "--split", "test", "--out", str(root / "run")],
    ]
    for a in argv:
        assert cli.main(a) == 0, a


def test_c11_determinism(criterion, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    _pipeline(a)
    _pipeline(b)
    capsys.readouterr()
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name != "timing.json")
    differ = [str(f) for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    needed = {"ds/train.jsonl", "ds/test.jsonl", "ds/vocab.json", "run/best.ckpt", "run/last.ckpt",
              "run/eval_test.json", "run/eval_test.txt"}
    ok = not differ and needed <= {str(f) for f in files}
    criterion("11 determinism", ok, f"compared {len(files)} files, differing={differ}")
    assert ok
