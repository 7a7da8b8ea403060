"""Dataset construction: helper filtering, dedup, project split, VSG extraction, vocabulary."""

from __future__ import annotations

import hashlib
import json
import re
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .interproc import ModuleAnalysis, PosixKB, build_vpg, default_kb
from .ir import SYSV_X64, AbiSpec, FunctionIR, ModuleIR, format_instr, load_module
from .typelabels import FORBIDDEN, canonicalize_label, label_of, parse_ground_truth_sidecar
from .vsg import Vocab, Vsg, build_vocab, normalize_vsg, read_corpus, vpg_to_vsg, write_corpus

SPLITS = ("train", "val", "test")

# compiler/runtime scaffolding that carries no user variables
HELPER_FUNCTIONS = frozenset({
    "_init", "_init_proc", ".init_proc", "_fini", "_term_proc", ".term_proc", "_start",
    "frame_dummy", "register_tm_clones", "deregister_tm_clones", "__do_global_dtors_aux",
    "__libc_csu_init", "__libc_csu_fini", "__x86.get_pc_thunk.bx", "_dl_relocate_static_pie",
})


class DatasetError(ValueError):
    pass


# -- dedup -------------------------------------------------------------------------

_VERSIONED = re.compile(r"\b([A-Za-z][A-Za-z0-9_]*)\.(\d+)\b")


def canonical_text(f: FunctionIR) -> str:
    """Function body with block labels and SSA versions renumbered by first appearance."""
    from .dataflow import reverse_post_order

    order = reverse_post_order(f)
    relabel = {b: f"b{i}" for i, b in enumerate(order)}
    versions: dict[str, dict[str, int]] = {}

    def renum(m):
        base, ver = m.group(1), m.group(2)
        table = versions.setdefault(base, {"0": 0})
        if ver not in table:
            table[ver] = len(table)
        return f"{base}.{table[ver]}"

    blocks = f.block_map
    lines = []
    for label in order:
        b = blocks[label]
        succ = " ".join(relabel[s] for s in b.succs)
        lines.append(f"{relabel[label]} -> {succ}")
        for ins in b.instrs:
            text = format_instr(ins)
            text = re.sub(r"#\S+", "#", text)  # call-site ids are bookkeeping
            lines.append("  " + _VERSIONED.sub(renum, text))
    return "\n".join(lines) + "\n"


def function_hash(f: FunctionIR) -> str:
    return hashlib.sha256(canonical_text(f).encode()).hexdigest()


# -- project split -------------------------------------------------------------------


def parse_split(text: str) -> tuple[float, float, float]:
    try:
        parts = [float(p) for p in text.split("/")]
    except ValueError:
        raise ValueError(f"bad split {text!r}; expected e.g. 80/10/10") from None
    if len(parts) != 3 or any(p < 0 for p in parts) or sum(parts) <= 0:
        raise ValueError(f"bad split {text!r}; expected three non-negative ratios")
    total = sum(parts)
    return tuple(p / total for p in parts)


def split_projects(projects, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> dict[str, str]:
    """Assign whole projects to splits; every split with a nonzero ratio gets at least one."""
    projects = sorted(set(projects))
    need = [r > 0 for r in ratios]
    if len(projects) < sum(need):
        raise DatasetError(f"{len(projects)} project(s) cannot fill {sum(need)} non-empty splits")
    n = len(projects)
    exact = [r * n for r in ratios]
    counts = [int(np.floor(x)) for x in exact]
    for i in sorted(range(3), key=lambda i: (-(exact[i] - counts[i]), i)):
        if sum(counts) >= n:
            break
        counts[i] += 1
    for i in range(3):
        if need[i] and counts[i] == 0:
            counts[i] = 1
            donor = max((j for j in range(3) if counts[j] > 1), key=lambda j: (counts[j], -j))
            counts[donor] -= 1
    rng = np.random.default_rng(seed)
    shuffled = [projects[i] for i in rng.permutation(n)]
    out, start = {}, 0
    for name, c in zip(SPLITS, counts):
        for p in shuffled[start:start + c]:
            out[p] = name
        start += c
    return out


# -- inputs ------------------------------------------------------------------------------


@dataclass(frozen=True)
class InputEntry:
    module: str
    sidecar: str
    project: str


def discover_inputs(root) -> list[InputEntry]:
    """Read ``corpus.json`` if present, else pair ``<project>/<name>.ir.*`` with ``<name>.vars.json``."""
    root = Path(root)
    index = root / "corpus.json"
    if index.is_file():
        d = json.loads(index.read_text())
        return [InputEntry(e["module"], e["sidecar"], e["project"]) for e in d["entries"]]
    out = []
    for p in sorted(root.glob("*/*.ir.*")):
        stem = p.name.split(".ir.")[0]
        sc = p.with_name(f"{stem}.vars.json")
        if sc.is_file():
            out.append(InputEntry(p.relative_to(root).as_posix(), sc.relative_to(root).as_posix(),
                                  p.parent.name))
    if not out:
        raise DatasetError(f"no modules with sidecars under {root}")
    return out


# -- per-module extraction -----------------------------------------------------------


@dataclass
class Sample:
    module: str
    function: str
    var: str
    project: str
    label: int | None
    graph: Vsg
    vpg_nodes: int
    vpg_functions: int


def _extract(args):
    root, entry, abi, kb, depth, helpers = args
    root = Path(root)
    kb = kb or default_kb()
    t0 = time.perf_counter()
    module = load_module(root / entry.module, abi)
    records, _ = parse_ground_truth_sidecar((root / entry.sidecar).read_text(),
                                            set(abi.registers))
    an = ModuleAnalysis(module, abi)
    hashes = {}
    for f in module.functions:
        if f.name not in helpers:
            hashes[f.name] = function_hash(f)
    samples, skipped = [], Counter()
    for v in sorted(records, key=lambda r: (r.function, r.var_name)):
        if v.function not in hashes:
            skipped["helper_or_missing_function"] += 1
            continue
        lab = v.resolved_label
        if lab is None:
            skipped["unresolvable_type"] += 1
            continue
        if lab in FORBIDDEN:
            skipped["forbidden_label"] += 1
            continue
        vpg = build_vpg(an, v, depth)
        g = vpg_to_vsg(vpg, an, kb, label=canonicalize_label(lab))
        g.id = f"{module.name}:{v.function}:{v.var_name}"
        samples.append(Sample(entry.module, v.function, v.var_name, entry.project, g.label, g,
                              len(vpg.nodes), len(vpg.functions)))
    elapsed = time.perf_counter() - t0
    return entry, hashes, samples, dict(skipped), elapsed, len(module.functions)


@dataclass
class BuildResult:
    out_dir: Path
    manifest: dict
    vocab: Vocab
    counts: dict = field(default_factory=dict)


def build_dataset(inputs, out_dir, ratios=(0.8, 0.1, 0.1), seed: int = 0, depth: int = 2,
                  min_freq: int = 2, abi: AbiSpec | None = None, kb: PosixKB | None = None,
                  helpers=HELPER_FUNCTIONS, workers: int = 1) -> BuildResult:
    """Run the full extraction pipeline and write manifest, vocabulary and split corpora."""
    root = Path(inputs)
    out = Path(out_dir)
    entries = sorted(discover_inputs(root), key=lambda e: (e.module, e.sidecar))
    assignment = split_projects([e.project for e in entries], ratios, seed)
    abi = abi or SYSV_X64
    jobs = [(str(root), e, abi, kb, depth, frozenset(helpers)) for e in entries]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_extract, jobs))  # map keeps input order
    else:
        results = [_extract(j) for j in jobs]

    seen_hash: dict[str, str] = {}
    functions = []
    per_split: dict[str, list[Vsg]] = {s: [] for s in SPLITS}
    skipped: Counter = Counter()
    timing = []
    for entry, hashes, samples, skip, elapsed, nfuncs in results:
        skipped.update(skip)
        timing.append({"module": entry.module, "seconds": elapsed, "functions": nfuncs})
        split = assignment[entry.project]
        kept = set()
        for fname in sorted(hashes):
            h = hashes[fname]
            dup_of = seen_hash.get(h)
            if dup_of is None:
                seen_hash[h] = f"{entry.module}:{fname}"
                kept.add(fname)
            functions.append({"module": entry.module, "function": fname, "hash": h,
                              "split": split, "duplicate_of": dup_of})
        for s in samples:
            if s.function in kept:
                per_split[split].append(s.graph)
            else:
                skipped["duplicate_function"] += 1
    if not per_split["train"]:
        raise DatasetError("training split is empty")
    vocab = build_vocab([g for g in per_split["train"] if g.nodes] or [Vsg([], [], [])], min_freq)

    out.mkdir(parents=True, exist_ok=True)
    (out / "vocab.json").write_text(vocab.dumps())
    hist = {}
    for s in SPLITS:
        graphs = [normalize_vsg(g, vocab) for g in per_split[s]]
        write_corpus(out / f"{s}.jsonl", graphs)
        c = Counter(label_of(g.label).text for g in graphs)
        hist[s] = dict(sorted(c.items()))
    manifest = {
        "inputs": [{"module": e.module, "sidecar": e.sidecar, "project": e.project} for e in entries],
        "projects": dict(sorted(assignment.items())),
        "functions": functions,
        "counts": {s: len(per_split[s]) for s in SPLITS},
        "untraceable": {s: sum(1 for g in per_split[s] if not g.nodes) for s in SPLITS},
        "label_histogram": hist,
        "skipped": dict(sorted(skipped.items())),
        "config": {"depth": depth, "min_freq": min_freq, "seed": seed, "split": list(ratios),
                   "abi": abi.to_dict()},
        "vocab_hash": vocab.hash(),
        "vocab_size": len(vocab),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    n_funcs = sum(t["functions"] for t in timing)
    total = sum(t["seconds"] for t in timing)
    (out / "timing.json").write_text(json.dumps({
        "modules": timing, "total_seconds": total,
        "ms_per_function": 1000 * total / n_funcs if n_funcs else 0.0}, indent=1) + "\n")
    return BuildResult(out, manifest, vocab, manifest["counts"])


def load_split(dataset_dir, split: str) -> list[Vsg]:
    path = Path(dataset_dir) / f"{split}.jsonl"
    if not path.is_file():
        raise DatasetError(f"missing split file {path}")
    return list(read_corpus(path))


def load_vocab(dataset_dir) -> Vocab:
    return Vocab.from_json(json.loads((Path(dataset_dir) / "vocab.json").read_text()))
