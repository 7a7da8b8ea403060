"""Command-line entry point: ``bytetr <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .ggnn import GgnnConfig, NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _abi(args):
    from .ir import load_abi
    return load_abi(args.abi) if args.abi else None


def _kb(args):
    from .interproc import PosixKB
    return PosixKB.load(args.posix_kb) if args.posix_kb else None


def cmd_gen_synthetic(args) -> int:
    from dataclasses import replace

    from .synthetic import GenSpec, write_corpus

    spec = GenSpec()
    if args.spec:
        spec = GenSpec.from_dict(json.loads(Path(args.spec).read_text()))
    overrides = {k: v for k, v in (("n_variables", args.variables), ("cross_function", args.cross_function),
                                   ("deep_fraction", args.deep_fraction),
                                   ("posix_fraction", args.posix_fraction),
                                   ("n_projects", args.projects)) if v is not None}
    spec = replace(spec, **overrides)
    idx = write_corpus(args.out, spec, args.seed)
    print(f"wrote {spec.n_variables} variables to {idx.parent}")
    return EXIT_OK


def cmd_dataset(args) -> int:
    from .dataset import build_dataset, parse_split

    res = build_dataset(args.inputs, args.out, parse_split(args.split), args.seed, args.depth,
                        args.min_freq, _abi(args), _kb(args), workers=args.workers)
    m = res.manifest
    print(f"splits: " + ", ".join(f"{k}={v}" for k, v in m["counts"].items()))
    print(f"vocabulary: {m['vocab_size']} tokens; untraceable: {sum(m['untraceable'].values())}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import TrainConfig, train

    cfg = GgnnConfig(d_in=args.d_in, hidden=args.hidden, steps=args.steps, aggregation=args.agg,
                     mlp_hidden=args.mlp_hidden, edge_weight=args.edge_weight, seed=args.seed)
    tc = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    m = train(args.dataset, args.out, cfg, tc, resume=args.resume, log=print)
    print(f"best validation score {m['best_val']:.4f}; checkpoints in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .training import evaluate, format_report

    rep = evaluate(args.checkpoint, args.dataset, args.split)
    text = format_report(rep)
    if args.out:
        out = Path(args.out)
        _write(out / f"eval_{args.split}.json", json.dumps(rep, sort_keys=True, indent=1) + "\n")
        _write(out / f"eval_{args.split}.txt", text)
    print(text, end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .predict import format_prediction, load_var_list, predict_module, validate_report

    rep = predict_module(args.checkpoint, args.module, load_var_list(args.vars), args.depth,
                         _abi(args), _kb(args))
    validate_report(rep)
    text = format_prediction(rep)
    if args.out:
        out = Path(args.out)
        _write(out / "predictions.json", json.dumps(rep, sort_keys=True, indent=1) + "\n")
        _write(out / "predictions.txt", text)
    print(text, end="")
    return EXIT_OK


def _label_stream(path: Path) -> list[str]:
    """One label per line from a text file, or resolved labels of every sidecar under a directory."""
    if path.is_dir():
        from .typelabels import parse_ground_truth_sidecar

        out = []
        for sc in sorted(path.rglob("*.vars.json")):
            recs, _ = parse_ground_truth_sidecar(sc.read_bytes())
            out.extend(r.resolved_label.text for r in recs if r.resolved_label is not None)
        return out
    return [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]


def cmd_stats(args) -> int:
    from .stats import fit_heaps, fit_zipf, format_fit

    labels = _label_stream(Path(args.input))
    z = fit_zipf(labels, min_count=args.min_count)
    h = fit_heaps(labels)
    text = format_fit(z) + "\n" + format_fit(h) + "\n"
    if args.out:
        out = Path(args.out)
        _write(out / "stats.json", json.dumps({"zipf": z.to_json(), "heaps": h.to_json()},
                                              sort_keys=True, indent=1) + "\n")
        _write(out / "stats.txt", text)
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bytetr", description="Variable type recovery from lifted SSA IR.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def analysis_flags(sp):
        sp.add_argument("--depth", type=int, default=2, help="max functions on a propagation path")
        sp.add_argument("--abi", help="calling-convention JSON (default: System V x86-64)")
        sp.add_argument("--posix-kb", help="POSIX signature JSON (default: bundled table)")

    g = sub.add_parser("gen-synthetic", help="write a synthetic corpus with planted types")
    g.add_argument("--spec", help="GenSpec JSON")
    g.add_argument("--variables", type=int)
    g.add_argument("--cross-function", type=float)
    g.add_argument("--deep-fraction", type=float)
    g.add_argument("--posix-fraction", type=float)
    g.add_argument("--projects", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_synthetic)

    d = sub.add_parser("dataset", help="build split graph corpora from modules + sidecars")
    d.add_argument("inputs")
    analysis_flags(d)
    d.add_argument("--split", default="80/10/10")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--min-freq", type=int, default=2)
    d.add_argument("--workers", type=int, default=1)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dataset)

    t = sub.add_parser("train", help="train the graph classifier")
    t.add_argument("dataset")
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--agg", choices=("sum", "mean", "max"), default="sum")
    t.add_argument("--d-in", type=int, default=64)
    t.add_argument("--hidden", type=int, default=128)
    t.add_argument("--steps", type=int, default=5)
    t.add_argument("--mlp-hidden", type=int, default=128)
    t.add_argument("--edge-weight", choices=("scalar", "vector"), default="scalar")
    t.add_argument("--resume", help="continue from a last.ckpt")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a split")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="type the listed variables of one module")
    pr.add_argument("checkpoint")
    pr.add_argument("module")
    pr.add_argument("vars", help="variable list JSON (sidecar layout, types optional)")
    analysis_flags(pr)
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_predict)

    s = sub.add_parser("stats", help="Zipf and Heaps fits over a label corpus")
    s.add_argument("input", help="labels file (one per line) or directory of sidecars")
    s.add_argument("--min-count", type=int, default=10)
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"bytetr: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        print(f"bytetr: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
