"""Per-variable type prediction reports for a single module."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

from . import ggnn
from .interproc import ModuleAnalysis, PosixKB, build_vpg, default_kb
from .ir import SYSV_X64, AbiSpec, load_module
from .typelabels import GroundTruthVar, LocationExpr, SidecarError, label_of
from .vsg import Vocab, encode_graph, normalize_vsg, vpg_to_vsg

TOP_K = 3


def parse_var_list(doc: str | bytes) -> list[GroundTruthVar]:
    """Variables to type, in sidecar layout; any ``type`` field is ignored."""
    try:
        d = json.loads(doc)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SidecarError(f"malformed variable list: {exc}") from None
    if not isinstance(d, dict) or not isinstance(d.get("functions"), list):
        raise SidecarError("variable list must be an object with a 'functions' list")
    out = []
    for f in d["functions"]:
        if not isinstance(f, dict) or "name" not in f:
            raise SidecarError(f"malformed function entry {f!r}")
        for v in f.get("vars", []):
            if not isinstance(v, dict) or "name" not in v or "loc" not in v:
                raise SidecarError(f"malformed variable entry {v!r}")
            out.append(GroundTruthVar(f["name"], v["name"], LocationExpr.from_json(v["loc"]), ""))
    return out


def report_schema() -> dict:
    return json.loads(resources.files("bytetr").joinpath("data/predict_report.schema.json").read_text())


def predict_module(checkpoint, module_path, variables: list[GroundTruthVar], depth: int = 2,
                   abi: AbiSpec | None = None, kb: PosixKB | None = None) -> dict:
    params, cfg, _, header = ggnn.load_checkpoint(checkpoint)
    vocab_doc = header["extra"].get("vocab")
    if vocab_doc is None:
        raise ggnn.CheckpointError("checkpoint carries no vocabulary")
    vocab = Vocab.from_json(vocab_doc)
    if vocab.hash() != header["vocab_hash"]:
        raise ggnn.CheckpointError("embedded vocabulary does not match the checkpoint hash")
    abi = abi or SYSV_X64
    module = load_module(module_path, abi)
    an = ModuleAnalysis(module, abi)
    kb = kb or default_kb()
    rows = []
    for v in variables:
        row = {"function": v.function, "name": v.var_name, "location": str(v.loc)}
        vpg = build_vpg(an, v, depth)
        if vpg.empty:
            row.update(status="untraceable", label=None, probability=None, vpg_nodes=0,
                       vpg_functions=0, top=[])
            rows.append(row)
            continue
        g = normalize_vsg(vpg_to_vsg(vpg, an, kb), vocab)
        logits, _ = ggnn.forward(params, cfg, encode_graph(g, vocab))
        p = ggnn.softmax(logits[None, :])[0]
        order = np.argsort(-p, kind="stable")[:TOP_K]
        row.update(status="ok", label=label_of(int(order[0])).text,
                   probability=round(float(p[order[0]]), 6),
                   vpg_nodes=len(vpg.nodes), vpg_functions=len(vpg.functions),
                   top=[{"label": label_of(int(i)).text, "probability": round(float(p[i]), 6)}
                        for i in order])
        rows.append(row)
    return {"module": module.name, "depth": depth, "variables": rows}


def format_prediction(rep: dict) -> str:
    lines = [f"module {rep['module']} (depth {rep['depth']})",
             f"{'function':<20}{'variable':<14}{'location':<14}{'type':<14}{'p':>8}{'vpg':>6}"]
    for r in rep["variables"]:
        if r["status"] != "ok":
            lines.append(f"{r['function']:<20}{r['name']:<14}{r['location']:<14}{'untraceable':<14}"
                         f"{'-':>8}{0:>6}")
            continue
        lines.append(f"{r['function']:<20}{r['name']:<14}{r['location']:<14}{r['label']:<14}"
                     f"{r['probability']:>8.4f}{r['vpg_nodes']:>6}")
    return "\n".join(lines) + "\n"


def validate_report(rep: dict) -> None:
    import jsonschema

    jsonschema.validate(rep, report_schema())


def load_var_list(path) -> list[GroundTruthVar]:
    return parse_var_list(Path(path).read_bytes())
