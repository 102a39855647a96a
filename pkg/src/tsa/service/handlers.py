"""Service core: each handler maps a request model to a response model.

The FastAPI app and the CLI both dispatch here, so all orchestration logic
lives in one place. Every artifact written under the working directory is
recorded in its manifest with a hash of the producing request.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

import tsa
from tsa.alignment import TsaConfig, adapt
from tsa.csbm import CONDITION_NAMES, CsbmSpec, builtin_spec, generate
from tsa.diagnostics import evaluate, shift_report
from tsa.errors import ConfigError
from tsa.graph import Graph, make_splits
from tsa.graph_io import load_graph, save_graph
from tsa.harness import (
    ExperimentConfig,
    emit_table,
    load_experiment_config,
    run_experiment,
)
from tsa.model import TrainConfig, forward, load_model, pretrain, save_model
from tsa.refine import RefineParams
from tsa.service import schemas as s

MANIFEST_NAME = "manifest.json"


def request_hash(req) -> str:
    blob = json.dumps(req.model_dump(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def record_artifact(workdir: Path, path: Path, kind: str, config_hash: str):
    manifest_path = workdir / MANIFEST_NAME
    entries = []
    if manifest_path.exists():
        entries = json.loads(manifest_path.read_text())
    entries.append({
        "path": str(path.relative_to(workdir) if path.is_relative_to(workdir) else path),
        "kind": kind,
        "config_hash": config_hash,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    })
    manifest_path.write_text(json.dumps(entries, indent=2))


def _resolve(workdir: Path, ref: str) -> Path:
    p = Path(ref)
    return p if p.is_absolute() else workdir / p


def _load_spec_file(path: Path, seed: int) -> CsbmSpec:
    import tomli

    with open(path, "rb") as fh:
        try:
            raw = tomli.load(fh)
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    base = builtin_spec(raw["condition"], seed) if "condition" in raw else None
    try:
        if base is None:
            return CsbmSpec(
                num_nodes=int(raw["num_nodes"]),
                label_ratio=np.asarray(raw["label_ratio"], dtype=float),
                connection=np.asarray(raw["connection"], dtype=float),
                means=np.asarray(raw["means"], dtype=float),
                feature_std=float(raw["feature_std"]),
                seed=int(raw.get("seed", seed)),
            )
        fields = {}
        for key in ("num_nodes", "feature_std", "seed"):
            if key in raw:
                fields[key] = raw[key]
        for key in ("label_ratio", "connection", "means"):
            if key in raw:
                fields[key] = np.asarray(raw[key], dtype=float)
        return replace(base, **fields)
    except KeyError as e:
        raise ConfigError(f"{path}: missing spec field {e}") from e


def handle_generate(req: s.GenerateRequest, workdir: Path) -> s.GenerateResponse:
    if (req.condition is None) == (req.spec_file is None):
        raise ConfigError("generate needs exactly one of condition or spec_file")
    if req.condition is not None:
        if req.condition not in CONDITION_NAMES:
            raise ConfigError(
                f"unknown condition {req.condition!r}; choose from {', '.join(CONDITION_NAMES)}"
            )
        spec = builtin_spec(req.condition, seed=req.seed)
    else:
        spec = _load_spec_file(_resolve(workdir, req.spec_file), req.seed)
    if req.overrides:
        fields = dict(req.overrides)
        for key in ("label_ratio", "connection", "means"):
            if key in fields:
                fields[key] = np.asarray(fields[key], dtype=float)
        spec = replace(spec, **fields)
    g = generate(spec)
    out = _resolve(workdir, req.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_graph(g, out, binary=req.binary)
    h = request_hash(req)
    record_artifact(workdir, out, "graph", h)
    return s.GenerateResponse(
        path=str(out),
        num_nodes=g.num_nodes,
        num_edges=g.num_edges,
        num_classes=g.num_classes,
        class_counts=np.bincount(g.labels[g.labels >= 0], minlength=g.num_classes).tolist(),
        config_hash=h,
    )


def _train_config(req: s.PretrainRequest, workdir: Path) -> TrainConfig:
    fields = {}
    if req.config_file:
        import tomli
        with open(_resolve(workdir, req.config_file), "rb") as fh:
            try:
                fields.update(tomli.load(fh))
            except tomli.TOMLDecodeError as e:
                raise ConfigError(f"{req.config_file}: {e}") from e
    fields.update(req.config)
    try:
        return TrainConfig(**fields)
    except TypeError as e:
        raise ConfigError(f"bad pretrain config: {e}") from e


def handle_pretrain(req: s.PretrainRequest, workdir: Path) -> s.PretrainResponse:
    g = load_graph(_resolve(workdir, req.graph))
    cfg = _train_config(req, workdir)
    masks = make_splits(g, "source", (0.6, 0.2, 0.2), seed=req.split_seed)
    model, report = pretrain(g, masks, cfg)
    out = _resolve(workdir, req.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    h = request_hash(req)
    record_artifact(workdir, out, "model", h)
    return s.PretrainResponse(
        path=str(out),
        best_val_accuracy=report.best_val_accuracy,
        best_epoch=report.best_epoch,
        test_accuracy=report.test_accuracy,
        config_hash=h,
    )


def _tsa_config(req: s.AdaptRequest) -> TsaConfig:
    return TsaConfig(
        rho1=req.rho1,
        rho2=req.rho2,
        alpha_lr=req.alpha_lr,
        alpha_epochs=req.alpha_epochs,
        refine_method=req.refine,
        refine=RefineParams(
            tent_lr=req.tent_lr, tent_steps=req.tent_steps,
            t3a_m=req.t3a_m, t3a_space=req.t3a_space,
            lame_knn=req.lame_knn, lame_iters=req.lame_iters,
        ),
        gamma_enabled=req.gamma_enabled,
        alpha_enabled=req.alpha_enabled,
        uniform_source_prior=req.uniform_source_prior,
        soft_counts=req.soft_counts,
        seed=req.seed,
    )


def handle_adapt(req: s.AdaptRequest, workdir: Path) -> s.AdaptResponse:
    model = load_model(_resolve(workdir, req.model))
    g = load_graph(_resolve(workdir, req.graph))
    soft, trace = adapt(model, g, _tsa_config(req))
    hard = np.argmax(soft, axis=1)
    labeled = g.labels >= 0
    accuracy = f1_macro = None
    if labeled.any():
        accuracy = evaluate(hard[labeled], g.labels[labeled], "accuracy")
        f1_macro = evaluate(hard[labeled], g.labels[labeled], "f1_macro")
    h = request_hash(req)
    result_path = trace_path = None
    if req.out:
        result_path = _resolve(workdir, req.out)
        result_path.parent.mkdir(parents=True, exist_ok=True)
        result_path.write_text(json.dumps({
            "soft_labels": soft.tolist(),
            "hard_predictions": hard.tolist(),
            "accuracy": accuracy,
            "f1_macro": f1_macro,
            "config_hash": h,
        }))
        record_artifact(workdir, result_path, "adapt_result", h)
    if req.trace:
        trace_path = _resolve(workdir, req.trace)
        trace_path.parent.mkdir(parents=True, exist_ok=True)
        trace_path.write_text(json.dumps(trace.to_dict(), indent=2))
        record_artifact(workdir, trace_path, "adapt_trace", h)
    return s.AdaptResponse(
        accuracy=accuracy,
        f1_macro=f1_macro,
        confident_fraction=trace.confident_fraction,
        reweighted_edge_fraction=trace.reweighted_edge_fraction,
        gamma=None if trace.gamma is None else trace.gamma.tolist(),
        warnings=trace.warnings,
        result_path=None if result_path is None else str(result_path),
        trace_path=None if trace_path is None else str(trace_path),
        config_hash=h,
    )


def handle_evaluate(req: s.EvaluateRequest, workdir: Path) -> s.EvaluateResponse:
    result = json.loads(_resolve(workdir, req.result).read_text())
    preds = np.asarray(result["hard_predictions"])
    g = load_graph(_resolve(workdir, req.graph))
    labeled = g.labels >= 0
    if not labeled.any():
        raise ConfigError("graph carries no labels to evaluate against")
    value = evaluate(preds[labeled], g.labels[labeled], req.metric)
    return s.EvaluateResponse(metric=req.metric, value=value, num_nodes=int(labeled.sum()))


def handle_diagnose(req: s.DiagnoseRequest, workdir: Path) -> s.DiagnoseResponse:
    g_source = load_graph(_resolve(workdir, req.source))
    g_target = load_graph(_resolve(workdir, req.target))
    model = load_model(_resolve(workdir, req.model)) if req.model else None
    report = shift_report(g_source, g_target, model, num_bins=req.num_bins)
    h = request_hash(req)
    report_path = embeddings_path = None
    if req.out:
        report_path = _resolve(workdir, req.out)
        report_path.parent.mkdir(parents=True, exist_ok=True)
        report_path.write_text(json.dumps(report.to_dict(), indent=2))
        record_artifact(workdir, report_path, "shift_report", h)
    if req.emit_embeddings:
        if model is None:
            raise ConfigError("emitting embeddings requires a model")
        embeddings_path = _resolve(workdir, req.emit_embeddings)
        embeddings_path.parent.mkdir(parents=True, exist_ok=True)
        fr = forward(model, g_target)
        with open(embeddings_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            dim = fr.embeddings.shape[1]
            writer.writerow(["node", "label"] + [f"e{i}" for i in range(dim)])
            for u in range(g_target.num_nodes):
                writer.writerow(
                    [u, int(g_target.labels[u])] + [f"{x:.8g}" for x in fr.embeddings.data[u]]
                )
        record_artifact(workdir, embeddings_path, "embeddings", h)
    return s.DiagnoseResponse(
        css=report.css,
        label_tv=report.label_tv,
        nbr_bound_term=report.nbr_bound_term,
        homophily_source=report.homophily_source,
        homophily_target=report.homophily_target,
        ber_source=report.ber_source,
        report_path=None if report_path is None else str(report_path),
        embeddings_path=None if embeddings_path is None else str(embeddings_path),
    )


def handle_experiment(req: s.ExperimentRequest, workdir: Path) -> s.ExperimentResponse:
    if (req.config_file is None) == (not req.config):
        raise ConfigError("experiment needs exactly one of config_file or inline config")
    if req.config_file:
        cfg = load_experiment_config(_resolve(workdir, req.config_file))
    else:
        raw = dict(req.config)
        try:
            pre = TrainConfig(**raw.pop("pretrain", {}))
            cfg = ExperimentConfig(pretrain=pre, **raw)
        except TypeError as e:
            raise ConfigError(f"bad experiment config: {e}") from e
    # graph paths in a config file are relative to the workdir
    for attr in ("source", "target"):
        ref = getattr(cfg, attr)
        if ref not in CONDITION_NAMES:
            setattr(cfg, attr, str(_resolve(workdir, ref)))
    table = run_experiment(cfg, model_cache={})
    h = request_hash(req)
    table.config_hash = h
    artifacts = []
    if req.out:
        base = _resolve(workdir, req.out)
        base.parent.mkdir(parents=True, exist_ok=True)
        for fmt in req.formats:
            ext = {"json": ".json", "csv": ".csv", "markdown": ".md"}[fmt]
            path = base.with_suffix(ext)
            emit_table(table, fmt, path)
            record_artifact(workdir, path, f"result_table_{fmt}", h)
            artifacts.append(str(path))
    return s.ExperimentResponse(
        scenario=table.scenario,
        cells=table.to_dict()["cells"],
        artifacts=artifacts,
        config_hash=h,
    )


def handle_health() -> s.HealthResponse:
    return s.HealthResponse(status="ok", version=tsa.__version__)
