"""Experiment orchestration: seed sweeps over (source, target) scenarios,
per-method hyperparameter selection on the labeled target split, and
aggregated result tables.

Hyperparameter selection sees only the labeled target nodes; final metrics
are computed on the unlabeled split exclusively. Synthetic scenarios draw a
fresh graph pair per seed.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from tsa.alignment import TsaConfig, adapt
from tsa.csbm import CONDITION_NAMES, builtin_spec, generate, with_seed
from tsa.diagnostics import evaluate
from tsa.errors import ConfigError
from tsa.graph import Graph, make_splits
from tsa.graph_io import load_graph
from tsa.model import ModelState, TrainConfig, forward, pretrain
from tsa.refine import RefineParams, refine

log = logging.getLogger(__name__)

METHODS = ("erm", "tent", "t3a", "lame", "tsa-tent", "tsa-t3a", "tsa-lame")

# search spaces applied when a method has no explicit grid in the config
DEFAULT_GRIDS: dict[str, dict[str, list]] = {
    "erm": {},
    "tent": {"tent_lr": [0.001, 0.01, 0.05]},
    "t3a": {"t3a_m": [5, 20, 50, 100]},
    "lame": {},
    "tsa-tent": {"alpha_lr": [0.001, 0.01, 0.05, 0.1], "tent_lr": [0.001, 0.01, 0.05]},
    "tsa-t3a": {"alpha_lr": [0.001, 0.01, 0.05, 0.1], "t3a_m": [5, 20, 50, 100]},
    "tsa-lame": {"alpha_lr": [0.001, 0.01, 0.05, 0.1]},
}


@dataclass
class ExperimentConfig:
    source: str                       # condition name or graph file path
    target: str
    name: str = ""
    methods: list[str] = field(default_factory=lambda: ["erm"])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    metric: str = "accuracy"
    labeled_fraction: float = 0.03
    rho1: float = 1.0
    rho2: float = 1.0
    gamma_enabled: bool = True
    alpha_enabled: bool = True
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    grids: dict[str, dict[str, list]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.methods or not self.seeds:
            raise ConfigError("experiment needs at least one method and one seed")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; expected one of {METHODS}")
        if not self.name:
            self.name = f"{self.source}->{self.target}"

    def grid_for(self, method: str) -> dict[str, list]:
        grid = dict(DEFAULT_GRIDS[method])
        grid.update(self.grids.get(method, {}))
        return grid


@dataclass
class CellResult:
    method: str
    scenario: str
    values: list[float] = field(default_factory=list)
    chosen: list[dict] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    @property
    def mean(self) -> float | None:
        return float(np.mean(self.values)) if self.values else None

    @property
    def std(self) -> float | None:
        return float(np.std(self.values, ddof=1)) if len(self.values) >= 2 else None


@dataclass
class ResultTable:
    scenario: str
    cells: dict[str, CellResult]
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "config_hash": self.config_hash,
            "cells": {
                m: {
                    "mean": c.mean, "std": c.std, "values": c.values,
                    "chosen": c.chosen, "failures": c.failures,
                }
                for m, c in self.cells.items()
            },
        }


def grid_points(grid: dict[str, list]) -> list[dict]:
    if not grid:
        return [{}]
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def grid_select(scores: list[float]) -> int:
    """Argmax with ties resolved to the first-listed grid point."""
    if not scores:
        raise ConfigError("grid selection over an empty grid")
    return int(np.argmax(scores))


def _resolve_graph(ref: str, seed: int) -> Graph:
    if ref in CONDITION_NAMES:
        return generate(builtin_spec(ref, seed=seed))
    return load_graph(ref)


def _refine_params(hp: dict) -> RefineParams:
    fields = {k: v for k, v in hp.items() if k in RefineParams.__dataclass_fields__}
    return RefineParams(**fields)


def run_method(
    method: str,
    hp: dict,
    model: ModelState,
    g_target: Graph,
    cfg: ExperimentConfig,
) -> np.ndarray:
    """One (method, hyperparameter) run; returns final soft labels."""
    if method == "erm":
        return forward(model, g_target).probs.data
    if method in ("tent", "t3a", "lame"):
        work = model.copy()
        return refine(work, g_target, method, _refine_params(hp)).soft
    base = method.split("-", 1)[1]
    tsa_cfg = TsaConfig(
        rho1=cfg.rho1,
        rho2=cfg.rho2,
        alpha_lr=hp.get("alpha_lr", 0.01),
        refine_method=base,
        refine=_refine_params(hp),
        gamma_enabled=cfg.gamma_enabled,
        alpha_enabled=cfg.alpha_enabled,
    )
    soft, _ = adapt(model, g_target, tsa_cfg)
    return soft


def _seed_streams(seed: int) -> dict[str, int]:
    state = np.random.SeedSequence(seed).generate_state(4)
    return {
        "source_graph": int(state[0]),
        "target_graph": int(state[1]),
        "splits": int(state[2]),
        "init": int(state[3]),
    }


def run_experiment(
    cfg: ExperimentConfig,
    model_cache: dict | None = None,
    progress: bool = False,
) -> ResultTable:
    cells = {m: CellResult(m, cfg.name) for m in cfg.methods}
    for seed in cfg.seeds:
        streams = _seed_streams(seed)
        g_source = _resolve_graph(cfg.source, streams["source_graph"])
        g_target = _resolve_graph(cfg.target, streams["target_graph"])
        model = _pretrained(cfg, g_source, seed, streams, model_cache)
        target_masks = make_splits(
            g_target, "target",
            (cfg.labeled_fraction, 1.0 - cfg.labeled_fraction),
            seed=streams["splits"],
        )
        labeled = target_masks.indices("labeled")
        unlabeled = target_masks.indices("unlabeled")
        for method in cfg.methods:
            cell = cells[method]
            try:
                points = grid_points(cfg.grid_for(method))
                softs = [run_method(method, hp, model, g_target, cfg) for hp in points]
                # selection sees labeled-target labels only
                scores = [
                    evaluate(np.argmax(s, axis=1)[labeled], g_target.labels[labeled],
                             cfg.metric)
                    for s in softs
                ]
                pick = grid_select(scores)
                value = evaluate(
                    np.argmax(softs[pick], axis=1)[unlabeled],
                    g_target.labels[unlabeled], cfg.metric,
                )
                cell.values.append(value)
                cell.chosen.append(points[pick])
                if progress:
                    log.info("seed %d %s: %.4f %s", seed, method, value, points[pick])
            except Exception as e:  # record the cell failure, keep sweeping
                log.exception("seed %d method %s failed", seed, method)
                cell.failures.append(f"seed {seed}: {type(e).__name__}: {e}")
    return ResultTable(cfg.name, cells)


def _pretrained(cfg, g_source, seed, streams, cache) -> ModelState:
    key = (cfg.source, seed, tuple(sorted(cfg.pretrain.to_dict().items())))
    if cache is not None and key in cache:
        return cache[key]
    masks = make_splits(g_source, "source", (0.6, 0.2, 0.2), seed=streams["splits"])
    train_cfg = replace(cfg.pretrain, seed=streams["init"])
    model, _ = pretrain(g_source, masks, train_cfg)
    if cache is not None:
        cache[key] = model
    return model


# ---------------------------------------------------------------------------
# table emission

def emit_table(table: ResultTable, fmt: str, path: str | Path | None = None) -> str:
    if fmt == "json":
        text = json.dumps(table.to_dict(), indent=2)
    elif fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["scenario", "method", "mean", "std", "n_seeds", "hyperparams"])
        for m, c in table.cells.items():
            writer.writerow([
                table.scenario, m,
                "" if c.mean is None else f"{c.mean:.6f}",
                "" if c.std is None else f"{c.std:.6f}",
                len(c.values), json.dumps(c.chosen),
            ])
        text = buf.getvalue()
    elif fmt == "markdown":
        means = {m: c.mean for m, c in table.cells.items() if c.mean is not None}
        best = max(means.values()) if means else None
        lines = [
            f"| method | {table.scenario} |",
            "| --- | --- |",
        ]
        for m, c in table.cells.items():
            if c.mean is None:
                lines.append(f"| {m} | failed |")
                continue
            entry = f"{100 * c.mean:.2f}"
            if c.std is not None:
                entry += f" ± {100 * c.std:.2f}"
            if best is not None and c.mean == best:
                entry = f"**{entry}**"
            lines.append(f"| {m} | {entry} |")
        text = "\n".join(lines) + "\n"
    else:
        raise ConfigError(f"unknown table format {fmt!r}")
    if path is not None:
        Path(path).write_text(text)
    return text


# ---------------------------------------------------------------------------
# config file loading (TOML)

def load_experiment_config(path: str | Path) -> ExperimentConfig:
    import tomli

    with open(path, "rb") as fh:
        try:
            raw = tomli.load(fh)
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    scenario = raw.get("scenario", {})
    run = raw.get("run", {})
    try:
        cfg = ExperimentConfig(
            source=scenario["source"],
            target=scenario["target"],
            name=scenario.get("name", ""),
            methods=list(run.get("methods", ["erm"])),
            seeds=list(run.get("seeds", [0, 1, 2, 3, 4])),
            metric=run.get("metric", "accuracy"),
            labeled_fraction=float(run.get("labeled_fraction", 0.03)),
            rho1=float(run.get("rho1", 1.0)),
            rho2=float(run.get("rho2", 1.0)),
            gamma_enabled=bool(run.get("gamma_enabled", True)),
            alpha_enabled=bool(run.get("alpha_enabled", True)),
            pretrain=TrainConfig(**raw.get("pretrain", {})),
            grids=raw.get("grids", {}),
        )
    except KeyError as e:
        raise ConfigError(f"{path}: missing required key {e}") from e
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return cfg
