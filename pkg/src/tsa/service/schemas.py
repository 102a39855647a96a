"""Request/response models for the service endpoints. File paths are
resolved relative to the server's working directory."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field


class GenerateRequest(BaseModel):
    condition: Optional[str] = None
    spec_file: Optional[str] = None
    overrides: dict = Field(default_factory=dict)
    seed: int = 0
    out: str
    binary: bool = False


class GenerateResponse(BaseModel):
    path: str
    num_nodes: int
    num_edges: int
    num_classes: int
    class_counts: list[int]
    config_hash: str


class PretrainRequest(BaseModel):
    graph: str
    config_file: Optional[str] = None
    config: dict = Field(default_factory=dict)
    split_seed: int = 0
    out: str


class PretrainResponse(BaseModel):
    path: str
    best_val_accuracy: float
    best_epoch: int
    test_accuracy: float
    config_hash: str


class AdaptRequest(BaseModel):
    model: str
    graph: str
    refine: Literal["tent", "t3a", "lame"] = "t3a"
    rho1: float = 1.0
    rho2: float = 1.0
    alpha_lr: float = 0.01
    alpha_epochs: int = 1
    seed: int = 0
    gamma_enabled: bool = True
    alpha_enabled: bool = True
    uniform_source_prior: bool = False
    soft_counts: bool = False
    tent_lr: float = 0.01
    tent_steps: int = 1
    t3a_m: int = 20
    t3a_space: Literal["penultimate", "encoder"] = "penultimate"
    lame_knn: int = 5
    lame_iters: int = 10
    out: Optional[str] = None
    trace: Optional[str] = None


class AdaptResponse(BaseModel):
    accuracy: Optional[float] = None
    f1_macro: Optional[float] = None
    confident_fraction: float
    reweighted_edge_fraction: float
    gamma: Optional[list[list[float]]] = None
    warnings: list[str] = Field(default_factory=list)
    result_path: Optional[str] = None
    trace_path: Optional[str] = None
    config_hash: str


class EvaluateRequest(BaseModel):
    result: str
    graph: str
    metric: Literal["accuracy", "f1_binary", "f1_macro"] = "accuracy"


class EvaluateResponse(BaseModel):
    metric: str
    value: float
    num_nodes: int


class DiagnoseRequest(BaseModel):
    source: str
    target: str
    model: Optional[str] = None
    num_bins: int = 5
    out: Optional[str] = None
    emit_embeddings: Optional[str] = None


class DiagnoseResponse(BaseModel):
    css: float
    label_tv: float
    nbr_bound_term: float
    homophily_source: float
    homophily_target: float
    ber_source: Optional[float] = None
    report_path: Optional[str] = None
    embeddings_path: Optional[str] = None


class ExperimentRequest(BaseModel):
    config_file: Optional[str] = None
    config: dict = Field(default_factory=dict)
    out: Optional[str] = None
    formats: list[Literal["json", "csv", "markdown"]] = Field(
        default_factory=lambda: ["json"]
    )


class ExperimentResponse(BaseModel):
    scenario: str
    cells: dict
    artifacts: list[str] = Field(default_factory=list)
    config_hash: str


class HealthResponse(BaseModel):
    status: str
    version: str
