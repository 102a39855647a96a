"""Test-time structural alignment.

Pipeline per adaptation session (a private model copy, read-only graph):

1. boundary refinement on the unweighted graph -> soft pseudo-labels
2. estimate the target neighbor-class distribution from confident
   pseudo-label pairs, build the per-class-pair ratio table against the
   stored source statistics, and assign it as edge weights
3. optimize the degree-conditioned mixing weights against refined hard
   pseudo-labels
4. a second boundary refinement on the reweighted graph

The ratio table up/down-samples messages from (pseudo) class-j neighbors
into class-i centers so weighted aggregation matches the source
neighborhood expectation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

import tsa.numerics as tn
from tsa.errors import ConfigError, ContractError
from tsa.graph import EdgeWeights, Graph, log_normalized_degree
from tsa.model import ModelState, SourceStats, forward
from tsa.numerics import Tensor
from tsa.refine import REFINE_METHODS, RefineParams, refine, row_entropy

log = logging.getLogger(__name__)

# entropy-gate comparisons tolerate float round-off at the extremes
_GATE_TOL = 1e-12


@dataclass
class GammaTable:
    gamma: np.ndarray
    confident_mask: np.ndarray
    smoothing: float
    clip: tuple[float, float]

    def __post_init__(self):
        lo, hi = self.clip
        if np.any(self.gamma < lo - 1e-12) or np.any(self.gamma > hi + 1e-12):
            raise ContractError("gamma entries violate the clip range")


@dataclass
class AlphaLayer:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    bias: Tensor          # additive offset, init 1 so mixing starts at exactly 1

    def all(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2, self.bias]


@dataclass
class AlphaParams:
    """Per layer: a 1 -> hidden -> 1 tanh perceptron on the log-normalized
    degree plus a scalar offset; zero-init weights give sigmoid(0) - 0.5 = 0,
    so every mixing weight starts at exactly bias = 1."""

    layers: list[AlphaLayer]

    @classmethod
    def fresh(cls, num_layers: int, hidden: int = 16) -> "AlphaParams":
        layers = [
            AlphaLayer(
                w1=tn.param(np.zeros((1, hidden))),
                b1=tn.param(np.zeros(hidden)),
                w2=tn.param(np.zeros((hidden, 1))),
                b2=tn.param(np.zeros(1)),
                bias=tn.param(np.ones(1)),
            )
            for _ in range(num_layers)
        ]
        return cls(layers)

    def all(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer.all()]


@dataclass
class TsaConfig:
    rho1: float = 1.0
    rho2: float = 1.0
    alpha_lr: float = 0.01
    alpha_epochs: int = 1
    refine_method: str = "t3a"
    refine: RefineParams = field(default_factory=RefineParams)
    smoothing: float = 1.0
    gamma_clip: tuple[float, float] = (0.0, 10.0)
    gamma_enabled: bool = True
    alpha_enabled: bool = True
    uniform_source_prior: bool = False
    soft_counts: bool = False
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.rho1 <= 1.0 and 0.0 <= self.rho2 <= 1.0):
            raise ConfigError("rho1 and rho2 must lie in [0, 1]")
        if self.refine_method not in REFINE_METHODS:
            raise ConfigError(f"unknown refine method {self.refine_method!r}")
        lo, hi = self.gamma_clip
        if lo < 0 or hi <= lo:
            raise ConfigError("gamma clip range must satisfy 0 <= lo < hi")


@dataclass
class AdaptTrace:
    gamma: np.ndarray | None = None
    target_nbr_dist: np.ndarray | None = None
    confident_fraction: float = 0.0
    reweighted_edge_fraction: float = 0.0
    alpha_losses: list[float] = field(default_factory=list)
    alpha_profile: list[dict] = field(default_factory=list)
    refine_info: dict = field(default_factory=dict)
    accuracies: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "gamma": None if self.gamma is None else self.gamma.tolist(),
            "target_nbr_dist": None if self.target_nbr_dist is None
            else self.target_nbr_dist.tolist(),
            "confident_fraction": self.confident_fraction,
            "reweighted_edge_fraction": self.reweighted_edge_fraction,
            "alpha_losses": self.alpha_losses,
            "alpha_profile": self.alpha_profile,
            "refine_info": self.refine_info,
            "accuracies": self.accuracies,
            "warnings": self.warnings,
        }


def confident_nodes(soft: np.ndarray, rho1: float) -> np.ndarray:
    """Entropy gate: H(soft_u) <= rho1 * ln(num_classes)."""
    k = soft.shape[1]
    return row_entropy(soft) <= rho1 * np.log(k) + _GATE_TOL


def estimate_target_nbr_dist(
    g: Graph,
    soft: np.ndarray,
    rho1: float,
    smoothing: float = 1.0,
    soft_counts: bool = False,
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Estimate P(neighbor class | center class) from pseudo-labels over
    directed messages whose endpoints are both confident; add-one smoothing
    keeps every cell positive."""
    if soft.shape != (g.num_nodes, g.num_classes):
        raise ContractError("soft labels must be (num_nodes, num_classes)")
    if np.abs(soft.sum(axis=1) - 1.0).max(initial=0.0) > 1e-6:
        raise ContractError("soft labels must be row-stochastic")
    k = g.num_classes
    mask = confident_nodes(soft, rho1)
    centers = g.message_centers()
    nbrs = g.csr_neighbors
    both = mask[centers] & mask[nbrs]
    warnings = []
    counts = np.zeros((k, k))
    if not both.any():
        warnings.append("no confident edge pairs; neighbor distribution falls back to uniform")
        log.warning(warnings[-1])
    elif soft_counts:
        cu, cv = centers[both], nbrs[both]
        counts = soft[cu].T @ soft[cv]
    else:
        hard = np.argmax(soft, axis=1)
        np.add.at(counts, (hard[centers[both]], hard[nbrs[both]]), 1.0)
    counts += smoothing
    dist = counts / counts.sum(axis=1, keepdims=True)
    return dist, mask, warnings


def build_gamma(
    source: SourceStats | np.ndarray,
    target_dist: np.ndarray,
    clip: tuple[float, float] = (0.0, 10.0),
) -> np.ndarray:
    """Elementwise source/target neighbor-distribution ratio, clipped."""
    src = source.nbr_dist if isinstance(source, SourceStats) else np.asarray(source)
    if src.shape != target_dist.shape:
        raise ContractError("source and target distributions differ in shape")
    if np.any(target_dist <= 0.0):
        raise ContractError("target distribution must be strictly positive (smooth it)")
    return np.clip(src / target_dist, clip[0], clip[1])


def assign_edge_weights(g: Graph, table: GammaTable, soft: np.ndarray) -> EdgeWeights:
    """Weight for the message v -> u: gamma[label_u, label_v] when both
    endpoints pass the entropy gate, else 1."""
    hard = np.argmax(soft, axis=1)
    centers = g.message_centers()
    nbrs = g.csr_neighbors
    both = table.confident_mask[centers] & table.confident_mask[nbrs]
    values = np.ones(len(nbrs))
    values[both] = table.gamma[hard[centers[both]], hard[nbrs[both]]]
    return EdgeWeights(values)


def alpha_value(params: AlphaParams, layer: int, dtilde: float) -> float:
    """Mixing weight sigmoid(mlp(dtilde)) - 0.5 + bias for one node."""
    lp = params.layers[layer]
    hidden = np.tanh(np.asarray([[dtilde]]) @ lp.w1.data + lp.b1.data)
    out = float((hidden @ lp.w2.data + lp.b2.data).reshape(()))
    return float(1.0 / (1.0 + np.exp(-out)) - 0.5 + lp.bias.data[0])


def make_alpha_fn(params: AlphaParams, g: Graph):
    """Per-layer callable returning the per-node mixing weights as a tensor
    (differentiable w.r.t. the alpha parameters)."""
    degs = g.degrees()
    if degs.max(initial=0) == 0:
        dtilde = np.zeros(g.num_nodes)
    else:
        dtilde = log_normalized_degree(g)
    d_col = tn.tensor(dtilde[:, None])

    def alpha_fn(layer: int) -> Tensor:
        lp = params.layers[layer]
        hidden = tn.tanh(tn.add_rowvec(tn.matmul(d_col, lp.w1), lp.b1))
        out = tn.add_rowvec(tn.matmul(hidden, lp.w2), lp.b2)
        col = tn.add_rowvec(tn.sadd(tn.sigmoid(out), -0.5), lp.bias)
        return tn.reshape(col, (g.num_nodes,))

    return alpha_fn


def optimize_alpha(
    model: ModelState,
    g: Graph,
    weights: EdgeWeights | None,
    refined_soft: np.ndarray,
    params: AlphaParams,
    config: TsaConfig,
) -> tuple[AlphaParams, list[float], list[str]]:
    """Cross-entropy of the model's reweighted predictions against refined
    hard pseudo-labels, restricted to nodes whose refined prediction entropy
    passes the rho2 gate; only the alpha parameters move."""
    k = g.num_classes
    ent = row_entropy(refined_soft)
    keep = np.flatnonzero(ent <= config.rho2 * np.log(k) + _GATE_TOL)
    warnings = []
    if keep.size == 0:
        warnings.append("rho2 gate removed every node; skipping the mixing-weight update")
        log.warning(warnings[-1])
        return params, [], warnings
    y_prime = np.argmax(refined_soft, axis=1)[keep]
    model_ids = [id(t) for t in model.parameters()]
    flat = params.all()
    state = tn.AdamState(lr=config.alpha_lr)
    losses = []
    for _ in range(config.alpha_epochs):
        with tn.Tape() as tape:
            fr = forward(model, g, weights=weights, alpha_fn=make_alpha_fn(params, g))
            ls = tn.log_softmax(fr.logits)
            picked = tn.take_per_row(tn.gather_rows(ls, keep), y_prime)
            loss = tn.smul(tn.tsum(picked), -1.0 / keep.size)
            grads = tape.backward(loss)
        losses.append(loss.item())
        flat = tn.adam_step(flat, [tn.grad_of(grads, p) for p in flat], state)
        _install_alpha(params, flat)
    assert [id(t) for t in model.parameters()] == model_ids, \
        "alpha optimization must not touch model parameters"
    return params, losses, warnings


def _install_alpha(params: AlphaParams, flat: list[Tensor]):
    it = iter(flat)
    for layer in params.layers:
        layer.w1, layer.b1, layer.w2, layer.b2, layer.bias = (
            next(it), next(it), next(it), next(it), next(it))


def _alpha_profile(params: AlphaParams, g: Graph) -> list[dict]:
    """Learned mixing weights per layer over degree quantiles (plot-ready)."""
    degs = g.degrees()
    qs = np.unique(np.quantile(degs, [0.1, 0.3, 0.5, 0.7, 0.9]).astype(int))
    dmax = degs.max(initial=0)
    if dmax == 0:
        return []
    out = []
    for k in range(len(params.layers)):
        for d in qs:
            dt = float(np.log(d + 1.0) / np.log(dmax + 1.0))
            out.append({"layer": k + 1, "degree": int(d), "alpha": alpha_value(params, k, dt)})
    return out


def adapt(
    model: ModelState, g_target: Graph, config: TsaConfig | None = None
) -> tuple[np.ndarray, AdaptTrace]:
    """Run the full adaptation pipeline; returns final soft labels and a
    trace. The input model is not modified (copy-on-adapt)."""
    config = config or TsaConfig()
    if model.source_stats is None:
        raise ContractError("adapt requires a model carrying source statistics")
    work = model.copy()
    trace = AdaptTrace()
    labels_known = bool(np.all(g_target.labels >= 0))

    def acc(soft: np.ndarray) -> float:
        return float((np.argmax(soft, axis=1) == g_target.labels).mean())

    alpha_params = AlphaParams.fresh(work.num_layers)

    first = refine(work, g_target, config.refine_method, config.refine)
    trace.refine_info["first"] = first.info
    if labels_known:
        trace.accuracies["after_first_refine"] = acc(first.soft)

    weights = None
    if config.gamma_enabled:
        dist, mask, warns = estimate_target_nbr_dist(
            g_target, first.soft, config.rho1,
            smoothing=config.smoothing, soft_counts=config.soft_counts,
        )
        trace.warnings.extend(warns)
        source = work.source_stats
        if config.uniform_source_prior:
            k = g_target.num_classes
            source = SourceStats(
                np.full((k, k), 1.0 / k), source.label_dist, source.max_degree
            )
        gamma = build_gamma(source, dist, clip=config.gamma_clip)
        table = GammaTable(gamma, mask, config.smoothing, config.gamma_clip)
        weights = assign_edge_weights(g_target, table, first.soft)
        centers = g_target.message_centers()
        both = mask[centers] & mask[g_target.csr_neighbors]
        trace.gamma = gamma
        trace.target_nbr_dist = dist
        trace.confident_fraction = float(mask.mean())
        trace.reweighted_edge_fraction = float(both.mean()) if len(both) else 0.0

    if config.alpha_enabled:
        alpha_params, losses, warns = optimize_alpha(
            work, g_target, weights, first.soft, alpha_params, config
        )
        trace.alpha_losses = losses
        trace.warnings.extend(warns)
        trace.alpha_profile = _alpha_profile(alpha_params, g_target)

    alpha_fn = make_alpha_fn(alpha_params, g_target)
    realigned = forward(work, g_target, weights=weights, alpha_fn=alpha_fn)
    if labels_known:
        trace.accuracies["after_realignment"] = acc(realigned.probs.data)

    second = refine(
        work, g_target, config.refine_method, config.refine,
        weights=weights, alpha_fn=alpha_fn, fr=realigned,
    )
    trace.refine_info["second"] = second.info
    if labels_known:
        trace.accuracies["final"] = acc(second.soft)
    return second.soft, trace
