"""Shift metrics and model diagnostics for a source/target domain pair:
label-shift total variation, conditional structure shift, the worst-case
neighborhood ratio term, balanced error rate, representation
signal-to-noise profiles, and standard evaluation metrics.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from tsa.errors import ConfigError, ContractError, DegenerateInputError, ShapeError
from tsa.graph import Graph
from tsa.model import ModelState, compute_source_stats, forward

log = logging.getLogger(__name__)

METRICS = ("accuracy", "f1_binary", "f1_macro")


def label_shift_tv(dist_s, dist_t) -> float:
    """Total variation distance between two label distributions."""
    p = np.asarray(dist_s, dtype=np.float64)
    q = np.asarray(dist_t, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError("label distributions differ in length")
    if abs(p.sum() - 1.0) > 1e-6 or abs(q.sum() - 1.0) > 1e-6:
        raise ContractError("label distributions must sum to 1")
    return float(0.5 * np.abs(p - q).sum())


def css(source_dist, target_dist, target_label_dist) -> float:
    """Conditional structure shift: the target-label-weighted average total
    variation between per-class neighbor distributions."""
    s = np.asarray(source_dist, dtype=np.float64)
    t = np.asarray(target_dist, dtype=np.float64)
    w = np.asarray(target_label_dist, dtype=np.float64)
    if s.shape != t.shape or s.shape[0] != len(w):
        raise ShapeError("distribution shapes do not conform")
    return float(0.5 * (w[:, None] * np.abs(s - t)).sum())


def nbr_bound_term(source_dist, target_dist, target_label_dist, smooth: float = 0.0) -> float:
    """Worst-case per-class neighbor ratio term: the target-label-weighted
    expectation of max_k |1 - target(k|j)/source(k|j)|."""
    s = np.asarray(source_dist, dtype=np.float64)
    t = np.asarray(target_dist, dtype=np.float64)
    w = np.asarray(target_label_dist, dtype=np.float64)
    if np.any(s <= 0.0):
        if smooth <= 0.0:
            raise DegenerateInputError(
                "source neighbor distribution has zero cells; pass smooth > 0"
            )
        log.warning("smoothing zero source cells with %g before the ratio", smooth)
        s = s + smooth
        s = s / s.sum(axis=1, keepdims=True)
        t = t + smooth
        t = t / t.sum(axis=1, keepdims=True)
    per_class = np.abs(1.0 - t / s).max(axis=1)
    return float((w * per_class).sum())


def ber(predictions, labels, num_classes: int) -> float:
    """Balanced error rate: the worst per-class conditional error. Classes
    absent from the labels are flagged and excluded."""
    preds = np.asarray(predictions)
    labs = np.asarray(labels)
    if preds.shape != labs.shape:
        raise ShapeError("predictions and labels differ in length")
    errors = []
    missing = []
    for c in range(num_classes):
        sel = labs == c
        if not sel.any():
            missing.append(c)
            continue
        errors.append(float((preds[sel] != c).mean()))
    if missing:
        log.warning("classes %s absent from labels; excluded from BER", missing)
    if not errors:
        raise DegenerateInputError("no class present in labels")
    return max(errors)


@dataclass
class SnrResult:
    ratio: float
    inter: float
    intra: float
    flag: str | None = None


def snr(embeddings: np.ndarray, labels: np.ndarray) -> SnrResult:
    """Inter-class over intra-class representation variance.

    inter = sum_i n_i ||mu_i - mu*||^2 / K and intra = sum_i sum_h ||h - mu_i||^2 / K
    with K the class count (sample-count weighted, class-count normalized).
    """
    h = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise DegenerateInputError("snr needs at least two classes present")
    k = len(classes)
    mu_star = h.mean(axis=0)
    inter = 0.0
    intra = 0.0
    for c in classes:
        hc = h[y == c]
        mu_c = hc.mean(axis=0)
        inter += len(hc) * float(((mu_c - mu_star) ** 2).sum()) / k
        intra += float(((hc - mu_c) ** 2).sum()) / k
    if intra == 0.0 and inter == 0.0:
        return SnrResult(0.0, inter, intra, flag="zero_over_zero")
    if intra == 0.0:
        return SnrResult(float("inf"), inter, intra, flag="zero_intra")
    return SnrResult(inter / intra, inter, intra)


@dataclass
class SnrProfileEntry:
    layer: int
    bin_index: int
    degree_lo: int
    degree_hi: int
    ratio: float
    flag: str | None = None

    def to_dict(self) -> dict:
        return {
            "layer": self.layer, "bin": self.bin_index,
            "degree_lo": self.degree_lo, "degree_hi": self.degree_hi,
            "ratio": self.ratio, "flag": self.flag,
        }


def snr_profile(model: ModelState, g: Graph, num_bins: int = 5) -> list[SnrProfileEntry]:
    """Per layer and equal-count degree bin: snr of the aggregated pre-mix
    term over snr of the self pre-mix term."""
    labels = g.require_labels()
    fr = forward(model, g, capture_premix=True)
    degs = g.degrees()
    order = np.argsort(degs, kind="stable")
    bins = np.array_split(order, num_bins)
    out = []
    for layer in range(model.num_layers):
        h_self = fr.premix_self[layer]
        h_nbr = fr.premix_nbr[layer]
        for b, idx in enumerate(bins):
            if len(idx) == 0:
                continue
            lo, hi = int(degs[idx].min()), int(degs[idx].max())
            if len(np.unique(labels[idx])) < 2:
                out.append(SnrProfileEntry(layer + 1, b, lo, hi, float("nan"),
                                           flag="single_class_bin"))
                continue
            s_nbr = snr(h_nbr[idx], labels[idx])
            s_self = snr(h_self[idx], labels[idx])
            if s_self.flag or s_nbr.flag or s_self.ratio == 0.0:
                flag = s_nbr.flag or s_self.flag or "zero_self_snr"
                out.append(SnrProfileEntry(layer + 1, b, lo, hi, float("nan"), flag=flag))
                continue
            out.append(SnrProfileEntry(layer + 1, b, lo, hi, s_nbr.ratio / s_self.ratio))
    return out


def evaluate(predictions, labels, metric: str = "accuracy") -> float:
    preds = np.asarray(predictions)
    labs = np.asarray(labels)
    if preds.shape != labs.shape:
        raise ShapeError("predictions and labels differ in length")
    if metric == "accuracy":
        return float((preds == labs).mean())
    if metric == "f1_binary":
        return _f1(preds, labs, positive=1)
    if metric == "f1_macro":
        classes = np.unique(labs)
        return float(np.mean([_f1(preds, labs, positive=int(c)) for c in classes]))
    raise ConfigError(f"unknown metric {metric!r}; expected one of {METRICS}")


def _f1(preds, labs, positive: int) -> float:
    tp = float(((preds == positive) & (labs == positive)).sum())
    fp = float(((preds == positive) & (labs != positive)).sum())
    fn = float(((preds != positive) & (labs == positive)).sum())
    if 2 * tp + fp + fn == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def node_homophily(g: Graph) -> float:
    """Mean over nodes of the same-label neighbor fraction (degree > 0)."""
    labels = g.require_labels()
    centers = g.message_centers()
    same = (labels[centers] == labels[g.csr_neighbors]).astype(np.float64)
    per_node_sum = np.zeros(g.num_nodes)
    np.add.at(per_node_sum, centers, same)
    degs = g.degrees()
    nz = degs > 0
    if not nz.any():
        raise DegenerateInputError("homophily undefined on an edgeless graph")
    return float((per_node_sum[nz] / degs[nz]).mean())


@dataclass
class ShiftReport:
    css: float
    label_tv: float
    nbr_bound_term: float
    homophily_source: float
    homophily_target: float
    ber_source: float | None = None
    snr_profile_source: list[SnrProfileEntry] = field(default_factory=list)
    snr_profile_target: list[SnrProfileEntry] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "css": self.css,
            "label_tv": self.label_tv,
            "nbr_bound_term": self.nbr_bound_term,
            "homophily_source": self.homophily_source,
            "homophily_target": self.homophily_target,
            "ber_source": self.ber_source,
            "snr_profile_source": [e.to_dict() for e in self.snr_profile_source],
            "snr_profile_target": [e.to_dict() for e in self.snr_profile_target],
        }


def shift_report(
    g_source: Graph,
    g_target: Graph,
    model: ModelState | None = None,
    num_bins: int = 5,
) -> ShiftReport:
    """Shift diagnostics between two fully labeled graphs; model-dependent
    entries (BER, SNR profiles) are filled when a model is given."""
    src_stats = compute_source_stats(g_source)
    tgt_stats = compute_source_stats(g_target)
    report = ShiftReport(
        css=css(src_stats.nbr_dist, tgt_stats.nbr_dist, tgt_stats.label_dist),
        label_tv=label_shift_tv(src_stats.label_dist, tgt_stats.label_dist),
        nbr_bound_term=nbr_bound_term(
            src_stats.nbr_dist, tgt_stats.nbr_dist, tgt_stats.label_dist
        ),
        homophily_source=node_homophily(g_source),
        homophily_target=node_homophily(g_target),
    )
    if model is not None:
        fr = forward(model, g_source)
        report.ber_source = ber(fr.hard_predictions(), g_source.labels, g_source.num_classes)
        report.snr_profile_source = snr_profile(model, g_source, num_bins)
        report.snr_profile_target = snr_profile(model, g_target, num_bins)
    return report
