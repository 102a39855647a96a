"""Decision-boundary refinement: improved soft pseudo-labels from a frozen
encoder via entropy-minimized BN affine updates (tent), streaming
pseudo-prototype classification (t3a), or neighborhood-regularized label
smoothing (lame).

Only tent mutates model state, and only the classifier's batch-norm scale
and shift; t3a and lame are pure functions of their inputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

import tsa.numerics as tn
from tsa.errors import AdaptationError, ConfigError, ContractError
from tsa.graph import EdgeWeights, Graph
from tsa.model import AlphaFn, ForwardResult, ModelState, forward

log = logging.getLogger(__name__)

REFINE_METHODS = ("tent", "t3a", "lame")


def entropy(p: np.ndarray) -> float:
    """Shannon entropy of one probability row, nats; 0*ln(0) = 0."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or abs(p.sum() - 1.0) > 1e-6 or np.any(p < -1e-12):
        raise ContractError("entropy expects a probability row")
    return float(row_entropy(p[None, :])[0])


def row_entropy(probs: np.ndarray) -> np.ndarray:
    """Per-row Shannon entropy of a row-stochastic matrix."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    return -terms.sum(axis=1)


@dataclass
class RefineParams:
    tent_lr: float = 0.01
    tent_steps: int = 1
    t3a_m: int = 20
    t3a_space: str = "penultimate"   # or "encoder"
    lame_knn: int = 5
    lame_iters: int = 10
    lame_space: str = "encoder"


@dataclass
class RefineOutcome:
    soft: np.ndarray
    mutated_params: tuple[str, ...] = ()
    info: dict = field(default_factory=dict)


def refine_tent(
    model: ModelState,
    g: Graph,
    weights: EdgeWeights | None = None,
    alpha_fn: AlphaFn | None = None,
    steps: int = 1,
    lr: float = 0.01,
) -> tuple[np.ndarray, dict]:
    """Minimize mean prediction entropy w.r.t. the classifier BN scale and
    shift; every other parameter stays untouched (verified)."""
    if lr < 0:
        raise ConfigError("tent lr must be nonnegative")
    frozen = model.encoder.all() + model.classifier.non_bn_affine()
    frozen_ids = [id(t) for t in frozen]
    clf = model.classifier
    bn_params = [clf.bn_scale, clf.bn_shift]
    state = tn.AdamState(lr=lr)
    losses = []
    n = g.num_nodes
    for _ in range(max(steps, 0)):
        with tn.Tape() as tape:
            fr = forward(model, g, weights=weights, alpha_fn=alpha_fn)
            ls = tn.log_softmax(fr.logits)
            loss = tn.smul(tn.tsum(tn.mul(tn.exp(ls), ls)), 1.0 / n)
            grads = tape.backward(loss)
        if not np.isfinite(loss.item()):
            raise AdaptationError("tent entropy loss is not finite")
        losses.append(-loss.item())  # stored as entropy (positive)
        bn_params = tn.adam_step(
            bn_params, [tn.grad_of(grads, p) for p in bn_params], state
        )
        clf.bn_scale, clf.bn_shift = bn_params
    assert [id(t) for t in model.encoder.all() + clf.non_bn_affine()] == frozen_ids, \
        "tent must not touch non-BN parameters"
    out = forward(model, g, weights=weights, alpha_fn=alpha_fn)
    return out.probs.data.copy(), {"entropy_per_step": losses}


def _softmax_row(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v / n if n > 0 else v


def refine_t3a(model: ModelState, embeddings: np.ndarray, m_capacity: int) -> tuple[np.ndarray, dict]:
    """Streaming pseudo-prototype classifier.

    Supports per class start from the final linear layer's class vectors.
    Nodes are processed in ascending id order: the frozen classifier head
    assigns each node's support class and entropy (assignment must not feed
    back on prototype state, or confident mistakes snowball), the node's
    unit-normalized embedding joins that class's support keeping the m
    lowest-entropy entries, and the node's output is the softmax over dot
    products with the current unit prototypes (means of support entries).
    """
    if m_capacity < 1:
        raise ConfigError("t3a support capacity must be >= 1")
    clf = model.classifier
    w2 = clf.w2.data  # (dim, classes); class c vector = column c
    k = w2.shape[1]
    if embeddings.shape[1] != w2.shape[0]:
        raise ContractError(
            f"t3a embeddings dim {embeddings.shape[1]} does not match classifier dim {w2.shape[0]}"
        )

    def head(vec: np.ndarray) -> np.ndarray:
        return _softmax_row(vec @ w2 + clf.b2.data)

    sums = [np.zeros(w2.shape[0]) for _ in range(k)]
    counts = [0] * k
    supports: list[list[tuple[np.ndarray, float, int]]] = [[] for _ in range(k)]

    def insert(c: int, vec: np.ndarray, ent: float, seq: int):
        unit = _unit(vec)
        supports[c].append((unit, ent, seq))
        sums[c] += unit
        counts[c] += 1
        if len(supports[c]) > m_capacity:
            # evict the highest-entropy entry (ties: the latest arrival)
            worst = max(
                range(len(supports[c])),
                key=lambda i: (supports[c][i][1], supports[c][i][2]),
            )
            evicted, _, _ = supports[c].pop(worst)
            sums[c] -= evicted
            counts[c] -= 1

    for c in range(k):
        # seed entries carry the entropy of classifying themselves
        ent = float(row_entropy(head(w2[:, c])[None, :])[0])
        insert(c, w2[:, c], ent, -k + c)

    out = np.zeros((embeddings.shape[0], k))
    for u in range(embeddings.shape[0]):
        protos = np.stack([_unit(sums[c] / max(counts[c], 1)) for c in range(k)])
        out[u] = _softmax_row(protos @ embeddings[u])
        assigned = head(embeddings[u])
        ent = float(row_entropy(assigned[None, :])[0])
        insert(int(np.argmax(assigned)), embeddings[u], ent, u)
    support_sizes = [len(s) for s in supports]
    return out, {"support_sizes": support_sizes}


def _knn_affinity(embeddings: np.ndarray, k_nn: int, chunk: int = 512) -> "object":
    """Symmetric k-NN cosine affinity (negative similarities clipped to 0)."""
    import scipy.sparse as sp

    n = embeddings.shape[0]
    norms = np.linalg.norm(embeddings, axis=1, keepdims=True)
    unit = embeddings / np.maximum(norms, 1e-12)
    rows, cols, vals = [], [], []
    k_nn = min(k_nn, n - 1)
    for start in range(0, n, chunk):
        block = unit[start:start + chunk] @ unit.T
        for i in range(block.shape[0]):
            block[i, start + i] = -np.inf  # exclude self
        top = np.argpartition(-block, k_nn - 1, axis=1)[:, :k_nn]
        for i in range(block.shape[0]):
            sims = block[i, top[i]]
            keep = sims > 0.0
            rows.extend([start + i] * int(keep.sum()))
            cols.extend(top[i][keep].tolist())
            vals.extend(sims[keep].tolist())
    w = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return w.maximum(w.T)


def refine_lame(
    soft: np.ndarray,
    embeddings: np.ndarray,
    k_nn: int = 5,
    iters: int = 10,
    affinity=None,
    tol: float = 1e-6,
) -> tuple[np.ndarray, dict]:
    """Fixed-point label smoothing z <- softmax(log p + W z) over a
    symmetric k-NN cosine affinity W."""
    if k_nn < 1:
        raise ConfigError("lame k_nn must be >= 1")
    p = np.asarray(soft, dtype=np.float64)
    w = _knn_affinity(embeddings, k_nn) if affinity is None else affinity
    log_p = np.log(np.maximum(p, 1e-300))
    z = p.copy()
    deltas = []
    for _ in range(max(iters, 0)):
        logits = log_p + w @ z
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        z_new = e / e.sum(axis=1, keepdims=True)
        delta = float(np.abs(z_new - z).max(initial=0.0))
        deltas.append(delta)
        z = z_new
        if delta < tol:
            break
    if len(deltas) > 2 and any(b > a * (1 + 1e-9) for a, b in zip(deltas[1:], deltas[2:])):
        log.warning("lame iteration was not contracting: deltas=%s", deltas)
    return z, {"deltas": deltas}


def refine(
    model: ModelState,
    g: Graph,
    method: str,
    params: RefineParams | None = None,
    weights: EdgeWeights | None = None,
    alpha_fn: AlphaFn | None = None,
    fr: ForwardResult | None = None,
) -> RefineOutcome:
    """Dispatch wrapper; records which parameters were mutated."""
    params = params or RefineParams()
    if method == "tent":
        soft, info = refine_tent(
            model, g, weights=weights, alpha_fn=alpha_fn,
            steps=params.tent_steps, lr=params.tent_lr,
        )
        return RefineOutcome(soft, mutated_params=("bn_scale", "bn_shift"), info=info)
    if fr is None:
        fr = forward(model, g, weights=weights, alpha_fn=alpha_fn)
    if method == "t3a":
        emb = fr.penultimate.data if params.t3a_space == "penultimate" else fr.embeddings.data
        soft, info = refine_t3a(model, emb, params.t3a_m)
        return RefineOutcome(soft, info=info)
    if method == "lame":
        emb = fr.embeddings.data if params.lame_space == "encoder" else fr.penultimate.data
        soft, info = refine_lame(
            fr.probs.data, emb, k_nn=params.lame_knn, iters=params.lame_iters
        )
        return RefineOutcome(soft, info=info)
    raise ConfigError(f"unknown refine method {method!r}; expected one of {REFINE_METHODS}")
