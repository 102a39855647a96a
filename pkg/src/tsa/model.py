"""GraphSAGE mean-pooling encoder with per-edge weights and per-layer
self/neighbor mixing, a BN-MLP classifier, ERM pretraining, and stored
source neighborhood statistics.

Aggregation divides by the *unweighted* degree: edge weights act as pure
up/down-sampling multipliers on messages, so the weighted neighbor-class
histogram is rescaled rather than renormalized.
"""

from __future__ import annotations

import copy
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp

import tsa.numerics as tn
from tsa.errors import CheckpointError, ContractError, NumericError, TrainingError
from tsa.graph import EdgeWeights, Graph, SplitMasks
from tsa.numerics import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TSAM1"
_CHECKPOINT_VERSION = 1

# alpha_fn: layer index -> per-node mixing weights (length n), or None for 1
AlphaFn = Callable[[int], "Tensor | np.ndarray"]


@dataclass
class TrainConfig:
    hidden_dim: int = 20
    clf_hidden: int = 20
    num_layers: int = 3
    epochs: int = 400
    lr: float = 0.003
    lr_decay: float = 0.9
    # stepped decay: x0.9 every 50 epochs keeps the full epoch budget live
    decay_every: int = 50
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class LayerParams:
    w_self: Tensor
    b_self: Tensor
    w_nbr: Tensor
    b_nbr: Tensor

    def all(self) -> list[Tensor]:
        return [self.w_self, self.b_self, self.w_nbr, self.b_nbr]


@dataclass
class EncoderParams:
    layers: list[LayerParams]

    def all(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer.all()]


@dataclass
class ClassifierParams:
    w1: Tensor
    b1: Tensor
    bn_scale: Tensor
    bn_shift: Tensor
    w2: Tensor
    b2: Tensor
    bn_mean: np.ndarray
    bn_var: np.ndarray
    bn_eps: float = 1e-5

    def all(self) -> list[Tensor]:
        return [self.w1, self.b1, self.bn_scale, self.bn_shift, self.w2, self.b2]

    def non_bn_affine(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class SourceStats:
    nbr_dist: np.ndarray          # row i: P(neighbor class j | center class i)
    label_dist: np.ndarray
    max_degree: int
    uniform_rows: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.nbr_dist = np.asarray(self.nbr_dist, dtype=np.float64)
        self.label_dist = np.asarray(self.label_dist, dtype=np.float64)
        if np.abs(self.nbr_dist.sum(axis=1) - 1.0).max() > 1e-9:
            raise ContractError("neighbor distribution rows must sum to 1")
        if abs(self.label_dist.sum() - 1.0) > 1e-9:
            raise ContractError("label distribution must sum to 1")


@dataclass
class ModelState:
    encoder: EncoderParams
    classifier: ClassifierParams
    source_stats: SourceStats | None
    meta: dict

    @property
    def num_layers(self) -> int:
        return len(self.encoder.layers)

    @property
    def num_classes(self) -> int:
        return self.classifier.w2.shape[1]

    def parameters(self) -> list[Tensor]:
        return self.encoder.all() + self.classifier.all()

    def copy(self) -> "ModelState":
        enc = EncoderParams([
            LayerParams(*[tn.param(t.data.copy()) for t in layer.all()])
            for layer in self.encoder.layers
        ])
        c = self.classifier
        clf = ClassifierParams(
            *[tn.param(t.data.copy()) for t in c.all()],
            bn_mean=c.bn_mean.copy(), bn_var=c.bn_var.copy(), bn_eps=c.bn_eps,
        )
        stats = None
        if self.source_stats is not None:
            stats = SourceStats(
                self.source_stats.nbr_dist.copy(),
                self.source_stats.label_dist.copy(),
                self.source_stats.max_degree,
                list(self.source_stats.uniform_rows),
            )
        return ModelState(enc, clf, stats, copy.deepcopy(self.meta))


def _linear_init(rng: np.random.Generator, fan_in: int, fan_out: int):
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=fan_out)
    return tn.param(w), tn.param(b)


def init_model(feat_dim: int, num_classes: int, cfg: TrainConfig) -> ModelState:
    rng = np.random.default_rng(cfg.seed)
    dims = [feat_dim] + [cfg.hidden_dim] * cfg.num_layers
    layers = []
    for k in range(cfg.num_layers):
        w_self, b_self = _linear_init(rng, dims[k], dims[k + 1])
        w_nbr, b_nbr = _linear_init(rng, dims[k], dims[k + 1])
        layers.append(LayerParams(w_self, b_self, w_nbr, b_nbr))
    w1, b1 = _linear_init(rng, cfg.hidden_dim, cfg.clf_hidden)
    w2, b2 = _linear_init(rng, cfg.clf_hidden, num_classes)
    clf = ClassifierParams(
        w1=w1, b1=b1,
        bn_scale=tn.param(np.ones(cfg.clf_hidden)),
        bn_shift=tn.param(np.zeros(cfg.clf_hidden)),
        w2=w2, b2=b2,
        bn_mean=np.zeros(cfg.clf_hidden),
        bn_var=np.ones(cfg.clf_hidden),
        bn_eps=cfg.bn_eps,
    )
    meta = {"feat_dim": feat_dim, "num_classes": num_classes, "config": cfg.to_dict()}
    return ModelState(EncoderParams(layers), clf, None, meta)


def aggregation_operator(g: Graph, weights: EdgeWeights | None):
    """Sparse mean-aggregation matrix A with A[u, v] = w_uv / d_u, plus its
    transpose for the adjoint. Zero-degree rows stay empty (agg = 0)."""
    vals = np.ones(len(g.csr_neighbors)) if weights is None else weights.values
    if weights is not None and not weights.matching(g):
        raise ContractError("edge weights not parallel to graph edges")
    deg = g.degrees().astype(np.float64)
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = 1.0 / deg[nz]
    data = vals * np.repeat(inv, g.degrees())
    mat = sp.csr_matrix((data, g.csr_neighbors, g.csr_offsets), shape=(g.num_nodes,) * 2)
    return mat, mat.T.tocsr()


@dataclass
class ForwardResult:
    embeddings: Tensor          # encoder output
    penultimate: Tensor         # classifier hidden after BN + relu
    logits: Tensor
    probs: Tensor
    premix_self: list[np.ndarray] = field(default_factory=list)
    premix_nbr: list[np.ndarray] = field(default_factory=list)

    def hard_predictions(self) -> np.ndarray:
        return np.argmax(self.probs.data, axis=1)


def _batch_norm_train(clf: ClassifierParams, x: Tensor, momentum: float) -> Tensor:
    mu = tn.col_mean(x)
    centered = tn.add_rowvec(x, tn.neg(mu))
    var = tn.col_mean(tn.mul(centered, centered))
    inv_std = tn.powc(tn.sadd(var, clf.bn_eps), -0.5)
    normed = tn.mul_rowvec(centered, inv_std)
    n = x.shape[0]
    unbiased = var.data * (n / max(n - 1, 1))
    clf.bn_mean = (1 - momentum) * clf.bn_mean + momentum * mu.data
    clf.bn_var = (1 - momentum) * clf.bn_var + momentum * unbiased
    return tn.add_rowvec(tn.mul_rowvec(normed, clf.bn_scale), clf.bn_shift)


def _batch_norm_eval(clf: ClassifierParams, x: Tensor) -> Tensor:
    mean_c = tn.tensor(-clf.bn_mean)
    inv_c = tn.tensor(1.0 / np.sqrt(clf.bn_var + clf.bn_eps))
    normed = tn.mul_rowvec(tn.add_rowvec(x, mean_c), inv_c)
    return tn.add_rowvec(tn.mul_rowvec(normed, clf.bn_scale), clf.bn_shift)


def forward(
    model: ModelState,
    g: Graph,
    weights: EdgeWeights | None = None,
    alpha_fn: AlphaFn | None = None,
    bn_mode: str = "eval",
    capture_premix: bool = False,
    operator=None,
    bn_momentum: float = 0.1,
) -> ForwardResult:
    """Full-graph forward pass.

    Per layer: h <- relu(W_self h + b_self + alpha * (W_nbr agg + b_nbr))
    with agg the weighted neighbor mean (weights over unweighted degree);
    the last encoder layer is linear. The classifier is
    linear -> batch norm -> relu -> linear, with softmax on top.
    """
    if bn_mode not in ("train", "eval"):
        raise ContractError(f"bn_mode must be train or eval, got {bn_mode!r}")
    mat, mat_t = aggregation_operator(g, weights) if operator is None else operator
    h = tn.tensor(g.features)
    premix_self, premix_nbr = [], []
    for k, layer in enumerate(model.encoder.layers):
        self_term = tn.add_rowvec(tn.matmul(h, layer.w_self), layer.b_self)
        agg = tn.sparse_matmul(mat, mat_t, h)
        nbr_term = tn.add_rowvec(tn.matmul(agg, layer.w_nbr), layer.b_nbr)
        if capture_premix:
            premix_self.append(self_term.data.copy())
            premix_nbr.append(nbr_term.data.copy())
        if alpha_fn is not None:
            a = alpha_fn(k)
            a = a if isinstance(a, Tensor) else tn.tensor(a)
            nbr_term = tn.scale_rows(nbr_term, a)
        h = tn.add(self_term, nbr_term)
        if k < model.num_layers - 1:
            h = tn.relu(h)
        if not np.all(np.isfinite(h.data)):
            raise NumericError(f"non-finite activations in encoder layer {k + 1}")
    clf = model.classifier
    z1 = tn.add_rowvec(tn.matmul(h, clf.w1), clf.b1)
    bn = (_batch_norm_train(clf, z1, bn_momentum) if bn_mode == "train"
          else _batch_norm_eval(clf, z1))
    hidden = tn.relu(bn)
    logits = tn.add_rowvec(tn.matmul(hidden, clf.w2), clf.b2)
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("non-finite activations in classifier")
    return ForwardResult(
        embeddings=h,
        penultimate=hidden,
        logits=logits,
        probs=tn.softmax(logits),
        premix_self=premix_self,
        premix_nbr=premix_nbr,
    )


def compute_source_stats(g: Graph) -> SourceStats:
    """Neighbor-class distribution, label marginal and max degree from the
    fully labeled source graph. Classes with no outgoing messages get a
    uniform row and are flagged."""
    labels = g.require_labels()
    k = g.num_classes
    centers = g.message_centers()
    counts = np.zeros((k, k))
    np.add.at(counts, (labels[centers], labels[g.csr_neighbors]), 1.0)
    row_sums = counts.sum(axis=1)
    nbr = np.empty_like(counts)
    uniform_rows = []
    for i in range(k):
        if row_sums[i] == 0:
            nbr[i] = 1.0 / k
            uniform_rows.append(i)
        else:
            nbr[i] = counts[i] / row_sums[i]
    if uniform_rows:
        log.warning("classes %s have no edges; using uniform neighbor rows", uniform_rows)
    label_dist = np.bincount(labels, minlength=k) / g.num_nodes
    return SourceStats(nbr, label_dist, int(g.degrees().max(initial=0)), uniform_rows)


def _cross_entropy_loss(logits: Tensor, idx: np.ndarray, targets: np.ndarray) -> Tensor:
    ls = tn.log_softmax(logits)
    picked = tn.take_per_row(tn.gather_rows(ls, idx), targets)
    return tn.smul(tn.tsum(picked), -1.0 / len(idx))


def accuracy_of(model: ModelState, g: Graph, idx: np.ndarray) -> float:
    fr = forward(model, g)
    preds = fr.hard_predictions()[idx]
    return float((preds == g.require_labels(idx)).mean())


@dataclass
class PretrainReport:
    best_val_accuracy: float
    best_epoch: int
    test_accuracy: float
    train_losses: list[float]


def pretrain(g: Graph, masks: SplitMasks, cfg: TrainConfig | None = None) -> tuple[ModelState, PretrainReport]:
    """ERM pretraining with Adam and stepped lr decay; retains the
    best-validation-accuracy parameters and stores source statistics."""
    cfg = cfg or TrainConfig()
    if masks.scheme != "source":
        raise ContractError("pretraining expects source-scheme splits")
    train_idx = masks.indices("train")
    val_idx = masks.indices("val")
    test_idx = masks.indices("test")
    y_train = g.require_labels(train_idx)
    model = init_model(g.feat_dim, g.num_classes, cfg)
    params = model.parameters()
    state = tn.AdamState(lr=cfg.lr)
    operator = aggregation_operator(g, None)

    best = (-1.0, 0, None)  # (val acc, epoch, snapshot)
    losses: list[float] = []
    for epoch in range(cfg.epochs):
        with tn.Tape() as tape:
            fr = forward(model, g, bn_mode="train", operator=operator,
                         bn_momentum=cfg.bn_momentum)
            loss = _cross_entropy_loss(fr.logits, train_idx, y_train)
            grads = tape.backward(loss)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise TrainingError(f"training loss diverged at epoch {epoch}")
        losses.append(loss_val)
        new_params = tn.adam_step(params, [tn.grad_of(grads, p) for p in params], state)
        _install_params(model, new_params)
        params = new_params
        if cfg.decay_every > 0 and (epoch + 1) % cfg.decay_every == 0:
            state.decay_lr(cfg.lr_decay)
        if len(val_idx):
            fr_eval = forward(model, g, operator=operator)
            val_acc = float(
                (fr_eval.hard_predictions()[val_idx] == g.labels[val_idx]).mean()
            )
            if val_acc > best[0]:
                best = (val_acc, epoch, model.copy())
    if best[2] is not None:
        model = best[2]
    val_acc = accuracy_of(model, g, val_idx) if len(val_idx) else float("nan")
    test_acc = accuracy_of(model, g, test_idx) if len(test_idx) else float("nan")
    model.source_stats = compute_source_stats(g)
    model.meta["pretrain"] = {
        "best_val_accuracy": best[0], "best_epoch": best[1], "test_accuracy": test_acc,
    }
    return model, PretrainReport(best[0], best[1], test_acc, losses)


def _install_params(model: ModelState, params: list[Tensor]):
    it = iter(params)
    for layer in model.encoder.layers:
        layer.w_self, layer.b_self, layer.w_nbr, layer.b_nbr = (
            next(it), next(it), next(it), next(it))
    c = model.classifier
    c.w1, c.b1, c.bn_scale, c.bn_shift, c.w2, c.b2 = (
        next(it), next(it), next(it), next(it), next(it), next(it))


# ---------------------------------------------------------------------------
# checkpoint I/O: magic TSAM1, json section table, raw little-endian arrays

def save_model(model: ModelState, path: str | Path):
    if model.source_stats is None:
        raise ContractError("refusing to save a model without source statistics")
    arrays: dict[str, np.ndarray] = {}
    for k, layer in enumerate(model.encoder.layers):
        for name, t in zip(("w_self", "b_self", "w_nbr", "b_nbr"), layer.all()):
            arrays[f"encoder/{k}/{name}"] = t.data
    c = model.classifier
    for name, t in zip(("w1", "b1", "bn_scale", "bn_shift", "w2", "b2"), c.all()):
        arrays[f"classifier/{name}"] = t.data
    arrays["classifier/bn_mean"] = c.bn_mean
    arrays["classifier/bn_var"] = c.bn_var
    s = model.source_stats
    arrays["stats/nbr_dist"] = s.nbr_dist
    arrays["stats/label_dist"] = s.label_dist
    header = {
        "sections": {
            "encoder": {"num_layers": model.num_layers},
            "classifier": {"bn_eps": c.bn_eps},
            "stats": {"max_degree": s.max_degree, "uniform_rows": s.uniform_rows},
            "metadata": model.meta,
        },
        "arrays": [
            {"name": name, "shape": list(a.shape)} for name, a in arrays.items()
        ],
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<QQ", _CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype=np.float64).tobytes())


def load_model(path: str | Path) -> ModelState:
    data = Path(path).read_bytes()
    if data[:5] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
    try:
        version, hlen = struct.unpack_from("<QQ", data, 5)
        if version != _CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(data[21:21 + hlen].decode())
        pos = 21 + hlen
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            nbytes = count * 8
            if pos + nbytes > len(data):
                raise CheckpointError(f"{path}: truncated checkpoint")
            arrays[entry["name"]] = np.frombuffer(
                data, dtype=np.float64, count=count, offset=pos
            ).reshape(shape).copy()
            pos += nbytes
        sections = header["sections"]
        num_layers = sections["encoder"]["num_layers"]
        layers = [
            LayerParams(*[
                tn.param(arrays[f"encoder/{k}/{name}"])
                for name in ("w_self", "b_self", "w_nbr", "b_nbr")
            ])
            for k in range(num_layers)
        ]
        clf = ClassifierParams(
            *[tn.param(arrays[f"classifier/{n}"])
              for n in ("w1", "b1", "bn_scale", "bn_shift", "w2", "b2")],
            bn_mean=arrays["classifier/bn_mean"],
            bn_var=arrays["classifier/bn_var"],
            bn_eps=sections["classifier"]["bn_eps"],
        )
        if "stats" not in sections or "stats/nbr_dist" not in arrays:
            raise CheckpointError(f"{path}: checkpoint lacks source statistics")
        stats = SourceStats(
            arrays["stats/nbr_dist"], arrays["stats/label_dist"],
            int(sections["stats"]["max_degree"]),
            list(sections["stats"].get("uniform_rows", [])),
        )
        return ModelState(EncoderParams(layers), clf, stats, sections["metadata"])
    except (KeyError, json.JSONDecodeError, struct.error, ValueError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint: {e}") from e
