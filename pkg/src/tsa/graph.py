"""Graph representation (CSR), per-edge weight overlays, and node splits.

Graphs are undirected: every stored (u, v) entry has a matching (v, u), so
directed "messages" are simply the CSR entries themselves. Row u lists the
neighbors whose messages arrive at u. Self-loops and duplicate entries are
rejected. Node labels use -1 as the "unlabeled" sentinel; operations that
need labels raise on sentinel nodes rather than skipping them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from tsa.errors import ConfigError, ContractError, DegenerateInputError, ParseError

UNLABELED = -1

SOURCE_ROLES = ("train", "val", "test")
TARGET_ROLES = ("labeled", "unlabeled")


@dataclass
class Graph:
    num_nodes: int
    csr_offsets: np.ndarray
    csr_neighbors: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.csr_offsets = np.ascontiguousarray(self.csr_offsets, dtype=np.int64)
        self.csr_neighbors = np.ascontiguousarray(self.csr_neighbors, dtype=np.int64)
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        validate_graph(self)

    @property
    def num_edges(self) -> int:
        """Undirected edge count (each stored twice in CSR)."""
        return len(self.csr_neighbors) // 2

    @property
    def feat_dim(self) -> int:
        return self.features.shape[1]

    def degree(self, u: int) -> int:
        if not 0 <= u < self.num_nodes:
            raise IndexError(f"node id {u} out of range [0, {self.num_nodes})")
        return int(self.csr_offsets[u + 1] - self.csr_offsets[u])

    def degrees(self) -> np.ndarray:
        return np.diff(self.csr_offsets)

    def neighbors(self, u: int) -> np.ndarray:
        if not 0 <= u < self.num_nodes:
            raise IndexError(f"node id {u} out of range [0, {self.num_nodes})")
        return self.csr_neighbors[self.csr_offsets[u]:self.csr_offsets[u + 1]]

    def message_centers(self) -> np.ndarray:
        """Center node id for each CSR entry (the receiving endpoint)."""
        return np.repeat(np.arange(self.num_nodes), self.degrees())

    def labeled_mask(self) -> np.ndarray:
        return self.labels != UNLABELED

    def require_labels(self, nodes: np.ndarray | None = None) -> np.ndarray:
        picked = self.labels if nodes is None else self.labels[nodes]
        if np.any(picked == UNLABELED):
            raise ContractError("operation requires labels on nodes that carry none")
        return picked


def validate_graph(g: Graph):
    n = g.num_nodes
    if g.csr_offsets.shape != (n + 1,):
        raise ParseError(f"csr_offsets must have length {n + 1}")
    if g.csr_offsets[0] != 0 or g.csr_offsets[-1] != len(g.csr_neighbors):
        raise ParseError("csr_offsets endpoints inconsistent with neighbor array")
    if np.any(np.diff(g.csr_offsets) < 0):
        raise ParseError("csr_offsets must be nondecreasing")
    if len(g.csr_neighbors) and (g.csr_neighbors.min() < 0 or g.csr_neighbors.max() >= n):
        raise ParseError("neighbor index out of range")
    if g.features.ndim != 2 or g.features.shape[0] != n:
        raise ParseError(f"features must be (num_nodes, feat_dim), got {g.features.shape}")
    if g.labels.shape != (n,):
        raise ParseError("labels must have one entry per node")
    if np.any((g.labels < UNLABELED) | (g.labels >= g.num_classes)):
        raise ParseError(f"labels must lie in [-1, {g.num_classes})")
    centers = g.message_centers()
    if np.any(centers == g.csr_neighbors):
        raise ParseError("self-loops are not allowed")
    # duplicates within a row
    order = np.lexsort((g.csr_neighbors, centers))
    cu, cv = centers[order], g.csr_neighbors[order]
    if len(cu) > 1 and np.any((cu[1:] == cu[:-1]) & (cv[1:] == cv[:-1])):
        raise ParseError("duplicate edge entry")
    # symmetry: the multiset of (u, v) equals the multiset of (v, u)
    rev = np.lexsort((centers, g.csr_neighbors))
    if not (np.array_equal(cu, g.csr_neighbors[rev]) and np.array_equal(cv, centers[rev])):
        raise ParseError("adjacency is not symmetric")
    if not np.all(np.isfinite(g.features)):
        raise ParseError("non-finite feature value")


def build_graph(num_nodes, src, dst, features, labels, num_classes) -> Graph:
    """Assemble a Graph from directed entry arrays (both directions present)."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    counts = np.bincount(src, minlength=num_nodes)
    offsets = np.concatenate(([0], np.cumsum(counts)))
    return Graph(num_nodes, offsets, dst, features, labels, num_classes)


def from_edge_pairs(num_nodes, pairs, features, labels, num_classes) -> Graph:
    """Build from each undirected edge listed once; mirrors automatically."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    src = np.concatenate([pairs[:, 0], pairs[:, 1]])
    dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
    return build_graph(num_nodes, src, dst, features, labels, num_classes)


@dataclass
class EdgeWeights:
    """Per-message weights parallel to csr_neighbors; default all ones.

    A separate mutable overlay on an immutable Graph: exactly one writer
    during an adaptation session.
    """

    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ContractError("edge weights must be finite and nonnegative")

    @classmethod
    def ones(cls, g: Graph) -> "EdgeWeights":
        return cls(np.ones(len(g.csr_neighbors)))

    def matching(self, g: Graph) -> bool:
        return self.values.shape == g.csr_neighbors.shape


def log_normalized_degree(g: Graph, u: int | None = None):
    """ln(d + 1) / ln(max_degree + 1); 1.0 at the max-degree node.

    With u=None returns the full per-node vector.
    """
    degs = g.degrees()
    dmax = int(degs.max(initial=0))
    if dmax == 0:
        raise DegenerateInputError("log-normalized degree undefined on an edgeless graph")
    denom = np.log(dmax + 1.0)
    if u is None:
        return np.log(degs + 1.0) / denom
    return float(np.log(g.degree(u) + 1.0) / denom)


@dataclass
class SplitMasks:
    scheme: str
    roles: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.roles = np.ascontiguousarray(self.roles, dtype=np.int8)
        names = self.role_names()
        if np.any((self.roles < 0) | (self.roles >= len(names))):
            raise ConfigError("role code out of range for scheme")

    def role_names(self) -> tuple[str, ...]:
        if self.scheme == "source":
            return SOURCE_ROLES
        if self.scheme == "target":
            return TARGET_ROLES
        raise ConfigError(f"unknown split scheme {self.scheme!r}")

    def indices(self, role: str) -> np.ndarray:
        names = self.role_names()
        if role not in names:
            raise ConfigError(f"role {role!r} not in scheme {self.scheme!r}")
        return np.flatnonzero(self.roles == names.index(role))

    def counts(self) -> dict[str, int]:
        return {name: int((self.roles == i).sum()) for i, name in enumerate(self.role_names())}


def _exact_counts(n: int, fractions) -> np.ndarray:
    """Largest-remainder apportionment of n items over the fractions."""
    fractions = np.asarray(fractions, dtype=np.float64)
    raw = fractions * n
    base = np.floor(raw).astype(np.int64)
    short = n - base.sum()
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:short]] += 1
    return base


def make_splits(g: Graph, scheme: str, fractions, seed: int) -> SplitMasks:
    """Exact-count split: shuffle node ids once, slice into contiguous roles."""
    fractions = np.asarray(fractions, dtype=np.float64)
    expected = len(SOURCE_ROLES) if scheme == "source" else len(TARGET_ROLES)
    if scheme not in ("source", "target"):
        raise ConfigError(f"unknown split scheme {scheme!r}")
    if len(fractions) != expected:
        raise ConfigError(f"scheme {scheme!r} needs {expected} fractions")
    if np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise ConfigError("split fractions must be nonnegative and sum to 1")
    counts = _exact_counts(g.num_nodes, fractions)
    perm = np.random.default_rng(seed).permutation(g.num_nodes)
    roles = np.empty(g.num_nodes, dtype=np.int8)
    start = 0
    for code, c in enumerate(counts):
        roles[perm[start:start + c]] = code
        start += c
    return SplitMasks(scheme, roles)
