"""Graph file I/O.

Text format (one undirected edge per `edge` line; the loader mirrors):

    nodes=<n> classes=<c> feat_dim=<d>
    node <id> <label|-1> <f1> ... <fd>
    edge <u> <v>

Binary format: magic ``TSAG1`` followed by little-endian u64 header fields
(version, n, classes, feat_dim, nnz) and the raw CSR/label/feature arrays.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from tsa.errors import ParseError
from tsa.graph import Graph, from_edge_pairs

BINARY_MAGIC = b"TSAG1"
_BINARY_VERSION = 1


def save_graph(g: Graph, path: str | Path, binary: bool = False):
    path = Path(path)
    if binary:
        _save_binary(g, path)
    else:
        _save_text(g, path)


def load_graph(path: str | Path) -> Graph:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(len(BINARY_MAGIC))
    if head == BINARY_MAGIC:
        return _load_binary(path)
    return _load_text(path)


def _save_text(g: Graph, path: Path):
    with open(path, "w") as fh:
        fh.write(f"nodes={g.num_nodes} classes={g.num_classes} feat_dim={g.feat_dim}\n")
        for u in range(g.num_nodes):
            feats = " ".join(f"{x:.17g}" for x in g.features[u])
            fh.write(f"node {u} {g.labels[u]} {feats}\n")
        centers = g.message_centers()
        for u, v in zip(centers, g.csr_neighbors):
            if u < v:  # each undirected edge listed once
                fh.write(f"edge {u} {v}\n")


def _load_text(path: Path) -> Graph:
    def fail(lineno, msg):
        raise ParseError(f"{path}:{lineno}: {msg}")

    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty file")
    header = dict(
        part.split("=", 1) for part in lines[0].split() if "=" in part
    )
    try:
        n = int(header["nodes"])
        classes = int(header["classes"])
        feat_dim = int(header["feat_dim"])
    except (KeyError, ValueError):
        fail(1, "header must be 'nodes=<n> classes=<c> feat_dim=<d>'")
    features = np.zeros((n, feat_dim))
    labels = np.full(n, -1, dtype=np.int64)
    seen = np.zeros(n, dtype=bool)
    pairs = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        kind = parts[0]
        if kind == "node":
            if len(parts) != 3 + feat_dim:
                fail(lineno, f"node line needs id, label and {feat_dim} features")
            try:
                nid = int(parts[1])
                label = int(parts[2])
                feats = [float(x) for x in parts[3:]]
            except ValueError as e:
                fail(lineno, f"bad node field: {e}")
            if not 0 <= nid < n:
                fail(lineno, f"node id {nid} out of range")
            if seen[nid]:
                fail(lineno, f"duplicate node line for id {nid}")
            seen[nid] = True
            labels[nid] = label
            features[nid] = feats
        elif kind == "edge":
            if len(parts) != 3:
                fail(lineno, "edge line needs two endpoints")
            try:
                u, v = int(parts[1]), int(parts[2])
            except ValueError as e:
                fail(lineno, f"bad edge field: {e}")
            if not (0 <= u < n and 0 <= v < n):
                fail(lineno, f"edge endpoint out of range: {u} {v}")
            if u == v:
                fail(lineno, f"self-loop on node {u}")
            pairs.append((u, v))
        else:
            fail(lineno, f"unknown record kind {kind!r}")
    if not seen.all():
        raise ParseError(f"{path}: missing node line for id {int(np.flatnonzero(~seen)[0])}")
    canon = {(min(u, v), max(u, v)) for u, v in pairs}
    if len(canon) != len(pairs):
        raise ParseError(f"{path}: duplicate or mirrored edge listed twice")
    pairs_arr = np.array(sorted(canon), dtype=np.int64).reshape(-1, 2)
    try:
        return from_edge_pairs(n, pairs_arr, features, labels, classes)
    except ParseError as e:
        raise ParseError(f"{path}: {e}") from e


def _save_binary(g: Graph, path: Path):
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack(
            "<5Q", _BINARY_VERSION, g.num_nodes, g.num_classes, g.feat_dim,
            len(g.csr_neighbors),
        ))
        fh.write(g.csr_offsets.tobytes())
        fh.write(g.csr_neighbors.tobytes())
        fh.write(g.labels.tobytes())
        fh.write(g.features.tobytes())


def _load_binary(path: Path) -> Graph:
    data = Path(path).read_bytes()
    if data[:5] != BINARY_MAGIC:
        raise ParseError(f"{path}: bad magic")
    try:
        version, n, classes, feat_dim, nnz = struct.unpack_from("<5Q", data, 5)
        if version != _BINARY_VERSION:
            raise ParseError(f"{path}: unsupported version {version}")
        pos = 5 + 5 * 8

        def take(count, dtype):
            nonlocal pos
            nbytes = count * np.dtype(dtype).itemsize
            if pos + nbytes > len(data):
                raise ParseError(f"{path}: truncated file")
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos).copy()
            pos += nbytes
            return arr

        offsets = take(n + 1, np.int64)
        neighbors = take(nnz, np.int64)
        labels = take(n, np.int64)
        features = take(n * feat_dim, np.float64).reshape(n, feat_dim)
    except struct.error as e:
        raise ParseError(f"{path}: truncated header: {e}") from e
    return Graph(int(n), offsets, neighbors, features, labels, int(classes))
