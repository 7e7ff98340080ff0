"""Immutable undirected graphs with synthetic generators and file I/O.

Adjacency is kept in compressed sparse row form (``indptr``/``indices``) with
sorted, duplicate-free, self-loop-free neighbor lists.  Features are held as
float64 in memory and stored as float32 on disk.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapacityError, DimensionError, MalformedInputError

FEATURE_MAGIC = b"IGFT"
_FEATURE_HEADER = struct.Struct("<4sQII")

TRAIN, VALID, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "valid", "test")

MAX_RMAT_SCALE = 22


@dataclass(frozen=True, eq=False)
class Graph:
    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None
    split: np.ndarray | None = None

    @property
    def num_nodes(self) -> int:
        return len(self.indptr) - 1

    @property
    def num_edges(self) -> int:
        """Undirected edge count."""
        return len(self.indices) // 2

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    def nodes_in_split(self, which: int) -> np.ndarray:
        if self.split is None:
            return np.arange(self.num_nodes)
        return np.flatnonzero(self.split == which)

    def edge_array(self) -> np.ndarray:
        """Each undirected edge once as a ``(u, v)`` row with ``u < v``."""
        src = np.repeat(np.arange(self.num_nodes), self.degrees())
        keep = src < self.indices
        return np.stack([src[keep], self.indices[keep]], axis=1)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.features, other.features)
            and _opt_equal(self.labels, other.labels)
            and _opt_equal(self.split, other.split)
        )


def _opt_equal(a, b):
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


def from_edges(num_nodes, edges, features, labels=None) -> Graph:
    """Build a Graph from ``edges``; they are symmetrized and self-loops are dropped."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != num_nodes:
        raise DimensionError(
            f"expected {num_nodes} feature rows, got shape {features.shape}")
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) and (edges.min() < 0 or edges.max() >= num_nodes):
        raise MalformedInputError(
            f"edge endpoint out of range for {num_nodes} nodes")
    edges = edges[edges[:, 0] != edges[:, 1]]
    both = np.concatenate([edges, edges[:, ::-1]])
    # unique on a single int64 key sorts by (src, dst)
    keys = np.unique(both[:, 0] * num_nodes + both[:, 1])
    src, dst = np.divmod(keys, num_nodes)
    indptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=num_nodes), out=indptr[1:])
    split = None
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (num_nodes,):
            raise DimensionError(
                f"expected {num_nodes} labels, got {labels.shape}")
        split = hashed_split(num_nodes)
    return Graph(indptr, dst.astype(np.int64), features, labels, split)


def degree(graph: Graph, v: int) -> int:
    if not 0 <= v < graph.num_nodes:
        raise IndexError(f"node {v} out of range [0, {graph.num_nodes})")
    return int(graph.indptr[v + 1] - graph.indptr[v])


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64)
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def hashed_split(num_nodes: int) -> np.ndarray:
    """60/20/20 train/valid/test tags from a hash of the node id."""
    bucket = _splitmix64(np.arange(num_nodes)) % np.uint64(100)
    split = np.full(num_nodes, TEST, dtype=np.int8)
    split[bucket < 80] = VALID
    split[bucket < 60] = TRAIN
    return split


# -- generators ---------------------------------------------------------------

@dataclass(frozen=True)
class SbmParams:
    communities: int = 4
    nodes_per_community: int = 100
    p_in: float = 0.1
    p_out: float = 0.005
    feature_dim: int = 16
    feature_signal: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.p_out < self.p_in <= 1:
            raise ValueError("need 0 <= p_out < p_in <= 1")
        if self.feature_signal <= 0:
            raise ValueError("feature_signal must be positive")
        if self.communities < 1 or self.nodes_per_community < 1 or self.feature_dim < 1:
            raise ValueError("communities, nodes_per_community, feature_dim must be >= 1")


@dataclass(frozen=True)
class RmatParams:
    scale: int = 10
    edge_factor: int = 16
    a: float = 0.57
    b: float = 0.19
    c: float = 0.19
    d: float = 0.05
    feature_dim: int = 128
    seed: int = 0
    max_scale: int = field(default=MAX_RMAT_SCALE, compare=False)

    def __post_init__(self):
        if abs(self.a + self.b + self.c + self.d - 1.0) > 1e-9:
            raise ValueError("RMAT quadrant probabilities must sum to 1")
        if min(self.a, self.b, self.c, self.d) < 0:
            raise ValueError("RMAT quadrant probabilities must be non-negative")
        if self.edge_factor < 1:
            raise ValueError("edge_factor must be >= 1")
        if self.scale < 1:
            raise ValueError("scale must be >= 1")


def _f32(x):
    # generated values must survive the float32 on-disk format unchanged
    return x.astype(np.float32).astype(np.float64)


def generate_sbm(params: SbmParams) -> Graph:
    rng = np.random.default_rng(params.seed)
    n = params.communities * params.nodes_per_community
    labels = np.repeat(np.arange(params.communities), params.nodes_per_community)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], params.p_in, params.p_out)
    keep = rng.random(len(iu)) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    feats = rng.standard_normal((n, params.feature_dim))
    feats[np.arange(n), labels % params.feature_dim] += params.feature_signal
    return from_edges(n, edges, _f32(feats), labels)


def rmat_edges(params: RmatParams, rng) -> np.ndarray:
    """Directed RMAT samples, one row per sample, before symmetrization."""
    if params.scale > params.max_scale:
        raise CapacityError(
            f"RMAT scale {params.scale} exceeds maximum {params.max_scale}")
    m = params.edge_factor << params.scale
    src = np.zeros(m, dtype=np.int64)
    dst = np.zeros(m, dtype=np.int64)
    cum = np.cumsum([params.a, params.b, params.c])
    for _ in range(params.scale):
        quad = np.searchsorted(cum, rng.random(m), side="right")
        src = (src << 1) | (quad >= 2)
        dst = (dst << 1) | (quad % 2 == 1)
    return np.stack([src, dst], axis=1)


def generate_rmat(params: RmatParams) -> Graph:
    rng = np.random.default_rng(params.seed)
    edges = rmat_edges(params, rng)
    n = 1 << params.scale
    feats = rng.standard_normal((n, params.feature_dim))
    return from_edges(n, edges, _f32(feats))


# -- file I/O -----------------------------------------------------------------

def write_features(path, features: np.ndarray) -> None:
    features = np.asarray(features)
    n, dim = features.shape
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, n, dim, 4))
        fh.write(features.astype("<f4").tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        return _read_text_features(raw.decode())
    if len(raw) < _FEATURE_HEADER.size:
        raise MalformedInputError(f"{path}: truncated feature header")
    _, n, dim, width = _FEATURE_HEADER.unpack_from(raw)
    if width not in (4, 8):
        raise MalformedInputError(f"{path}: unsupported scalar width {width}")
    body = raw[_FEATURE_HEADER.size:]
    if len(body) != n * dim * width:
        raise DimensionError(
            f"{path}: header declares {n}x{dim} rows of width {width}, "
            f"body holds {len(body)} bytes")
    dtype = "<f4" if width == 4 else "<f8"
    return np.frombuffer(body, dtype=dtype).reshape(n, dim).astype(np.float64)


def _read_text_features(text):
    rows = [line.split() for line in text.splitlines()
            if line.strip() and not line.lstrip().startswith("#")]
    if not rows:
        raise MalformedInputError("feature file has no rows")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise DimensionError(f"feature rows have differing lengths {sorted(widths)}")
    return np.array(rows, dtype=np.float64)


def read_edge_list(path) -> np.ndarray:
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise MalformedInputError(f"{path}:{lineno}: expected 'u v'")
            try:
                pairs.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise MalformedInputError(f"{path}:{lineno}: non-integer node id") from None
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def load_edge_list(edge_path, feature_path, label_path=None) -> Graph:
    features = read_features(feature_path)
    edges = read_edge_list(edge_path)
    labels = None
    if label_path is not None:
        labels = np.loadtxt(label_path, dtype=np.int64, ndmin=1)
    return from_edges(features.shape[0], edges, features, labels)


def save_graph(graph: Graph, edge_path, feature_path, label_path=None) -> None:
    with open(edge_path, "w") as fh:
        for u, v in graph.edge_array():
            fh.write(f"{u} {v}\n")
    write_features(feature_path, graph.features)
    if label_path is not None and graph.labels is not None:
        with open(label_path, "w") as fh:
            fh.writelines(f"{y}\n" for y in graph.labels)
