"""Chunking and chunk-pair partitions, plus the sweep schedule over them."""

from __future__ import annotations

import csv
import math
import struct
from collections import deque
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .errors import MalformedInputError
from .graph import TRAIN, Graph

INDUCED_CORE = "induced-core"
HALO_1 = "halo-1"
PARTITION_MODES = (INDUCED_CORE, HALO_1)

SNAPSHOT_MAGIC = b"IGSNAP\x00\x00"
SNAPSHOT_VERSION = 1
_SNAP_HEADER = struct.Struct("<8sI4s")


@dataclass(frozen=True)
class ChunkAssignment:
    num_chunks: int
    owner: np.ndarray

    def members(self, chunk: int) -> np.ndarray:
        return np.flatnonzero(self.owner == chunk)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.owner, minlength=self.num_chunks)


def make_chunks(graph: Graph, num_chunks: int, strategy: str = "random",
                seed: int = 0) -> ChunkAssignment:
    n = graph.num_nodes
    if not 2 <= num_chunks <= n:
        raise ValueError(f"need 2 <= chunks <= {n}, got {num_chunks}")
    rng = np.random.default_rng(seed)
    if strategy == "random":
        owner = np.empty(n, dtype=np.int64)
        owner[rng.permutation(n)] = np.arange(n) % num_chunks
    elif strategy == "bfs-grow":
        owner = _bfs_grow(graph, num_chunks, rng)
    else:
        raise ValueError(f"unknown chunking strategy {strategy!r}")
    return ChunkAssignment(num_chunks, owner)


def _spread_seeds(graph, num_chunks, rng):
    n = graph.num_nodes
    adj = csr_matrix((np.ones(len(graph.indices)), graph.indices, graph.indptr), shape=(n, n))
    order = rng.permutation(n)
    seeds = [int(order[0])]
    while len(seeds) < num_chunks:
        dist = dijkstra(adj, unweighted=True, indices=seeds, min_only=True)
        dist[seeds] = -1.0
        # farthest node, ties broken by the seeded permutation
        best = order[np.argmax(dist[order])]
        seeds.append(int(best))
    return seeds


def _bfs_grow(graph, num_chunks, rng):
    """Round-robin multi-source BFS; each chunk claims one node per turn.

    A chunk whose frontier runs dry restarts from a random unclaimed node, so
    sizes end up within one of each other.
    """
    n = graph.num_nodes
    cap = math.ceil(n / num_chunks)
    owner = np.full(n, -1, dtype=np.int64)
    fallback = list(rng.permutation(n)[::-1])
    frontiers = []
    for chunk, s in enumerate(_spread_seeds(graph, num_chunks, rng)):
        owner[s] = chunk
        frontiers.append(deque(graph.neighbors(s).tolist()))
    sizes = [1] * num_chunks
    remaining = n - num_chunks
    while remaining:
        for chunk in range(num_chunks):
            if not remaining or sizes[chunk] >= cap:
                continue
            frontier = frontiers[chunk]
            v = -1
            while frontier:
                cand = frontier.popleft()
                if owner[cand] < 0:
                    v = cand
                    break
            if v < 0:
                while owner[fallback[-1]] >= 0:
                    fallback.pop()
                v = fallback.pop()
            owner[v] = chunk
            sizes[chunk] += 1
            remaining -= 1
            frontier.extend(u for u in graph.neighbors(v).tolist() if owner[u] < 0)
    return owner


@dataclass(frozen=True, eq=False)
class Partition:
    """Core nodes of a chunk pair plus optional halo, in local id space.

    Local ids ``0..len(core)-1`` are core nodes, the rest are halo nodes.
    ``indptr``/``indices`` hold per-local-node aggregation lists.
    """

    base: int
    swept: int
    mode: str
    global_of: np.ndarray
    num_core: int
    indptr: np.ndarray
    indices: np.ndarray
    d_local: np.ndarray
    d_global: np.ndarray
    train_local: np.ndarray
    labels: np.ndarray | None = None

    @property
    def num_local(self) -> int:
        return len(self.global_of)

    @property
    def core(self) -> np.ndarray:
        return self.global_of[:self.num_core]

    @property
    def halo(self) -> np.ndarray:
        return self.global_of[self.num_core:]

    def neighbors(self, local: int) -> np.ndarray:
        return self.indices[self.indptr[local]:self.indptr[local + 1]]

    def local_edge_set(self) -> set:
        """Undirected global edges carried by the aggregation lists."""
        src = np.repeat(self.global_of, np.diff(self.indptr))
        dst = self.global_of[self.indices]
        return {(min(a, b), max(a, b)) for a, b in zip(src.tolist(), dst.tolist())}

    def __eq__(self, other):
        if not isinstance(other, Partition):
            return NotImplemented
        return (
            (self.base, self.swept, self.mode, self.num_core)
            == (other.base, other.swept, other.mode, other.num_core)
            and all(np.array_equal(getattr(self, f), getattr(other, f))
                    for f in ("global_of", "indptr", "indices", "d_local",
                              "d_global", "train_local"))
            and (self.labels is None) == (other.labels is None)
            and (self.labels is None or np.array_equal(self.labels, other.labels))
        )


def whole_graph_partition(graph: Graph) -> Partition:
    """Every node is core; aggregation lists are the full adjacency."""
    n = graph.num_nodes
    deg = graph.degrees()
    train = np.flatnonzero(graph.split == TRAIN) if graph.split is not None else np.arange(n)
    return Partition(-1, -1, INDUCED_CORE, np.arange(n), n, graph.indptr.copy(),
                     graph.indices.copy(), deg.copy(), deg.copy(), train,
                     None if graph.labels is None else graph.labels.copy())


def build_partition(graph: Graph, chunks: ChunkAssignment, base: int, swept: int,
                    mode: str = INDUCED_CORE) -> Partition:
    if base == swept:
        raise ValueError(f"base and swept chunk must differ (both {base})")
    if mode not in PARTITION_MODES:
        raise ValueError(f"unknown partition mode {mode!r}")
    n = graph.num_nodes
    core = np.flatnonzero((chunks.owner == base) | (chunks.owner == swept))
    deg = graph.degrees()
    in_core = np.zeros(n, dtype=bool)
    in_core[core] = True
    src = np.repeat(np.arange(n), deg)
    core_edges = in_core[src]
    nbr_src, nbr_dst = src[core_edges], graph.indices[core_edges]
    if mode == HALO_1:
        halo = np.unique(nbr_dst[~in_core[nbr_dst]])
    else:
        halo = np.empty(0, dtype=np.int64)
        keep = in_core[nbr_dst]
        nbr_src, nbr_dst = nbr_src[keep], nbr_dst[keep]
    global_of = np.concatenate([core, halo])
    local_of = np.full(n, -1, dtype=np.int64)
    local_of[global_of] = np.arange(len(global_of))
    counts = np.zeros(len(global_of), dtype=np.int64)
    np.add.at(counts, local_of[nbr_src], 1)
    indptr = np.zeros(len(global_of) + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    # nbr_src is ascending in global id, hence in local id over the core
    indices = local_of[nbr_dst]
    if graph.split is not None:
        train_local = np.flatnonzero(graph.split[core] == TRAIN)
    else:
        train_local = np.arange(len(core))
    labels = None if graph.labels is None else graph.labels[global_of]
    return Partition(base, swept, mode, global_of, len(core), indptr, indices,
                     counts, deg[global_of].copy(), train_local, labels)


@dataclass(frozen=True)
class SweepSchedule:
    num_chunks: int
    num_workers: int
    assignments: tuple  # [super-epoch][worker] -> (base, swept)

    @property
    def cycle_length(self) -> int:
        return len(self.assignments)

    def pair(self, worker: int, super_epoch: int) -> tuple:
        """(base, swept) for a 0-based super-epoch, wrapping around the cycle."""
        return self.assignments[super_epoch % self.cycle_length][worker]


def sweep_schedule(num_chunks: int, num_workers: int) -> SweepSchedule:
    C, W = num_chunks, num_workers
    if C < 2:
        raise ValueError("need at least 2 chunks")
    if not 1 <= W <= C:
        raise ValueError(f"need 1 <= workers <= chunks, got W={W}, C={C}")
    if W == C:
        rounds = [tuple((w, (w + t) % C) for w in range(W)) for t in range(1, C)]
        return SweepSchedule(C, W, tuple(rounds))
    pairs = list(combinations(range(C), 2))
    length = math.ceil(len(pairs) / W)
    rounds = []
    for t in range(length):
        # idle slots in the last round wrap around to the start of the list
        rounds.append(tuple(pairs[(t * W + w) % len(pairs)] for w in range(W)))
    return SweepSchedule(C, W, tuple(rounds))


@dataclass(frozen=True)
class CoverageReport:
    num_chunks: int
    first_covered: dict  # (i, j) -> 1-based super-epoch
    missing: tuple

    @property
    def covered(self) -> tuple:
        return tuple(sorted(self.first_covered))

    @property
    def complete(self) -> bool:
        return not self.missing


def pair_coverage(schedule: SweepSchedule) -> CoverageReport:
    first = {}
    for t, round_ in enumerate(schedule.assignments, 1):
        for base, swept in round_:
            first.setdefault((min(base, swept), max(base, swept)), t)
    missing = tuple(p for p in combinations(range(schedule.num_chunks), 2) if p not in first)
    return CoverageReport(schedule.num_chunks, dict(sorted(first.items())), missing)


# -- serialization ------------------------------------------------------------

def write_chunks_csv(path, chunks: ChunkAssignment) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node", "chunk"])
        writer.writerows(enumerate(chunks.owner.tolist()))


def read_chunks_csv(path) -> ChunkAssignment:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    owner = np.array([int(r["chunk"]) for r in rows], dtype=np.int64)
    if not np.array_equal([int(r["node"]) for r in rows], np.arange(len(rows))):
        raise MalformedInputError(f"{path}: node column must be 0..n-1 in order")
    return ChunkAssignment(int(owner.max()) + 1, owner)


def _write_snapshot(path, kind, arrays):
    with open(path, "wb") as fh:
        fh.write(_SNAP_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, kind))
        np.savez(fh, **arrays)


def _read_snapshot(path, kind):
    with open(path, "rb") as fh:
        raw = fh.read(_SNAP_HEADER.size)
        if len(raw) < _SNAP_HEADER.size:
            raise MalformedInputError(f"{path}: truncated snapshot header")
        magic, version, got = _SNAP_HEADER.unpack(raw)
        if magic != SNAPSHOT_MAGIC or got != kind:
            raise MalformedInputError(f"{path}: not a {kind.decode()} snapshot")
        if version != SNAPSHOT_VERSION:
            raise MalformedInputError(f"{path}: unsupported snapshot version {version}")
        with np.load(fh) as data:
            return {k: data[k] for k in data.files}


def save_partition(path, part: Partition) -> None:
    meta = np.array([part.base, part.swept, PARTITION_MODES.index(part.mode), part.num_core])
    _write_snapshot(path, b"PART", dict(
        meta=meta, global_of=part.global_of, indptr=part.indptr, indices=part.indices,
        d_local=part.d_local, d_global=part.d_global, train_local=part.train_local,
        **({} if part.labels is None else {"labels": part.labels})))


def load_partition(path) -> Partition:
    d = _read_snapshot(path, b"PART")
    base, swept, mode, num_core = (int(x) for x in d["meta"])
    return Partition(base, swept, PARTITION_MODES[mode], d["global_of"], num_core,
                     d["indptr"], d["indices"], d["d_local"], d["d_global"],
                     d["train_local"], d.get("labels"))


def save_schedule(path, schedule: SweepSchedule) -> None:
    _write_snapshot(path, b"SCHD", dict(
        shape=np.array([schedule.num_chunks, schedule.num_workers]),
        assignments=np.array(schedule.assignments, dtype=np.int64)))


def load_schedule(path) -> SweepSchedule:
    d = _read_snapshot(path, b"SCHD")
    C, W = (int(x) for x in d["shape"])
    rounds = tuple(tuple((int(b), int(s)) for b, s in r) for r in d["assignments"])
    return SweepSchedule(C, W, rounds)
