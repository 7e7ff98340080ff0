"""Layered mini-batch construction confined to a single partition.

Every id stored in a batch is a partition-local id, so a batch can only ever
reference nodes the partition holds (core or halo).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .partition import Partition


@dataclass(frozen=True)
class Block:
    """One message-passing layer: targets aggregate from sampled sources.

    ``src[:len(dst)]`` equals ``dst``; ``nbr[indptr[i]:indptr[i+1]]`` are the
    positions in ``src`` sampled for target ``i``.
    """

    dst: np.ndarray
    src: np.ndarray
    indptr: np.ndarray
    nbr: np.ndarray
    d_local: np.ndarray
    d_global: np.ndarray

    @property
    def num_dst(self) -> int:
        return len(self.dst)

    @property
    def num_src(self) -> int:
        return len(self.src)

    @property
    def num_sampled(self) -> np.ndarray:
        return np.diff(self.indptr)


@dataclass(frozen=True)
class MiniBatch:
    blocks: tuple  # blocks[0] consumes input features
    seed_pos: np.ndarray  # positions of the seeds in blocks[-1].dst
    labels: np.ndarray | None
    global_of: np.ndarray
    rng_stamp: tuple = field(default=())

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def seeds(self) -> np.ndarray:
        return self.blocks[-1].dst[self.seed_pos]

    @property
    def input_nodes(self) -> np.ndarray:
        """Global ids whose features feed the first block."""
        return self.global_of[self.blocks[0].src]

    def correction_stats(self, domain: str = "seeds"):
        """``(d_local, d_global, num_sampled)`` over seeds or over every target of every layer."""
        if domain == "seeds":
            top = self.blocks[-1]
            pos = np.unique(self.seed_pos)
            return top.d_local[pos], top.d_global[pos], top.num_sampled[pos]
        if domain == "all-targets":
            return tuple(np.concatenate(parts) for parts in zip(
                *((b.d_local, b.d_global, b.num_sampled) for b in self.blocks)))
        raise ValueError(f"unknown sum domain {domain!r}")

    def referenced_nodes(self) -> np.ndarray:
        return np.unique(np.concatenate([b.src for b in self.blocks]))


def _make_block(part, dst, sampled):
    dst = np.asarray(dst, dtype=np.int64)
    pos = {int(v): i for i, v in enumerate(dst)}
    src = list(dst)
    indptr = np.zeros(len(dst) + 1, dtype=np.int64)
    nbr = []
    for i, row in enumerate(sampled):
        for u in row:
            j = pos.get(u)
            if j is None:
                j = pos[u] = len(src)
                src.append(u)
            nbr.append(j)
        indptr[i + 1] = len(nbr)
    return Block(dst, np.array(src, dtype=np.int64), indptr,
                 np.array(nbr, dtype=np.int64),
                 part.d_local[dst], part.d_global[dst])


def _seed_layout(part, seed_nodes):
    seed_nodes = np.asarray(seed_nodes, dtype=np.int64)
    if seed_nodes.size == 0:
        raise ValueError("empty seed set")
    bad = seed_nodes[(seed_nodes < 0) | (seed_nodes >= part.num_core)]
    if bad.size:
        raise ValueError(f"seed nodes {bad.tolist()} are not core nodes of the partition")
    targets, seed_pos = np.unique(seed_nodes, return_inverse=True)
    return targets, seed_pos


def sample_batch(part: Partition, seed_nodes, fanouts, rng, rng_stamp=()) -> MiniBatch:
    """Top-down k-hop expansion; each target draws ``min(fanout, d_local)`` distinct neighbors.

    ``fanouts[l]`` applies to block ``l`` (block 0 is the input layer); a
    negative fanout keeps every local neighbor.
    """
    targets, seed_pos = _seed_layout(part, seed_nodes)
    blocks = []
    for fanout in reversed(list(fanouts)):
        sampled = []
        for v in targets.tolist():
            nbrs = part.neighbors(v)
            if fanout < 0 or len(nbrs) <= fanout:
                sampled.append(nbrs.tolist())
            else:
                sampled.append(rng.choice(nbrs, size=fanout, replace=False).tolist())
        block = _make_block(part, targets, sampled)
        blocks.append(block)
        targets = block.src
    blocks.reverse()
    labels = None if part.labels is None else part.labels[blocks[-1].dst[seed_pos]]
    return MiniBatch(tuple(blocks), seed_pos, labels, part.global_of, tuple(rng_stamp))


def full_partition_batch(part: Partition, depth: int) -> MiniBatch:
    """Every local node is a target at every layer with its full aggregation list."""
    if part.train_local.size == 0:
        raise ValueError("empty seed set: partition has no train nodes")
    nodes = np.arange(part.num_local)
    block = Block(nodes, nodes, part.indptr.copy(), part.indices.copy(),
                  part.d_local.copy(), part.d_global.copy())
    labels = None if part.labels is None else part.labels[part.train_local]
    return MiniBatch((block,) * depth, part.train_local.copy(), labels, part.global_of)


def epoch_iterator(part: Partition, batch_size: int, rng) -> list:
    """Shuffled core train nodes cut into batches of ``batch_size`` (last may be short)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(part.train_local)
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def dump_batch(batch: MiniBatch) -> str:
    """Plain-text rendering used for fixtures and debugging."""
    lines = [f"batch depth={batch.depth} seeds={batch.seeds.tolist()} stamp={list(batch.rng_stamp)}"]
    if batch.labels is not None:
        lines.append(f"labels {batch.labels.tolist()}")
    for i, b in enumerate(batch.blocks):
        lines.append(f"block {i} dst={b.num_dst} src={b.num_src}")
        for j, v in enumerate(b.dst.tolist()):
            srcs = b.src[b.nbr[b.indptr[j]:b.indptr[j + 1]]].tolist()
            lines.append(f"  {v} <- {srcs} (d_local={b.d_local[j]} d_global={b.d_global[j]})")
    return "\n".join(lines) + "\n"
