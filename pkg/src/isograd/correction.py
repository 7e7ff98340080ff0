"""Coverage-bias correction: importance weights and batch-level scaling factors.

A node ``v`` trained in isolation only sees its ``d_local`` neighbors present
in the partition instead of all ``d_global``.  Per neighbor the importance
ratio is ``p_v(u) / q_v(u)``; under uniform neighbor distributions that is
``d_local / d_global``.  Batch factors collapse the ratios of a batch into one
scalar that multiplies the gradient before the all-reduce.

Stats are ``(d_local, d_global, num_sampled)`` array triples as returned by
:meth:`MiniBatch.correction_stats`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import SupportViolationError
from .model import loss_and_grad
from .partition import HALO_1

KINDS = ("none", "node-level", "batch-uniform", "batch-general", "batch-resampling")


@dataclass(frozen=True)
class CorrectionConfig:
    kind: str = "batch-resampling"
    sum_domain: str = "auto"  # seeds | all-targets | auto
    epsilon: float = 1e-9
    c_max: float = 10.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown correction kind {self.kind!r}")
        if self.sum_domain not in ("seeds", "all-targets", "auto"):
            raise ValueError(f"unknown sum domain {self.sum_domain!r}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.c_max < 1:
            raise ValueError("c_max must be >= 1")

    def domain_for(self, partition_mode: str) -> str:
        if self.sum_domain != "auto":
            return self.sum_domain
        return "all-targets" if partition_mode == HALO_1 else "seeds"


@dataclass(frozen=True)
class NeighborProbabilities:
    p: dict
    q: dict

    def __post_init__(self):
        if self.p and not math.isclose(sum(self.p.values()), 1.0, abs_tol=1e-12):
            raise ValueError("p must sum to 1 over the global neighbors")
        if self.q and not math.isclose(sum(self.q.values()), 1.0, abs_tol=1e-12):
            raise ValueError("q must sum to 1 over the local neighbors")

    @classmethod
    def uniform(cls, global_nbrs, local_nbrs) -> "NeighborProbabilities":
        global_nbrs, local_nbrs = list(global_nbrs), list(local_nbrs)
        if not set(local_nbrs) <= set(global_nbrs):
            raise ValueError("local neighbors must be a subset of the global neighbors")
        return cls({u: 1 / len(global_nbrs) for u in global_nbrs},
                   {u: 1 / len(local_nbrs) for u in local_nbrs})

    @classmethod
    def restricted(cls, p: dict, local_nbrs) -> "NeighborProbabilities":
        """Local distribution proportional to ``p`` on the local support."""
        total = sum(p[u] for u in local_nbrs)
        return cls(dict(p), {u: p[u] / total for u in local_nbrs})


def node_weight(v, u, probs: NeighborProbabilities) -> float:
    """Importance ratio ``p_v(u) / q_v(u)`` for neighbor ``u`` of ``v``."""
    q = probs.q.get(u, 0.0)
    if q <= 0:
        raise SupportViolationError(f"neighbor {u} of node {v} has zero local probability")
    return probs.p.get(u, 0.0) / q


def uniform_ratio(d_local, d_global) -> np.ndarray:
    """``d_local / d_global`` per node; nodes without local neighbors get 1."""
    d_local = np.asarray(d_local, dtype=np.float64)
    d_global = np.asarray(d_global, dtype=np.float64)
    return np.where(d_local > 0, d_local / np.maximum(d_global, 1.0), 1.0)


def uniform_ratio_samples(stats) -> list:
    """Per-node lists of sampled-neighbor ratios under uniform probabilities."""
    d_local, d_global, num_sampled = stats
    ratio = uniform_ratio(d_local, d_global)
    return [np.full(int(k), r) for r, k in zip(ratio, num_sampled)]


def batch_factor_general(ratio_samples) -> float:
    """Mean over nodes of the mean sampled ratio; nodes with no samples count as 1."""
    if len(ratio_samples) == 0:
        raise ValueError("empty sum domain")
    total = 0.0
    for ratios in ratio_samples:
        total += float(np.mean(ratios)) if len(ratios) else 1.0
    return total / len(ratio_samples)


def batch_factor_uniform(stats) -> float:
    d_local, d_global, _ = stats
    if len(d_local) == 0:
        raise ValueError("empty sum domain")
    total = 0.0
    for r in uniform_ratio(d_local, d_global):
        total += r
    return total / len(d_local)


def batch_factor_resampling(stats, epsilon: float = 1e-9, c_max: float = 10.0) -> float:
    """Reciprocal of ``sum_v (d_global/d_local - 1) * |S_v|`` with guards.

    Nodes with ``d_local == 0`` are skipped; a denominator below ``epsilon``
    (full coverage) yields 1, and the result is capped at ``c_max``.
    """
    d_local, d_global, num_sampled = (np.asarray(a, dtype=np.float64) for a in stats)
    denom = 0.0
    for dl, dg, k in zip(d_local, d_global, num_sampled):
        if dl > 0:
            denom += (dg / dl - 1.0) * k
    if denom < epsilon:
        return 1.0
    return min(1.0 / denom, c_max)


def coverage_factor(batch, config: CorrectionConfig, partition_mode: str) -> float:
    """Batch-level factor selected by ``config.kind``; 1 for ``none`` and ``node-level``."""
    if config.kind in ("none", "node-level"):
        return 1.0
    stats = batch.correction_stats(config.domain_for(partition_mode))
    if config.kind == "batch-uniform":
        return batch_factor_uniform(stats)
    if config.kind == "batch-general":
        return batch_factor_general(uniform_ratio_samples(stats))
    return batch_factor_resampling(stats, config.epsilon, config.c_max)


def apply_correction(grad, c: float) -> np.ndarray:
    if not math.isfinite(c) or c <= 0:
        raise ValueError(f"correction factor must be finite and positive, got {c}")
    return c * np.asarray(grad)


def batch_node_weights(batch) -> list:
    """Uniform-case node weights ``d_local/d_global`` for every target of every block."""
    return [uniform_ratio(b.d_local, b.d_global) for b in batch.blocks]


def apply_node_level(batch, weights, params, features, rng=None):
    """``(loss, grad)`` with each target's neighbor-aggregate gradient scaled by its weight."""
    if weights is None or len(weights) != batch.depth:
        raise ValueError("node-level correction needs one weight array per layer")
    for layer, (w, block) in enumerate(zip(weights, batch.blocks)):
        if w is None or len(w) != block.num_dst:
            raise ValueError(f"missing node weights for layer {layer}")
    return loss_and_grad(batch, params, features, rng=rng, node_weights=weights)
