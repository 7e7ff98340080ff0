"""Brute-force checks for the estimators and the model gradient.

The reference gradient here is computed with whole-graph sparse matrix
algebra and its own backward pass, sharing no code with ``model``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix, diags, identity

from .correction import (
    NeighborProbabilities, apply_node_level, batch_factor_general, batch_node_weights,
    node_weight,
)
from .errors import CapacityError, SupportViolationError
from .graph import TRAIN, Graph
from .model import ModelParams, loss_and_grad
from .partition import INDUCED_CORE, build_partition, pair_coverage
from .sampler import full_partition_batch, sample_batch

MAX_EXACT_NODES = 10_000


@dataclass
class OracleReport:
    name: str
    reference: object
    estimate: object
    abs_error: float
    rel_error: float
    samples: int
    tolerance: float
    passed: bool = field(init=False)
    detail: str = ""

    def __post_init__(self):
        self.passed = bool(self.rel_error <= self.tolerance)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (f"{flag}  {self.name:<40} rel_err={self.rel_error:.3e} "
                f"tol={self.tolerance:.1e} n={self.samples} {self.detail}").rstrip()


REPORT_COLUMNS = ("name", "passed", "abs_error", "rel_error", "tolerance", "samples", "detail")


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in reports:
        writer.writerow([r.name, int(r.passed), f"{r.abs_error:.6e}", f"{r.rel_error:.6e}",
                         f"{r.tolerance:.1e}", r.samples, r.detail])
    return buf.getvalue()


def reports_to_text(reports) -> str:
    return "\n".join(r.line() for r in reports) + "\n"


def relative_error(estimate, reference, floor=1e-8) -> float:
    """Largest elementwise ``|a-b| / max(|a|, |b|, floor)``."""
    a, b = np.asarray(estimate, dtype=np.float64), np.asarray(reference, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


# -- exact full-graph gradient ------------------------------------------------

def _adjacency(graph):
    n = graph.num_nodes
    return csr_matrix((np.ones(len(graph.indices)), graph.indices, graph.indptr), shape=(n, n))


def full_graph_gradient(graph: Graph, params: ModelParams):
    """``(loss, grad)`` of mean cross-entropy over train nodes, full neighborhoods, no dropout."""
    n = graph.num_nodes
    if n > MAX_EXACT_NODES:
        raise CapacityError(f"exact gradient limited to {MAX_EXACT_NODES} nodes, graph has {n}")
    adj = _adjacency(graph)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    if params.arch == "gcn":
        inv_sqrt = diags(1.0 / np.sqrt(deg + 1.0))
        ops = [inv_sqrt @ (adj + identity(n)) @ inv_sqrt]
    else:
        ops = [identity(n, format="csr"), diags(np.where(deg > 0, 1.0 / np.maximum(deg, 1), 0.0)) @ adj]
    mats = params.matrices()
    per_layer = 1 if params.arch == "gcn" else 2
    hs, zs = [graph.features], []
    for layer in range(params.depth):
        ws = mats[per_layer * layer:per_layer * (layer + 1)]
        z = sum((op @ hs[-1]) @ w for op, w in zip(ops, ws))
        zs.append(z)
        hs.append(z if layer == params.depth - 1 else np.maximum(z, 0.0))
    train = graph.nodes_in_split(TRAIN)
    logits = zs[-1][train]
    logits = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    y = graph.labels[train]
    loss = float(-np.mean(np.log(probs[np.arange(len(train)), y])))
    dz = np.zeros_like(zs[-1])
    dz[train] = probs
    dz[train, y] -= 1.0
    dz /= len(train)
    grads = [None] * len(mats)
    for layer in range(params.depth - 1, -1, -1):
        ws = mats[per_layer * layer:per_layer * (layer + 1)]
        dh = np.zeros_like(hs[layer])
        for k, (op, w) in enumerate(zip(ops, ws)):
            grads[per_layer * layer + k] = (op @ hs[layer]).T @ dz
            dh += op.T @ (dz @ w.T)
        if layer:
            dz = dh * (zs[layer - 1] > 0)
    return loss, np.concatenate([g.ravel() for g in grads])


def finite_difference_gradient(fn, theta, eps=1e-5) -> np.ndarray:
    """Central differences of scalar ``fn`` at ``theta``, one coordinate at a time."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = eps
        grad[i] = (fn(theta + step) - fn(theta - step)) / (2 * eps)
    return grad


def batch_finite_difference(batch, params: ModelParams, features, eps=1e-5) -> np.ndarray:
    """Finite-difference gradient of the batch loss (dropout disabled)."""
    return finite_difference_gradient(
        lambda w: loss_and_grad(batch, params.with_weights(w), features)[0],
        params.weights, eps)


def check_gradient(batch, params, features, eps=1e-5, tol=1e-5, name="gradient") -> OracleReport:
    _, analytic = loss_and_grad(batch, params, features)
    numeric = batch_finite_difference(batch, params, features, eps)
    return OracleReport(name, numeric, analytic, float(np.max(np.abs(analytic - numeric))),
                        relative_error(analytic, numeric), params.size, tol)


# -- importance identity ------------------------------------------------------

def verify_importance_identity(d_global: int, local_subset, values, p=None,
                               tol=1e-12) -> OracleReport:
    """Enumerate ``E_{u~q}[(p/q) g(u)]`` and compare with ``sum_{u local} p(u) g(u)``.

    Neighbors are ``0..d_global-1``; ``q`` is uniform over ``local_subset``
    unless ``p`` is given, in which case ``q`` is ``p`` renormalized locally.
    """
    nbrs = list(range(d_global))
    local = sorted(set(local_subset))
    if not local or not set(local) <= set(nbrs):
        raise ValueError("local_subset must be a non-empty subset of the neighbors")
    if p is None:
        probs = NeighborProbabilities.uniform(nbrs, local)
    else:
        probs = NeighborProbabilities(dict(enumerate(p)),
                                      {u: 1 / len(local) for u in local})
    lhs = 0.0
    for u in local:
        lhs += probs.q[u] * node_weight(0, u, probs) * values[u]
    rhs = math.fsum(probs.p[u] * values[u] for u in local)
    err = abs(lhs - rhs)
    detail = f"d_global={d_global} local={local}"
    if len(local) == d_global:
        full = math.fsum(probs.p[u] * values[u] for u in nbrs)
        err = max(err, abs(lhs - full))
    scale = max(abs(rhs), 1.0)
    return OracleReport("importance_identity", rhs, lhs, err, err / scale, len(local), tol,
                        detail=detail)


# -- batch-level projection ---------------------------------------------------

def verify_projection(mu_dim: int, ratio_samples, rng, grid_step=1e-3, tol=2e-3,
                      mu_scale=1.0) -> OracleReport:
    """Grid-search the scalar minimizing ``||E[corr] - c E[g]||`` and compare with the closed form.

    Gradient samples are the fixed vector ``mu`` for every (node, neighbor), so
    ``E[g] = mu`` and ``E[corr] = mean_v mean_u ratio * mu``.
    """
    mu = mu_scale * rng.standard_normal(mu_dim)
    if not np.any(mu):
        raise ValueError("mean gradient must be non-zero")
    c_star = batch_factor_general(ratio_samples)
    per_node = [np.mean([r * mu for r in ratios], axis=0) if len(ratios) else mu
                for ratios in ratio_samples]
    e_corr = np.mean(per_node, axis=0)
    grid = np.arange(0.0, 3 * c_star + grid_step / 2, grid_step)
    objective = np.linalg.norm(e_corr[None, :] - grid[:, None] * mu[None, :], axis=1)
    best = float(grid[np.argmin(objective)])
    err = abs(best - c_star)
    return OracleReport("projection", c_star, best, err, err, len(ratio_samples), tol,
                        detail=f"mu_dim={mu_dim}")


# -- Monte Carlo unbiasedness ---------------------------------------------------

def cycle_partitions(graph, chunks, schedule, mode=INDUCED_CORE) -> list:
    """Every (worker, super-epoch) partition of one schedule cycle."""
    report = pair_coverage(schedule)
    if not report.complete:
        raise SupportViolationError(f"schedule leaves chunk pairs uncovered: {report.missing}")
    return [build_partition(graph, chunks, base, swept, mode)
            for round_ in schedule.assignments for base, swept in round_]


def _trainable(parts):
    return [p for p in parts if p.train_local.size]


def _draw_gradient(part, params, features, fanouts, rng, corrected):
    if all(f < 0 for f in fanouts):
        batch = full_partition_batch(part, params.depth)
    else:
        batch = sample_batch(part, part.train_local, fanouts, rng)
    if corrected:
        return apply_node_level(batch, batch_node_weights(batch), params, features)[1]
    return loss_and_grad(batch, params, features)[1]


def mc_corrected_gradient(graph, chunks, schedule, params, n_samples, rng,
                          mode=INDUCED_CORE, fanouts=None, corrected=True,
                          tol=0.05) -> OracleReport:
    """Average ``n_samples`` batch gradients at frozen ``params``.

    Each draw picks one partition of the schedule cycle uniformly and uses
    all its core train nodes as seeds (the full-partition batch when sampling
    is exhaustive), computing the node-level corrected (or,
    with ``corrected=False``, plain) gradient.  Partitions without train nodes
    cannot form a batch and are left out of the draw.
    """
    parts = _trainable(cycle_partitions(graph, chunks, schedule, mode))
    fanouts = [-1] * params.depth if fanouts is None else list(fanouts)
    exhaustive = all(f < 0 for f in fanouts)
    cache = {}
    ref = full_graph_gradient(graph, params)[1]
    total = np.zeros(params.size)
    total_sq = np.zeros(params.size)
    for _ in range(n_samples):
        i = int(rng.integers(len(parts)))
        if exhaustive:
            if i not in cache:
                cache[i] = _draw_gradient(parts[i], params, graph.features, fanouts, None, corrected)
            g = cache[i]
        else:
            g = _draw_gradient(parts[i], params, graph.features, fanouts, rng, corrected)
        total += g
        total_sq += g * g
    est = total / n_samples
    var = np.maximum(total_sq / n_samples - est * est, 0.0)
    ref_norm = float(np.linalg.norm(ref))
    abs_err = float(np.linalg.norm(est - ref))
    band = float(np.sqrt(var.sum() / n_samples)) / ref_norm
    name = "mc_corrected_gradient" if corrected else "mc_uncorrected_gradient"
    return OracleReport(name, ref, est, abs_err, abs_err / ref_norm, n_samples, tol,
                        detail=f"band={band:.3e}")


def cycle_expectation(graph, chunks, schedule, params, mode=INDUCED_CORE, corrected=True):
    """Exact expectation of one :func:`mc_corrected_gradient` draw with exhaustive neighbors."""
    parts = _trainable(cycle_partitions(graph, chunks, schedule, mode))
    fanouts = [-1] * params.depth
    return np.mean([_draw_gradient(p, params, graph.features, fanouts, None, corrected)
                    for p in parts], axis=0)
