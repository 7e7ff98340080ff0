"""Phase-parallel training loop around a simulated all-reduce.

Workers are simulated in-process.  Within a phase every active worker computes
a gradient on its own partition and scales it by its coverage factor; a single
reducer averages the results in worker-id order.  Workers
may run on threads (``concurrent=True``); results are bit-identical to the
sequential path because every random stream is derived from
``(seed, stream, epoch, worker, iteration)`` and reduction order is fixed.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import correction as corr
from .errors import WorkerError
from .graph import TEST, TRAIN, VALID, Graph
from .model import ModelParams, forward, init_params, loss_and_grad
from .partition import (
    INDUCED_CORE, PARTITION_MODES, build_partition, make_chunks, sweep_schedule,
    whole_graph_partition,
)
from .sampler import Block, MiniBatch, epoch_iterator, sample_batch

log = logging.getLogger(__name__)

FEATURE_BYTES = 4
GRAD_BYTES = 8
INDEX_BYTES = 8

DEFAULT_FANOUTS = {1: (10,), 2: (25, 10), 3: (15, 10, 5), 4: (20, 15, 10, 5)}

METRIC_COLUMNS = ("epoch", "super_epoch", "phases", "loss", "train_acc", "valid_acc",
                  "test_acc", "coverage_factor_mean", "grad_bytes", "remote_bytes",
                  "repartition_bytes", "seconds")

# named random sub-streams hanging off the root seed
STREAMS = {"init": 1, "chunks": 2, "sampler": 3, "dropout": 4, "order": 5}


def substream(seed: int, name: str, *keys) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(STREAMS[name], *keys))
    return np.random.default_rng(ss)


@dataclass(frozen=True)
class TrainConfig:
    arch: str = "gcn"
    depth: int = 2
    fanouts: tuple = ()
    hidden_dim: int = 128
    learning_rate: float = 0.003
    dropout: float = 0.5
    batch_size: int = 1000
    epochs: int = 10
    chunks: int = 4
    workers: int = 4
    phases_max: int = 4
    correction: str = "batch-resampling"
    sum_domain: str = "auto"
    epsilon: float = 1e-9
    c_max: float = 10.0
    partition_mode: str = INDUCED_CORE
    chunk_strategy: str = "random"
    fixed_partitions: bool = False
    optimizer: str = "adam"
    seed: int = 0
    concurrent: bool = False
    deficit_decay: float = 0.9
    deficit_threshold: float = 0.5
    streak_threshold: int = 20
    record_wall_time: bool = False

    def __post_init__(self):
        if not self.fanouts:
            object.__setattr__(self, "fanouts", DEFAULT_FANOUTS.get(self.depth, (10,) * self.depth))
        object.__setattr__(self, "fanouts", tuple(int(f) for f in self.fanouts))
        if len(self.fanouts) != self.depth:
            raise ValueError(f"need {self.depth} fanouts, got {len(self.fanouts)}")
        if not 1 <= self.phases_max <= self.workers <= self.chunks:
            raise ValueError("need 1 <= phases_max <= workers <= chunks")
        if self.chunks == 1 and self.workers != 1:
            raise ValueError("a single chunk admits a single worker")
        if self.partition_mode not in PARTITION_MODES:
            raise ValueError(f"unknown partition mode {self.partition_mode!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        self.correction_config  # validates the correction fields

    @property
    def correction_config(self) -> corr.CorrectionConfig:
        return corr.CorrectionConfig(self.correction, self.sum_domain, self.epsilon, self.c_max)

    def replace(self, **changes) -> "TrainConfig":
        if "depth" in changes and "fanouts" not in changes:
            changes["fanouts"] = ()
        return dataclasses.replace(self, **changes)


# -- reduction and optimizers -------------------------------------------------

def all_reduce(grads) -> np.ndarray:
    """Elementwise mean accumulated in the given (worker-id) order."""
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if not grads:
        raise ValueError("all_reduce needs at least one gradient")
    shape = grads[0].shape
    total = np.zeros(shape)
    for w, g in enumerate(grads):
        if g.shape != shape:
            raise ValueError(f"gradient layout mismatch at worker {w}: {g.shape} vs {shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient entry from worker {w}")
        total += g
    return total / len(grads)


def optimizer_step(params: ModelParams, grad, lr: float) -> ModelParams:
    """Plain SGD: ``theta - lr * grad``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.weights.shape:
        raise ValueError("gradient does not match parameter layout")
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient")
    return params.with_weights(params.weights - lr * grad)


class Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grad):
        return optimizer_step(params, grad, self.lr)


class Adam:
    """Adam with bias correction; moment state persists across phases and epochs."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params, grad):
        grad = np.asarray(grad, dtype=np.float64)
        if not np.all(np.isfinite(grad)):
            raise ValueError("non-finite gradient")
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return params.with_weights(params.weights - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))


def make_optimizer(name, lr):
    return Adam(lr) if name == "adam" else Sgd(lr)


# -- bookkeeping ----------------------------------------------------------------

@dataclass
class TrafficLedger:
    remote_feature_bytes: list = field(default_factory=list)
    remote_activation_bytes: list = field(default_factory=list)
    gradient_bytes: list = field(default_factory=list)
    active_workers: list = field(default_factory=list)
    repartition_bytes: int = 0

    def record(self, active, remote_feat, remote_act, grad_bytes):
        self.active_workers.append(active)
        self.remote_feature_bytes.append(remote_feat)
        self.remote_activation_bytes.append(remote_act)
        self.gradient_bytes.append(grad_bytes)

    @property
    def iterations(self) -> int:
        return len(self.gradient_bytes)

    def totals(self) -> dict:
        return {
            "gradient_bytes": sum(self.gradient_bytes),
            "remote_bytes": sum(self.remote_feature_bytes) + sum(self.remote_activation_bytes),
            "repartition_bytes": self.repartition_bytes,
        }


@dataclass
class ControllerState:
    target_length: int
    fixed: bool = False
    super_epoch: int = 0
    epochs_in_super_epoch: int = 0
    running_coverage: float = 1.0
    deficit_streak: int = 0
    decay: float = 0.9
    deficit_threshold: float = 0.5
    streak_threshold: int = 20

    @property
    def deficit(self) -> float:
        return 1.0 - self.running_coverage

    def observe(self, coverage: float) -> None:
        self.running_coverage = self.decay * self.running_coverage + (1 - self.decay) * coverage
        if self.deficit > self.deficit_threshold:
            self.deficit_streak += 1
        else:
            self.deficit_streak = 0

    def advance(self) -> None:
        self.super_epoch += 1
        self.epochs_in_super_epoch = 0
        self.running_coverage = 1.0
        self.deficit_streak = 0


def controller_should_switch(state: ControllerState) -> bool:
    if state.fixed:
        return False
    if state.epochs_in_super_epoch >= state.target_length:
        return True
    return (state.deficit_streak >= state.streak_threshold
            and state.deficit > state.deficit_threshold)


def target_length(epochs: int, chunks: int) -> int:
    """Epochs per super-epoch so a sweep cycle of ``chunks - 1`` super-epochs spans the run."""
    if chunks < 2:
        return max(epochs, 1)
    return max(1, math.ceil(epochs / (chunks - 1)))


@dataclass
class EpochRow:
    epoch: int
    super_epoch: int
    phases: int
    loss: float
    train_acc: float
    valid_acc: float
    test_acc: float
    coverage_factor_mean: float
    grad_bytes: int
    remote_bytes: int
    repartition_bytes: int
    seconds: float
    steps: int = 0
    phase_iterations: tuple = ()


@dataclass
class TrainReport:
    config: TrainConfig
    rows: list
    params: ModelParams
    peak_resident: int
    ledger: TrafficLedger
    error: str | None = None

    @property
    def final(self) -> EpochRow:
        return self.rows[-1]

    def csv_text(self, include_time=None) -> str:
        include_time = self.config.record_wall_time if include_time is None else include_time
        lines = [",".join(METRIC_COLUMNS)]
        for r in self.rows:
            lines.append(",".join([
                str(r.epoch), str(r.super_epoch), str(r.phases), f"{r.loss:.10g}",
                f"{r.train_acc:.6f}", f"{r.valid_acc:.6f}", f"{r.test_acc:.6f}",
                f"{r.coverage_factor_mean:.10g}", str(r.grad_bytes), str(r.remote_bytes),
                str(r.repartition_bytes), f"{r.seconds:.3f}" if include_time else "0"]))
        return "\n".join(lines) + "\n"

    def write_csv(self, path, include_time=None) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.csv_text(include_time))


def read_metrics_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- partitions and evaluation --------------------------------------------------

class PartitionStore:
    """Materializes worker partitions on demand and tracks how many are resident."""

    def __init__(self, graph, chunks, schedule, mode, capacity):
        self.graph, self.chunks, self.schedule = graph, chunks, schedule
        self.mode, self.capacity = mode, capacity
        self.super_epoch = 0
        self.resident = {}
        self.peak = 0

    def pair(self, worker):
        if self.schedule is None:
            return (-1, -1)
        return self.schedule.pair(worker, self.super_epoch)

    def acquire(self, worker):
        if worker not in self.resident:
            if self.schedule is None:
                part = whole_graph_partition(self.graph)
            else:
                base, swept = self.pair(worker)
                part = build_partition(self.graph, self.chunks, base, swept, self.mode)
            self.resident[worker] = part
            self.peak = max(self.peak, len(self.resident))
        return self.resident[worker]

    def release(self, workers):
        for w in workers:
            self.resident.pop(w, None)

    def relayout(self, super_epoch) -> int:
        """Switch to ``super_epoch``; returns the bytes of swept chunks that move."""
        if self.schedule is None:
            return 0
        moved = 0
        deg = self.graph.degrees()
        row = self.graph.feature_dim * FEATURE_BYTES
        for w in range(self.schedule.num_workers):
            old = self.schedule.pair(w, self.super_epoch)
            new = self.schedule.pair(w, super_epoch)
            if old == new:
                continue
            for chunk in set(new) - set(old):
                members = self.chunks.members(chunk)
                moved += len(members) * row + int(deg[members].sum()) * INDEX_BYTES
            self.resident.pop(w, None)
        self.super_epoch = super_epoch
        return moved


def whole_graph_batch(graph: Graph, depth: int) -> MiniBatch:
    """All nodes as targets with full neighborhoods; the seeds are every node."""
    part = whole_graph_partition(graph)
    nodes = np.arange(graph.num_nodes)
    block = Block(nodes, nodes, part.indptr, part.indices, part.d_local, part.d_global)
    return MiniBatch((block,) * depth, nodes, graph.labels, part.global_of)


def evaluate(graph: Graph, params: ModelParams, eval_batch=None) -> dict:
    batch = eval_batch or whole_graph_batch(graph, params.depth)
    logits, _ = forward(batch, params, graph.features)
    pred = logits.argmax(axis=1)
    out = {}
    for name, tag in (("train_acc", TRAIN), ("valid_acc", VALID), ("test_acc", TEST)):
        nodes = graph.nodes_in_split(tag)
        out[name] = float(np.mean(pred[nodes] == graph.labels[nodes])) if nodes.size else 0.0
    return out


# -- training -------------------------------------------------------------------

@dataclass
class EngineState:
    params: ModelParams
    optimizer: object
    controller: ControllerState
    store: PartitionStore
    ledger: TrafficLedger
    epoch: int = 0


def _worker_step(state, config, worker, seeds, epoch, iteration):
    part = state.store.acquire(worker)
    stamp = (config.seed, epoch, worker, iteration)
    batch = sample_batch(part, seeds, config.fanouts,
                         substream(config.seed, "sampler", epoch, worker, iteration), stamp)
    refs = np.concatenate([b.src for b in batch.blocks])
    outside = int(np.count_nonzero((refs < 0) | (refs >= part.num_local)))
    if outside:
        raise RuntimeError(f"batch references {outside} nodes outside the partition")
    drop_rng = substream(config.seed, "dropout", epoch, worker, iteration)
    cfg = config.correction_config
    if cfg.kind == "node-level":
        loss, grad = corr.apply_node_level(batch, corr.batch_node_weights(batch),
                                           state.params, state.store.graph.features, drop_rng)
    else:
        loss, grad = loss_and_grad(batch, state.params, state.store.graph.features, drop_rng)
    c = corr.coverage_factor(batch, cfg, part.mode)
    coverage = corr.batch_factor_uniform(batch.correction_stats(cfg.domain_for(part.mode)))
    return loss, corr.apply_correction(grad, c), c, coverage


def run_phase(active, state: EngineState, config: TrainConfig, epoch: int, pool=None) -> dict:
    """Lock-step data-parallel SGD over the active workers' batch streams."""
    streams = {}
    for w in active:
        part = state.store.acquire(w)
        if part.train_local.size:
            streams[w] = epoch_iterator(part, config.batch_size,
                                        substream(config.seed, "order", epoch, w))
    workers = sorted(streams)
    iterations = max((len(s) for s in streams.values()), default=0)
    losses, factors = [], []
    for it in range(iterations):
        def step(w, it=it):
            seeds = streams[w][it % len(streams[w])]
            try:
                return _worker_step(state, config, w, seeds, epoch, it)
            except Exception as exc:
                raise WorkerError(w, exc) from exc
        results = list(pool.map(step, workers)) if pool else [step(w) for w in workers]
        grad = all_reduce([r[1] for r in results])
        state.params = state.optimizer.step(state.params, grad)
        state.ledger.record(len(workers), 0, 0, len(workers) * state.params.size * GRAD_BYTES)
        state.controller.observe(float(np.mean([r[3] for r in results])))
        losses.extend(r[0] for r in results)
        factors.extend(r[2] for r in results)
    return {"iterations": iterations, "losses": losses, "factors": factors}


def run_epoch(state: EngineState, config: TrainConfig, pool=None) -> dict:
    state.epoch += 1
    workers = list(range(config.workers))
    phases = [workers[i:i + config.phases_max]
              for i in range(0, len(workers), config.phases_max)]
    start = state.ledger.iterations
    losses, factors, iters = [], [], []
    for active in phases:
        out = run_phase(active, state, config, state.epoch, pool)
        losses += out["losses"]
        factors += out["factors"]
        iters.append(out["iterations"])
        if config.phases_max < config.workers:
            state.store.release(active)
    state.controller.epochs_in_super_epoch += 1
    span = slice(start, state.ledger.iterations)
    return {
        "phases": len(phases),
        "phase_iterations": tuple(iters),
        "loss": float(np.mean(losses)) if losses else float("nan"),
        "coverage": float(np.mean(factors)) if factors else 1.0,
        "grad_bytes": sum(state.ledger.gradient_bytes[span]),
        "remote_bytes": sum(state.ledger.remote_feature_bytes[span])
        + sum(state.ledger.remote_activation_bytes[span]),
    }


def setup(graph: Graph, config: TrainConfig) -> EngineState:
    if graph.labels is None:
        raise ValueError("training needs node labels")
    dims = [graph.feature_dim] + [config.hidden_dim] * (config.depth - 1) + [graph.num_classes]
    params = init_params(config.arch, config.depth, dims,
                         int(substream(config.seed, "init").integers(2**63)), config.dropout)
    if config.chunks >= 2:
        chunk_seed = int(substream(config.seed, "chunks").integers(2**63))
        chunks = make_chunks(graph, config.chunks, config.chunk_strategy, chunk_seed)
        schedule = sweep_schedule(config.chunks, config.workers)
    else:
        chunks = schedule = None
    store = PartitionStore(graph, chunks, schedule, config.partition_mode, config.phases_max)
    controller = ControllerState(
        target_length(config.epochs, config.chunks), fixed=config.fixed_partitions,
        decay=config.deficit_decay, deficit_threshold=config.deficit_threshold,
        streak_threshold=config.streak_threshold)
    return EngineState(params, make_optimizer(config.optimizer, config.learning_rate),
                       controller, store, TrafficLedger())


def train(graph: Graph, config: TrainConfig, on_epoch=None) -> TrainReport:
    """Run the full schedule; on a worker error the rows so far are returned with ``error`` set."""
    state = setup(graph, config)
    eval_batch = whole_graph_batch(graph, config.depth)
    clock = time.perf_counter()
    rows = [EpochRow(0, 0, 0, float("nan"), **evaluate(graph, state.params, eval_batch),
                     coverage_factor_mean=1.0, grad_bytes=0, remote_bytes=0,
                     repartition_bytes=0, seconds=0.0)]
    report = TrainReport(config, rows, state.params, 0, state.ledger)
    pool = ThreadPoolExecutor(max_workers=config.phases_max) if config.concurrent else None
    try:
        for _ in range(config.epochs):
            t0 = time.perf_counter()
            out = run_epoch(state, config, pool)
            super_epoch = state.controller.super_epoch
            moved = 0
            if controller_should_switch(state.controller):
                state.controller.advance()
                moved = state.store.relayout(state.controller.super_epoch)
                state.ledger.repartition_bytes += moved
            rows.append(EpochRow(
                state.epoch, super_epoch, out["phases"], out["loss"],
                **evaluate(graph, state.params, eval_batch),
                coverage_factor_mean=out["coverage"], grad_bytes=out["grad_bytes"],
                remote_bytes=out["remote_bytes"], repartition_bytes=moved,
                seconds=time.perf_counter() - t0, steps=sum(out["phase_iterations"]),
                phase_iterations=out["phase_iterations"]))
            if on_epoch:
                on_epoch(rows[-1])
    except WorkerError as exc:
        log.error("training aborted: %s", exc)
        report.error = str(exc)
    finally:
        if pool:
            pool.shutdown()
    report.params = state.params
    report.peak_resident = state.store.peak
    log.debug("trained %d epochs in %.2fs", state.epoch, time.perf_counter() - clock)
    return report


# -- conventional-training traffic model ------------------------------------------

@dataclass(frozen=True)
class TrafficEstimate:
    num_partitions: int
    feature_bytes: np.ndarray
    activation_bytes: np.ndarray

    @property
    def per_partition(self) -> np.ndarray:
        return self.feature_bytes + self.activation_bytes

    @property
    def mean_per_partition(self) -> float:
        return float(self.per_partition.mean())


def conventional_traffic_estimate(graph: Graph, owner, fanouts, batch_size, feature_dim,
                                  hidden_dim, epochs=1, seed=0) -> TrafficEstimate:
    """Remote bytes a partition would fetch per epoch when sampling over the whole graph.

    ``owner`` maps node to partition.  Layer-0 sources owned elsewhere cost a
    feature row, deeper-layer remote sources an activation row.
    """
    owner = np.asarray(owner)
    num_parts = int(owner.max()) + 1
    whole = whole_graph_partition(graph)
    feat = np.zeros(num_parts, dtype=np.int64)
    act = np.zeros(num_parts, dtype=np.int64)
    train_mask = np.zeros(graph.num_nodes, dtype=bool)
    train_mask[whole.train_local] = True
    rng = np.random.default_rng(seed)
    for p in range(num_parts):
        seeds_all = np.flatnonzero((owner == p) & train_mask)
        for _ in range(epochs):
            order = rng.permutation(seeds_all)
            for i in range(0, len(order), batch_size):
                batch = sample_batch(whole, order[i:i + batch_size], fanouts, rng)
                for layer, block in enumerate(batch.blocks):
                    remote = int(np.count_nonzero(owner[block.src] != p))
                    if layer == 0:
                        feat[p] += remote * feature_dim * FEATURE_BYTES
                    else:
                        act[p] += remote * hidden_dim * FEATURE_BYTES
    return TrafficEstimate(num_parts, feat, act)
