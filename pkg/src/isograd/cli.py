"""Command-line entry point: generate, partition, train, traffic, verify.

Configuration is a flat ``key = value`` file; ``--set key=value`` overrides
entries.  Keys are TrainConfig, SbmParams and RmatParams field names plus the
few command options listed in ``EXTRA_KEYS``.  One root ``seed`` feeds every
random sub-stream.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import engine, oracle
from .errors import WorkerError
from .graph import RmatParams, SbmParams, generate_rmat, generate_sbm, load_edge_list, save_graph
from .model import init_params, save_params
from .partition import (
    build_partition, make_chunks, pair_coverage, save_partition, save_schedule, sweep_schedule,
    whole_graph_partition, write_chunks_csv,
)
from .sampler import full_partition_batch

log = logging.getLogger("isograd")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3

EXTRA_KEYS = {
    "generator": "sbm",
    "dataset": "",
    "traffic_partitions": "2,4,8",
    "traffic_strategies": "random,bfs-grow",
    "mc_samples": 5000,
}

DATA_FILES = ("graph.edges", "graph.feat", "graph.labels")
SUITES = ("gradient", "identity", "projection", "unbiasedness", "coverage")


class UsageError(Exception):
    pass


def _fields(cls):
    return {f.name: f for f in dataclasses.fields(cls)}


def known_keys() -> dict:
    """Key -> default value over every configurable name."""
    keys = dict(EXTRA_KEYS)
    for cls in (SbmParams, RmatParams, engine.TrainConfig):
        for name, f in _fields(cls).items():
            keys.setdefault(name, f.default)
    keys["seed"] = 0
    return keys


def _coerce(key, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace(",", " ").split())
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def resolve_config(config_path=None, overrides=()) -> dict:
    raw = {}
    if config_path:
        try:
            raw.update(parse_config_text(Path(config_path).read_text()))
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = value
    keys = known_keys()
    unknown = sorted(set(raw) - set(keys))
    if unknown:
        raise UsageError(f"unknown config key: {', '.join(unknown)}")
    cfg = dict(keys)
    for key, value in raw.items():
        cfg[key] = _coerce(key, value, keys[key])
    return cfg


def _build(cls, cfg):
    return cls(**{k: cfg[k] for k in _fields(cls) if k in cfg})


def train_config(cfg) -> engine.TrainConfig:
    return _build(engine.TrainConfig, cfg)


def render_config(cfg) -> str:
    def fmt(v):
        return ",".join(map(str, v)) if isinstance(v, tuple) else str(v).lower() if isinstance(v, bool) else str(v)
    return "".join(f"{k} = {fmt(cfg[k])}\n" for k in sorted(cfg))


def code_hash() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def write_manifest(out: Path, command, cfg) -> None:
    text = (f"command = {command}\nseed = {cfg['seed']}\ncode_hash = {code_hash()}\n"
            f"# resolved configuration\n{render_config(cfg)}")
    (out / "manifest.txt").write_text(text)


def _prepare_out(out: Path, names, force) -> None:
    out.mkdir(parents=True, exist_ok=True)
    clash = [n for n in names if (out / n).exists()]
    if clash and not force:
        raise UsageError(f"refusing to overwrite {', '.join(clash)} in {out} (use --force)")


def generate_graph(cfg):
    if cfg["generator"] == "sbm":
        return generate_sbm(_build(SbmParams, cfg))
    if cfg["generator"] == "rmat":
        return generate_rmat(_build(RmatParams, cfg))
    raise UsageError(f"unknown generator {cfg['generator']!r}")


def load_dataset(cfg):
    """The dataset directory when ``dataset`` is set, else a freshly generated graph."""
    if not cfg["dataset"]:
        return generate_graph(cfg)
    d = Path(cfg["dataset"])
    labels = d / DATA_FILES[2]
    return load_edge_list(d / DATA_FILES[0], d / DATA_FILES[1], labels if labels.exists() else None)


def _int_list(raw, key):
    try:
        return [int(x) for x in str(raw).replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"bad list for {key}: {raw!r}") from None


# -- commands ---------------------------------------------------------------------

def cmd_generate(cfg, out: Path, force=False, **_):
    _prepare_out(out, DATA_FILES + ("manifest.txt",), force)
    graph = generate_graph(cfg)
    save_graph(graph, out / DATA_FILES[0], out / DATA_FILES[1],
               out / DATA_FILES[2] if graph.labels is not None else None)
    write_manifest(out, "generate", cfg)
    print(f"wrote {graph.num_nodes} nodes, {graph.num_edges} edges to {out}")
    return EXIT_OK


def cmd_partition(cfg, out: Path, force=False, **_):
    _prepare_out(out, ("chunks.csv", "schedule.snap", "manifest.txt"), force)
    graph = load_dataset(cfg)
    tc = train_config(cfg)
    if tc.chunks < 2:
        raise UsageError("partition needs chunks >= 2")
    chunk_seed = int(engine.substream(tc.seed, "chunks").integers(2**63))
    chunks = make_chunks(graph, tc.chunks, tc.chunk_strategy, chunk_seed)
    schedule = sweep_schedule(tc.chunks, tc.workers)
    write_chunks_csv(out / "chunks.csv", chunks)
    save_schedule(out / "schedule.snap", schedule)
    for t, round_ in enumerate(schedule.assignments):
        for w, (base, swept) in enumerate(round_):
            part = build_partition(graph, chunks, base, swept, tc.partition_mode)
            save_partition(out / f"part_t{t + 1}_w{w}.snap", part)
    report = pair_coverage(schedule)
    print(f"chunks={tc.chunks} workers={tc.workers} cycle_length={schedule.cycle_length} "
          f"sizes={chunks.sizes().tolist()} missing_pairs={len(report.missing)}")
    write_manifest(out, "partition", cfg)
    return EXIT_OK


def cmd_train(cfg, out: Path, force=False, **_):
    _prepare_out(out, ("metrics.csv", "model.ckpt", "manifest.txt"), force)
    graph = load_dataset(cfg)
    tc = train_config(cfg)

    def progress(row):
        log.info("epoch %d super_epoch %d loss %.4f test_acc %.4f c=%.4g",
                 row.epoch, row.super_epoch, row.loss, row.test_acc, row.coverage_factor_mean)

    report = engine.train(graph, tc, on_epoch=progress)
    report.write_csv(out / "metrics.csv")
    save_params(out / "model.ckpt", report.params)
    write_manifest(out, "train", cfg)
    f = report.final
    print(f"epochs={f.epoch} test_acc={f.test_acc:.4f} valid_acc={f.valid_acc:.4f} "
          f"peak_resident_partitions={report.peak_resident}")
    if report.error:
        print(f"error: {report.error}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_traffic(cfg, out: Path, force=False, **_):
    _prepare_out(out, ("traffic.csv", "manifest.txt"), force)
    graph = load_dataset(cfg)
    tc = train_config(cfg)
    rows = ["partitions,strategy,bytes"]
    for strategy in str(cfg["traffic_strategies"]).replace(",", " ").split():
        for parts in _int_list(cfg["traffic_partitions"], "traffic_partitions"):
            if parts == 1:
                owner = np.zeros(graph.num_nodes, dtype=np.int64)
            else:
                owner = make_chunks(graph, parts, strategy, tc.seed).owner
            est = engine.conventional_traffic_estimate(
                graph, owner, tc.fanouts, tc.batch_size, graph.feature_dim, tc.hidden_dim,
                seed=tc.seed)
            rows.append(f"{parts},{strategy},{est.mean_per_partition:.0f}")
    text = "\n".join(rows) + "\n"
    (out / "traffic.csv").write_text(text)
    write_manifest(out, "traffic", cfg)
    print(text, end="")
    return EXIT_OK


def verify_suite(cfg, only=None) -> list:
    chosen = SUITES if not only else only
    bad = sorted(set(chosen) - set(SUITES))
    if bad:
        raise UsageError(f"unknown suite: {', '.join(bad)} (choose from {', '.join(SUITES)})")
    seed = cfg["seed"]
    reports = []
    if "gradient" in chosen:
        g = generate_sbm(SbmParams(2, 5, 0.6, 0.1, feature_dim=5, seed=3))
        whole = whole_graph_partition(g)
        for arch in ("gcn", "sage"):
            for depth in (1, 2, 3):
                params = init_params(arch, depth, [5] + [6] * (depth - 1) + [2], seed)
                batch = full_partition_batch(whole, depth)
                reports.append(oracle.check_gradient(batch, params, g.features,
                                                     name=f"gradient[{arch},{depth}]"))
    if "identity" in chosen:
        reports.extend(identity_cases())
    if "projection" in chosen:
        rng = np.random.default_rng(seed)
        for dim in (1, 8, 64):
            for name, samples in projection_ratio_sets(rng).items():
                r = oracle.verify_projection(dim, samples, rng)
                r.name = f"projection[{dim},{name}]"
                reports.append(r)
    if "unbiasedness" in chosen:
        reports.extend(unbiasedness_reports(cfg["mc_samples"], seed))
    if "coverage" in chosen:
        for c in range(2, 9):
            for w in range(1, c + 1):
                rep = pair_coverage(sweep_schedule(c, w))
                reports.append(oracle.OracleReport(
                    f"coverage[C={c},W={w}]", 0, len(rep.missing), len(rep.missing),
                    float(len(rep.missing)), c * (c - 1) // 2, 0.0))
    return reports


def identity_cases() -> list:
    """Every non-empty local subset for ``d_global <= 8`` with fixed pseudo-random values."""
    out = []
    rng = np.random.default_rng(12345)
    worst, count = None, 0
    for d in range(1, 9):
        values = rng.standard_normal(d)
        for mask in range(1, 2 ** d):
            local = [u for u in range(d) if mask >> u & 1]
            r = oracle.verify_importance_identity(d, local, values)
            count += 1
            if worst is None or r.rel_error > worst.rel_error:
                worst = r
    worst.name = "importance_identity[all subsets d<=8]"
    worst.samples = count
    out.append(worst)
    return out


def projection_ratio_sets(rng, nodes=200) -> dict:
    return {
        "constant": [np.full(3, 0.6) for _ in range(nodes)],
        "two-point": [rng.choice([0.5, 1.0], size=3) for _ in range(nodes)],
        "uniform": [rng.uniform(0.1, 1.0, size=3) for _ in range(nodes)],
    }


def unbiasedness_setup(seed):
    graph = generate_sbm(SbmParams(3, 8, 0.5, 0.1, feature_dim=8, seed=seed))
    chunks = make_chunks(graph, 3, "random", seed)
    schedule = sweep_schedule(3, 3)
    params = init_params("sage", 1, [8, 3], seed)
    return graph, chunks, schedule, params


def unbiasedness_reports(n_samples, seed) -> list:
    graph, chunks, schedule, params = unbiasedness_setup(seed)
    rng = np.random.default_rng(seed)
    corrected = oracle.mc_corrected_gradient(graph, chunks, schedule, params, n_samples, rng)
    plain = oracle.mc_corrected_gradient(graph, chunks, schedule, params, n_samples, rng,
                                         corrected=False)
    plain.tolerance = float("inf")
    plain.passed = True
    return [corrected, plain]


def cmd_verify(cfg, out: Path | None = None, force=False, only=None, **_):
    if out is not None:
        _prepare_out(out, ("verify.txt", "verify.csv", "manifest.txt"), force)
    reports = verify_suite(cfg, only)
    text = oracle.reports_to_text(reports)
    print(text, end="")
    failed = sum(not r.passed for r in reports)
    print(f"{len(reports) - failed}/{len(reports)} checks passed")
    if out is not None:
        (out / "verify.txt").write_text(text)
        (out / "verify.csv").write_text(oracle.reports_to_csv(reports))
        write_manifest(out, "verify", cfg)
    return EXIT_VERIFY if failed else EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "partition": cmd_partition,
    "train": cmd_train,
    "traffic": cmd_traffic,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isograd", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--only", help="comma-separated verify suites: " + ",".join(SUITES))
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.config, args.set)
        if args.out is None and args.command != "verify":
            raise UsageError(f"{args.command} needs --out")
        only = [s.strip() for s in args.only.split(",") if s.strip()] if args.only else None
        out = Path(args.out) if args.out else None
        return COMMANDS[args.command](cfg, out=out, force=args.force, only=only)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (WorkerError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
