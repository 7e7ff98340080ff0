import numpy as np
import pytest

from isograd import cli
from isograd.engine import METRIC_COLUMNS
from isograd.model import load_params


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "data"
    assert run("generate", "--out", out, "--set", "nodes_per_community=50") == 0
    return out


def test_generate_writes_files_and_manifest(dataset):
    assert sorted(p.name for p in dataset.iterdir()) == ["graph.edges", "graph.feat", "graph.labels", "manifest.txt"]
    manifest = (dataset / "manifest.txt").read_text()
    assert "seed = 0" in manifest and "code_hash = " in manifest
    assert "nodes_per_community = 50" in manifest


def test_generate_is_byte_identical(tmp_path, dataset):
    other = tmp_path / "again"
    assert run("generate", "--out", other, "--set", "nodes_per_community=50") == 0
    for name in ("graph.edges", "graph.feat", "graph.labels", "manifest.txt"):
        assert (dataset / name).read_bytes() == (other / name).read_bytes()


def test_generate_refuses_overwrite(dataset, capsys):
    assert run("generate", "--out", dataset) == 2
    assert "refusing" in capsys.readouterr().err
    assert run("generate", "--out", dataset, "--force") == 0


def test_unknown_key_is_usage_error(tmp_path, capsys):
    assert run("generate", "--out", tmp_path / "x", "--set", "colour=blue") == 2
    assert "colour" in capsys.readouterr().err
    assert run("generate", "--out", tmp_path / "x", "--set", "epochs=many") == 2


def test_config_file_and_override_precedence(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("# experiment\nepochs = 7\nfanouts = 3, 2\nfixed_partitions = true\n")
    resolved = cli.resolve_config(cfg, ["epochs=9"])
    assert resolved["epochs"] == 9 and resolved["fanouts"] == (3, 2)
    assert resolved["fixed_partitions"] is True
    tc = cli.train_config(resolved)
    assert tc.fanouts == (3, 2) and tc.fixed_partitions
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochs 3\n")
    with pytest.raises(cli.UsageError):
        cli.resolve_config(bad)


def test_missing_out_is_usage_error():
    assert run("train") == 2


def test_rmat_generator(tmp_path):
    assert run("generate", "--out", tmp_path / "r", "--set", "generator=rmat", "--set", "scale=5",
               "--set", "feature_dim=3") == 0
    assert not (tmp_path / "r" / "graph.labels").exists()


def test_partition_command(tmp_path, dataset):
    out = tmp_path / "part"
    assert run("partition", "--out", out, "--set", f"dataset={dataset}", "--set", "chunks=3",
               "--set", "workers=3", "--set", "phases_max=3") == 0
    names = sorted(p.name for p in out.iterdir())
    assert "chunks.csv" in names and "schedule.snap" in names
    assert sum(n.startswith("part_") for n in names) == 6


def test_train_smoke(tmp_path, dataset, capsys):
    import time
    out = tmp_path / "train"
    t0 = time.perf_counter()
    assert run("train", "--out", out, "--set", f"dataset={dataset}", "--set", "epochs=2") == 0
    assert time.perf_counter() - t0 < 10
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(METRIC_COLUMNS)
    assert len(lines) == 4
    assert load_params(out / "model.ckpt").arch == "gcn"


def test_train_ablation_and_capacity(tmp_path, dataset, capsys):
    out = tmp_path / "uwfp"
    assert run("train", "--out", out, "--set", f"dataset={dataset}", "--set", "epochs=3",
               "--set", "correction=none", "--set", "fixed_partitions=true", "--set", "phases_max=1") == 0
    printed = capsys.readouterr().out
    assert "peak_resident_partitions=1" in printed
    rows = (out / "metrics.csv").read_text().splitlines()[1:]
    assert {r.split(",")[1] for r in rows} == {"0"}
    assert {r.split(",")[7] for r in rows} == {"1"}


def test_train_bad_dataset_is_runtime_error(tmp_path):
    assert run("train", "--out", tmp_path / "t", "--set", f"dataset={tmp_path / 'none'}") == 3


def test_traffic_command(tmp_path, dataset):
    out = tmp_path / "traffic"
    assert run("traffic", "--out", out, "--set", f"dataset={dataset}", "--set", "traffic_partitions=1,2",
               "--set", "traffic_strategies=random") == 0
    lines = (out / "traffic.csv").read_text().splitlines()
    assert lines[0] == "partitions,strategy,bytes"
    assert lines[1] == "1,random,0"
    assert int(lines[2].split(",")[2]) > 0


def test_verify_only_coverage(tmp_path, capsys):
    assert run("verify", "--only", "coverage", "--out", tmp_path / "v") == 0
    text = capsys.readouterr().out
    assert "coverage[C=8,W=8]" in text and "gradient" not in text
    assert (tmp_path / "v" / "verify.csv").read_text().startswith("name,passed")


def test_verify_unknown_suite():
    assert run("verify", "--only", "everything") == 2


def test_verify_fails_on_wrong_uniform_factor(monkeypatch, capsys):
    from isograd import oracle
    monkeypatch.setattr(oracle, "batch_factor_general", lambda rs: float(sum(np.mean(r) if len(r) else 1.0 for r in rs)))
    assert run("verify", "--only", "projection") == 1
    assert "FAIL" in capsys.readouterr().out


def test_default_verify_suite_passes(capsys):
    code = run("verify")
    out = capsys.readouterr().out
    assert code == 0, out
