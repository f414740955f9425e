import csv
import hashlib
import json

import numpy as np
import pytest

from fedrir import cli
from fedrir import params as P
from fedrir import tensor as T
from fedrir.config import ConfigError, ExperimentConfig

TINY = """
[data]
classes = 4
per_class = 30
dim = 8

[partition]
kind = pathological
classes_per_client = 2

[federation]
clients = 4
rounds = 2

[model]
k_cs = 4
k_g = 4
hidden = 16
idm_hidden = 8

[train]
batch_size = 16
lr = 0.001
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# -- run ------------------------------------------------------------------------------


def test_run_writes_artifacts(tiny, tmp_path):
    out = tmp_path / "run"
    assert cli.main(["run", "--config", str(tiny), "--out", str(out)]) == 0
    rows = read_csv(out / "metrics.csv")
    assert rows[0] == ["round", "client_id", "split", "accuracy", "loss_recon", "loss_id", "loss_cls",
                       "comm_up", "comm_down"]
    assert len(rows) == 1 + 2 * 4 * 2
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["rounds"]) == 2 and 0 <= summary["final_weighted_test_acc"] <= 1
    assert summary["wall_clock_sec"] > 0
    ckpts = sorted(p.name for p in (out / "checkpoints").iterdir())
    assert ckpts == [f"client_{i:03d}.frir" for i in range(4)] + ["server.frir"]
    assert P.load(out / "checkpoints" / "server.frir").size == summary["comm_params_per_client"]


def test_run_zero_rounds(tiny, tmp_path):
    out = tmp_path / "run"
    assert cli.main(["run", "--config", str(tiny), "--set", "federation.rounds=0", "--out", str(out)]) == 0
    assert len(read_csv(out / "metrics.csv")) == 1
    assert json.loads((out / "summary.json").read_text())["final_weighted_test_acc"] is None


def test_run_is_byte_reproducible(tiny, tmp_path):
    for name in ("a", "b"):
        assert cli.main(["run", "--config", str(tiny), "--seed", "3", "--out", str(tmp_path / name)]) == 0
    assert sha(tmp_path / "a" / "metrics.csv") == sha(tmp_path / "b" / "metrics.csv")
    assert sha(tmp_path / "a" / "checkpoints" / "server.frir") == sha(tmp_path / "b" / "checkpoints" / "server.frir")


def test_seed_changes_results(tiny, tmp_path):
    cli.main(["run", "--config", str(tiny), "--seed", "1", "--out", str(tmp_path / "a")])
    cli.main(["run", "--config", str(tiny), "--seed", "2", "--out", str(tmp_path / "b")])
    assert sha(tmp_path / "a" / "metrics.csv") != sha(tmp_path / "b" / "metrics.csv")


def test_config_echo_round_trips(tiny, tmp_path):
    out = tmp_path / "run"
    cli.main(["run", "--config", str(tiny), "--set", "train.mask_ratio=0.3", "--out", str(out)])
    echoed = ExperimentConfig.load(out / "config.echo")
    original = ExperimentConfig.load(tiny, ["train.mask_ratio=0.3"])
    assert echoed.as_dict() == original.as_dict()
    assert echoed.echo() == (out / "config.echo").read_text()
    cli.main(["run", "--config", str(out / "config.echo"), "--out", str(tmp_path / "again")])
    assert sha(out / "metrics.csv") == sha(tmp_path / "again" / "metrics.csv")


@pytest.mark.parametrize("override", ["train.nope=1", "nosection.key=1", "train.lr=abc", "federation.join_ratio=0"])
def test_bad_config_exits_2(tiny, tmp_path, override, capsys):
    rc = cli.main(["run", "--config", str(tiny), "--set", override, "--out", str(tmp_path / "x")])
    assert rc == 2
    assert "error" in capsys.readouterr().err.lower()


def test_missing_idx_file_exits_3(tiny, tmp_path):
    rc = cli.main(["run", "--config", str(tiny), "--set", "data.source=idx", "--set", f"data.images={tmp_path}/no",
                   "--set", f"data.labels={tmp_path}/no", "--out", str(tmp_path / "x")])
    assert rc == 3


def test_config_rejects_unknown_key_in_file():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("[train]\nmystery = 1\n")


# -- sweep ---------------------------------------------------------------------------


def test_sweep_single_value_matches_run(tiny, tmp_path):
    assert cli.main(["sweep", "--config", str(tiny), "--param", "train.mask_ratio", "--values", "0.6",
                     "--seeds", "1", "--out", str(tmp_path / "s")]) == 0
    cli.main(["run", "--config", str(tiny), "--out", str(tmp_path / "r")])
    rows = read_csv(tmp_path / "s" / "sweep.csv")
    run_row = next(r for r in rows if r[0] == "run")
    final = json.loads((tmp_path / "r" / "summary.json").read_text())["final_weighted_test_acc"]
    assert float(run_row[4]) == final


def test_sweep_grid_shape(tiny, tmp_path):
    assert cli.main(["sweep", "--config", str(tiny), "--set", "partition.kind=dirichlet", "--set",
                     "data.per_class=60", "--param", "partition.alpha", "--values", "0.5,5", "--seeds", "2",
                     "--out", str(tmp_path / "s")]) == 0
    rows = read_csv(tmp_path / "s" / "sweep.csv")[1:]
    assert sum(r[0] == "run" for r in rows) == 4
    summary = [r for r in rows if r[0] == "summary"]
    assert [r[2] for r in summary] == ["0.5", "5"]
    assert all(float(r[6]) >= 0 for r in summary)


def test_sweep_rejects_non_finite_and_unknown(tiny, tmp_path):
    base = ["sweep", "--config", str(tiny), "--seeds", "1", "--out", str(tmp_path / "s")]
    assert cli.main(base + ["--param", "train.lr", "--values", "nan"]) == 2
    assert cli.main(base + ["--param", "train.bogus", "--values", "1"]) == 2


# -- compare ------------------------------------------------------------------------


def test_compare_default_variants(tiny, tmp_path):
    assert cli.main(["compare", "--config", str(tiny), "--set", "federation.rounds=1", "--seeds", "1",
                     "--out", str(tmp_path / "c")]) == 0
    rows = read_csv(tmp_path / "c" / "compare.csv")
    assert [r[0] for r in rows[1:]] == [n for n, _ in cli.COMPARE_VARIANTS]
    comm = {r[0]: int(r[8]) for r in rows[1:]}
    assert comm["local"] == 0 and comm["fedavg"] > comm["fedrir"] > 0


def test_compare_rejects_mismatched_data(tiny, tmp_path):
    other = tmp_path / "other.ini"
    other.write_text(TINY.replace("per_class = 30", "per_class = 31"))
    rc = cli.main(["compare", "--config", str(tiny), "--config", str(other), "--seeds", "1",
                   "--out", str(tmp_path / "c")])
    assert rc == 2


# -- dump-features -------------------------------------------------------------------


def test_dump_features(tiny, tmp_path):
    cli.main(["run", "--config", str(tiny), "--out", str(tmp_path / "r")])
    for name in ("a.csv", "b.csv"):
        assert cli.main(["dump-features", "--run-dir", str(tmp_path / "r"), "--out", str(tmp_path / name)]) == 0
    rows = read_csv(tmp_path / "a.csv")
    assert len(rows) == 1 + 4 * 30
    assert all(len(r) == 2 + 4 + 4 for r in rows)
    assert sha(tmp_path / "a.csv") == sha(tmp_path / "b.csv")


def test_dump_features_rejects_corrupt_checkpoint(tiny, tmp_path):
    cli.main(["run", "--config", str(tiny), "--out", str(tmp_path / "r")])
    (tmp_path / "r" / "checkpoints" / "client_000.frir").write_bytes(b"junk")
    assert cli.main(["dump-features", "--run-dir", str(tmp_path / "r"), "--out", str(tmp_path / "a.csv")]) == 3


def test_dump_features_rejects_wrong_manifest(tiny, tmp_path):
    cli.main(["run", "--config", str(tiny), "--out", str(tmp_path / "r")])
    ck = tmp_path / "r" / "checkpoints" / "client_000.frir"
    ps = P.load(ck)
    P.save(ps.map(lambda a: a[..., :1] if a.ndim == 2 else a), ck)
    assert cli.main(["dump-features", "--run-dir", str(tmp_path / "r"), "--out", str(tmp_path / "a.csv")]) == 3


# -- gradcheck -----------------------------------------------------------------------


def test_gradcheck_passes(capsys):
    assert cli.main(["gradcheck", "--instances", "3"]) == 0
    assert capsys.readouterr().out.count("PASS") == 5


def test_gradcheck_catches_broken_backward(monkeypatch):
    real = T.relu

    def bad_relu(x):
        out = real(x)
        rule = out._backward
        out._backward = lambda g: tuple(2.0 * v for v in rule(g))
        return out

    monkeypatch.setattr(T, "relu", bad_relu)
    assert cli.main(["gradcheck", "--instances", "2"]) != 0


# -- partition-report ----------------------------------------------------------------


def test_partition_report(tiny, capsys):
    assert cli.main(["partition-report", "--config", str(tiny)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 1 + 4
    counts = np.array([[int(v) for v in ln.split()[1:5]] for ln in lines[1:]])
    assert counts.sum() == 120 and np.all((counts > 0).sum(axis=1) == 2)
