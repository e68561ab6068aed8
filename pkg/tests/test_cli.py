import csv
import json
import re

import numpy as np
import pytest

from plexuskit import cli
from plexuskit import perf_model as pm
from plexuskit.shardio import ShardManifest, decode_file, file_digest, list_files
from plexuskit.trainer import TrainConfig, load_prepared, serial_train

SMALL = "sbm:nodes=256,communities=4,p_in=0.1,p_out=0.01,features=16,classes=4"


@pytest.fixture(scope="module")
def shards(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "shards"
    assert cli.main(["preprocess", "--synthetic", SMALL, "--p", "4", "--q", "4", "--seed", "5",
                     "--out", str(out)]) == 0
    return out


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_preprocess_tiny_edge_list(tmp_path, capsys):
    edges = tmp_path / "tiny.txt"
    edges.write_text("\n".join(f"{i} {(i + 1) % 8}" for i in range(8)) + "\n0 4\n")
    assert cli.main(["preprocess", "--input", str(edges), "--num-features", "3",
                     "--num-classes", "2", "--p", "2", "--q", "2", "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    assert "balance original" in out and "balance double" in out
    m = ShardManifest.load(tmp_path / "o")
    assert len(m.shards) == 4 and m.num_nodes == 8


def test_preprocess_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert cli.main(["preprocess", "--synthetic", "erdos:nodes=60,p=0.1,features=4",
                         "--p", "3", "--q", "2", "--seed", "9", "--out", str(tmp_path / d)]) == 0
    a, b = ShardManifest.load(tmp_path / "a"), ShardManifest.load(tmp_path / "b")
    assert [file_digest(f) for f in list_files(a)] == [file_digest(f) for f in list_files(b)]


def test_preprocess_sbm_balance(tmp_path, capsys):
    assert cli.main(["preprocess", "--synthetic", "sbm:features=4,classes=4", "--p", "8", "--q", "8",
                     "--seed", "1", "--precision", "f32", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    before = float(re.search(r"balance original\s+([\d.]+)", out).group(1))
    after = float(re.search(r"balance double\s+([\d.]+)", out).group(1))
    assert before > 1.5 and after < 1.05


def test_preprocess_input_errors(tmp_path):
    assert cli.main(["preprocess", "--input", str(tmp_path / "none.txt"), "--out", str(tmp_path)]) == 2
    assert cli.main(["preprocess", "--out", str(tmp_path)]) == 2
    assert cli.main(["preprocess", "--synthetic", "blob:n=3", "--out", str(tmp_path)]) == 2


def test_preprocess_output_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["preprocess", "--synthetic", "erdos:nodes=20,p=0.2", "--p", "1", "--q", "1",
                     "--out", str(blocker / "sub")]) == 3


def test_train_outputs(shards, tmp_path):
    out = tmp_path / "run"
    assert cli.main(["train", "--manifest", str(shards), "--grid", "2,2,1", "--epochs", "4",
                     "--hidden", "16", "--out", str(out)]) == 0
    metrics = rows(out / "metrics.csv")
    assert len(metrics) == 4 * (4 + 1)
    summary = rows(out / "summary.csv")
    assert len(summary) == 1 and summary[0]["window"] == "2"
    assert rows(out / "comm_stats.csv")
    model = decode_file((out / "model.plxs").read_bytes())
    assert model["W0"].shape == (16, 16) and model["W2"].shape == (16, 4)
    assert model["features"].shape == (256, 16)


def test_train_unit_grid_equals_serial_trace(shards, tmp_path):
    assert cli.main(["train", "--manifest", str(shards), "--epochs", "3", "--hidden", "16",
                     "--out", str(tmp_path)]) == 0
    got = [float(r["loss"]) for r in rows(tmp_path / "metrics.csv") if r["rank"] == "all"]
    g = load_prepared(ShardManifest.load(shards))
    ref = [m.loss for m in serial_train(g, TrainConfig(hidden=16, epochs=3))[0]]
    np.testing.assert_allclose(got, ref, rtol=1e-12)


def test_train_auto_grid(shards, tmp_path, capsys):
    machine = tmp_path / "m.json"
    machine.write_text(json.dumps({"g_node": 4, "beta_intra": 2e11, "beta_inter": 2.5e10,
                                   "bytes_per_scalar": 8}))
    assert cli.main(["train", "--manifest", str(shards), "--grid", "auto", "--gpus", "8",
                     "--machine", str(machine), "--epochs", "1", "--hidden", "16",
                     "--out", str(tmp_path / "r")]) == 0
    first = capsys.readouterr().out.splitlines()[0]
    m = ShardManifest.load(shards)
    stats = pm.DatasetStats(m.num_nodes, m.nnz, [16, 16, 16, 4])
    best = pm.rank_configs(8, stats, pm.MachineParams.load(machine), pm.PerfCoefficients())[0]
    assert first == "auto grid: " + ",".join(map(str, best.config))
    s = rows(tmp_path / "r" / "summary.csv")[0]
    assert (int(s["gx"]), int(s["gy"]), int(s["gz"])) == best.config


def test_train_auto_needs_machine(shards, tmp_path):
    assert cli.main(["train", "--manifest", str(shards), "--grid", "auto", "--gpus", "8",
                     "--out", str(tmp_path)]) == 2


def test_train_missing_manifest(tmp_path):
    assert cli.main(["train", "--manifest", str(tmp_path / "nothing"), "--out", str(tmp_path)]) == 2


def test_train_bad_grid_flag(shards, tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--manifest", str(shards), "--grid", "2,2", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_train_resource_error(shards, tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise MemoryError("Unable to allocate 8.0 TiB for an array with shape (1048576, 1048576)")
    monkeypatch.setattr(cli, "train_epochs", boom)
    assert cli.main(["train", "--manifest", str(shards), "--out", str(tmp_path)]) == 4
    assert "(1048576, 1048576)" in capsys.readouterr().err


def test_rank_configs_table(shards, tmp_path, capsys):
    assert cli.main(["rank-configs", "--manifest", str(shards), "--gpus", "8", "--hidden", "16",
                     "--out", str(tmp_path)]) == 0
    err = capsys.readouterr().err
    assert "defaults" in err
    table = rows(tmp_path / "rank_configs.csv")
    assert len(table) == 10
    totals = [float(r["total_s"]) for r in table]
    assert totals == sorted(totals)


def test_rank_configs_serial_row(capsys, tmp_path):
    assert cli.main(["rank-configs", "--stats", "1000,5000,16;8;4", "--gpus", "1",
                     "--out", str(tmp_path)]) == 0
    table = rows(tmp_path / "rank_configs.csv")
    assert len(table) == 1 and float(table[0]["comm_s"]) == 0.0


def test_rank_configs_with_coefficients(tmp_path):
    pm.PerfCoefficients((1e-3, 0.0, 0.0)).save(tmp_path / "c.json")
    assert cli.main(["rank-configs", "--stats", "1000,5000,16;8;4", "--gpus", "4",
                     "--coeffs", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 0
    assert cli.main(["rank-configs", "--stats", "oops", "--gpus", "4"]) == 2
    assert cli.main(["rank-configs", "--gpus", "4"]) == 2


def test_validate_passes(capsys):
    assert cli.main(["validate", "--gpus", "1", "--epochs", "2"]) == 0
    assert cli.main(["validate", "--gpus", "8", "--epochs", "10", "--synthetic", SMALL]) == 0
    out = capsys.readouterr().out
    assert out.count("pass") == 11


def test_validate_injected_fault(capsys, tmp_path):
    code = cli.main(["validate", "--gpus", "4", "--epochs", "2", "--inject-fault", "fwd_reduce_h",
                     "--out", str(tmp_path)])
    assert code == 1
    err = capsys.readouterr().err
    assert "grid 2,1,2" in err and "epoch 0" in err
    # layers rotate the aggregation axis through X, Z and Y, so every G > 1 grid is hit
    status = [r["status"] for r in rows(tmp_path / "validate.csv")]
    assert status == ["FAIL"] * 6


def test_validate_from_manifest(shards):
    assert cli.main(["validate", "--manifest", str(shards), "--gpus", "2", "--epochs", "2"]) == 0
