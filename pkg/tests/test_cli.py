import csv

import numpy as np
import pytest

from xlce.channel import read_dataset
from xlce.cli import RESULT_COLUMNS, main
from xlce.config import ExperimentConfig
from xlce.model import ModelParams, save_weights

TINY = """\
array:
  M: 16
dataset:
  n_train: 64
  n_val: 16
  n_test: 10000
  test_snr_db: 10
model:
  F: 4
  I: 2
  d: 16
  n_layers: 2
  n_tuned: 1
  post_filters: 4
train:
  epochs: 2
  batch_size: 16
eval:
  samples_per_point: 10000
  snr_grid_db: [0, 10, 20]
  sweep_L: [3]
  lmmse_samples: 300
  hyomp_n_dist: 4
"""


def small_eval(cfg, tmp_path):
    """Copy of the tiny config with fewer samples per sweep point."""
    path = tmp_path / "small.yaml"
    path.write_text(cfg.read_text().replace("samples_per_point: 10000", "samples_per_point: 300"))
    return path


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(TINY)
    assert main(["gen", "--config", str(cfg), "--out", str(root / "data")]) == 0
    params = ModelParams.init(ExperimentConfig.from_yaml(TINY).model, seed=0)
    save_weights(params, root / "init.xcew")
    return root, cfg


def run(capsys, *argv):
    status = main(list(argv))
    return status, capsys.readouterr()


class TestGen:
    def test_outputs(self, workspace):
        root, cfg = workspace
        for split, n in (("train", 64), ("val", 16), ("test", 10000)):
            spec, samples, extra = read_dataset(root / "data" / f"{split}.xced")
            assert len(samples) == n and spec.array.M == 16 and extra["extra"]["split"] == split
        sidecar = (root / "data" / "dataset.config.yaml").read_text()
        assert ExperimentConfig.from_yaml(TINY).hash in sidecar

    def test_byte_identical_rerun(self, workspace, tmp_path):
        root, cfg = workspace
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path)]) == 0
        for split in ("train", "val", "test"):
            assert (tmp_path / f"{split}.xced").read_bytes() == (root / "data" / f"{split}.xced").read_bytes()

    def test_invalid_mix_writes_nothing(self, tmp_path, capsys):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text("array: {M: 16}\ndataset:\n  L: 3\n  L0: 4\n")
        status, out = run(capsys, "gen", "--config", str(cfg), "--out", str(tmp_path / "d"))
        assert status == 2 and "L0" in out.err and not (tmp_path / "d").exists()

    def test_full_size_config_accepted(self):
        cfg = ExperimentConfig.from_dict({})
        sizes = [cfg.split_spec(s).n_samples for s in ("train", "val", "test")]
        assert sizes == [45000, 5000, 2000] and cfg.array.M == 256

    def test_seed_override_changes_data(self, workspace, tmp_path):
        root, cfg = workspace
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path), "--seed", "9"]) == 0
        assert (tmp_path / "val.xced").read_bytes() != (root / "data" / "val.xced").read_bytes()


class TestTrain:
    def test_artifacts_and_determinism(self, workspace, tmp_path):
        root, cfg = workspace
        logs = []
        for name in ("a", "b"):
            out = tmp_path / f"{name}.xcew"
            assert main(["train", "--config", str(cfg), "--dataset", str(root / "data"), "--out", str(out)]) == 0
            logs.append((tmp_path / f"{name}.xcew.log.csv").read_bytes())
        assert logs[0] == logs[1]
        log = rows(tmp_path / "a.xcew.log.csv")
        assert [r["epoch"] for r in log] == ["0", "1"]
        assert {r["config_hash"] for r in log} == {ExperimentConfig.from_yaml(TINY).hash}
        assert (tmp_path / "a.xcew").read_bytes() == (tmp_path / "b.xcew").read_bytes()

    def test_M_mismatch(self, workspace, tmp_path, capsys):
        root, _ = workspace
        status, out = run(capsys, "train", "--config", "preset:toy", "--dataset", str(root / "data"), "--out", str(tmp_path / "w"))
        assert status == 3 and out.err.startswith("E_MISMATCH:") and "M=16" in out.err


class TestEval:
    def test_ls_oracle_and_identity_model(self, workspace, tmp_path):
        root, cfg = workspace
        out = tmp_path / "e.csv"
        argv = ["eval", "--config", str(cfg), "--dataset", str(root / "data"), "--out", str(out)]
        assert main(argv + ["--weights", str(root / "init.xcew"), "--estimators", "ls,llm4xce,lmmse,hyomp"]) == 0
        got = {r["estimator"]: r for r in rows(out)}
        assert list(rows(out)[0]) == list(RESULT_COLUMNS)
        assert got["ls"]["snr_db"] == "10.0"
        assert 0.095 <= float(got["ls"]["nmse_linear"]) <= 0.105
        # freshly initialized weights have a zero noise branch, so the model is the identity
        assert got["llm4xce"]["nmse_linear"] == got["ls"]["nmse_linear"]
        assert float(got["lmmse"]["nmse_linear"]) < float(got["ls"]["nmse_linear"])
        assert (tmp_path / "e.csv.config.yaml").exists()

    def test_llm4xce_needs_weights(self, workspace, tmp_path, capsys):
        root, cfg = workspace
        status, out = run(capsys, "eval", "--config", str(cfg), "--dataset", str(root / "data"), "--out", str(tmp_path / "e"), "--estimators", "llm4xce")
        assert status == 2 and out.err.startswith("E_USAGE:") and "--weights" in out.err

    def test_empty_estimator_list(self, workspace, tmp_path, capsys):
        root, cfg = workspace
        status, out = run(capsys, "eval", "--config", str(cfg), "--dataset", str(root / "data"), "--out", str(tmp_path / "e"), "--estimators", ",")
        assert status == 2 and "empty" in out.err

    def test_unknown_estimator(self, workspace, tmp_path, capsys):
        root, cfg = workspace
        status, out = run(capsys, "eval", "--config", str(cfg), "--dataset", str(root / "data"), "--out", str(tmp_path / "e"), "--estimators", "ls,magic")
        assert status == 2 and "magic" in out.err and "valid" in out.err

    def test_missing_dataset(self, workspace, tmp_path, capsys):
        _, cfg = workspace
        status, out = run(capsys, "eval", "--config", str(cfg), "--dataset", str(tmp_path / "none.xced"), "--out", str(tmp_path / "e"), "--estimators", "ls")
        assert status == 6 and out.err.startswith("E_IO:")

    def test_corrupt_dataset(self, workspace, tmp_path, capsys):
        _, cfg = workspace
        bad = tmp_path / "bad.xced"
        bad.write_bytes(b"NOPE\n")
        status, out = run(capsys, "eval", "--config", str(cfg), "--dataset", str(bad), "--out", str(tmp_path / "e"), "--estimators", "ls")
        assert status == 4 and out.err.startswith("E_DATASET:")


class TestSweeps:
    def test_sweep_snr(self, workspace, tmp_path):
        _, cfg = workspace
        out = tmp_path / "s.csv"
        assert main(["sweep-snr", "--config", str(cfg), "--out", str(out), "--estimators", "ls,lmmse"]) == 0
        table = rows(out)
        # pure far and pure near mixes for L = 3, three SNRs, two estimators
        assert len(table) == 12
        assert {(r["L"], r["L0"]) for r in table} == {("3", "3"), ("3", "0")}
        for L0 in ("3", "0"):
            for name in ("ls", "lmmse"):
                curve = [float(r["nmse_db"]) for r in table if r["L0"] == L0 and r["estimator"] == name]
                assert all(b < a for a, b in zip(curve, curve[1:]))
                if name == "ls":
                    assert np.allclose(curve, [0.0, -10.0, -20.0], atol=0.3)

    def test_sweep_paths(self, workspace, tmp_path):
        cfg = small_eval(workspace[1], tmp_path)
        out = tmp_path / "p.csv"
        assert main(["sweep-paths", "--config", str(cfg), "--out", str(out), "--estimators", "ls"]) == 0
        table = rows(out)
        assert [r["L0"] for r in table] == [str(k) for k in range(7)]
        assert np.allclose([float(r["nmse_db"]) for r in table], -15.0, atol=0.3)

    def test_sweep_deterministic(self, workspace, tmp_path):
        cfg = small_eval(workspace[1], tmp_path)
        for name in ("x.csv", "y.csv"):
            assert main(["sweep-paths", "--config", str(cfg), "--out", str(tmp_path / name), "--estimators", "ls,hyomp"]) == 0
        assert (tmp_path / "x.csv").read_bytes() == (tmp_path / "y.csv").read_bytes()

    def test_thread_count_does_not_change_results(self, workspace, tmp_path, monkeypatch):
        cfg = small_eval(workspace[1], tmp_path)
        outputs = []
        for threads in ("1", "3"):
            monkeypatch.setenv("XCE_THREADS", threads)
            path = tmp_path / f"t{threads}.csv"
            assert main(["sweep-paths", "--config", str(cfg), "--out", str(path), "--estimators", "hyomp"]) == 0
            outputs.append(path.read_bytes())
        assert outputs[0] == outputs[1]


class TestErrors:
    def test_unknown_command(self, capsys):
        status, out = run(capsys, "fly")
        assert status == 2 and out.err.startswith("E_USAGE:")

    def test_missing_out(self, capsys):
        status, out = run(capsys, "gen")
        assert status == 2 and "--out" in out.err

    def test_bad_threads(self, capsys, monkeypatch, tmp_path):
        monkeypatch.setenv("XCE_THREADS", "zero")
        status, out = run(capsys, "gen", "--out", str(tmp_path))
        assert status == 2 and "XCE_THREADS" in out.err

    def test_config_error_has_line(self, tmp_path, capsys):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text("array:\n  M: 16\n  colour: red\n")
        status, out = run(capsys, "gen", "--config", str(cfg), "--out", str(tmp_path))
        assert status == 2 and out.err.startswith("E_CONFIG: line 3:")

    def test_negative_seed(self, capsys, tmp_path):
        status, out = run(capsys, "gen", "--out", str(tmp_path), "--seed", "-1")
        assert status == 2 and "--seed" in out.err

    def test_one_line_per_error(self, capsys):
        _, out = run(capsys, "eval", "--config", "preset:nope")
        assert len(out.err.strip().splitlines()) == 1
