"""CLI wiring: commands, config merging, exit codes, determinism."""

import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from radiofield.cli import main, split_indices
from radiofield.dataio import load_dataset, read_spectrum


def run_cli(*args):
    """In-process invocation returning the exit code."""
    return main([str(a) for a in args])


def run_cli_subprocess(*args):
    return subprocess.run([sys.executable, "-m", "radiofield.cli", *map(str, args)],
                          capture_output=True, text=True)


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def synth_small(tmp_path, name="data", seed=7, n_tx=6, res=(12, 4), extra=()):
    out = tmp_path / name
    code = run_cli("synth", "--scene", "demo", "--n-tx", n_tx, "--seed", seed,
                   "--out", out, "--res", *res, "--fine-step", 0.02, *extra)
    assert code == 0
    return out


TINY_TRAIN = ("--trainer.final_dims", 10, 10, 10, "--trainer.stages", 0,
              "--trainer.upsample_iters", "--trainer.total_iters", 40,
              "--trainer.batch_rays", 32, "--trainer.feature_dim", 4,
              "--trainer.mlp_width", 16, "--trainer.log_interval", 10)


class TestSynth:
    def test_writes_dataset(self, tmp_path):
        out = synth_small(tmp_path)
        ds = load_dataset(out)
        assert len(ds.records) == 6
        assert ds.geometry.spectrum_res == (12, 4)

    def test_deterministic(self, tmp_path):
        a = synth_small(tmp_path, "a")
        b = synth_small(tmp_path, "b")
        assert tree_digest(a) == tree_digest(b)

    def test_missing_out_is_usage_error(self, tmp_path):
        res = run_cli_subprocess("synth", "--scene", "demo", "--n-tx", 4)
        assert res.returncode == 2

    def test_missing_keys_reported_together(self, tmp_path, capsys):
        code = run_cli("synth", "--scene", "demo")
        assert code == 2
        err = capsys.readouterr().err
        assert "paths.out" in err and "run.n_tx" in err

    def test_unknown_scene_rejected(self, tmp_path):
        code = run_cli("synth", "--scene", "nope", "--n-tx", 2,
                       "--out", tmp_path / "x")
        assert code == 2


class TestConfigFile:
    def test_file_supplies_values_and_flags_override(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "run": {"n_tx": 3, "seed": 5},
            "scene": {"fine_step": 0.02},
            "geometry": {"spectrum_res": [8, 3]},
        }))
        out = tmp_path / "d"
        assert run_cli("synth", "--config", cfg, "--out", out) == 0
        ds = load_dataset(out)
        assert len(ds.records) == 3
        assert ds.geometry.spectrum_res == (8, 3)
        out2 = tmp_path / "d2"
        assert run_cli("synth", "--config", cfg, "--out", out2, "--n-tx", 5) == 0
        assert len(load_dataset(out2).records) == 5

    def test_unknown_keys_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"trainer": {"totle_iters": 5}}))
        code = run_cli("train", "--config", cfg, "--data", "x", "--out", "y")
        assert code == 2
        assert "totle_iters" in capsys.readouterr().err

    def test_invalid_json_rejected(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("{nope")
        assert run_cli("synth", "--config", cfg, "--n-tx", 2,
                       "--out", tmp_path / "o") == 2


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    data = synth_small(tmp, "data", n_tx=10, extra=("--rssi-noise-db", 1.0))
    ckpt = tmp / "model.ckpt"
    log = tmp / "train.csv"
    code = run_cli("train", "--data", data, "--out", ckpt, "--log", log,
                   "--split-seed", 0, *TINY_TRAIN)
    assert code == 0
    return tmp, data, ckpt, log


class TestTrainInferEval:
    def test_train_writes_checkpoint_and_log(self, pipeline):
        _, _, ckpt, log = pipeline
        assert ckpt.exists()
        lines = log.read_text().splitlines()
        assert len(lines) == 5  # iters 0,10,20,30,39
        assert all(len(l.split(",")) == 6 for l in lines)

    def test_infer_writes_spectrum_and_reports_time(self, pipeline):
        tmp, _, ckpt, _ = pipeline
        out = tmp / "spec.vxrf"
        res = run_cli_subprocess("infer", "--checkpoint", ckpt,
                                 "--tx", 2.0, 2.0, 1.0, "--out", out)
        assert res.returncode == 0
        assert "inference time" in res.stderr
        spec = read_spectrum(out)
        assert spec.shape == (12, 4)

    def test_eval_writes_metrics(self, pipeline):
        tmp, data, ckpt, _ = pipeline
        out = tmp / "metrics"
        code = run_cli("eval", "--checkpoint", ckpt, "--data", data,
                       "--split-seed", 0, "--out", out, "--rssi")
        assert code == 0
        summary = json.loads((out / "summary.json").read_text())
        assert {"p25", "median", "p75"} <= set(summary["ssim"])
        assert summary["n_test"] == 2
        assert (out / "ssim.csv").read_text().startswith("tx_index,ssim")
        assert (out / "rssi_error.csv").exists()
        assert (out / "ssim_cdf.csv").exists()

    def test_eval_deterministic(self, pipeline):
        tmp, data, ckpt, _ = pipeline
        for name in ("m1", "m2"):
            assert run_cli("eval", "--checkpoint", ckpt, "--data", data,
                           "--split-seed", 3, "--out", tmp / name) == 0
        assert tree_digest(tmp / "m1") == tree_digest(tmp / "m2")

    def test_corrupt_checkpoint_exit_code(self, pipeline, tmp_path):
        tmp, _, _, _ = pipeline
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"JUNKJUNKJUNKJUNK")
        code = run_cli("infer", "--checkpoint", bad, "--tx", 1, 1, 1,
                       "--out", tmp_path / "o.vxrf")
        assert code == 4

    def test_missing_data_dir_exit_code(self, tmp_path):
        code = run_cli("train", "--data", tmp_path / "absent",
                       "--out", tmp_path / "m.ckpt", *TINY_TRAIN)
        assert code == 3


class TestSplit:
    def test_split_deterministic_and_disjoint(self):
        a_train, a_test = split_indices(50, split_seed=4, train_fraction=0.8)
        b_train, b_test = split_indices(50, split_seed=4, train_fraction=0.8)
        assert np.array_equal(a_train, b_train) and np.array_equal(a_test, b_test)
        assert len(a_train) == 40 and len(a_test) == 10
        assert set(a_train).isdisjoint(a_test)
        assert set(a_train) | set(a_test) == set(range(50))

    def test_different_seeds_differ(self):
        a, _ = split_indices(50, split_seed=1, train_fraction=0.8)
        b, _ = split_indices(50, split_seed=2, train_fraction=0.8)
        assert not np.array_equal(a, b)

    def test_bad_fraction_rejected(self):
        from radiofield.cli import ConfigError
        with pytest.raises(ConfigError):
            split_indices(10, 0, 0.0)
