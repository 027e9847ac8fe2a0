import json
import os
import subprocess
import sys

import numpy as np
import pytest

import larsflow as lf
from larsflow import checkpoint as ckpt
from larsflow.config import build_model, load_config, validate_config
from larsflow.data import load_csv_dataset
from larsflow.errors import CheckpointError, ConfigError, DataError


def write_csv(path, rows, header=None):
    with open(path, "w") as fh:
        if header:
            fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


class TestCsvLoading:
    def test_split_sizes(self, tmp_path):
        p = tmp_path / "d.csv"
        write_csv(p, [[i, i + 0.5] for i in range(10)])
        train, val, test, _ = load_csv_dataset(p, standardize=False, split=(0.8, 0.1, 0.1), seed=0)
        assert train.shape == (8, 2)
        assert val.shape == (1, 2)
        assert test.shape == (1, 2)

    def test_standardization(self, tmp_path):
        p = tmp_path / "d.csv"
        rng = lf.RngStream(1, 0)
        write_csv(p, rng.generator.normal(5, 3, (200, 3)).tolist())
        train, val, test, stats = load_csv_dataset(p, standardize=True, split=(0.8, 0.1, 0.1), seed=1)
        assert np.max(np.abs(train.mean(axis=0))) < 1e-12
        assert np.max(np.abs(train.std(axis=0) - 1.0)) < 1e-12
        assert stats["mean"].shape == (3,)

    def test_same_seed_same_membership(self, tmp_path):
        p = tmp_path / "d.csv"
        write_csv(p, [[i] for i in range(50)])
        a = load_csv_dataset(p, standardize=False, seed=7)[0]
        b = load_csv_dataset(p, standardize=False, seed=7)[0]
        assert np.array_equal(a, b)
        c = load_csv_dataset(p, standardize=False, seed=8)[0]
        assert not np.array_equal(a, c)

    def test_header_skipped(self, tmp_path):
        p = tmp_path / "d.csv"
        write_csv(p, [[1.0, 2.0], [3.0, 4.0]], header="a,b")
        train, _, _, _ = load_csv_dataset(p, has_header=True, standardize=False, split=(1.0, 0.0, 0.0))
        assert train.shape == (2, 2)

    def test_ragged_row_error(self, tmp_path):
        p = tmp_path / "d.csv"
        with open(p, "w") as fh:
            fh.write("1,2\n3,4,5\n")
        with pytest.raises(DataError, match="row 2"):
            load_csv_dataset(p, standardize=False)

    def test_non_numeric_cell_error(self, tmp_path):
        p = tmp_path / "d.csv"
        with open(p, "w") as fh:
            fh.write("1,2\n3,oops\n")
        with pytest.raises(DataError, match="row 2, column 2"):
            load_csv_dataset(p, standardize=False)

    def test_bad_split(self, tmp_path):
        p = tmp_path / "d.csv"
        write_csv(p, [[1.0]])
        with pytest.raises(DataError, match="split"):
            load_csv_dataset(p, split=(0.5, 0.2, 0.2))


class TestConfigValidation:
    def base_cfg(self):
        return {
            "seed": 1,
            "output_dir": "out",
            "model": {"base": "resampled"},
            "data": {"target": "two_rings"},
            "train": {"objective": "ml", "iterations": 10, "batch_size": 8},
            "eval": {"grid_points": 50},
        }

    def test_valid(self):
        cfg = validate_config(self.base_cfg())
        assert cfg["model"]["truncation"] == 100
        assert cfg["train"]["learning_rate"] == 1e-3

    def test_unknown_key_rejected(self):
        bad = self.base_cfg()
        bad["model"]["frobnicate"] = 1
        with pytest.raises(ConfigError, match="model.frobnicate"):
            validate_config(bad)

    def test_two_data_sources_rejected(self):
        bad = self.base_cfg()
        bad["data"]["csv_path"] = "x.csv"
        with pytest.raises(ConfigError, match="data"):
            validate_config(bad)

    def test_missing_csv_rejected(self):
        bad = self.base_cfg()
        bad["data"] = {"csv_path": "/definitely/not/here.csv"}
        with pytest.raises(ConfigError, match="csv_path"):
            validate_config(bad)

    def test_lambda_requires_resampled(self):
        bad = self.base_cfg()
        bad["model"]["base"] = "gaussian"
        bad["train"]["lambda_z"] = 1.0
        with pytest.raises(ConfigError, match="lambda_z"):
            validate_config(bad)

    def test_build_model_mask_alternation(self):
        cfg = validate_config(self.base_cfg())
        model = build_model(cfg, 2)
        couplings = [l for l in model.layers if isinstance(l, lf.CouplingLayer)]
        assert len(couplings) == 8
        for a, b in zip(couplings[::2], couplings[1::2]):
            assert np.array_equal(a.mask, ~b.mask)

    def test_build_model_deterministic(self):
        cfg = validate_config(self.base_cfg())
        a = build_model(cfg, 2).param_vector()
        b = build_model(cfg, 2).param_vector()
        assert np.array_equal(a, b)


class TestCheckpoint:
    def make_state(self, model, cfg):
        return ckpt.make_state(cfg, 9, model.param_vector(), getattr(model.base, "z_ema", None))

    def test_round_trip_bit_exact(self, tmp_path):
        cfg = validate_config(TestConfigValidation().base_cfg())
        model = build_model(cfg, 2)
        model.base.z_ema = 0.437
        v = model.param_vector()
        model.set_param_vector(v + lf.RngStream(2, 0).generator.normal(0, 0.3, v.size))
        path = tmp_path / "c.json"
        ckpt.checkpoint_save(self.make_state(model, cfg), path)
        state = ckpt.checkpoint_load(path)
        clone = build_model(cfg, 2)
        clone.set_param_vector(state["params"])
        clone.base.z_ema = float(state["z_ema"][0])
        pts = lf.draw_standard_normal(lf.RngStream(3, 0), 100, 2)
        assert np.array_equal(model.log_prob(pts), clone.log_prob(pts))
        assert clone.base.z_ema == 0.437

    def test_truncated_file_rejected(self, tmp_path):
        cfg = validate_config(TestConfigValidation().base_cfg())
        model = build_model(cfg, 2)
        path = tmp_path / "c.json"
        ckpt.checkpoint_save(self.make_state(model, cfg), path)
        data = path.read_text()
        path.write_text(data[: len(data) // 2])
        with pytest.raises(CheckpointError, match="JSON"):
            ckpt.checkpoint_load(path)

    def test_version_bump_refused(self, tmp_path):
        cfg = validate_config(TestConfigValidation().base_cfg())
        model = build_model(cfg, 2)
        path = tmp_path / "c.json"
        state = self.make_state(model, cfg)
        state["format_version"] = 2
        ckpt.checkpoint_save(state, path)
        with pytest.raises(CheckpointError, match="format_version"):
            ckpt.checkpoint_load(path)

    def test_corrupt_field_named(self, tmp_path):
        cfg = validate_config(TestConfigValidation().base_cfg())
        model = build_model(cfg, 2)
        path = tmp_path / "c.json"
        state = self.make_state(model, cfg)
        state["params_hex"][3] = "not-a-float"
        ckpt.checkpoint_save(state, path)
        with pytest.raises(CheckpointError, match=r"params_hex\[3\]"):
            ckpt.checkpoint_load(path)

    def test_missing_field_named(self, tmp_path):
        cfg = validate_config(TestConfigValidation().base_cfg())
        model = build_model(cfg, 2)
        path = tmp_path / "c.json"
        state = self.make_state(model, cfg)
        del state["z_ema_hex"]
        ckpt.checkpoint_save(state, path)
        with pytest.raises(CheckpointError, match="z_ema_hex"):
            ckpt.checkpoint_load(path)

    def test_nonfinite_values_survive(self, tmp_path):
        vals = np.array([np.inf, -np.inf, 0.0, -0.0, 1e-308])
        state = {
            "format_version": 1,
            "config": {"seed": 0},
            "iteration": 0,
            "params_hex": [float(v).hex() for v in vals],
            "z_ema_hex": None,
            "adam": None,
            "data_stats": None,
            "rng": {"seed": 0, "iteration": 0},
        }
        path = tmp_path / "c.json"
        ckpt.checkpoint_save(state, path)
        out = ckpt.checkpoint_load(path)["params"]
        assert np.array_equal(out, vals)
        assert np.signbit(out[3])


def run_cli(args, cwd):
    return subprocess.run(
        [sys.executable, "-m", "larsflow", *args],
        cwd=cwd, capture_output=True, text=True,
    )


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = {
        "seed": 5,
        "output_dir": str(root / "run"),
        "model": {"base": "resampled", "coupling_layers": 2, "coupling_hidden_units": 8,
                  "acceptance_hidden_units": 8, "truncation": 20, "z_update_samples": 64},
        "data": {"target": "circle_of_gaussians"},
        "train": {"objective": "ml", "iterations": 30, "batch_size": 32, "eval_every": 15},
        "eval": {"grid_points": 80, "grid_lo": [-6, -6], "grid_hi": [6, 6]},
    }
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    result = run_cli(["train", str(cfg_path)], root)
    assert result.returncode == 0, result.stderr
    return root, cfg_path, root / "run"


class TestCli:
    def test_train_artifacts(self, trained_run):
        _, _, out = trained_run
        assert (out / "metrics.csv").exists()
        assert (out / "checkpoint.json").exists()
        evals = (out / "metrics_eval.csv").read_text().splitlines()
        assert evals[0] == "iter,metric,value"
        assert any("quadrature_kld" in line for line in evals[1:])
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0] == "iter,loss,z_ema,grad_norm,mean_attempts"
        assert len(lines) == 31

    def test_manifest_complete(self, trained_run):
        _, _, out = trained_run
        manifest = json.loads((out / "manifest.json").read_text())
        listed = {e["path"] for e in manifest["files"]}
        assert listed == {"metrics.csv", "metrics_eval.csv", "checkpoint.json"}
        import hashlib

        for entry in manifest["files"]:
            digest = hashlib.sha256((out / entry["path"]).read_bytes()).hexdigest()
            assert digest == entry["sha256"]

    def test_eval_kld_deterministic(self, trained_run):
        root, _, out = trained_run
        r1 = run_cli(["eval", str(out / "checkpoint.json"), "--kld"], root)
        assert r1.returncode == 0, r1.stderr
        r2 = run_cli(["eval", str(out / "checkpoint.json"), "--kld"], root)
        assert r1.stdout == r2.stdout
        metrics = (out / "eval" / "eval_metrics.csv").read_text().splitlines()
        assert metrics[0] == "metric,value,stderr"

    def test_sample_csv(self, trained_run):
        root, _, out = trained_run
        dest = root / "samples.csv"
        r = run_cli(["sample", str(out / "checkpoint.json"), "-n", "25", "-o", str(dest)], root)
        assert r.returncode == 0, r.stderr
        lines = dest.read_text().splitlines()
        assert lines[0] == "x1,x2,log_prob"
        assert len(lines) == 26

    def test_grid_csv(self, trained_run):
        root, _, out = trained_run
        dest = root / "dens.csv"
        r = run_cli(["grid", str(out / "checkpoint.json"), "-o", str(dest)], root)
        assert r.returncode == 0, r.stderr
        lines = dest.read_text().splitlines()
        assert lines[0] == "x1,x2,log_p_model,log_p_target"
        assert len(lines) == 80 * 80 + 1

    def test_checkpoint_reload_bit_exact(self, trained_run):
        _, _, out = trained_run
        state = ckpt.checkpoint_load(out / "checkpoint.json")
        cfg = validate_config(state["config"])
        model = build_model(cfg, 2)
        model.set_param_vector(state["params"])
        model.base.z_ema = float(state["z_ema"][0])
        again = build_model(cfg, 2)
        again.set_param_vector(state["params"])
        again.base.z_ema = float(state["z_ema"][0])
        pts = lf.draw_standard_normal(lf.RngStream(4, 0), 1000, 2)
        assert np.array_equal(model.log_prob(pts), again.log_prob(pts))

    def test_invalid_config_exit_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"output_dir": "x", "data": {"target": "nope"}}))
        r = run_cli(["train", str(bad)], tmp_path)
        assert r.returncode == 2
        assert "data.target" in r.stderr

    def test_train_determinism_byte_identical(self, tmp_path):
        cfg = {
            "seed": 9,
            "output_dir": str(tmp_path / "a"),
            "model": {"base": "resampled", "coupling_layers": 2, "coupling_hidden_units": 8,
                      "acceptance_hidden_units": 8, "truncation": 10, "z_update_samples": 32},
            "data": {"target": "two_rings"},
            "train": {"objective": "ml", "iterations": 12, "batch_size": 16},
            "eval": {"grid_points": 60},
        }
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(cfg))
        names = ("metrics.csv", "metrics_eval.csv", "checkpoint.json", "manifest.json")
        assert run_cli(["train", str(p)], tmp_path).returncode == 0
        first = {n: (tmp_path / "a" / n).read_bytes() for n in names}
        assert run_cli(["train", str(p)], tmp_path).returncode == 0
        for n in names:
            assert (tmp_path / "a" / n).read_bytes() == first[n], n

    def test_zsweep_schema(self, tmp_path):
        cfg = {
            "seed": 2,
            "output_dir": str(tmp_path / "sweep"),
            "model": {"base": "resampled", "coupling_layers": 1, "coupling_hidden_units": 8,
                      "acceptance_hidden_units": 8, "truncation": 20, "z_update_samples": 32},
            "data": {"target": "dual_moon"},
            "train": {"objective": "ml", "iterations": 10, "batch_size": 16},
            "eval": {"grid_points": 60},
        }
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(cfg))
        r = run_cli(["zsweep", str(p), "--lambdas", "0,1"], tmp_path)
        assert r.returncode == 0, r.stderr
        lines = (tmp_path / "sweep" / "zsweep.csv").read_text().splitlines()
        assert lines[0] == "lambda,final_Z,final_kld"
        assert len(lines) == 3

    def test_archsweep_schema(self, tmp_path):
        cfg = {
            "seed": 2,
            "output_dir": str(tmp_path / "arch"),
            "model": {"base": "resampled", "coupling_layers": 1, "coupling_hidden_units": 8,
                      "acceptance_hidden_units": 8, "truncation": 10, "z_update_samples": 32},
            "data": {"target": "two_rings"},
            "train": {"objective": "ml", "iterations": 8, "batch_size": 16},
            "eval": {"grid_points": 60},
        }
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(cfg))
        r = run_cli(["archsweep", str(p), "--layers", "1,2", "--units", "8"], tmp_path)
        assert r.returncode == 0, r.stderr
        lines = (tmp_path / "arch" / "archsweep.csv").read_text().splitlines()
        assert lines[0] == "hidden_layers,hidden_units,metric,value"
        assert len(lines) == 3

    def test_csv_training_and_ll_eval(self, tmp_path):
        rng = lf.RngStream(11, 0)
        data_path = tmp_path / "data.csv"
        write_csv(data_path, rng.generator.normal(0, 1, (300, 2)).tolist())
        cfg = {
            "seed": 4,
            "output_dir": str(tmp_path / "csvrun"),
            "model": {"base": "gaussian", "coupling_layers": 2, "coupling_hidden_units": 8},
            "data": {"csv_path": str(data_path), "split": [0.8, 0.1, 0.1], "standardize": True},
            "train": {"objective": "ml", "iterations": 15, "batch_size": 32, "eval_every": 10},
            "eval": {"grid_points": 60},
        }
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(cfg))
        r = run_cli(["train", str(p)], tmp_path)
        assert r.returncode == 0, r.stderr
        eval_csv = tmp_path / "heldout.csv"
        write_csv(eval_csv, rng.generator.normal(0, 1, (50, 2)).tolist())
        r2 = run_cli(
            ["eval", str(tmp_path / "csvrun" / "checkpoint.json"), "--ll", str(eval_csv)],
            tmp_path,
        )
        assert r2.returncode == 0, r2.stderr
        assert "ll" in r2.stdout
