import csv
import json

import numpy as np
import pytest
import yaml

from tensor_memory import cli
from tensor_memory.autodiff import ops
from tensor_memory.config import ExperimentConfig
from tensor_memory.errors import ConfigError
from tensor_memory.experiment import build_model
from tensor_memory.sweep import SweepSpec, ablation_configs, pivot, run_cells

TINY = {
    "model": {"d_model": 16, "n_layers": 1, "n_heads": 2},
    "memory": {"channels": 2, "grid": [3, 3, 3]},
    "toy": {"task": "no_harm", "seq_len": 8, "V": 6},
    "train": {"batch_size": 8, "lr_peak": 3e-3, "warmup_steps": 2, "total_steps": 12,
              "eval_every": 6, "eval_batches": 1},
}


def write_yaml(path, doc):
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def tiny_run(**model):
    doc = json.loads(json.dumps(TINY))
    doc["model"].update(model)
    return doc


def read_table(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestConfigValidation:
    def test_unknown_key_named(self):
        with pytest.raises(ConfigError) as exc:
            ExperimentConfig.from_dict({**tiny_run(variant="base"), "toy": {"task": "no_harm",
                                                                            "wobble": 1}})
        assert exc.value.key == "toy.wobble"

    def test_missing_required_key_named(self):
        doc = tiny_run()
        with pytest.raises(ConfigError) as exc:
            ExperimentConfig.from_dict(doc)
        assert exc.value.key == "model.variant"

    def test_constraint_error_names_section(self):
        doc = tiny_run(variant="base", n_heads=3)
        with pytest.raises(ConfigError) as exc:
            ExperimentConfig.from_dict(doc)
        assert exc.value.key == "model.n_heads"

    def test_cli_exit_code_for_bad_config(self, tmp_path, capsys):
        path = write_yaml(tmp_path / "bad.yaml", tiny_run())
        assert cli.main(["run", "--config", path, "--out", str(tmp_path)]) == 1
        assert "model.variant" in capsys.readouterr().err

    def test_missing_file_is_io_error(self, tmp_path):
        assert cli.main(["run", "--config", str(tmp_path / "nope.yaml")]) == 3

    def test_hash_ignores_seed_and_name(self):
        a = ExperimentConfig.from_dict({**tiny_run(variant="base"), "seed": 1, "name": "x"})
        b = ExperimentConfig.from_dict({**tiny_run(variant="base"), "seed": 2})
        assert a.config_hash() == b.config_hash()
        assert a.config_hash(include_seed=True) != b.config_hash(include_seed=True)


class TestGradcheck:
    def test_default_tolerance_passes(self, capsys):
        assert cli.main(["gradcheck"]) == 0
        assert "worst" in capsys.readouterr().out

    def test_impossible_tolerance_fails(self, capsys):
        assert cli.main(["gradcheck", "--tol", "1e-12"]) == 2
        assert "FAIL: gradient of" in capsys.readouterr().err

    def test_corrupted_adjoint_named(self, monkeypatch, capsys):
        from tensor_memory.autodiff import tensor as tensor_mod

        def bad_sigmoid(a):
            y = 1.0 / (1.0 + np.exp(-a.data))
            return tensor_mod.record("sigmoid", y, (a,), lambda g: (g * y,))

        monkeypatch.setattr(ops, "sigmoid", bad_sigmoid)
        assert cli.main(["gradcheck"]) == 2
        err = capsys.readouterr().err
        assert "FAIL: gradient of mem." in err


class TestRun:
    def test_run_twice_identical_rows(self, tmp_path, capsys):
        path = write_yaml(tmp_path / "c.yaml", tiny_run(variant="tensor"))
        assert cli.main(["run", "--config", path, "--out", str(tmp_path / "a")]) == 0
        first = capsys.readouterr().out
        assert cli.main(["run", "--config", path, "--out", str(tmp_path / "b")]) == 0
        assert capsys.readouterr().out == first
        row = json.loads(first)
        run_dir = tmp_path / "a" / f"{row['config_hash']}-s0"
        assert (run_dir / "record.jsonl").exists() and (run_dir / "best.ckpt").exists()

    def test_trace_and_export(self, tmp_path, capsys):
        path = write_yaml(tmp_path / "c.yaml", tiny_run(variant="tensor"))
        assert cli.main(["run", "--config", path, "--out", str(tmp_path), "--trace"]) == 0
        row = json.loads(capsys.readouterr().out)
        run_dir = tmp_path / f"{row['config_hash']}-s0"
        assert (run_dir / "trace.tmsnap").exists()
        out = tmp_path / "again.tmsnap"
        assert cli.main(["export", "--config", path, "--checkpoint", str(run_dir / "best.ckpt"),
                         "--out", str(out)]) == 0
        assert out.exists()

    def test_export_needs_tensor(self, tmp_path):
        path = write_yaml(tmp_path / "c.yaml", tiny_run(variant="base"))
        assert cli.main(["export", "--config", path, "--out", str(tmp_path / "x")]) == 1

    def test_env_sets_default_out(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
        path = write_yaml(tmp_path / "c.yaml", tiny_run(variant="base"))
        assert cli.main(["run", "--config", path]) == 0
        assert any((tmp_path / "env").iterdir())

    def test_no_harm_base_reaches_perfect(self, tmp_path, capsys):
        doc = tiny_run(variant="base")
        doc["train"].update(total_steps=300, eval_every=25, eval_batches=2, lr_peak=1e-2,
                            stop_at_perfect=True)
        path = write_yaml(tmp_path / "c.yaml", doc)
        assert cli.main(["run", "--config", path, "--out", str(tmp_path)]) == 0
        assert json.loads(capsys.readouterr().out)["accuracy"] == "1.000000"


class TestSweep:
    def test_binding_grid_expansion(self):
        spec = SweepSpec.from_dict({"base": {"toy": {"task": "coord_binding"}},
                                    "axes": {"toy.W": [5, 20, 100, 200],
                                             "toy.sigma_noise": [0.05, 0.1]}})
        configs = spec.expand()
        assert len(configs) == 96
        assert len({(c.config_hash(), c.seed) for c in configs}) == 96

    def test_bad_axis_rejected(self):
        with pytest.raises(ConfigError):
            SweepSpec.from_dict({"base": {}, "axes": {"W": [1]}})
        with pytest.raises(ConfigError):
            SweepSpec.from_dict({"base": {}, "axes": {"toy.W": []}})

    def sweep_doc(self):
        return {"base": TINY, "axes": {"toy.seq_len": [6, 8]}, "variants": ["base", "tensor"],
                "seeds": [0, 1]}

    def test_jobs_do_not_change_table(self, tmp_path, capsys):
        path = write_yaml(tmp_path / "s.yaml", self.sweep_doc())
        assert cli.main(["sweep", "--config", path, "--out", str(tmp_path / "j1")]) == 0
        assert cli.main(["sweep", "--config", path, "--out", str(tmp_path / "j4"),
                         "--jobs", "4"]) == 0
        key = lambda r: (r["config_hash"], r["seed"])
        a = sorted(read_table(tmp_path / "j1" / "results.csv"), key=key)
        b = sorted(read_table(tmp_path / "j4" / "results.csv"), key=key)
        assert len(a) == 8 and a == b
        assert (tmp_path / "j1" / "pivot_no_harm.csv").exists()

    def test_rerun_skips_completed(self, tmp_path):
        configs = SweepSpec.from_dict(self.sweep_doc()).expand()
        run_cells(configs[:3], tmp_path)
        seen = []
        rows = run_cells(configs, tmp_path, log=seen.append)
        assert len(rows) == 8
        assert sum(" step 0 " in line for line in seen) == 5

    def test_failed_cell_recorded(self, tmp_path, monkeypatch):
        from tensor_memory import sweep

        def boom(cfg, out, log=None):
            raise RuntimeError("disk on fire")

        configs = SweepSpec.from_dict(self.sweep_doc()).expand()[:2]
        monkeypatch.setattr(sweep, "run_experiment", boom)
        rows = run_cells(configs, tmp_path)
        assert [r["status"] for r in rows] == ["failed", "failed"]
        assert "disk on fire" in rows[0]["message"]

    def test_pivot_means(self):
        rows = [{"task": "t", "variant": "base", "axis": "W=5", "accuracy": a, "status": "completed",
                 "name": ""} for a in ("0.5", "1.0")]
        assert pivot(rows, "t")["W=5"]["base"] == (0.75, 2)


class TestAblation:
    def test_grid_size(self):
        configs = ablation_configs()
        assert len(configs) == 24
        assert len({c.name for c in configs}) == 8
        for c in configs:
            assert c.toy.W == 20 and c.toy.sigma_noise == 0.05 and c.model.variant == "tensor"

    def test_resolution_leaves_parameter_count(self):
        small = build_model(ablation_configs(names=["default"], seeds=(0,))[0])
        large = build_model(ablation_configs(names=["grid=8"], seeds=(0,))[0])
        assert small.n_params == large.n_params

    def test_hard_write_trains(self, tmp_path):
        base = {k: TINY[k] for k in ("model", "memory", "train")}
        configs = ablation_configs(base, seeds=(0,), names=["write=hard"])
        rows = run_cells(configs, tmp_path)
        assert rows[0]["status"] in ("completed", "early_stopped", "perfect")
