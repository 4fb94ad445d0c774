"""Tests for the run configuration, staged driver, and command-line interface."""

import json
import math

import numpy as np
import pytest

from cvmd.cli import (
    EXIT_DATA,
    EXIT_OK,
    EXIT_TRAINING,
    EXIT_USAGE,
    _apply_overrides,
    _coerce,
    _split_overrides,
    main,
)
from cvmd.errors import ConfigError
from cvmd.pipeline import RunConfig, config_hash, desk_config


class TestRunConfig:
    def test_dict_round_trip(self):
        cfg = RunConfig()
        cfg.seed = 7
        cfg.diffusion.epochs = 12
        cfg.sampling.guidance = 3.0
        again = RunConfig.from_dict(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()

    def test_unknown_key_rejected(self):
        data = RunConfig().to_dict()
        data["vqvae"]["typo_key"] = 1
        with pytest.raises(ConfigError):
            RunConfig.from_dict(data)

    def test_json_round_trip(self, tmp_path):
        cfg = desk_config(seed=3)
        path = tmp_path / "run.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert RunConfig.from_json(path).to_dict() == cfg.to_dict()

    def test_hash_deterministic_and_sensitive(self):
        a = config_hash(RunConfig())
        b = config_hash(RunConfig())
        assert a == b
        cfg = RunConfig()
        cfg.seed = 1
        assert config_hash(cfg) != a

    def test_desk_config_seed(self):
        assert desk_config(seed=5).seed == 5

    def test_default_limits(self):
        cfg = RunConfig()
        assert cfg.limits.yaw_rate_max == pytest.approx(math.radians(71.26))
        assert cfg.limits.accel_max == 9.0


class TestOverrideParsing:
    def test_split_overrides(self):
        regular, overrides = _split_overrides(
            ["predict", "--run-dir", "x", "--sampling.num_samples=4",
             "--guidance", "uc", "--uq.t_c=3.5"])
        assert regular == ["predict", "--run-dir", "x", "--guidance", "uc"]
        assert overrides == ["--sampling.num_samples=4", "--uq.t_c=3.5"]

    def test_coerce_types(self):
        assert _coerce("4") == 4
        assert _coerce("0.5") == 0.5
        assert _coerce("true") is True
        assert _coerce("uc") == "uc"
        assert _coerce("[1, 2]") == [1, 2]

    def test_apply_overrides(self):
        base = {"sampling": {"num_samples": 8}}
        out = _apply_overrides(base, ["--sampling.num_samples=2",
                                      "--uq.t_c=3.0"])
        assert out["sampling"]["num_samples"] == 2
        assert out["uq"]["t_c"] == 3.0

    def test_malformed_override(self):
        with pytest.raises(ConfigError):
            _apply_overrides({}, ["--sampling.num_samples"])
        with pytest.raises(ConfigError):
            _apply_overrides({}, ["--a.b.c=1"])


def _tiny_args(run_dir):
    """Overrides that shrink every stage to a couple of seconds."""
    return [
        "--run-dir", str(run_dir),
        "--dataset.samples_per_class=4",
        "--vqvae.epochs=5", "--vqvae.codebook_size=8", "--vqvae.latent_dim=6",
        "--vqvae.learning_rate=0.001",
        "--diffusion.epochs=3", "--diffusion.steps=10",
        "--diffusion.base_channels=8",
        "--sampling.num_samples=2",
    ]


class TestCliStages:
    def test_full_tiny_run(self, tmp_path, capsys):
        run = tmp_path / "run"
        args = _tiny_args(run)
        assert main(["prepare", *args]) == EXIT_OK
        assert (run / "dataset").is_dir()
        manifest = json.loads((run / "manifest.json").read_text())
        assert "config_hash" in manifest and "version" in manifest

        assert main(["train-vqvae", *args]) == EXIT_OK
        assert (run / "vqvae" / "params.bin").exists()
        assert (run / "vqvae" / "usage_histogram.csv").exists()

        assert main(["train-diffusion", *args]) == EXIT_OK
        assert (run / "diffusion" / "params.bin").exists()
        assert (run / "conditions.json").exists()

        assert main(["fit-uq", *args]) == EXIT_OK
        assert (run / "uq" / "stats.bin").exists()

        assert main(["predict", *args, "--guidance", "2.0"]) == EXIT_OK
        metrics = (run / "predictions" / "metrics.csv").read_text().splitlines()
        assert metrics[0].startswith("sample_id,condition,delta_m")
        assert all(row.split(",")[3] == "2" for row in metrics[1:])

        assert main(["evaluate", *args]) == EXIT_OK
        summary = json.loads((run / "evaluation" / "summary.json").read_text())
        assert {"mean_ade", "mean_fde", "drivable_fraction",
                "entropy"} <= set(summary)

        assert main(["ablate", *args, "--guidance-values", "0,uc"]) == EXIT_OK
        ablation = (run / "evaluation" / "ablation.csv").read_text().splitlines()
        assert ablation[0] == "w,mean_ade,mean_fde,drivable_fraction"
        assert len(ablation) == 3
        capsys.readouterr()  # keep stage prints out of the pytest output

    def test_env_var_run_root(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("CVMD_RUN_ROOT", str(tmp_path / "root"))
        monkeypatch.chdir(tmp_path)
        code = main(["prepare", "--dataset.samples_per_class=2"])
        assert code == EXIT_OK
        assert (tmp_path / "root" / "default" / "dataset").is_dir()
        capsys.readouterr()

    def test_missing_config_file_is_usage_error(self, tmp_path, capsys):
        code = main(["prepare", "--config", str(tmp_path / "nope.json"),
                     "--run-dir", str(tmp_path / "r")])
        assert code == EXIT_USAGE
        capsys.readouterr()

    def test_unknown_override_is_usage_error(self, tmp_path, capsys):
        code = main(["prepare", "--run-dir", str(tmp_path / "r"),
                     "--vqvae.bogus=1"])
        assert code == EXIT_USAGE
        capsys.readouterr()

    def test_stage_without_artifacts_is_usage_error(self, tmp_path, capsys):
        code = main(["train-vqvae", "--run-dir", str(tmp_path / "empty")])
        assert code == EXIT_USAGE
        capsys.readouterr()

    def test_malformed_tracks_is_data_error(self, tmp_path, capsys):
        bad = tmp_path / "tracks.csv"
        bad.write_text("id,frame\n1,0\n")
        code = main(["prepare", "--run-dir", str(tmp_path / "r"),
                     f"--dataset.source={bad}"])
        assert code == EXIT_DATA
        capsys.readouterr()

    def test_empty_training_set_is_training_error(self, tmp_path, capsys):
        run = tmp_path / "run"
        args = ["--run-dir", str(run), "--dataset.samples_per_class=2",
                "--dataset.train_fraction=0.0"]
        assert main(["prepare", *args]) == EXIT_OK
        code = main(["train-vqvae", *args])
        assert code == EXIT_TRAINING
        capsys.readouterr()

    def test_no_arguments_is_usage_error(self, capsys):
        assert main([]) == EXIT_USAGE
        capsys.readouterr()

    def test_help_exits_cleanly(self, capsys):
        assert main(["--help"]) == EXIT_OK
        capsys.readouterr()


class TestDeterminism:
    def test_prepare_bitwise_reproducible(self, tmp_path, capsys):
        args_a = ["prepare", "--run-dir", str(tmp_path / "a"),
                  "--dataset.samples_per_class=3"]
        args_b = ["prepare", "--run-dir", str(tmp_path / "b"),
                  "--dataset.samples_per_class=3"]
        assert main(args_a) == EXIT_OK
        assert main(args_b) == EXIT_OK
        for name in ("manifest.json",):
            assert ((tmp_path / "a" / name).read_bytes()
                    == (tmp_path / "b" / name).read_bytes())
        a_files = sorted(p.name for p in (tmp_path / "a" / "dataset").iterdir())
        for name in a_files:
            assert ((tmp_path / "a" / "dataset" / name).read_bytes()
                    == (tmp_path / "b" / "dataset" / name).read_bytes())
        capsys.readouterr()
