"""Tests for the command-line interface."""

import json
import shutil

import numpy as np
import pandas as pd
import pytest

from cardiophase.cli import (
    EXIT_IO,
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_RULE,
    EXIT_USAGE,
    RunConfig,
    _subject_config,
    build_config,
    write_cohort_average,
    create_parser,
    exit_code_for,
    main,
)
from cardiophase.errors import ConfigError, DegenerateInputError, PhaseRuleError, RegistrationError, VolumeFormatError
from cardiophase.phantom import PhantomConfig, descriptor_from_truth, generate_phantom
from cardiophase.report import read_phases

SMALL_PHANTOM = {"shape": [30, 8, 24, 24], "inner_radius": 6.0, "wall_thickness": 2.0}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"phantom": SMALL_PHANTOM, "sigma": 2.0}))
    return path


@pytest.fixture
def phantom_dir(tmp_path, config_file):
    out = tmp_path / "phantom"
    assert main(["phantom", "--config", str(config_file), "--out", str(out)]) == EXIT_OK
    return out


class TestConfiguration:
    """Tests for configuration merging and validation."""

    def test_flags_override_config_file(self, config_file):
        args = create_parser().parse_args(["detect", "--phantom-default", "--config", str(config_file), "--sigma", "3"])
        cfg = build_config(args)
        assert cfg.sigma == 3.0
        assert cfg.phantom.shape == (30, 8, 24, 24)
        assert cfg.phantom_default

    def test_registration_flags(self):
        args = create_parser().parse_args(["register", "in.nrrd", "--lambda", "0.01", "--iters", "7"])
        cfg = build_config(args)
        assert cfg.registration.lambda_ == 0.01
        assert cfg.registration.iters_per_level == 7
        assert cfg.registration.ssim_window == 7

    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"smoothing": 3}))
        with pytest.raises(ConfigError):
            RunConfig.from_json(path)

    def test_validation(self):
        with pytest.raises(ConfigError):
            RunConfig(focus="sept").validate()
        with pytest.raises(ConfigError):
            RunConfig(focus="lv").validate()
        with pytest.raises(ConfigError):
            RunConfig(input="a.nrrd", phantom_default=True).validate(needs_source=True)
        with pytest.raises(ConfigError):
            RunConfig().validate(needs_source=True)
        RunConfig(focus="sept", rvip_ant=(1, 2, 3), rvip_inf=(1, 4, 5)).validate()

    def test_exit_codes(self):
        assert exit_code_for(ConfigError("x")) == EXIT_USAGE
        assert exit_code_for(VolumeFormatError("x")) == EXIT_IO
        assert exit_code_for(FileNotFoundError("x")) == EXIT_IO
        assert exit_code_for(RegistrationError("x", iteration=3)) == EXIT_NUMERICAL
        assert exit_code_for(DegenerateInputError("x")) == EXIT_NUMERICAL
        assert exit_code_for(PhaseRuleError("ED", (1, 2))) == EXIT_RULE

    def test_manifest_subject(self, tmp_path):
        entry = {"id": "s01", "input": "data/s01.nrrd", "rvip_ant": [1, 2, 3]}
        cfg = _subject_config(RunConfig(jobs=4), entry, tmp_path, tmp_path / "out")
        assert cfg.subject == "s01"
        assert cfg.input == str((tmp_path / "data" / "s01.nrrd").resolve())
        assert cfg.out_dir == str(tmp_path / "out" / "s01")
        assert cfg.rvip_ant == (1, 2, 3)
        assert cfg.jobs == 1
        assert cfg.focus == "vol"

    def test_manifest_subject_settings(self, tmp_path):
        entry = {"id": "s02", "input": "s02.nrrd", "focus": "mse", "sigma": 1.0}
        cfg = _subject_config(RunConfig(sigma=3.0), entry, tmp_path, tmp_path / "out")
        assert cfg.focus == "mse"
        assert cfg.sigma == 1.0
        with pytest.raises(ConfigError):
            _subject_config(RunConfig(), {"id": "s02", "scanner": "x"}, tmp_path, tmp_path)


class TestUsageErrors:
    """Invalid invocations exit with the documented codes."""

    def test_missing_command(self):
        assert main([]) == EXIT_USAGE

    def test_unknown_option(self):
        assert main(["phases", "--bogus"]) == EXIT_USAGE

    def test_septal_focus_without_landmarks(self, tmp_path):
        assert main(["detect", "--phantom-default", "--focus", "sept", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_two_input_sources(self, tmp_path):
        assert main(["detect", "in.nrrd", "--phantom-default", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_missing_input_file(self, tmp_path):
        assert main(["register", str(tmp_path / "missing.nrrd"), "--out", str(tmp_path / "run")]) == EXIT_IO

    def test_constant_volume_is_numerical_failure(self, tmp_path):
        from cardiophase.imgvol import Volume4D, save_volume4d

        path = save_volume4d(Volume4D(np.ones((3, 4, 8, 8), dtype=np.float32), (2.5, 2.5, 2.5)), tmp_path / "flat.json")
        assert main(["register", str(path), "--out", str(tmp_path / "run")]) == EXIT_NUMERICAL


class TestCommands:
    """Stage commands on a small phantom."""

    def test_phantom_outputs(self, phantom_dir):
        assert (phantom_dir / "volume.json").exists()
        assert (phantom_dir / "volume.raw").exists()
        assert (phantom_dir / "fields" / "fields.json").exists()
        truth = read_phases(phantom_dir / "truth.json")
        assert truth.T == 30

    def test_phantom_check(self, tmp_path, config_file):
        out = tmp_path / "checked"
        assert main(["phantom", "--config", str(config_file), "--out", str(out), "--check"]) == EXIT_OK
        check = json.loads((out / "check.json").read_text())
        assert check["phases"]["T"] == 30
        assert max(check["pfd"].values()) <= 1

    def test_register_writes_fields(self, tmp_path, phantom_dir):
        run = tmp_path / "run"
        code = main(
            ["register", str(phantom_dir / "volume.json"), "--out", str(run), "--pyramid-levels", "1", "--iters", "2"]
        )
        assert code == EXIT_OK
        sidecar = json.loads((run / "fields" / "fields.json").read_text())
        assert sidecar["T"] == 30
        assert sidecar["registration"]["iters_per_level"] == 2
        assert json.loads((run / "preprocess.json").read_text())["original_T"] == 30

    def test_stages_on_true_fields(self, tmp_path, phantom_dir):
        """descriptor -> phases -> qc -> eval on the analytic fields recovers the labels."""
        run = tmp_path / "run"
        shutil.copytree(phantom_dir / "fields", run / "fields")
        shutil.copy(phantom_dir / "volume.json", run / "preprocessed.json")
        shutil.copy(phantom_dir / "volume.raw", run / "volume.raw")
        truth = str(phantom_dir / "truth.json")

        assert main(["descriptor", "--out", str(run), "--slice-profiles"]) == EXIT_OK
        assert main(["phases", "--out", str(run)]) == EXIT_OK
        assert main(["qc", "--out", str(run)]) == EXIT_OK
        assert main(["eval", "--out", str(run), "--truth", truth, "--subject", "phantom"]) == EXIT_OK

        assert len(pd.read_csv(run / "descriptor.csv")) == 30
        profiles = pd.read_csv(run / "slice_profiles.csv")
        assert list(profiles.columns) == ["t", "z", "alpha", "vnorm_mm"]
        assert len(profiles) == 30 * 8
        assert json.loads((run / "qc.json").read_text())["cutoff_flag"] is False
        table = pd.read_csv(run / "eval.csv")
        assert table.loc[0, "subject"] == "phantom"
        assert max(table.loc[0, f"{p}_pfd"] for p in ("ed", "ms", "es", "pf", "md")) <= 1

        # running a stage again reproduces its output
        first = (run / "phases.json").read_text()
        assert main(["phases", "--out", str(run)]) == EXIT_OK
        assert (run / "phases.json").read_text() == first

    def test_eval_needs_truth(self, tmp_path):
        assert main(["eval", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_cohort_records_failures(self, tmp_path):
        manifest = tmp_path / "manifest.json"
        manifest.write_text(json.dumps({"subjects": [{"id": "s01", "input": "missing.nrrd"}]}))
        out = tmp_path / "cohort"
        assert main(["cohort", str(manifest), "--out", str(out)]) == EXIT_IO
        summary = json.loads((out / "cohort_summary.json").read_text())
        assert summary["failures"][0]["subject"] == "s01"
        assert summary["evaluated"] == 0
        assert len(pd.read_csv(out / "evaluation.csv")) == 0

    def test_cohort_average_from_two_subjects(self, tmp_path):
        """Curves of different lengths, aligned at their key frames, give one mean curve and figure."""
        curves = []
        for shape, offset in (((30, 8, 24, 24), 0), ((24, 8, 24, 24), 5)):
            _, truth = generate_phantom(PhantomConfig(shape=shape, inner_radius=6.0, wall_thickness=2.0, phase_offset=offset))
            desc = descriptor_from_truth(truth)
            curves.append((desc.alpha_norm, desc.vnorm_raw, truth.phases))
        write_cohort_average(curves, tmp_path)
        table = pd.read_csv(tmp_path / "cohort_descriptor.csv")
        assert list(table.columns) == ["position", "segment", "alpha_mean", "alpha_sd", "vnorm_mean_mm", "vnorm_sd_mm"]
        assert len(table) == 50
        assert table.loc[0, "segment"] == "ed"
        assert table.loc[10, "segment"] == "ms"
        assert table["alpha_mean"].between(-1.0, 1.0).all()
        assert (tmp_path / "cohort_descriptor.svg").exists()


@pytest.mark.slow
class TestDetect:
    """End-to-end runs with registration."""

    def test_detect_on_phantom(self, tmp_path, config_file):
        out = tmp_path / "run"
        assert main(["detect", "--phantom-default", "--config", str(config_file), "--out", str(out)]) == EXIT_OK
        for name in ("descriptor.csv", "phases.json", "qc.json", "eval.csv", "descriptor.svg", "phantom/truth.json"):
            assert (out / name).exists(), name
        table = pd.read_csv(out / "eval.csv")
        assert max(table.loc[0, f"{p}_pfd"] for p in ("ed", "ms", "es", "pf", "md")) <= 2

    def test_detect_equals_stages(self, tmp_path, config_file, phantom_dir):
        volume = str(phantom_dir / "volume.json")
        flags = ["--pyramid-levels", "2", "--iters", "30"]
        detect = tmp_path / "detect"
        stages = tmp_path / "stages"
        assert main(["detect", volume, "--out", str(detect)] + flags) == EXIT_OK
        assert main(["register", volume, "--out", str(stages)] + flags) == EXIT_OK
        for command in ("descriptor", "phases", "qc"):
            assert main([command, "--out", str(stages)]) == EXIT_OK
        for name in ("descriptor.csv", "phases.json", "qc.json"):
            assert (detect / name).read_text() == (stages / name).read_text(), name

    def test_detect_mse_focus_on_default_phantom(self, tmp_path):
        """Centre of temporal change on the default phantom: ED, MS, ES within one frame, PF and MD within two."""
        out = tmp_path / "run"
        assert main(["detect", "--phantom-default", "--focus", "mse", "--out", str(out)]) == EXIT_OK
        row = pd.read_csv(out / "eval.csv").loc[0]
        for name in ("ed", "ms", "es"):
            assert row[f"{name}_pfd"] <= 1, name
        for name in ("pf", "md"):
            assert row[f"{name}_pfd"] <= 2, name
        assert json.loads((out / "qc.json").read_text())["cutoff_flag"] is False

    def test_reruns_are_byte_identical(self, tmp_path, config_file):
        """Two runs with the same config and seed write the same bytes, figure included."""
        runs = [tmp_path / name / "run" for name in ("first", "second")]
        for out in runs:
            assert main(["detect", "--phantom-default", "--config", str(config_file), "--out", str(out)]) == EXIT_OK
        files = sorted(p.relative_to(runs[0]) for p in runs[0].rglob("*") if p.is_file() and p.name != "run_config.json")
        assert {"descriptor.csv", "descriptor.json", "phases.json", "qc.json", "eval.csv", "descriptor.svg"} <= {
            str(p) for p in files
        }
        for rel in files:
            assert (runs[0] / rel).read_bytes() == (runs[1] / rel).read_bytes(), rel

    def test_cohort_of_phantoms(self, tmp_path, config_file):
        manifest = tmp_path / "manifest.json"
        subjects = [{"id": "a", "phantom": {"phase_offset": 0}}, {"id": "b", "phantom": {"phase_offset": 7}}]
        manifest.write_text(json.dumps({"subjects": subjects}))
        out = tmp_path / "cohort"
        assert main(["cohort", str(manifest), "--config", str(config_file), "--out", str(out)]) == EXIT_OK
        summary = json.loads((out / "cohort_summary.json").read_text())
        assert summary["evaluated"] == 2
        assert summary["aligned"] == 2
        assert summary["phases"]["ed"]["afd_mean"] is not None
        assert len(pd.read_csv(out / "cohort_descriptor.csv")) == 50
        assert (out / "cohort_descriptor.svg").exists()
