"""Command-line interface.

Every stage command reads and writes a run directory (``--out``)::

    out/
      preprocessed.json/.raw   preprocessed sequence
      preprocess.json          PreprocessReport
      fields/                  displacement fields + fields.json sidecar
      descriptor.csv/.json     motion descriptor + sidecar
      slice_profiles.csv       per-slice profiles (with --slice-profiles)
      phases.json              key frames (0-based)
      qc.json                  cut-off verdict
      eval.csv                 pFD against labels (when labels are given)
      descriptor.svg           figure

``detect`` runs all stages in order on the same directory, so it produces exactly what the
stage commands produce when run one after another.

Exit codes: 0 ok, 1 usage, 2 I/O, 3 numerical failure, 4 key-frame rule failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import __version__
from .descriptor import STRATEGIES, compute_descriptor, magnitude_mask, select_focus, slice_profiles
from .errors import (
    CardiophaseError,
    ConfigError,
    DegenerateInputError,
    PhaseRuleError,
    RegistrationError,
    VolumeFormatError,
)
from .evalqc import (
    DEFAULT_CUTOFF_THRESHOLD,
    QcVerdict,
    average_aligned,
    detect_cutoff,
    evaluate_phases,
    summarize_cohort,
)
from .imgvol import PreprocessReport, load_volume4d, preprocess, read_raw_json, save_volume4d
from .phantom import PhantomConfig, descriptor_from_truth, generate_phantom, save_phantom
from .phases import extract_phases, phases_to_original
from .register import RegistrationConfig, load_fields, register_sequence, save_fields
from .report import (
    evaluation_row,
    plot_cohort_curve,
    plot_descriptor,
    read_descriptor,
    read_json,
    read_phases,
    write_cohort_curve,
    write_descriptor,
    write_evaluation,
    write_json,
    write_phases,
    write_slice_profiles,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERICAL = 3
EXIT_RULE = 4

COHORT_POINTS_PER_SEGMENT = 10

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


# --------------------------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------------------------


@dataclass
class RunConfig:
    """
    Settings of one pipeline run.

    Values come from the dataclass defaults, then the JSON config file (``--config``), then
    explicitly given command-line flags.
    """

    input: str | None = None
    phantom_default: bool = False
    out_dir: str = "cardiophase_out"
    format: str = "auto"
    subject: str | None = None
    truth: str | None = None
    focus: str = "vol"
    rvip_ant: tuple | None = None
    rvip_inf: tuple | None = None
    lv_mask: str | None = None
    mse_quantile: float = 0.70
    mse_fallback: bool = False
    mask_quantile: float = 0.70
    sigma: float = 2.0
    unmasked: bool = False
    slice_profiles: bool = False
    spacing_mm: float = 2.5
    clip_quantile: float = 0.999
    repeat_to: int | None = None
    crop_shape: tuple | None = None
    cutoff_threshold: float = DEFAULT_CUTOFF_THRESHOLD
    jobs: int = 1
    check: bool = False
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)

    def validate(self, needs_source=False):
        """Check option combinations; raise :class:`ConfigError` on the first problem."""
        if self.focus not in STRATEGIES:
            raise ConfigError(f"--focus must be one of {STRATEGIES}, got {self.focus!r}")
        if self.focus == "sept" and (self.rvip_ant is None or self.rvip_inf is None):
            raise ConfigError("--focus sept needs both --rvip-ant and --rvip-inf landmark coordinates")
        if self.focus == "lv" and self.lv_mask is None:
            raise ConfigError("--focus lv needs --lv-mask")
        if needs_source and bool(self.input) == bool(self.phantom_default):
            raise ConfigError("give exactly one input source: an input file or --phantom-default")
        for name in ("mse_quantile", "mask_quantile"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in (0, 1), got {getattr(self, name)}")
        if not 0.5 < self.clip_quantile <= 1.0:
            raise ConfigError(f"clip_quantile must be in (0.5, 1], got {self.clip_quantile}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if not self.spacing_mm > 0:
            raise ConfigError(f"spacing_mm must be positive, got {self.spacing_mm}")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        """Build a config from a (JSON) dict with nested ``registration`` and ``phantom`` entries."""
        values = dict(values)
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"Unknown configuration keys: {sorted(unknown)}")
        try:
            if isinstance(values.get("registration"), dict):
                values["registration"] = RegistrationConfig.from_dict(values["registration"])
            if isinstance(values.get("phantom"), dict):
                values["phantom"] = PhantomConfig(**values["phantom"])
            for name in ("rvip_ant", "rvip_inf", "crop_shape"):
                if values.get(name) is not None:
                    values[name] = tuple(values[name])
            return cls(**values)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid configuration: {e}") from e

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(read_json(path))


REGISTRATION_FLAGS = {
    "lambda_": "lambda_",
    "ssim_window": "ssim_window",
    "pyramid_levels": "pyramid_levels",
    "iters": "iters_per_level",
    "step_size": "step_size",
    "tol": "convergence_tol",
}
PHANTOM_FLAGS = {
    "shape": "shape",
    "amplitude": "amplitude",
    "noise_sigma": "noise_sigma",
    "phase_offset": "phase_offset",
    "truncate": "truncate_fraction",
    "seed": "seed",
}


def _as_tuple(value):
    return tuple(value) if isinstance(value, list) else value


def build_config(args):
    """Merge defaults, the optional JSON config file and the explicitly given flags."""
    cfg = RunConfig.from_json(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None and f.name not in ("registration", "phantom"):
            overrides[f.name] = _as_tuple(value)
    try:
        reg = {
            target: getattr(args, flag) for flag, target in REGISTRATION_FLAGS.items() if getattr(args, flag, None) is not None
        }
        if reg:
            overrides["registration"] = replace(cfg.registration, **reg)
        ph = {
            target: _as_tuple(getattr(args, flag))
            for flag, target in PHANTOM_FLAGS.items()
            if getattr(args, flag, None) is not None
        }
        if ph:
            overrides["phantom"] = replace(cfg.phantom, **ph)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return replace(cfg, **overrides)


# --------------------------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------------------------


def exit_code_for(error):
    """Map an exception to the documented exit status."""
    if isinstance(error, PhaseRuleError):
        return EXIT_RULE
    if isinstance(error, ConfigError):
        return EXIT_USAGE
    if isinstance(error, (RegistrationError, DegenerateInputError)):
        return EXIT_NUMERICAL
    if isinstance(error, (VolumeFormatError, OSError)):
        return EXIT_IO
    return EXIT_NUMERICAL


@contextmanager
def _stage(subject, name):
    logger.info(f"[{subject}] {name}")
    try:
        yield
    except (CardiophaseError, OSError, ValueError) as e:
        logger.error(f"[{subject}] {name} failed: {e}")
        raise


def _prepare_out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"Output directory is not writable: {out}")
    return out


def _subject_name(cfg):
    if cfg.subject:
        return cfg.subject
    if cfg.input:
        return Path(cfg.input).stem
    return "phantom"


def run_register(cfg, vol, out):
    """Preprocess, register every frame pair and write the results."""
    pvol, report = preprocess(
        vol,
        spacing_mm=cfg.spacing_mm,
        quantile=cfg.clip_quantile,
        repeat_to=cfg.repeat_to,
        crop_shape=cfg.crop_shape,
    )
    save_volume4d(pvol, out / "preprocessed.json")
    write_json(out / "preprocess.json", report.to_dict())
    jobs = min(cfg.jobs, pvol.T)
    results = register_sequence(pvol, cfg.registration, jobs=jobs, return_results=True)
    fields_ = [r.field for r in results]
    save_fields(out / "fields", fields_, cfg.registration, results)
    return pvol, report, fields_


def _load_lv_mask(path):
    data, _ = read_raw_json(path, ndim=3)
    return data > 0.5


def run_descriptor(cfg, fields_, pvol, report, out):
    """Focus point, mask, reduction and normalisation; writes the descriptor files."""
    landmarks = None if cfg.focus != "sept" else (cfg.rvip_ant, cfg.rvip_inf)
    mask = _load_lv_mask(cfg.lv_mask) if cfg.focus == "lv" else None
    focus = select_focus(cfg.focus, pvol, mask=mask, landmarks=landmarks, quantile=cfg.mse_quantile, fallback=cfg.mse_fallback)
    desc = compute_descriptor(fields_, focus, mask_quantile=cfg.mask_quantile, sigma=cfg.sigma, masked=not cfg.unmasked)
    write_descriptor(
        out / "descriptor.csv",
        desc,
        extra={"original_T": report.original_T, "repeated_to": report.repeated_to},
    )
    if cfg.slice_profiles:
        mask = magnitude_mask(fields_, cfg.mask_quantile) if not cfg.unmasked else None
        alpha, vnorm = slice_profiles(fields_, focus, mask)
        write_slice_profiles(out / "slice_profiles.csv", alpha[: report.original_T], vnorm[: report.original_T])
    return desc


def run_phases(desc, report, out):
    ps = extract_phases(desc)
    if report.repeated_to > 0:
        ps = phases_to_original(ps, report)
    write_phases(out / "phases.json", ps)
    return ps


def run_qc(cfg, desc, report, out):
    verdict = detect_cutoff(desc.vnorm_raw[: report.original_T], threshold=cfg.cutoff_threshold)
    write_json(out / "qc.json", verdict.to_dict())
    return verdict


def run_eval(subject, ps, truth, verdict, out):
    evaluation = evaluate_phases(ps, truth) if truth is not None else None
    if evaluation is not None:
        logger.info(f"[{subject}] pFD {evaluation.per_phase_pfd} (mean {evaluation.mean:.2f})")
    row = evaluation_row(subject, ps.T, evaluation, verdict)
    write_evaluation(out / "eval.csv", [row])
    return row, evaluation


def _report_from_sidecar(sidecar, T):
    original_T = int(sidecar.get("original_T", T))
    return PreprocessReport(original_T=original_T, repeated_to=int(sidecar.get("repeated_to", 0)))


def _load_stage_report(out, T):
    path = out / "descriptor.json"
    return _report_from_sidecar(read_json(path) if path.exists() else {}, T)


# --------------------------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------------------------


def run_detect(cfg):
    """
    Run the whole pipeline on one sequence (or on the generated phantom).

    Returns
    -------
    (PhaseSet, QcVerdict, PhaseEval or None)
    """
    cfg.validate(needs_source=True)
    out = _prepare_out_dir(cfg.out_dir)
    subject = _subject_name(cfg)
    truth = None
    with _stage(subject, "load"):
        if cfg.phantom_default:
            vol, phantom_truth = generate_phantom(cfg.phantom)
            save_phantom(out / "phantom", vol, phantom_truth, cfg.phantom)
            truth = phantom_truth.phases
        else:
            vol = load_volume4d(cfg.input, cfg.format)
        if cfg.truth:
            truth = read_phases(cfg.truth)
    with _stage(subject, "register"):
        _, report, _ = run_register(cfg, vol, out)
    with _stage(subject, "descriptor"):
        # continue from the written float32 files, as the descriptor command does
        pvol = load_volume4d(out / "preprocessed.json")
        fields_ = load_fields(out / "fields")
        desc = run_descriptor(cfg, fields_, pvol, report, out)
    with _stage(subject, "phases"):
        ps = run_phases(desc, report, out)
    with _stage(subject, "qc"):
        verdict = run_qc(cfg, desc, report, out)
    if truth is not None and truth.T != ps.T:
        logger.warning(f"[{subject}] labels refer to T={truth.T} but the sequence has T={ps.T}; skipping evaluation")
        truth = None
    evaluation = None
    if truth is not None:
        with _stage(subject, "eval"):
            _, evaluation = run_eval(subject, ps, truth, verdict, out)
    plot_descriptor(out / "descriptor.svg", desc, ps, n_frames=report.original_T, title=subject)
    write_json(out / "run_config.json", cfg.to_dict())
    return ps, verdict, evaluation


def cmd_detect(cfg):
    """Full pipeline; see :func:`run_detect`."""
    run_detect(cfg)
    return EXIT_OK


def cmd_register(cfg):
    cfg.validate()
    if not cfg.input:
        raise ConfigError("register needs an input file")
    out = _prepare_out_dir(cfg.out_dir)
    subject = _subject_name(cfg)
    with _stage(subject, "register"):
        vol = load_volume4d(cfg.input, cfg.format)
        run_register(cfg, vol, out)
    return EXIT_OK


def cmd_descriptor(cfg):
    cfg.validate()
    out = _prepare_out_dir(cfg.out_dir)
    subject = _subject_name(cfg)
    with _stage(subject, "descriptor"):
        fields_ = load_fields(out / "fields")
        pvol = load_volume4d(out / "preprocessed.json")
        report_path = out / "preprocess.json"
        sidecar = read_json(report_path) if report_path.exists() else {}
        report = _report_from_sidecar(sidecar, pvol.T)
        run_descriptor(cfg, fields_, pvol, report, out)
    return EXIT_OK


def cmd_phases(cfg):
    out = _prepare_out_dir(cfg.out_dir)
    subject = _subject_name(cfg)
    with _stage(subject, "phases"):
        desc = read_descriptor(out / "descriptor.csv")
        run_phases(desc, _load_stage_report(out, desc.T), out)
    return EXIT_OK


def cmd_qc(cfg):
    out = _prepare_out_dir(cfg.out_dir)
    subject = _subject_name(cfg)
    with _stage(subject, "qc"):
        desc = read_descriptor(out / "descriptor.csv")
        run_qc(cfg, desc, _load_stage_report(out, desc.T), out)
    return EXIT_OK


def cmd_eval(cfg):
    if not cfg.truth:
        raise ConfigError("eval needs --truth (a phases JSON or a phantom truth.json)")
    out = _prepare_out_dir(cfg.out_dir)
    subject = _subject_name(cfg)
    with _stage(subject, "eval"):
        ps = read_phases(out / "phases.json")
        truth = read_phases(cfg.truth)
        qc_path = out / "qc.json"
        verdict = None
        if qc_path.exists():
            verdict = QcVerdict.from_dict(read_json(qc_path))
        run_eval(subject, ps, truth, verdict, out)
    return EXIT_OK


def cmd_phantom(cfg):
    out = _prepare_out_dir(cfg.out_dir)
    vol, truth = generate_phantom(cfg.phantom)
    save_phantom(out, vol, truth, cfg.phantom)
    if cfg.check:
        check_phantom(cfg, truth, out)
    return EXIT_OK


def check_phantom(cfg, truth, out):
    """Key frames from the analytic fields, compared with the phantom's truth; writes ``check.json``."""
    desc = descriptor_from_truth(truth, mask_quantile=cfg.mask_quantile, sigma=cfg.sigma, masked=not cfg.unmasked)
    ps = extract_phases(desc)
    payload = {"phases": ps.to_json_dict(), "pfd": None}
    if ps.T == truth.phases.T:
        evaluation = evaluate_phases(ps, truth.phases)
        payload["pfd"] = {name: int(value) for name, value in evaluation.per_phase_pfd.items()}
        logger.info(f"Phantom check: pFD {evaluation.per_phase_pfd}")
    else:
        logger.warning(f"Phantom keeps {ps.T} of {truth.phases.T} frames; pFD not computed")
    write_json(out / "check.json", payload)
    return ps, payload["pfd"]


SUBJECT_SETTINGS = {
    "format",
    "focus",
    "mse_quantile",
    "mse_fallback",
    "mask_quantile",
    "sigma",
    "unmasked",
    "spacing_mm",
    "clip_quantile",
    "repeat_to",
    "cutoff_threshold",
}


def _subject_config(base, entry, manifest_dir, out_root):
    """Per-subject config: paths relative to the manifest, plus any of ``SUBJECT_SETTINGS``."""
    entry = dict(entry)
    subject = str(entry.pop("id", entry.pop("subject", "")))
    if not subject:
        raise ConfigError("every manifest subject needs an 'id'")
    overrides = {"subject": subject, "out_dir": str(out_root / subject), "jobs": 1}
    for key in ("input", "truth", "lv_mask"):
        value = entry.pop(key, None)
        if value:
            overrides[key] = str((manifest_dir / value).resolve())
    if "phantom" in entry:
        try:
            overrides["phantom"] = replace(base.phantom, **entry.pop("phantom"))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"subject {subject}: invalid phantom settings ({e})") from e
        overrides["phantom_default"] = True
        overrides["input"] = None
    for key in ("rvip_ant", "rvip_inf", "crop_shape"):
        value = entry.pop(key, None)
        if value is not None:
            overrides[key] = tuple(value)
    for key in SUBJECT_SETTINGS & set(entry):
        overrides[key] = entry.pop(key)
    if entry:
        raise ConfigError(f"subject {subject}: unknown manifest keys {sorted(entry)}")
    return replace(base, **overrides)


def _run_subject(cfg):
    """Run ``detect`` for one cohort subject; returns ``(row, evaluation, curves, failure)``."""
    try:
        ps, verdict, evaluation = run_detect(cfg)
        desc = read_descriptor(Path(cfg.out_dir) / "descriptor.csv")
    except (CardiophaseError, OSError, ValueError) as e:
        return None, None, None, {"subject": cfg.subject, "exit_code": exit_code_for(e), "error": str(e)}
    row = evaluation_row(cfg.subject, ps.T, evaluation, verdict)
    # repeated sequences keep all analysed rows; the key frames refer to the original ones
    return row, evaluation, (desc.alpha_norm[: ps.T], desc.vnorm_raw[: ps.T], ps), None


def write_cohort_average(curves, out):
    """Align every subject's curves at its key frames and write the cohort mean as CSV and SVG."""
    alphas, vnorms, phase_sets = zip(*curves)
    alpha = average_aligned(alphas, phase_sets, COHORT_POINTS_PER_SEGMENT)
    vnorm = average_aligned(vnorms, phase_sets, COHORT_POINTS_PER_SEGMENT)
    write_cohort_curve(out / "cohort_descriptor.csv", alpha, vnorm, COHORT_POINTS_PER_SEGMENT)
    title = f"Cohort mean of {len(curves)} subject(s), aligned at the key frames"
    plot_cohort_curve(out / "cohort_descriptor.svg", alpha[0], vnorm[0], COHORT_POINTS_PER_SEGMENT, title=title)


def cmd_cohort(cfg, manifest_path):
    """Run ``detect`` for every subject of a manifest and aggregate the evaluation."""
    manifest_path = Path(manifest_path)
    manifest = read_json(manifest_path)
    if not isinstance(manifest.get("subjects"), list) or not manifest["subjects"]:
        raise ConfigError(f"{manifest_path}: manifest needs a non-empty 'subjects' list")
    out = _prepare_out_dir(cfg.out_dir)
    configs = [_subject_config(cfg, entry, manifest_path.parent, out) for entry in manifest["subjects"]]
    for c in configs:
        c.validate(needs_source=True)
    logger.info(f"Cohort of {len(configs)} subjects with {cfg.jobs} job(s)")
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            outcomes = list(pool.map(_run_subject, configs))
    else:
        outcomes = [_run_subject(c) for c in configs]

    rows = [row for row, _, _, _ in outcomes if row is not None]
    evaluations = [e for _, e, _, _ in outcomes if e is not None]
    curves = [c for _, _, c, _ in outcomes if c is not None]
    failures = [f for _, _, _, f in outcomes if f is not None]
    write_evaluation(out / "evaluation.csv", rows)
    if curves:
        write_cohort_average(curves, out)
    summary = {
        "subjects": len(configs),
        "evaluated": len(evaluations),
        "aligned": len(curves),
        "phases": summarize_cohort(evaluations) if evaluations else {},
        "failures": failures,
    }
    write_json(out / "cohort_summary.json", summary)
    for failure in failures:
        logger.error(f"[{failure['subject']}] failed with exit code {failure['exit_code']}: {failure['error']}")
    return failures[0]["exit_code"] if failures else EXIT_OK


# --------------------------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------------------------


class _ArgumentParser(argparse.ArgumentParser):
    """Argument parser reporting usage errors as :class:`ConfigError` (exit code 1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _common_options():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="Log debug output")
    common.add_argument("-q", "--quiet", action="store_true", help="Log warnings and errors only")
    common.add_argument("--log-file", help="Also write the log to this file")
    common.add_argument("--config", help="JSON configuration file (flags override it)")
    common.add_argument("-o", "--out", dest="out_dir", help="Run / output directory")
    common.add_argument("--subject", help="Subject identifier used in logs and tables")
    return common


def _add_input(parser):
    parser.add_argument("input", nargs="?", help="4D volume (.nrrd, or .json header of raw+json)")
    parser.add_argument("--format", choices=["auto", "nrrd", "raw+json"], help="Input format (default: auto)")


def _add_preprocess(parser):
    group = parser.add_argument_group("preprocessing")
    group.add_argument("--spacing", dest="spacing_mm", type=float, help="Isotropic spacing in mm (default: 2.5)")
    group.add_argument("--clip-quantile", type=float, help="Upper clipping quantile (default: 0.999)")
    group.add_argument("--repeat-to", type=int, help="Repeat frames cyclically to this length (default: off)")
    group.add_argument("--crop-shape", type=int, nargs=3, metavar=("Z", "Y", "X"), help="Center crop/pad shape")


def _add_registration(parser):
    group = parser.add_argument_group("registration")
    group.add_argument("--lambda", dest="lambda_", type=float, help="Regularisation weight (default: 0.001)")
    group.add_argument("--ssim-window", type=int, help="SSIM window size (default: 7)")
    group.add_argument("--pyramid-levels", type=int, help="Pyramid levels (default: 3)")
    group.add_argument("--iters", type=int, help="Iterations per level (default: 100)")
    group.add_argument("--step-size", type=float, help="Largest update per step in voxels (default: 0.25)")
    group.add_argument("--tol", type=float, help="Relative convergence tolerance (default: 1e-5)")
    group.add_argument("--jobs", type=int, help="Worker processes (default: 1)")


def _add_descriptor(parser):
    group = parser.add_argument_group("descriptor")
    group.add_argument("--focus", choices=STRATEGIES, help="Focus point strategy (default: vol)")
    group.add_argument("--rvip-ant", type=float, nargs=3, metavar=("Z", "Y", "X"), help="Anterior RV insertion point")
    group.add_argument("--rvip-inf", type=float, nargs=3, metavar=("Z", "Y", "X"), help="Inferior RV insertion point")
    group.add_argument("--lv-mask", help="Blood-pool mask on the preprocessed grid (raw+json, 3D)")
    group.add_argument("--mse-quantile", type=float, help="Threshold quantile of the MSE focus (default: 0.70)")
    group.add_argument(
        "--mse-fallback", action="store_const", const=True, help="Use the volume center if the MSE focus is undefined"
    )
    group.add_argument("--mask-quantile", type=float, help="Magnitude mask quantile (default: 0.70)")
    group.add_argument("--sigma", type=float, help="Gaussian width on alpha in frames (default: 2)")
    group.add_argument("--unmasked", action="store_const", const=True, help="Average over all voxels")
    group.add_argument(
        "--slice-profiles", action="store_const", const=True, help="Also write per-slice profiles (slice_profiles.csv)"
    )


def _add_qc(parser):
    parser.add_argument("--cutoff-threshold", type=float, help="Robust score threshold (default: 5.0)")


def _add_phantom(parser):
    group = parser.add_argument_group("phantom")
    group.add_argument("--shape", type=int, nargs=4, metavar=("T", "Z", "Y", "X"), help="Phantom shape")
    group.add_argument("--amplitude", type=float, help="Contraction amplitude (default: 0.25)")
    group.add_argument("--noise-sigma", type=float, help="Noise standard deviation (default: 0.02)")
    group.add_argument("--phase-offset", type=int, help="Cyclic offset of the motion profile in frames")
    group.add_argument("--truncate", type=float, help="Fraction of the cycle kept (default: 1)")
    group.add_argument("--seed", type=int, help="Noise seed (default: 0)")


def create_parser():
    """Create the command-line argument parser."""
    common = _common_options()
    parser = _ArgumentParser(
        prog="cardiophase",
        description="Self-supervised cardiac key-frame detection from 4D cine sequences.",
        epilog="Example: cardiophase detect --phantom-default --out run01 --focus mse",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    detect = sub.add_parser("detect", parents=[common], help="Run the full pipeline")
    _add_input(detect)
    detect.add_argument(
        "--phantom-default", action="store_const", const=True, help="Use the default analytic phantom as input"
    )
    detect.add_argument("--truth", help="Labelled phases (phases JSON or truth.json) to evaluate against")
    for add in (_add_preprocess, _add_registration, _add_descriptor, _add_qc, _add_phantom):
        add(detect)
    detect.set_defaults(handler=cmd_detect)

    register = sub.add_parser("register", parents=[common], help="Preprocess and register frame pairs")
    _add_input(register)
    _add_preprocess(register)
    _add_registration(register)
    register.set_defaults(handler=cmd_register)

    descriptor = sub.add_parser("descriptor", parents=[common], help="Compute the motion descriptor")
    _add_descriptor(descriptor)
    descriptor.set_defaults(handler=cmd_descriptor)

    phases = sub.add_parser("phases", parents=[common], help="Extract key frames from the descriptor")
    phases.set_defaults(handler=cmd_phases)

    qc = sub.add_parser("qc", parents=[common], help="Cut-off sequence check")
    _add_qc(qc)
    qc.set_defaults(handler=cmd_qc)

    evaluate = sub.add_parser("eval", parents=[common], help="pFD against labelled phases")
    evaluate.add_argument("--truth", help="Labelled phases (phases JSON or truth.json)")
    evaluate.set_defaults(handler=cmd_eval)

    phantom = sub.add_parser("phantom", parents=[common], help="Write an analytic phantom with ground truth")
    _add_phantom(phantom)
    phantom.add_argument(
        "--check", action="store_const", const=True, help="Run the key-frame rules on the analytic fields and report the pFD"
    )
    phantom.set_defaults(handler=cmd_phantom)

    cohort = sub.add_parser("cohort", parents=[common], help="Run detect on every subject of a manifest")
    cohort.add_argument("manifest", help="Manifest JSON with a 'subjects' list")
    for add in (_add_preprocess, _add_registration, _add_descriptor, _add_qc):
        add(cohort)
    cohort.set_defaults(handler=None)

    return parser


def setup_logging(verbose=False, quiet=False, log_file=None):
    """Configure the root logger once for a command-line run."""
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    handlers = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)


def main(argv=None):
    """Entry point of the ``cardiophase`` command; returns the exit status."""
    parser = create_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError:
        return EXIT_USAGE
    setup_logging(args.verbose, args.quiet, args.log_file)

    try:
        cfg = build_config(args)
        if args.command == "cohort":
            return cmd_cohort(cfg, args.manifest)
        return args.handler(cfg)
    except (CardiophaseError, OSError, ValueError) as e:
        code = exit_code_for(e)
        logger.error(f"{args.command}: {e}")
        return code


if __name__ == "__main__":
    sys.exit(main())
