"""Result files: descriptor CSV, JSON sidecars, evaluation tables and the SVG figure."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import matplotlib
import numpy as np
import pandas as pd
from matplotlib.figure import Figure

from .descriptor import FocusPoint, MotionDescriptor
from .errors import VolumeFormatError
from .phases import PHASE_NAMES, PhaseSet

logger = logging.getLogger(__name__)

DESCRIPTOR_COLUMNS = ["t", "alpha_raw", "alpha_norm", "vnorm_raw_mm", "vnorm_norm"]
EVAL_COLUMNS = ["subject", "T", "ed_pfd", "ms_pfd", "es_pfd", "pf_pfd", "md_pfd", "cutoff_flag", "robust_score"]
SLICE_COLUMNS = ["t", "z", "alpha", "vnorm_mm"]
COHORT_CURVE_COLUMNS = ["position", "segment", "alpha_mean", "alpha_sd", "vnorm_mean_mm", "vnorm_sd_mm"]
FLOAT_FORMAT = "%.17g"


def write_json(path, payload):
    """Write ``payload`` as indented JSON with a trailing newline."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n")
    logger.info(f"Wrote {path}")
    return path


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise VolumeFormatError(f"{path}: invalid JSON ({e})") from e


def _sidecar_path(csv_path):
    return Path(csv_path).with_suffix(".json")


def write_descriptor(path, desc, n_frames=None, extra=None):
    """
    Write the descriptor CSV and its JSON sidecar.

    Parameters
    ----------
    path : str or Path
        CSV destination; the sidecar is written next to it with a ``.json`` suffix.
    desc : MotionDescriptor
        Descriptor with normalised curves.
    n_frames : int, optional
        Number of rows to write (the original frames of a repeated sequence).
    extra : dict, optional
        Additional sidecar entries.
    """
    path = Path(path)
    n = desc.T if n_frames is None else int(n_frames)
    table = pd.DataFrame(
        {
            "t": np.arange(n),
            "alpha_raw": desc.alpha_raw[:n],
            "alpha_norm": desc.alpha_norm[:n],
            "vnorm_raw_mm": desc.vnorm_raw[:n],
            "vnorm_norm": desc.vnorm_norm[:n],
        },
        columns=DESCRIPTOR_COLUMNS,
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    sidecar = {
        "focus": None if desc.focus is None else desc.focus.to_dict(),
        "mask_quantile": desc.mask_quantile,
        "masked": desc.mask_quantile is not None,
        "sigma": desc.sigma,
        "T": desc.T,
        "rows": n,
    }
    sidecar.update(extra or {})
    write_json(_sidecar_path(path), sidecar)
    logger.info(f"Wrote descriptor {path}")
    return path


def read_descriptor(path):
    """Read a descriptor CSV (and its sidecar, if present) back into a :class:`MotionDescriptor`."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Descriptor file not found: {path}")
    table = pd.read_csv(path, float_precision="round_trip")
    missing = [c for c in DESCRIPTOR_COLUMNS if c not in table.columns]
    if missing:
        raise VolumeFormatError(f"{path}: missing descriptor columns {missing}", field=missing[0])
    sidecar_path = _sidecar_path(path)
    sidecar = read_json(sidecar_path) if sidecar_path.exists() else {}
    focus = sidecar.get("focus")
    return MotionDescriptor(
        alpha_raw=table["alpha_raw"].to_numpy(dtype=np.float64),
        vnorm_raw=table["vnorm_raw_mm"].to_numpy(dtype=np.float64),
        alpha_norm=table["alpha_norm"].to_numpy(dtype=np.float64),
        vnorm_norm=table["vnorm_norm"].to_numpy(dtype=np.float64),
        mask_quantile=sidecar.get("mask_quantile"),
        sigma=sidecar.get("sigma"),
        focus=None if focus is None else FocusPoint(tuple(focus["coord"]), focus["strategy"]),
    )


def write_phases(path, ps, extra=None):
    payload = ps.to_json_dict()
    payload.update(extra or {})
    return write_json(path, payload)


def read_phases(path):
    """Read a phases JSON, or the ``phases`` entry of a phantom ``truth.json``."""
    payload = read_json(path)
    if "phases" in payload:
        payload = payload["phases"]
    try:
        return PhaseSet.from_json_dict(payload)
    except ValueError as e:
        raise VolumeFormatError(f"{path}: {e}") from e


def write_slice_profiles(path, alpha, vnorm):
    """Write per-slice profiles of shape (T, Z) as a long table; empty slices are left blank."""
    path = Path(path)
    T, Z = alpha.shape
    table = pd.DataFrame(
        {
            "t": np.repeat(np.arange(T), Z),
            "z": np.tile(np.arange(Z), T),
            "alpha": alpha.ravel(),
            "vnorm_mm": vnorm.ravel(),
        },
        columns=SLICE_COLUMNS,
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"Wrote slice profiles {path}")
    return path


def evaluation_row(subject, T, evaluation=None, verdict=None):
    """One row of the evaluation table; missing parts are left empty."""
    row = {"subject": subject, "T": int(T)}
    for name in PHASE_NAMES:
        row[f"{name}_pfd"] = None if evaluation is None else int(evaluation.per_phase_pfd[name])
    row["cutoff_flag"] = None if verdict is None else bool(verdict.cutoff_flag)
    row["robust_score"] = None if verdict is None else float(verdict.robust_score)
    return row


def write_evaluation(path, rows):
    """Write the per-subject evaluation CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = pd.DataFrame(rows, columns=EVAL_COLUMNS)
    for name in PHASE_NAMES:
        table[f"{name}_pfd"] = table[f"{name}_pfd"].astype("Int64")
    table.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"Wrote evaluation table {path} ({len(table)} rows)")
    return path


def write_cohort_curve(path, alpha, vnorm, points_per_segment):
    """
    Write the key-frame aligned cohort curves.

    Parameters
    ----------
    path : str or Path
        CSV destination.
    alpha, vnorm : tuple of numpy.ndarray
        ``(mean, sd)`` of the aligned ``alpha_norm`` and ``|v|`` curves.
    points_per_segment : int
        Samples per segment; ``segment`` names the key frame each segment starts at.
    """
    path = Path(path)
    n = len(alpha[0])
    table = pd.DataFrame(
        {
            "position": np.arange(n),
            "segment": np.repeat(PHASE_NAMES, points_per_segment)[:n],
            "alpha_mean": alpha[0],
            "alpha_sd": alpha[1],
            "vnorm_mean_mm": vnorm[0],
            "vnorm_sd_mm": vnorm[1],
        },
        columns=COHORT_CURVE_COLUMNS,
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"Wrote cohort curve {path}")
    return path


def plot_cohort_curve(path, alpha_mean, vnorm_mean, points_per_segment, title=None):
    """Draw the mean aligned curves with :func:`plot_descriptor`, key frames at the segment starts."""
    p = int(points_per_segment)
    desc = MotionDescriptor(alpha_raw=alpha_mean, vnorm_raw=vnorm_mean, alpha_norm=alpha_mean)
    anchors = PhaseSet(ed=0, ms=p, es=2 * p, pf=3 * p, md=4 * p, T=5 * p)
    return plot_descriptor(path, desc, anchors, title=title, xlabel="aligned position")


def plot_descriptor(path, desc, phases=None, n_frames=None, title=None, xlabel="frame"):
    """
    Draw ``alpha_t`` (with zero line and key-frame markers) above ``|v|_t`` and save as SVG.

    The SVG carries no creation date and a fixed hash salt, so reruns give identical files.
    """
    path = Path(path)
    n = desc.T if n_frames is None else int(n_frames)
    t = np.arange(n)
    with matplotlib.rc_context({"svg.hashsalt": "cardiophase", "svg.fonttype": "none"}):
        fig = Figure(figsize=(8, 5))
        ax_alpha, ax_mag = fig.subplots(2, 1, sharex=True)
        ax_alpha.plot(t, desc.alpha_norm[:n], color="tab:blue", label=r"$\alpha_t$")
        ax_alpha.axhline(0.0, color="black", linewidth=0.8)
        ax_alpha.set_ylabel(r"$\alpha_t$ (normalised)")
        ax_alpha.set_ylim(-1.15, 1.3)
        if phases is not None:
            for name in PHASE_NAMES:
                frame = getattr(phases, name)
                if frame < n:
                    ax_alpha.axvline(frame, color="tab:red", linestyle="--", linewidth=0.8)
                    ax_alpha.text(frame, 1.12, name.upper(), ha="center", fontsize=8, color="tab:red")
        ax_mag.plot(t, desc.vnorm_raw[:n], color="tab:orange")
        ax_mag.set_ylabel(r"$|v|_t$ (mm)")
        ax_mag.set_xlabel(xlabel)
        if title:
            ax_alpha.set_title(title)
        fig.tight_layout()
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="svg", metadata={"Date": None})
    logger.info(f"Wrote figure {path}")
    return path
