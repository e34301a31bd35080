"""Key-frame evaluation and cut-off quality control.

The periodic frame difference (pFD) is the cyclic distance between a predicted and a
labelled frame index, ``min(|d|, T - |d|)``: a prediction on the last frame for a label on
the first frame is one frame off, not ``T - 1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .phases import PHASE_NAMES

logger = logging.getLogger(__name__)

MAD_EPS = 1e-9
DEFAULT_CUTOFF_THRESHOLD = 5.0


@dataclass
class PhaseEval:
    """
    pFD per key frame of one sequence, with mean and SD over the five phases.

    ``per_phase_afd`` holds the plain frame difference of the same pairs, for comparison with
    non-periodic scores.
    """

    per_phase_pfd: dict
    T: int
    mean: float = 0.0
    sd: float = 0.0
    per_phase_afd: dict = field(default_factory=dict)

    def __post_init__(self):
        limit = self.T // 2
        for name, value in self.per_phase_pfd.items():
            if not 0 <= value <= limit:
                raise ValueError(f"pFD of {name} ({value}) outside [0, {limit}]")
        values = np.array(list(self.per_phase_pfd.values()), dtype=np.float64)
        self.mean = float(values.mean()) if values.size else 0.0
        self.sd = float(values.std()) if values.size else 0.0


@dataclass(frozen=True)
class QcVerdict:
    """Outcome of the cut-off test on the last-to-first motion magnitude."""

    cutoff_flag: bool
    last_to_first_mag: float
    robust_score: float
    threshold: float

    def to_dict(self):
        return {
            "cutoff_flag": bool(self.cutoff_flag),
            "last_to_first_mag_mm": float(self.last_to_first_mag),
            "robust_score": float(self.robust_score),
            "threshold": float(self.threshold),
        }

    @classmethod
    def from_dict(cls, values):
        return cls(
            bool(values["cutoff_flag"]),
            float(values["last_to_first_mag_mm"]),
            float(values["robust_score"]),
            float(values["threshold"]),
        )


def _check_index(name, value, T):
    if int(value) != value or not 0 <= value < T:
        raise ValueError(f"{name}={value} is not a frame index in [0, {T})")


def pfd(p, phat, T):
    """
    Periodic frame difference between two 0-based frame indices.

    Raises
    ------
    ValueError
        If an index is outside ``[0, T)``.

    Examples
    --------
    >>> pfd(0, 29, 30)
    1
    >>> pfd(5, 8, 30)
    3
    """
    _check_index("p", p, T)
    _check_index("phat", phat, T)
    d = abs(int(p) - int(phat))
    return min(d, T - d)


def afd(p, phat):
    """Plain (non-periodic) absolute frame difference."""
    return abs(int(p) - int(phat))


def evaluate_phases(pred, gt):
    """
    pFD of every key frame between a prediction and a label set.

    Raises
    ------
    ValueError
        If the two sets have different sequence lengths.
    """
    if pred.T != gt.T:
        raise ValueError(f"sequence length mismatch: predicted T={pred.T}, labelled T={gt.T}")
    pairs = {name: (getattr(pred, name), getattr(gt, name)) for name in PHASE_NAMES}
    return PhaseEval(
        {name: pfd(p, phat, gt.T) for name, (p, phat) in pairs.items()},
        gt.T,
        per_phase_afd={name: afd(p, phat) for name, (p, phat) in pairs.items()},
    )


def summarize_cohort(evals):
    """
    Per-phase mean, SD (sample), median and max of the pFD over many sequences.

    Returns
    -------
    dict
        ``{phase: {"n", "mean", "sd", "median", "max", "afd_mean"}}``. ``afd_mean`` is the mean
        plain frame difference, ``None`` when no evaluation carries one.
    """
    if not evals:
        raise ValueError("summarize_cohort needs at least one evaluation")
    table = pd.DataFrame([e.per_phase_pfd for e in evals], columns=list(PHASE_NAMES))
    stats = table.agg(["count", "mean", "std", "median", "max"]).fillna(0.0)
    afd_means = pd.DataFrame([e.per_phase_afd for e in evals], columns=list(PHASE_NAMES)).astype(float).mean()
    return {
        name: {
            "n": int(stats.at["count", name]),
            "mean": float(stats.at["mean", name]),
            "sd": float(stats.at["std", name]),
            "median": float(stats.at["median", name]),
            "max": float(stats.at["max", name]),
            "afd_mean": None if pd.isna(afd_means[name]) else float(afd_means[name]),
        }
        for name in PHASE_NAMES
    }


def detect_cutoff(vnorm_raw, threshold=DEFAULT_CUTOFF_THRESHOLD):
    """
    Flag a sequence whose last-to-first motion is an outlier.

    ``robust_score = (v[T-1] - median(v[:T-1])) / (MAD(v[:T-1]) + 1e-9)``; the sequence is
    flagged when the score exceeds ``threshold``.

    Raises
    ------
    ValueError
        If the curve has fewer than 4 frames.
    """
    v = np.asarray(vnorm_raw, dtype=np.float64)
    if v.ndim != 1 or len(v) < 4:
        raise ValueError(f"detect_cutoff needs at least 4 frames, got shape {v.shape}")
    rest = v[:-1]
    median = float(np.median(rest))
    mad = float(np.median(np.abs(rest - median)))
    score = (float(v[-1]) - median) / (mad + MAD_EPS)
    verdict = QcVerdict(bool(score > threshold), float(v[-1]), float(score), float(threshold))
    if verdict.cutoff_flag:
        logger.warning(f"Last-to-first motion {v[-1]:.3f} mm is an outlier (score {score:.1f}): sequence looks cut off")
    else:
        logger.info(f"Cut-off score {score:.2f} (threshold {threshold})")
    return verdict


def align_descriptor(curve, phases, points_per_segment=10):
    """
    Resample a cyclic curve so the key frames land on fixed positions.

    The cycle is split at ED, MS, ES, PF, MD (and back to ED); every segment is linearly
    resampled to ``points_per_segment`` samples. Curves of sequences with different ``T`` can
    then be averaged point by point.

    Returns
    -------
    numpy.ndarray, shape (5 * points_per_segment,)
    """
    curve = np.asarray(curve, dtype=np.float64)
    T = len(curve)
    if T != phases.T:
        raise ValueError(f"curve has {T} frames but phases refer to T={phases.T}")
    anchors = [phases.ed, phases.ms, phases.es, phases.pf, phases.md]
    # unwrap anchors onto a monotone time axis starting at ED
    unwrapped = [float(anchors[0])]
    for a in anchors[1:] + [anchors[0]]:
        unwrapped.append(unwrapped[-1] + (a - unwrapped[-1]) % T)
    positions = np.concatenate(
        [np.linspace(start, stop, points_per_segment, endpoint=False) for start, stop in zip(unwrapped[:-1], unwrapped[1:])]
    )
    extended = np.concatenate([curve, curve, curve[:1]])
    return np.interp(positions, np.arange(len(extended)), extended)


def average_aligned(curves, phase_sets, points_per_segment=10):
    """
    Point-wise mean and SD of several cyclic curves after :func:`align_descriptor`.

    Parameters
    ----------
    curves : sequence of array_like
        One curve per sequence; lengths may differ.
    phase_sets : sequence of PhaseSet
        Key frames of each curve, same order as ``curves``.
    points_per_segment : int
        Samples between consecutive key frames.

    Returns
    -------
    mean, sd : numpy.ndarray, shape (5 * points_per_segment,)
        SD is the population SD, zero for a single curve.
    """
    if len(curves) != len(phase_sets):
        raise ValueError(f"{len(curves)} curves but {len(phase_sets)} phase sets")
    if not curves:
        raise ValueError("average_aligned needs at least one curve")
    aligned = np.stack([align_descriptor(c, ps, points_per_segment) for c, ps in zip(curves, phase_sets)])
    return aligned.mean(axis=0), aligned.std(axis=0)
