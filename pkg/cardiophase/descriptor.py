"""Reduction of 3D+t displacement fields to the 1D motion descriptor.

For each frame the signed direction of every displacement vector relative to a focus point
is measured as ``alpha = -cos(v, focus - p)``: motion toward the focus (contraction) is
negative, motion away from it positive. Averaging ``alpha`` and ``|v|`` over the voxels with
the strongest mean motion yields the curves ``alpha_t`` and ``|v|_t``, which are then smoothed
(``alpha_t`` only) and min/max normalised.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError
from .imgvol import Volume4D, identity_grid

logger = logging.getLogger(__name__)

STRATEGIES = ("lv", "sept", "vol", "mse")


@dataclass(frozen=True)
class FocusPoint:
    """A continuous ``(z, y, x)`` reference point and the strategy that produced it."""

    coord: tuple
    strategy: str

    def __post_init__(self):
        coord = tuple(float(c) for c in self.coord)
        if len(coord) != 3 or not all(np.isfinite(coord)):
            raise ValueError(f"focus coordinate must be three finite values, got {self.coord}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"Unknown focus strategy: {self.strategy!r} (expected one of {STRATEGIES})")
        object.__setattr__(self, "coord", coord)

    def inside(self, shape):
        """True if the point lies in the bounding box of a grid of ``shape``."""
        return all(0.0 <= c <= n - 1 for c, n in zip(self.coord, shape))

    def to_dict(self):
        return {"strategy": self.strategy, "coord": list(self.coord)}


@dataclass
class MotionDescriptor:
    """
    Paired motion curves of one sequence.

    Attributes
    ----------
    alpha_raw : numpy.ndarray
        Masked mean signed direction per frame.
    vnorm_raw : numpy.ndarray
        Masked mean displacement magnitude per frame, mm.
    alpha_norm, vnorm_norm : numpy.ndarray or None
        Smoothed and normalised curves in [-1, 1] and [0, 1], filled by :func:`smooth_normalize`.
    mask_quantile : float or None
        Quantile of the magnitude mask, ``None`` for unmasked reduction.
    sigma : float or None
        Gaussian width used on ``alpha`` in frames.
    focus : FocusPoint or None
    """

    alpha_raw: np.ndarray
    vnorm_raw: np.ndarray
    alpha_norm: np.ndarray | None = None
    vnorm_norm: np.ndarray | None = None
    mask_quantile: float | None = None
    sigma: float | None = None
    focus: FocusPoint | None = None

    def __post_init__(self):
        self.alpha_raw = np.asarray(self.alpha_raw, dtype=np.float64)
        self.vnorm_raw = np.asarray(self.vnorm_raw, dtype=np.float64)
        T = len(self.alpha_raw)
        for name in ("vnorm_raw", "alpha_norm", "vnorm_norm"):
            value = getattr(self, name)
            if value is None:
                continue
            value = np.asarray(value, dtype=np.float64)
            if value.shape != (T,):
                raise ValueError(f"{name} has shape {value.shape}, expected ({T},)")
            setattr(self, name, value)

    @property
    def T(self):
        return len(self.alpha_raw)

    def rotate(self, k):
        """Return the descriptor cyclically shifted by ``k`` frames (frame t moves to t + k)."""
        return replace(
            self,
            **{
                name: None if getattr(self, name) is None else np.roll(getattr(self, name), k)
                for name in ("alpha_raw", "vnorm_raw", "alpha_norm", "vnorm_norm")
            },
        )


# --------------------------------------------------------------------------------------------
# Focus points
# --------------------------------------------------------------------------------------------


def _spatial_shape(vol_or_shape):
    if isinstance(vol_or_shape, Volume4D):
        return vol_or_shape.spatial_shape
    shape = tuple(int(n) for n in vol_or_shape)
    return shape[-3:]


def focus_vol(vol):
    """
    Geometric center of the grid, ``((Z-1)/2, (Y-1)/2, (X-1)/2)``.

    ``vol`` may be a :class:`Volume4D` or a shape.

    Examples
    --------
    >>> focus_vol((30, 16, 64, 64)).coord
    (7.5, 31.5, 31.5)
    """
    return FocusPoint(tuple((n - 1) / 2.0 for n in _spatial_shape(vol)), "vol")


def temporal_change(vol):
    """Mean squared difference between cyclically consecutive frames, per voxel."""
    data = np.asarray(vol.data, dtype=np.float64)
    return np.mean((np.roll(data, -1, axis=0) - data) ** 2, axis=0)


def focus_mse(vol, quantile=0.70):
    """
    Center of mass of the strongest temporal change.

    ``e(p)`` is the mean over ``t`` of ``(x[t+1 mod T](p) - x[t](p))**2``. Voxels with ``e`` at or
    above its ``quantile`` quantile are kept and their ``e``-weighted center of mass returned.

    Raises
    ------
    ValueError
        If ``quantile`` is not in (0, 1).
    DegenerateInputError
        If no voxel changes over time.
    """
    if not 0.0 < quantile < 1.0:
        raise ValueError(f"quantile must be in (0, 1), got {quantile}")
    change = temporal_change(vol)
    if not np.max(change) > 0.0:
        raise DegenerateInputError("no temporal change")
    threshold = np.quantile(change, quantile)
    weights = np.where(change >= threshold, change, 0.0)
    coord = ndimage.center_of_mass(weights)
    logger.info(f"MSE focus at {tuple(round(c, 2) for c in coord)} ({np.count_nonzero(weights)} voxels)")
    return FocusPoint(coord, "mse")


def focus_lv(mask):
    """Unweighted centroid of a binary blood-pool mask.

    Raises
    ------
    DegenerateInputError
        If the mask is empty.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ValueError(f"mask must be 3D, got {mask.ndim}D")
    if not mask.any():
        raise DegenerateInputError("empty mask")
    return FocusPoint(ndimage.center_of_mass(mask.astype(np.float64)), "lv")


def focus_sept(rvip_ant, rvip_inf, shape=None):
    """
    Midpoint between the anterior and inferior right-ventricular insertion points.

    Raises
    ------
    ValueError
        If a landmark lies outside the grid of ``shape`` (when given) or is negative.

    Examples
    --------
    >>> focus_sept((5, 10, 20), (5, 14, 28)).coord
    (5.0, 12.0, 24.0)
    """
    a = np.asarray(rvip_ant, dtype=np.float64).reshape(3)
    b = np.asarray(rvip_inf, dtype=np.float64).reshape(3)
    upper = np.full(3, np.inf) if shape is None else np.asarray(_spatial_shape(shape), dtype=np.float64) - 1
    for name, point in (("rvip_ant", a), ("rvip_inf", b)):
        if np.any(point < 0) or np.any(point > upper):
            raise ValueError(f"{name} {tuple(point)} lies outside the volume")
    return FocusPoint(tuple((a + b) / 2.0), "sept")


def select_focus(strategy, vol, mask=None, landmarks=None, quantile=0.70, fallback=False):
    """
    Compute the focus point for ``strategy``.

    Parameters
    ----------
    strategy : {'lv', 'sept', 'vol', 'mse'}
    vol : Volume4D
        Preprocessed sequence.
    mask : array_like, optional
        Blood-pool mask, required for ``'lv'``.
    landmarks : tuple of two coordinates, optional
        Insertion points, required for ``'sept'``.
    quantile : float
        Threshold quantile for ``'mse'``.
    fallback : bool
        For ``'mse'``, fall back to the volume center when the sequence does not change.
    """
    if strategy == "vol":
        return focus_vol(vol)
    if strategy == "mse":
        try:
            return focus_mse(vol, quantile)
        except DegenerateInputError:
            if not fallback:
                raise
            logger.warning("No temporal change for the MSE focus; using the volume center")
            return focus_vol(vol)
    if strategy == "lv":
        if mask is None:
            raise ValueError("focus strategy 'lv' needs a blood-pool mask")
        mask = np.asarray(mask)
        if mask.shape != vol.spatial_shape:
            raise ValueError(f"mask shape {mask.shape} does not match volume {vol.spatial_shape}")
        return focus_lv(mask)
    if strategy == "sept":
        if landmarks is None or len(landmarks) != 2:
            raise ValueError("focus strategy 'sept' needs the two insertion-point landmarks")
        return focus_sept(landmarks[0], landmarks[1], vol.spatial_shape)
    raise ValueError(f"Unknown focus strategy: {strategy!r}")


# --------------------------------------------------------------------------------------------
# Descriptor
# --------------------------------------------------------------------------------------------


def angle_field(field, focus):
    """
    Signed direction of every displacement relative to the focus point.

    ``alpha(p) = -cos(v, focus - p)``; 0 where ``v = 0`` or ``p = focus``.

    Parameters
    ----------
    field : VectorField3D
    focus : FocusPoint

    Returns
    -------
    numpy.ndarray, shape (Z, Y, X)
        Values in [-1, 1].

    Raises
    ------
    ValueError
        If the focus lies outside the grid.
    """
    disp = field.disp
    shape = disp.shape[:3]
    if not focus.inside(shape):
        raise ValueError(f"focus {focus.coord} lies outside the grid {shape}")
    to_focus = np.asarray(focus.coord).reshape(3, 1, 1, 1) - identity_grid(shape)
    to_focus = np.moveaxis(to_focus, 0, -1)
    dot = np.sum(disp * to_focus, axis=-1)
    norms = np.linalg.norm(disp, axis=-1) * np.linalg.norm(to_focus, axis=-1)
    alpha = np.zeros(shape)
    defined = norms > 0.0
    alpha[defined] = -dot[defined] / norms[defined]
    return np.clip(alpha, -1.0, 1.0)


def magnitude_mask(fields, quantile=0.70):
    """
    Voxels whose temporally averaged displacement magnitude reaches its ``quantile`` quantile.

    Ties at the threshold are kept (``>=``).

    Raises
    ------
    ValueError
        If ``fields`` is empty or ``quantile`` is not in (0, 1).
    DegenerateInputError
        If every field is zero.
    """
    if len(fields) == 0:
        raise ValueError("magnitude_mask needs at least one field")
    if not 0.0 < quantile < 1.0:
        raise ValueError(f"quantile must be in (0, 1), got {quantile}")
    mean_magnitude = np.mean([f.magnitude() for f in fields], axis=0)
    if not np.max(mean_magnitude) > 0.0:
        raise DegenerateInputError("no motion")
    mask = mean_magnitude >= np.quantile(mean_magnitude, quantile)
    logger.debug(f"Magnitude mask keeps {int(mask.sum())} of {mask.size} voxels")
    return mask


def reduce_descriptor(fields, focus, mask=None, mask_quantile=None):
    """
    Average ``alpha`` and ``|v|`` (in mm) over the mask for every frame.

    Parameters
    ----------
    fields : list of VectorField3D
    focus : FocusPoint
    mask : array_like of bool, optional
        Voxels to average over; ``None`` averages over the whole grid.
    mask_quantile : float, optional
        Recorded on the descriptor.

    Returns
    -------
    MotionDescriptor
        With the raw curves only.

    Raises
    ------
    DegenerateInputError
        If the mask is empty.
    """
    shape = fields[0].shape
    mask = np.ones(shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ValueError(f"mask shape {mask.shape} does not match field shape {shape}")
    if not mask.any():
        raise DegenerateInputError("empty mask")
    alpha = np.array([angle_field(f, focus)[mask].mean() for f in fields])
    vnorm = np.array([f.magnitude_mm()[mask].mean() for f in fields])
    return MotionDescriptor(alpha, vnorm, mask_quantile=mask_quantile, focus=focus)


def smooth_normalize(desc, sigma=2.0):
    """
    Smooth ``alpha`` cyclically and min/max normalise both curves.

    ``alpha`` is filtered with a wrap-around Gaussian (truncated at 4 sigma; skipped for
    ``sigma <= 0``) and mapped to [-1, 1]; ``vnorm`` is mapped to [0, 1] without smoothing.

    Raises
    ------
    ValueError
        If the sequence has fewer than 3 frames.
    DegenerateInputError
        If ``alpha_raw`` is constant ("flat descriptor").
    """
    if desc.T < 3:
        raise ValueError(f"smooth_normalize needs T >= 3, got {desc.T}")
    alpha = desc.alpha_raw
    if np.ptp(alpha) <= 1e-12 * max(1.0, float(np.max(np.abs(alpha)))):
        raise DegenerateInputError("flat descriptor")
    if sigma > 0:
        alpha = ndimage.gaussian_filter1d(alpha, sigma, mode="wrap", truncate=4.0)
    lo, hi = float(alpha.min()), float(alpha.max())
    if not hi > lo:
        raise DegenerateInputError("flat descriptor")
    alpha_norm = 2.0 * (alpha - lo) / (hi - lo) - 1.0

    vnorm = desc.vnorm_raw
    span = float(np.ptp(vnorm))
    if span > 0.0:
        vnorm_norm = (vnorm - vnorm.min()) / span
    else:
        logger.warning("Constant |v| curve; normalised magnitude set to zero")
        vnorm_norm = np.zeros_like(vnorm)
    return replace(desc, alpha_norm=alpha_norm, vnorm_norm=vnorm_norm, sigma=float(sigma))


def compute_descriptor(fields, focus, mask_quantile=0.70, sigma=2.0, masked=True):
    """Magnitude mask, reduction and smoothing/normalisation in one call."""
    mask = magnitude_mask(fields, mask_quantile) if masked else None
    desc = reduce_descriptor(fields, focus, mask, mask_quantile=mask_quantile if masked else None)
    return smooth_normalize(desc, sigma)


def slice_profiles(fields, focus, mask=None):
    """
    Per-slice (base to apex) masked means of ``alpha`` and ``|v|`` in mm.

    Returns
    -------
    alpha, vnorm : numpy.ndarray, shape (T, Z)
        NaN for slices without mask voxels.
    """
    shape = fields[0].shape
    mask = np.ones(shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=(1, 2)).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        alpha = np.array([np.where(mask, angle_field(f, focus), 0.0).sum(axis=(1, 2)) / counts for f in fields])
        vnorm = np.array([np.where(mask, f.magnitude_mm(), 0.0).sum(axis=(1, 2)) / counts for f in fields])
    return alpha, vnorm
