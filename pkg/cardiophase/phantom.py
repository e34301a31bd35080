"""Analytic beating-shell phantom with ground-truth motion and key frames.

The phantom is an ellipsoidal shell (bright wall, mid-intensity cavity, dark static-noise
background) whose inner radius follows ``R(t) = R0 * (1 - amplitude * s(phi))`` with
``phi = ((t - phase_offset) / T) mod 1``. The contraction profile ``s`` rises over systole
with one sin^2 rate lobe, then falls back to zero with an early-filling lobe, a motionless
diastasis and a smaller atrial lobe::

    phase:     systole      early filling   diastasis   atrial
    phi:   0 ---------- 0.34 ---------- 0.60 ------- 0.78 ------ 1
    s:     0 -> 1            1 -> 0.45       0.45         0.45 -> 0

The true displacement of frame ``t`` is radial, ``u_t(p) = w(p) * (R(t+1) - R(t)) / rho(p) * (p - c)``,
with ``rho`` the ellipsoidal radius and ``w`` a time-independent cosine-tapered weight
covering every position the wall takes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .descriptor import FocusPoint, compute_descriptor
from .imgvol import Volume4D, save_volume4d
from .phases import PhaseSet
from .register import VectorField3D, save_fields

logger = logging.getLogger(__name__)

SYSTOLE_END = 0.34
FILLING_END = 0.60
ATRIAL_START = 0.78
EARLY_FILLING = 0.55

CAVITY_INTENSITY = 0.5
WALL_INTENSITY = 1.0


@dataclass(frozen=True)
class PhantomConfig:
    """
    Geometry, motion and noise settings of the phantom.

    Parameters
    ----------
    shape : tuple of int
        ``(T, Z, Y, X)`` of the full cycle.
    center : tuple of float, optional
        Shell center ``(z, y, x)``; the grid center by default.
    inner_radius : float
        End-diastolic inner radius ``R0`` in voxels (in-plane).
    wall_thickness : float
        Wall thickness in voxels (in-plane).
    amplitude : float
        Peak contraction as a fraction of ``R0``, in (0, 0.5).
    noise_sigma : float
        Standard deviation of the static Gaussian noise.
    phase_offset : int
        Cyclic shift of the motion profile in frames.
    truncate_fraction : float
        Fraction of the cycle kept, in (0, 1]; the trailing frames are dropped.
    seed : int
        Seed of the noise generator.
    z_scale : float
        Through-plane semi-axis of the ellipsoid relative to the in-plane one.
    taper : float
        Width in voxels of the cosine edges of the image and of the motion weight.
    spacing_mm : float
        Isotropic voxel spacing written to the volume.
    """

    shape: tuple = (30, 16, 64, 64)
    center: tuple | None = None
    inner_radius: float = 16.0
    wall_thickness: float = 4.0
    amplitude: float = 0.25
    noise_sigma: float = 0.02
    phase_offset: int = 0
    truncate_fraction: float = 1.0
    seed: int = 0
    z_scale: float = 0.35
    taper: float = 1.5
    spacing_mm: float = 2.5

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        if len(shape) != 4 or min(shape) < 1:
            raise ValueError(f"shape must be four positive integers (T, Z, Y, X), got {self.shape}")
        if shape[0] < 3:
            raise ValueError(f"the phantom cycle needs at least 3 frames, got T={shape[0]}")
        object.__setattr__(self, "shape", shape)
        center = self.center if self.center is not None else tuple((n - 1) / 2.0 for n in shape[1:])
        object.__setattr__(self, "center", tuple(float(c) for c in center))
        if not 0.0 < self.amplitude < 0.5:
            raise ValueError(f"amplitude must be in (0, 0.5), got {self.amplitude}")
        if not 0.0 < self.truncate_fraction <= 1.0:
            raise ValueError(f"truncate_fraction must be in (0, 1], got {self.truncate_fraction}")
        if self.n_frames < 2:
            raise ValueError(f"truncate_fraction {self.truncate_fraction} leaves fewer than 2 frames")
        if not (self.inner_radius > 0 and self.wall_thickness > 0 and self.z_scale > 0 and self.taper > 0):
            raise ValueError("inner_radius, wall_thickness, z_scale and taper must be positive")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if int(self.phase_offset) != self.phase_offset:
            raise ValueError(f"phase_offset must be a whole number of frames, got {self.phase_offset}")
        object.__setattr__(self, "phase_offset", int(self.phase_offset))
        if self.inner_radius * (1.0 - self.amplitude) <= 2.0 * self.taper:
            raise ValueError("contracted cavity is too small for the edge taper")
        outer = self.inner_radius + self.wall_thickness
        half = [self.z_scale * outer, outer, outer]
        for axis, (c, n, h) in enumerate(zip(self.center, shape[1:], half)):
            if c - h < 0 or c + h > n - 1:
                raise ValueError(f"shell of half-extent {h:.2f} around {c:.2f} does not fit axis {axis} of size {n}")

    @property
    def T(self):
        return self.shape[0]

    @property
    def n_frames(self):
        """Frames kept after truncation."""
        return max(1, int(np.floor(self.T * self.truncate_fraction + 0.5)))


@dataclass
class PhantomTruth:
    """Ground truth of a phantom.

    ``fields`` has one entry per generated frame (cyclic over the kept frames), ``phases`` and
    ``radius_profile`` refer to the full cycle of ``T`` frames.
    """

    fields: list
    phases: PhaseSet
    radius_profile: np.ndarray
    n_frames: int = 0
    center: tuple = field(default_factory=tuple)

    def to_json_dict(self, cfg=None):
        out = {
            "phases": self.phases.to_json_dict(),
            "radius_profile": [float(r) for r in self.radius_profile],
            "n_frames": int(self.n_frames),
            "center": list(self.center),
        }
        if cfg is not None:
            out["config"] = asdict(cfg)
        return out


# --------------------------------------------------------------------------------------------
# Motion profile
# --------------------------------------------------------------------------------------------


def _lobe(x, length):
    """Completed fraction of a sin^2-shaped rate lobe of ``length``, clamped to [0, 1]."""
    x = np.clip(x, 0.0, length)
    return x / length - np.sin(2.0 * np.pi * x / length) / (2.0 * np.pi)


def contraction_profile(phi):
    """Contraction ``s(phi)`` in [0, 1] of the periodic motion profile, ``s(0) = s(1) = 0``."""
    phi = np.mod(np.asarray(phi, dtype=np.float64), 1.0)
    return (
        _lobe(phi, SYSTOLE_END)
        - EARLY_FILLING * _lobe(phi - SYSTOLE_END, FILLING_END - SYSTOLE_END)
        - (1.0 - EARLY_FILLING) * _lobe(phi - ATRIAL_START, 1.0 - ATRIAL_START)
    )


def radius(cfg, t):
    """Inner radius at (possibly fractional, cyclic) frame ``t``."""
    phi = (np.asarray(t, dtype=np.float64) - cfg.phase_offset) / cfg.T
    return cfg.inner_radius * (1.0 - cfg.amplitude * contraction_profile(phi))


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def truth_phases(cfg):
    """
    Key frames of the continuous profile on the full-cycle time base.

    MS and PF are the extrema of the contraction rate (mid-systole, mid early filling); the
    frame whose step ``t -> t+1`` is centered nearest to them is taken. ES and ED are the
    extrema of the radius (end of systole, end of the cycle); the nearest frame is taken. MD is
    the arc midpoint from PF to ED, as in :func:`cardiophase.phases.extract_phases`.
    """
    T, k = cfg.T, cfg.phase_offset

    def tau(phi):
        return phi * T + k

    ms = _round_half_up(tau(SYSTOLE_END / 2.0) - 0.5) % T
    es = _round_half_up(tau(SYSTOLE_END)) % T
    pf = _round_half_up(tau((SYSTOLE_END + FILLING_END) / 2.0) - 0.5) % T
    ed = _round_half_up(tau(1.0)) % T
    md = (pf + _round_half_up(((ed - pf) % T) / 2.0)) % T
    return PhaseSet(ed=ed, ms=ms, es=es, pf=pf, md=md, T=T)


# --------------------------------------------------------------------------------------------
# Geometry
# --------------------------------------------------------------------------------------------


def _rise(x, edge, width):
    """Cosine step from 0 to 1 centered on ``edge``."""
    u = np.clip((x - edge) / width + 0.5, 0.0, 1.0)
    return 0.5 * (1.0 - np.cos(np.pi * u))


def _offsets(cfg):
    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in cfg.shape[1:]), indexing="ij")
    return np.stack([g - c for g, c in zip(grids, cfg.center)])


def ellipsoidal_radius(cfg):
    """Radius ``rho(p)`` of every voxel in the metric where the shell is a sphere."""
    dz, dy, dx = _offsets(cfg)
    return np.sqrt((dz / cfg.z_scale) ** 2 + dy**2 + dx**2)


def motion_weight(cfg, rho=None):
    """Time-independent weight of the analytic field: 1 over every wall position, 0 elsewhere."""
    rho = ellipsoidal_radius(cfg) if rho is None else rho
    r_min = cfg.inner_radius * (1.0 - cfg.amplitude)
    r_max = cfg.inner_radius + cfg.wall_thickness
    return _rise(rho, r_min - cfg.taper, cfg.taper) * (1.0 - _rise(rho, r_max + cfg.taper, cfg.taper))


def _frame_image(cfg, rho, r):
    wall = _rise(rho, r, cfg.taper) * WALL_INTENSITY
    cavity = (1.0 - _rise(rho, r, cfg.taper)) * CAVITY_INTENSITY
    outside = _rise(rho, r + cfg.wall_thickness, cfg.taper)
    return (cavity + wall) * (1.0 - outside)


def _radial_field(cfg, delta_r, rho, weight, offsets):
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(rho > 0, weight * delta_r / rho, 0.0)
    disp = np.moveaxis(offsets * scale, 0, -1)
    return VectorField3D(disp, cfg.spacing_mm)


def analytic_field(cfg, t):
    """
    Ground-truth displacement from frame ``t`` to frame ``(t + 1) mod n_frames``.

    Raises
    ------
    ValueError
        If ``t`` is outside ``[0, n_frames)``.
    """
    n = cfg.n_frames
    if not 0 <= t < n:
        raise ValueError(f"frame {t} outside [0, {n})")
    rho = ellipsoidal_radius(cfg)
    delta_r = float(radius(cfg, (t + 1) % n) - radius(cfg, t))
    return _radial_field(cfg, delta_r, rho, motion_weight(cfg, rho), _offsets(cfg))


def generate_phantom(cfg=None):
    """
    Generate the phantom sequence and its ground truth.

    Parameters
    ----------
    cfg : PhantomConfig, optional

    Returns
    -------
    (Volume4D, PhantomTruth)
        The volume has ``cfg.n_frames`` frames; the last truth field closes the kept frames
        back to frame 0 (the cut-off jump when the sequence is truncated).

    Examples
    --------
    >>> vol, truth = generate_phantom(PhantomConfig())  # doctest: +SKIP
    >>> truth.phases.as_dict()  # doctest: +SKIP
    {'ed': 0, 'ms': 5, 'es': 10, 'pf': 14, 'md': 22}
    """
    cfg = cfg or PhantomConfig()
    n = cfg.n_frames
    rho = ellipsoidal_radius(cfg)
    weight = motion_weight(cfg, rho)
    offsets = _offsets(cfg)
    radii = radius(cfg, np.arange(cfg.T))

    rng = np.random.default_rng(cfg.seed)
    noise = rng.normal(0.0, cfg.noise_sigma, size=cfg.shape[1:]) if cfg.noise_sigma > 0 else 0.0
    frames = np.stack([_frame_image(cfg, rho, radii[t]) + noise for t in range(n)]).astype(np.float32)

    fields = [_radial_field(cfg, float(radii[(t + 1) % n] - radii[t]), rho, weight, offsets) for t in range(n)]
    truth = PhantomTruth(fields=fields, phases=truth_phases(cfg), radius_profile=radii, n_frames=n, center=cfg.center)
    vol = Volume4D(frames, (cfg.spacing_mm,) * 3)
    logger.info(
        f"Generated phantom {cfg.shape} (kept {n} frames), amplitude {cfg.amplitude}, offset {cfg.phase_offset}: "
        f"{truth.phases.as_dict()}"
    )
    return vol, truth


def descriptor_from_truth(truth, focus=None, mask_quantile=0.70, sigma=2.0, masked=True):
    """Registration-free descriptor computed from the analytic fields (volume-center focus by default)."""
    focus = focus or FocusPoint(truth.center, "vol")
    return compute_descriptor(truth.fields, focus, mask_quantile=mask_quantile, sigma=sigma, masked=masked)


def save_phantom(out_dir, vol, truth, cfg):
    """Write ``volume.json/.raw``, ``fields/`` and ``truth.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    volume_path = save_volume4d(vol, out_dir / "volume.json")
    save_fields(out_dir / "fields", truth.fields)
    truth_path = out_dir / "truth.json"
    truth_path.write_text(json.dumps(truth.to_json_dict(cfg), indent=2) + "\n")
    logger.info(f"Wrote phantom to {out_dir}")
    return volume_path, truth_path
