"""Sequential deformable registration by direct minimisation of an SSIM + diffusion loss.

For a fixed volume ``F`` and a moving volume ``M`` the loss of a dense displacement field
``u`` (voxel units, shape ``(Z, Y, X, 3)``) is::

    total = (1 - ssim3d(F, warp(M, u))) + lambda * smoothness(u)

``warp(M, u)(p) = M(p + u(p))`` with trilinear interpolation and border clamping, ``ssim3d``
averages a windowed 2D SSIM over the slices, and ``smoothness`` sums squared forward
differences of ``u``. The loss is minimised by normalised gradient descent with
backtracking on a coarse-to-fine pyramid, using the analytic gradient.

Sequence convention: ``fields[t]`` is obtained with ``moving = x[t+1]`` and ``fixed = x[t]``
(cyclic), so ``warp(x[t+1], fields[t]) ~ x[t]`` and ``fields[t](p)`` is the displacement of the
tissue at ``p`` from frame ``t`` to frame ``t+1``. Contraction therefore points inwards.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import RegistrationError, VolumeFormatError
from .imgvol import identity_grid, read_raw_json, trilinear_interpolate, write_raw_json

logger = logging.getLogger(__name__)

MIN_STEP = 1e-3


@dataclass(frozen=True)
class VectorField3D:
    """
    Dense displacement field for one time step.

    Parameters
    ----------
    disp : numpy.ndarray, shape (Z, Y, X, 3)
        Displacement ``(dz, dy, dx)`` in voxels of the isotropic grid.
    grid_spacing : float
        Grid spacing in millimeters, used to report magnitudes in mm.
    """

    disp: np.ndarray
    grid_spacing: float = 1.0

    def __post_init__(self):
        disp = np.array(self.disp, dtype=np.float64, copy=True)
        if disp.ndim != 4 or disp.shape[-1] != 3:
            raise ValueError(f"VectorField3D expects shape (Z, Y, X, 3), got {disp.shape}")
        if not np.all(np.isfinite(disp)):
            raise ValueError("VectorField3D components must be finite")
        if not self.grid_spacing > 0:
            raise ValueError(f"grid_spacing must be positive, got {self.grid_spacing}")
        disp.setflags(write=False)
        object.__setattr__(self, "disp", disp)
        object.__setattr__(self, "grid_spacing", float(self.grid_spacing))

    @property
    def shape(self):
        """Spatial shape ``(Z, Y, X)``."""
        return self.disp.shape[:3]

    def magnitude(self):
        """Euclidean norm of the displacement per voxel, in voxels."""
        return np.linalg.norm(self.disp, axis=-1)

    def magnitude_mm(self):
        return self.magnitude() * self.grid_spacing

    @classmethod
    def zeros(cls, shape, grid_spacing=1.0):
        return cls(np.zeros(tuple(shape) + (3,)), grid_spacing)


@dataclass(frozen=True)
class RegistrationConfig:
    """
    Parameters of the registration loss and optimiser.

    Parameters
    ----------
    lambda_ : float
        Weight of the diffusion regulariser.
    ssim_window : int
        Odd side length of the square SSIM window.
    ssim_eps1, ssim_eps2 : float, optional
        SSIM stability constants. ``None`` means ``(0.01 L)**2`` and ``(0.03 L)**2`` with ``L``
        the dynamic range.
    pyramid_levels : int
        Number of resolution levels (1 disables the pyramid).
    iters_per_level : int
        Maximum accepted gradient steps per level.
    step_size : float
        Largest voxel displacement update of one step (the gradient is max-normalised).
    convergence_tol : float
        Stop a level once the relative loss decrease of a step falls below this value.
    data_range : float, optional
        Fixed dynamic range ``L``. ``None`` uses ``max(ptp(x), ptp(y))`` in :func:`ssim` and
        :func:`ssim3d`, and the range of the fixed volume in :func:`loss`.
    """

    lambda_: float = 0.001
    ssim_window: int = 7
    ssim_eps1: float | None = None
    ssim_eps2: float | None = None
    pyramid_levels: int = 3
    iters_per_level: int = 100
    step_size: float = 0.25
    convergence_tol: float = 1e-5
    data_range: float | None = None

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ValueError(f"lambda_ must be >= 0, got {self.lambda_}")
        if self.ssim_window < 3 or self.ssim_window % 2 != 1:
            raise ValueError(f"ssim_window must be odd and >= 3, got {self.ssim_window}")
        if self.pyramid_levels < 1:
            raise ValueError(f"pyramid_levels must be >= 1, got {self.pyramid_levels}")
        if self.iters_per_level < 0:
            raise ValueError(f"iters_per_level must be >= 0, got {self.iters_per_level}")
        if not self.step_size > 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.convergence_tol < 0:
            raise ValueError(f"convergence_tol must be >= 0, got {self.convergence_tol}")
        for name in ("ssim_eps1", "ssim_eps2"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.data_range is not None and not self.data_range > 0:
            raise ValueError(f"data_range must be positive, got {self.data_range}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        """Build a config from a dict, ignoring ``None`` values and rejecting unknown keys."""
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"Unknown registration settings: {sorted(unknown)}")
        return cls(**{k: v for k, v in values.items() if v is not None})


@dataclass
class RegistrationResult:
    """Field returned by :func:`register_pair` together with its loss history.

    ``trace`` holds the accepted losses of every level (coarsest first), each on that level's
    grid. ``checkpoints`` holds full-resolution losses: the zero field, then the field kept
    after each level; it never increases.
    """

    field: VectorField3D
    trace: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    pair: int | None = None

    @property
    def initial_loss(self):
        return self.checkpoints[0]

    @property
    def final_loss(self):
        return self.checkpoints[-1]


# --------------------------------------------------------------------------------------------
# Warping
# --------------------------------------------------------------------------------------------


def _as_disp(field_or_disp):
    if isinstance(field_or_disp, VectorField3D):
        return field_or_disp.disp
    return np.asarray(field_or_disp, dtype=np.float64)


def warp(moving, field, with_gradient=False):
    """
    Resample ``moving`` through a displacement field.

    ``output(p) = trilinear_sample(moving, p + disp(p))`` with border clamping.

    Parameters
    ----------
    moving : array_like, shape (Z, Y, X)
    field : VectorField3D or array_like, shape (Z, Y, X, 3)
    with_gradient : bool
        Also return the image derivative at the sampled positions, shape ``(3, Z, Y, X)``.

    Raises
    ------
    ValueError
        If the field and the image differ in spatial shape.
    """
    moving = np.asarray(moving, dtype=np.float64)
    disp = _as_disp(field)
    if disp.shape[:3] != moving.shape:
        raise ValueError(f"field shape {disp.shape[:3]} does not match image shape {moving.shape}")
    coords = identity_grid(moving.shape) + np.moveaxis(disp, -1, 0)
    return trilinear_interpolate(moving, coords, with_gradient=with_gradient)


# --------------------------------------------------------------------------------------------
# Similarity
# --------------------------------------------------------------------------------------------


def _constants(cfg, data_range):
    data_range = np.where(np.asarray(data_range, dtype=np.float64) > 0, data_range, 1.0)
    c1 = cfg.ssim_eps1 if cfg.ssim_eps1 is not None else (0.01 * data_range) ** 2
    c2 = cfg.ssim_eps2 if cfg.ssim_eps2 is not None else (0.03 * data_range) ** 2
    return c1, c2


def _window_statistics(x, y, window):
    """Window means and (co)variances of two ``(Z, H, W)`` stacks over all valid windows."""
    size = (1, window, window)
    h = window // 2
    valid = (slice(None), slice(h, -h), slice(h, -h))

    def mean(a):
        return ndimage.uniform_filter(a, size=size)[valid]

    mu_x, mu_y = mean(x), mean(y)
    var_x = mean(x * x) - mu_x * mu_x
    var_y = mean(y * y) - mu_y * mu_y
    cov = mean(x * y) - mu_x * mu_y
    return mu_x, mu_y, var_x, var_y, cov


def _ssim_stack(x, y, window, c1, c2, with_gradient=False):
    """Mean SSIM of a slice stack and, optionally, its derivative with respect to ``y``."""
    mu_x, mu_y, var_x, var_y, cov = _window_statistics(x, y, window)
    a1 = 2.0 * mu_x * mu_y + c1
    a2 = 2.0 * cov + c2
    b1 = mu_x * mu_x + mu_y * mu_y + c1
    b2 = var_x + var_y + c2
    s = a1 * a2 / (b1 * b2)
    value = float(s.mean())
    if not with_gradient:
        return value

    # dS/dy_j = 2/N^2 * (a + b x_j + c y_j), summed over the windows containing j
    b1b2 = b1 * b2
    coef_a = (mu_x * a2 - mu_x * a1) / b1b2 - s * mu_y / b1 + s * mu_y / b2
    coef_b = a1 / b1b2
    coef_c = -s / b2

    h = window // 2
    size = (1, window, window)

    def spread(m):
        full = np.zeros(x.shape)
        full[:, h:-h, h:-h] = m
        return ndimage.uniform_filter(full, size=size, mode="constant", cval=0.0)

    grad = 2.0 * (spread(coef_a) + x * spread(coef_b) + y * spread(coef_c)) / s.size
    return value, grad


def _check_pair(x, y, window, ndim):
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim != ndim:
        raise ValueError(f"expected {ndim}D arrays, got {x.ndim}D")
    if min(x.shape[-2:]) < window:
        raise ValueError(f"image of in-plane shape {x.shape[-2:]} is smaller than the SSIM window {window}")


def ssim(x, y, cfg=None):
    """
    Structural similarity of two 2D images, averaged over all N x N windows.

    Uses uniform windows, population statistics and ``eps1 = (0.01 L)^2``,
    ``eps2 = (0.03 L)^2`` with ``L = max(ptp(x), ptp(y))`` unless configured otherwise.

    Raises
    ------
    ValueError
        If the shapes differ or an image is smaller than the window.

    Examples
    --------
    >>> img = np.random.default_rng(0).random((16, 16))
    >>> round(ssim(img, img), 6)
    1.0
    """
    cfg = cfg or RegistrationConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_pair(x, y, cfg.ssim_window, ndim=2)
    data_range = cfg.data_range if cfg.data_range is not None else max(np.ptp(x), np.ptp(y))
    c1, c2 = _constants(cfg, data_range)
    return _ssim_stack(x[None], y[None], cfg.ssim_window, c1, c2)


def ssim3d(x, y, cfg=None):
    """Mean of the 2D :func:`ssim` over all z slices of two volumes."""
    cfg = cfg or RegistrationConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_pair(x, y, cfg.ssim_window, ndim=3)
    if cfg.data_range is not None:
        data_range = cfg.data_range
    else:
        # per-slice range, identical to calling ssim slice by slice
        data_range = np.maximum(np.ptp(x, axis=(1, 2)), np.ptp(y, axis=(1, 2)))[:, None, None]
    c1, c2 = _constants(cfg, data_range)
    return _ssim_stack(x, y, cfg.ssim_window, c1, c2)


# --------------------------------------------------------------------------------------------
# Regulariser and loss
# --------------------------------------------------------------------------------------------


def smoothness(field):
    """
    Diffusion regulariser: sum of squared forward differences of every component along
    every axis. The far border of each axis contributes nothing.

    Examples
    --------
    >>> x = np.arange(8.0)
    >>> disp = np.zeros((8, 8, 8, 3)); disp[..., 2] = x
    >>> smoothness(disp)
    448.0
    """
    disp = _as_disp(field)
    return float(sum(np.sum(np.diff(disp, axis=axis) ** 2) for axis in range(3)))


def _smoothness_gradient(disp):
    grad = np.zeros_like(disp)
    for axis in range(3):
        d = np.diff(disp, axis=axis)
        before = [(0, 0)] * 4
        after = [(0, 0)] * 4
        before[axis] = (1, 0)
        after[axis] = (0, 1)
        grad += 2.0 * (np.pad(d, before) - np.pad(d, after))
    return grad


def _pin_data_range(cfg, fixed):
    if cfg.data_range is not None:
        return cfg
    data_range = float(np.ptp(fixed))
    return replace(cfg, data_range=data_range if data_range > 0 else 1.0)


def loss(F, M, field, cfg=None):
    """
    Registration loss of a displacement field.

    ``total = (1 - ssim3d(F, warp(M, field))) + lambda * smoothness(field)``. When
    ``cfg.data_range`` is unset the SSIM range is the dynamic range of ``F``.

    Returns
    -------
    total, sim, smooth : float
    """
    cfg = _pin_data_range(cfg or RegistrationConfig(), F)
    F = np.asarray(F, dtype=np.float64)
    warped = warp(M, field)
    sim = 1.0 - ssim3d(F, warped, cfg)
    smooth = smoothness(field)
    return sim + cfg.lambda_ * smooth, sim, smooth


def loss_and_gradient(F, M, field, cfg=None):
    """
    Loss and its analytic gradient with respect to the displacement field.

    Returns
    -------
    total, sim, smooth : float
    gradient : numpy.ndarray, shape (Z, Y, X, 3)
    """
    cfg = _pin_data_range(cfg or RegistrationConfig(), F)
    F = np.asarray(F, dtype=np.float64)
    disp = _as_disp(field)
    _check_pair(F, np.asarray(M), cfg.ssim_window, ndim=3)
    warped, image_grad = warp(M, disp, with_gradient=True)
    c1, c2 = _constants(cfg, cfg.data_range)
    similarity, dssim = _ssim_stack(F, warped, cfg.ssim_window, c1, c2, with_gradient=True)
    smooth = smoothness(disp)
    gradient = -dssim[..., None] * np.moveaxis(image_grad, 0, -1) + cfg.lambda_ * _smoothness_gradient(disp)
    sim = 1.0 - similarity
    return sim + cfg.lambda_ * smooth, sim, smooth, gradient


# --------------------------------------------------------------------------------------------
# Pyramid
# --------------------------------------------------------------------------------------------


def _coarser_shape(shape, window):
    out = []
    for axis, n in enumerate(shape):
        minimum = 2 if axis == 0 else window
        half = (n + 1) // 2
        out.append(half if half >= minimum else n)
    return tuple(out)


def downsample_volume(volume, shape):
    """Gaussian pre-smoothing and linear zoom of a 3D volume to ``shape``."""
    volume = np.asarray(volume, dtype=np.float64)
    sigma = [0.5 * n / m if m < n else 0.0 for n, m in zip(volume.shape, shape)]
    smoothed = ndimage.gaussian_filter(volume, sigma=sigma, mode="nearest")
    factors = [m / n for n, m in zip(volume.shape, shape)]
    return ndimage.zoom(smoothed, factors, order=1, mode="nearest")


def resize_field(disp, shape):
    """
    Linearly resize a displacement array to spatial ``shape``.

    Components are rescaled by the per-axis grid ratio so they stay in voxels of the new grid.
    """
    disp = np.asarray(disp, dtype=np.float64)
    old = disp.shape[:3]
    if tuple(shape) == old:
        return disp.copy()
    factors = [m / n for n, m in zip(old, shape)]
    out = np.empty(tuple(shape) + (3,))
    for k in range(3):
        ratio = (shape[k] - 1) / (old[k] - 1) if old[k] > 1 else 1.0
        out[..., k] = ndimage.zoom(disp[..., k], factors, order=1, mode="nearest") * ratio
    return out


def _pyramid_shapes(shape, levels, window):
    shapes = [tuple(shape)]
    for _ in range(levels - 1):
        coarser = _coarser_shape(shapes[-1], window)
        if coarser == shapes[-1]:
            break
        shapes.append(coarser)
    return shapes[::-1]


def _descend(F, M, disp, cfg, level, pair):
    """Backtracking normalised gradient descent on one level; returns (disp, trace)."""
    total, _, _, grad = loss_and_gradient(F, M, disp, cfg)
    if not np.isfinite(total):
        raise RegistrationError(f"non-finite loss at level {level}, iteration 0", iteration=0, level=level, pair=pair)
    trace = [total]
    step = cfg.step_size
    iteration = 0
    while iteration < cfg.iters_per_level:
        gmax = float(np.max(np.abs(grad)))
        if gmax == 0.0:
            break
        trial = disp - (step / gmax) * grad
        trial_total, _, _, trial_grad = loss_and_gradient(F, M, trial, cfg)
        if not np.isfinite(trial_total):
            raise RegistrationError(
                f"non-finite loss at level {level}, iteration {iteration + 1}",
                iteration=iteration + 1,
                level=level,
                pair=pair,
            )
        if trial_total >= total:
            step *= 0.5
            if step < MIN_STEP:
                logger.debug(f"level {level}: step below {MIN_STEP} after {iteration} iterations")
                break
            continue
        iteration += 1
        decrease = (total - trial_total) / max(abs(total), 1e-12)
        disp, total, grad = trial, trial_total, trial_grad
        trace.append(total)
        step = min(step * 1.5, cfg.step_size)
        logger.debug(f"level {level} iteration {iteration}: loss {total:.6g}, step {step:.3g}")
        if decrease < cfg.convergence_tol:
            break
    return disp, trace


def register_pair(M, F, cfg=None, grid_spacing=1.0, pair=None, return_result=False):
    """
    Register a moving volume onto a fixed volume.

    The field ``u`` minimising :func:`loss` is estimated coarse to fine. At the end of each
    level the field is upsampled and its full-resolution loss compared with the best field so
    far; a level that does not improve is discarded. The returned field therefore never has a
    higher loss than the zero field.

    Parameters
    ----------
    M, F : array_like, shape (Z, Y, X)
        Moving and fixed volumes, standardised.
    cfg : RegistrationConfig, optional
    grid_spacing : float
        Spacing in mm stored on the returned field.
    pair : int, optional
        Pair index, used in logs and error reports.
    return_result : bool
        Return the :class:`RegistrationResult` with loss traces instead of the bare field.

    Returns
    -------
    VectorField3D or RegistrationResult

    Raises
    ------
    ValueError
        If the shapes differ.
    RegistrationError
        If the loss becomes non-finite.
    """
    cfg = _pin_data_range(cfg or RegistrationConfig(), F)
    F = np.asarray(F, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    _check_pair(F, M, cfg.ssim_window, ndim=3)

    shapes = _pyramid_shapes(F.shape, cfg.pyramid_levels, cfg.ssim_window)
    best = np.zeros(F.shape + (3,))
    best_total = loss(F, M, best, cfg)[0]
    if not np.isfinite(best_total):
        raise RegistrationError("non-finite loss for the zero field", iteration=0, pair=pair)
    result = RegistrationResult(VectorField3D(best, grid_spacing), trace=[], checkpoints=[best_total], pair=pair)

    disp = None
    for depth, shape in enumerate(shapes):
        level = len(shapes) - 1 - depth
        F_l = F if shape == F.shape else downsample_volume(F, shape)
        M_l = M if shape == M.shape else downsample_volume(M, shape)
        start = resize_field(disp if disp is not None else best, shape)
        disp, trace = _descend(F_l, M_l, start, cfg, level, pair)
        result.trace.append([float(v) for v in trace])

        candidate = resize_field(disp, F.shape)
        total = loss(F, M, candidate, cfg)[0]
        if total <= best_total:
            best, best_total = candidate, total
        else:
            logger.debug(f"level {level} raised the full-resolution loss ({total:.6g} > {best_total:.6g}); discarded")
            disp = best
        result.checkpoints.append(float(best_total))

    result.field = VectorField3D(best, grid_spacing)
    where = f"pair {pair}" if pair is not None else "pair"
    logger.info(f"Registered {where}: loss {result.initial_loss:.5f} -> {result.final_loss:.5f}")
    return result if return_result else result.field


def _register_pair_task(args):
    return register_pair(*args, return_result=True)


def register_sequence(vol, cfg=None, jobs=1, return_results=False):
    """
    Register every frame pair of a sequence, including the last-to-first pair.

    ``fields[t]`` describes the motion from frame ``t`` to frame ``(t + 1) mod T``.

    Parameters
    ----------
    vol : Volume4D
        Preprocessed sequence on an isotropic grid.
    cfg : RegistrationConfig, optional
    jobs : int
        Number of worker processes; results do not depend on it.
    return_results : bool
        Return :class:`RegistrationResult` objects (field plus loss traces).

    Returns
    -------
    list of VectorField3D or list of RegistrationResult
        Length ``T``; entry ``T - 1`` registers the last frame to frame 0.

    Raises
    ------
    RegistrationError
        Carrying the index of the failing pair.
    """
    cfg = cfg or RegistrationConfig()
    if vol.T < 2:
        raise ValueError(f"register_sequence needs T >= 2, got {vol.T}")
    spacing = float(vol.spacing[0])
    tasks = [(vol.frame(t + 1), vol.frame(t), cfg, spacing, t) for t in range(vol.T)]
    logger.info(f"Registering {vol.T} frame pairs with {jobs} job(s)")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_register_pair_task, tasks))
    else:
        results = [_register_pair_task(task) for task in tasks]
    return results if return_results else [r.field for r in results]


# --------------------------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------------------------


def save_fields(out_dir, fields, cfg=None, results=None):
    """
    Write a list of fields as ``field_XXX.json/.raw`` plus a ``fields.json`` sidecar.

    The sidecar records the registration config, the per-level loss traces (when ``results``
    are given) and the ``t -> (t+1) mod T`` pairing.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    T = len(fields)
    entries = []
    for t, f in enumerate(fields):
        name = f"field_{t:03d}.json"
        write_raw_json(out_dir / name, f.disp, {"grid_spacing_mm": f.grid_spacing})
        entry = {"t": t, "moving": (t + 1) % T, "fixed": t, "file": name}
        if results is not None:
            entry["trace"] = results[t].trace
            entry["checkpoints"] = results[t].checkpoints
        entries.append(entry)
    sidecar = {
        "T": T,
        "pairing": "fields[t]: motion from frame t to frame (t+1) mod T",
        "registration": None if cfg is None else cfg.to_dict(),
        "fields": entries,
    }
    path = out_dir / "fields.json"
    path.write_text(json.dumps(sidecar, indent=2) + "\n")
    logger.info(f"Wrote {T} fields to {out_dir}")
    return path


def load_fields(path):
    """Load the fields written by :func:`save_fields` from their directory or sidecar."""
    path = Path(path)
    sidecar = path / "fields.json" if path.is_dir() else path
    if not sidecar.exists():
        raise FileNotFoundError(f"Field sidecar not found: {sidecar}")
    meta = json.loads(sidecar.read_text())
    if "fields" not in meta:
        raise VolumeFormatError(f"{sidecar}: missing 'fields' list", field="fields")
    out = []
    for entry in meta["fields"]:
        disp, header = read_raw_json(sidecar.parent / entry["file"], ndim=4)
        if disp.shape[-1] != 3:
            raise VolumeFormatError(f"{entry['file']}: last dimension must be 3, got {disp.shape[-1]}", field="shape")
        out.append(VectorField3D(disp, header.get("grid_spacing_mm", 1.0)))
    logger.info(f"Loaded {len(out)} fields from {sidecar.parent}")
    return out
