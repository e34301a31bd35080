"""4D image data model, file I/O and the preprocessing chain.

A cine sequence is held as a :class:`Volume4D` whose intensity array is always indexed
``(t, z, y, x)``. Two on-disk formats are supported:

* ``raw+json``: a JSON header next to a flat little-endian float32 file in C order.
* ``nrrd``: a 4D NRRD file (``type: float``, ``encoding: raw|gzip``) with one ``list``
  axis and three ``domain`` axes, read and written with pynrrd.

Preprocessing follows the order resample -> (repeat) -> (crop) -> clip -> standardise.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import nrrd
import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError, VolumeFormatError

logger = logging.getLogger(__name__)

RAW_JSON = "raw+json"
NRRD = "nrrd"
FORMATS = (RAW_JSON, NRRD)


@dataclass(frozen=True)
class Volume4D:
    """An immutable T x Z x Y x X scalar image sequence.

    Parameters
    ----------
    data : numpy.ndarray
        Intensities indexed ``(t, z, y, x)``. Floating arrays keep their dtype, anything
        else is converted to float64. The stored array is a read-only copy.
    spacing : tuple of float
        Voxel spacing ``(sz, sy, sx)`` in millimeters.
    frame_duration : float, optional
        Milliseconds per frame.

    Raises
    ------
    ValueError
        If the array is not 4D, has fewer than two frames, contains non-finite values,
        or if any spacing component is not strictly positive.
    """

    data: np.ndarray
    spacing: tuple
    frame_duration: float | None = None

    def __post_init__(self):
        data = np.array(self.data, copy=True)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if data.ndim != 4:
            raise ValueError(f"Volume4D expects a (T, Z, Y, X) array, got {data.ndim} dimensions")
        if data.shape[0] < 2:
            raise ValueError(f"Volume4D needs at least 2 frames, got T={data.shape[0]}")
        if min(data.shape) < 1:
            raise ValueError(f"Volume4D shape must be positive, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("Volume4D intensities must be finite")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 for s in spacing):
            raise ValueError(f"spacing must be three positive values in mm, got {self.spacing}")
        if self.frame_duration is not None and not self.frame_duration > 0:
            raise ValueError(f"frame_duration must be positive, got {self.frame_duration}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def T(self):
        """Number of frames."""
        return self.data.shape[0]

    @property
    def spatial_shape(self):
        return self.data.shape[1:]

    @property
    def shape(self):
        return self.data.shape

    def frame(self, t):
        """Return frame ``t`` (cyclic index) as a 3D array."""
        return self.data[t % self.T]


@dataclass
class PreprocessReport:
    """Record of the preprocessing applied to a volume.

    ``repeated_to`` is 0 when no temporal repetition happened. ``mean`` and ``std`` are the
    moments removed by standardisation; ``std`` is only ``None`` if standardisation was skipped.
    """

    original_T: int
    repeated_to: int = 0
    clip_bounds: tuple | None = None
    mean: float | None = None
    std: float | None = None
    resampled_spacing: float | None = None
    crop_shape: tuple | None = field(default=None)

    def __post_init__(self):
        if self.original_T < 2:
            raise ValueError(f"original_T must be >= 2, got {self.original_T}")
        if self.repeated_to != 0 and self.repeated_to < self.original_T:
            raise ValueError(f"repeated_to ({self.repeated_to}) must be 0 or >= original_T ({self.original_T})")
        if self.std is not None and not self.std > 0:
            raise ValueError("std must be positive whenever standardisation was applied")

    def merge(self, other):
        """Return a report combining the non-empty entries of ``self`` and ``other``."""
        merged = PreprocessReport(original_T=self.original_T)
        for name in ("repeated_to", "clip_bounds", "mean", "std", "resampled_spacing", "crop_shape"):
            mine, theirs = getattr(self, name), getattr(other, name)
            setattr(merged, name, theirs if theirs not in (None, 0) else mine)
        return merged

    def to_dict(self):
        return {
            "original_T": int(self.original_T),
            "repeated_to": int(self.repeated_to),
            "clip_bounds": None if self.clip_bounds is None else [float(v) for v in self.clip_bounds],
            "mean": None if self.mean is None else float(self.mean),
            "std": None if self.std is None else float(self.std),
            "resampled_spacing": self.resampled_spacing,
            "crop_shape": None if self.crop_shape is None else [int(v) for v in self.crop_shape],
        }


# --------------------------------------------------------------------------------------------
# File I/O
# --------------------------------------------------------------------------------------------


def resolve_format(path, format="auto"):
    """Pick the file format from ``format`` or, for ``"auto"``, from the file extension."""
    if format in FORMATS:
        return format
    if format != "auto":
        raise ValueError(f"Unknown format: {format!r} (expected one of {FORMATS + ('auto',)})")
    suffix = Path(path).suffix.lower()
    if suffix in (".nrrd", ".nhdr"):
        return NRRD
    if suffix in (".json", ".raw"):
        return RAW_JSON
    raise ValueError(f"Cannot infer volume format from extension of {path}")


def _raw_json_paths(path):
    path = Path(path)
    header_path = path.with_suffix(".json")
    return header_path, path.with_suffix(".raw")


def read_raw_json(path, ndim):
    """Read a raw+json container and return ``(array, header)``.

    The array is little-endian float32 in C order with the header's ``shape``. ``ndim`` is the
    number of dimensions the caller expects; a mismatch is reported against the ``shape`` field.
    """
    header_path, default_raw = _raw_json_paths(path)
    if not header_path.exists():
        raise FileNotFoundError(f"Header file not found: {header_path}")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as e:
        raise VolumeFormatError(f"{header_path}: invalid JSON header ({e})") from e

    for key in ("shape", "dtype"):
        if key not in header:
            raise VolumeFormatError(f"{header_path}: missing header field '{key}'", field=key)
    shape = header["shape"]
    if not isinstance(shape, list) or len(shape) != ndim:
        got = len(shape) if isinstance(shape, list) else "no"
        raise VolumeFormatError(f"{header_path}: expected {ndim} dimensions in 'shape', got {got}", field="shape")
    if not all(isinstance(n, int) and n > 0 for n in shape):
        raise VolumeFormatError(f"{header_path}: 'shape' must hold positive integers, got {shape}", field="shape")
    if header["dtype"] != "f32":
        raise VolumeFormatError(f"{header_path}: unsupported dtype {header['dtype']!r}, expected 'f32'", field="dtype")
    if header.get("byte_order", "little") != "little":
        raise VolumeFormatError(
            f"{header_path}: unsupported byte_order {header['byte_order']!r}, expected 'little'", field="byte_order"
        )

    raw_path = header_path.parent / header["data_file"] if "data_file" in header else default_raw
    if not raw_path.exists():
        raise FileNotFoundError(f"Data file not found: {raw_path}")
    data = np.fromfile(raw_path, dtype="<f4")
    expected = int(np.prod(shape))
    if data.size != expected:
        raise VolumeFormatError(
            f"{raw_path}: holds {data.size} values but 'shape' {shape} needs {expected}", field="shape"
        )
    return data.reshape(shape).astype(np.float32), header


def write_raw_json(path, array, extra_header):
    """Write ``array`` as float32 raw data plus a JSON header; returns the header path."""
    header_path, raw_path = _raw_json_paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    array = np.ascontiguousarray(array, dtype="<f4")
    array.tofile(raw_path)
    header = {"shape": [int(n) for n in array.shape], "dtype": "f32", "byte_order": "little", "data_file": raw_path.name}
    header.update(extra_header)
    header_path.write_text(json.dumps(header, indent=2) + "\n")
    return header_path


def _load_raw_json(path):
    data, header = read_raw_json(path, ndim=4)
    spacing = header.get("spacing_mm")
    if spacing is None:
        raise VolumeFormatError(f"{path}: missing header field 'spacing_mm'", field="spacing_mm")
    if not isinstance(spacing, list) or len(spacing) != 3 or not all(float(s) > 0 for s in spacing):
        raise VolumeFormatError(f"{path}: 'spacing_mm' must be three positive numbers, got {spacing}", field="spacing_mm")
    return data, spacing, header.get("frame_duration_ms")


def _nrrd_spacing(header, domain_axes, path):
    if "spacings" in header:
        values = np.asarray(header["spacings"], dtype=float)
        spacing = [values[a] for a in domain_axes]
    elif "space directions" in header:
        directions = np.asarray(header["space directions"], dtype=float)
        spacing = [float(np.linalg.norm(directions[a])) for a in domain_axes]
    else:
        raise VolumeFormatError(f"{path}: header declares neither 'spacings' nor 'space directions'", field="spacings")
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise VolumeFormatError(f"{path}: spatial spacing must be positive, got {spacing}", field="spacings")
    return [float(s) for s in spacing]


def _load_nrrd(path):
    try:
        data, header = nrrd.read(str(path), index_order="F")
    except nrrd.NRRDError as e:
        raise VolumeFormatError(f"{path}: {e}") from e

    if int(header.get("dimension", data.ndim)) != 4:
        raise VolumeFormatError(f"{path}: expected 4 dimensions, got {header.get('dimension')}", field="dimension")
    if header.get("type") not in ("float", "float32"):
        raise VolumeFormatError(f"{path}: unsupported type {header.get('type')!r}, expected 'float'", field="type")
    if header.get("encoding") not in ("raw", "gzip", "gz"):
        raise VolumeFormatError(
            f"{path}: unsupported encoding {header.get('encoding')!r}, expected 'raw' or 'gzip'", field="encoding"
        )
    kinds = [str(k).lower() for k in header.get("kinds", [])]
    if sorted(kinds) != ["domain", "domain", "domain", "list"]:
        raise VolumeFormatError(f"{path}: kinds must be one 'list' and three 'domain' axes, got {kinds}", field="kinds")

    # file axes are fastest-first (x, y, z); move the list axis to the front and reverse the rest
    list_axis = kinds.index("list")
    domain_axes = [a for a in range(4) if a != list_axis]
    spacing_xyz = _nrrd_spacing(header, domain_axes, path)
    data = np.transpose(data, [list_axis] + domain_axes[::-1])

    frame_duration = header.get("frame_duration_ms")
    if frame_duration is not None:
        try:
            frame_duration = float(frame_duration)
        except ValueError as e:
            raise VolumeFormatError(f"{path}: invalid frame_duration_ms {frame_duration!r}", field="frame_duration_ms") from e
    return np.ascontiguousarray(data, dtype=np.float32), spacing_xyz[::-1], frame_duration


def load_volume4d(path, format="auto"):
    """
    Load a 4D sequence from disk.

    Parameters
    ----------
    path : str or Path
        NRRD file, or the ``.json`` header (or ``.raw`` data file) of a raw+json pair.
    format : {'auto', 'nrrd', 'raw+json'}
        File format; ``'auto'`` chooses by extension.

    Returns
    -------
    Volume4D
        Sequence indexed ``(t, z, y, x)``.

    Raises
    ------
    FileNotFoundError
        If the file (or its data file) does not exist.
    VolumeFormatError
        If the header is not 4D, declares an unsupported type or encoding, lacks spacing, or
        the data contain NaN/Inf. The message names the offending header field.

    Examples
    --------
    >>> vol = load_volume4d("subject01.json")  # doctest: +SKIP
    >>> vol.T  # doctest: +SKIP
    30
    """
    path = Path(path)
    fmt = resolve_format(path, format)
    if fmt == NRRD and not path.exists():
        raise FileNotFoundError(f"Volume file not found: {path}")
    if fmt == NRRD:
        data, spacing, frame_duration = _load_nrrd(path)
    else:
        data, spacing, frame_duration = _load_raw_json(path)

    if data.shape[0] < 2:
        raise VolumeFormatError(f"{path}: a sequence needs at least 2 frames, got {data.shape[0]}", field="shape")
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"{path}: data contain NaN or Inf intensities", field="data")

    vol = Volume4D(data, tuple(spacing), frame_duration)
    logger.info(f"Loaded {fmt} volume {path.name}: shape {vol.shape}, spacing {vol.spacing} mm")
    return vol


def save_volume4d(vol, path, format="auto", encoding="raw"):
    """
    Write a :class:`Volume4D` as raw+json or NRRD.

    Intensities are stored as float32; loading the written file back yields the same array
    bit for bit when ``vol.data`` is already float32.

    Parameters
    ----------
    vol : Volume4D
        Sequence to write.
    path : str or Path
        Destination; for raw+json this is the header path (the ``.raw`` file sits next to it).
    format : {'auto', 'nrrd', 'raw+json'}
        File format; ``'auto'`` chooses by extension.
    encoding : {'raw', 'gzip'}
        NRRD encoding, ignored for raw+json.

    Returns
    -------
    Path
        The path that :func:`load_volume4d` should be given to read the volume back.
    """
    path = Path(path)
    fmt = resolve_format(path, format)
    if fmt == RAW_JSON:
        extra = {"spacing_mm": [float(s) for s in vol.spacing]}
        if vol.frame_duration is not None:
            extra["frame_duration_ms"] = float(vol.frame_duration)
        out = write_raw_json(path, vol.data, extra)
    else:
        if encoding not in ("raw", "gzip"):
            raise ValueError(f"Unsupported NRRD encoding: {encoding!r}")
        path.parent.mkdir(parents=True, exist_ok=True)
        sz, sy, sx = vol.spacing
        header = {
            "encoding": encoding,
            "kinds": ["list", "domain", "domain", "domain"],
            "spacings": [np.nan, sx, sy, sz],
        }
        if vol.frame_duration is not None:
            header["frame_duration_ms"] = repr(float(vol.frame_duration))
        # (t, z, y, x) -> file order list, x, y, z
        data = np.asarray(vol.data, dtype=np.float32).transpose(0, 3, 2, 1)
        nrrd.write(str(path), data, header, index_order="F")
        out = path
    logger.info(f"Wrote {fmt} volume {out}")
    return out


# --------------------------------------------------------------------------------------------
# Interpolation
# --------------------------------------------------------------------------------------------


def trilinear_interpolate(frame, coords, with_gradient=False):
    """
    Trilinear interpolation of a 3D array at continuous coordinates with border clamping.

    Parameters
    ----------
    frame : array_like, shape (Z, Y, X)
        Image to sample.
    coords : array_like, shape (3, ...)
        Continuous ``(z, y, x)`` voxel coordinates. Coordinates outside the grid are clamped
        to the border voxel.
    with_gradient : bool
        Also return the spatial derivative of the interpolant.

    Returns
    -------
    values : numpy.ndarray, shape (...)
        Interpolated intensities.
    gradient : numpy.ndarray, shape (3, ...)
        Only if ``with_gradient``: derivative with respect to ``(z, y, x)``. It is zero along
        an axis where the coordinate was clamped.
    """
    frame = np.asarray(frame, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape[0] != 3:
        raise ValueError(f"coords must have leading dimension 3, got {coords.shape}")

    lower, upper, weights, slopes = [], [], [], []
    for axis, n in enumerate(frame.shape):
        c = coords[axis]
        clamped = np.clip(c, 0.0, n - 1.0)
        if n == 1:
            i0 = np.zeros(c.shape, dtype=np.intp)
            frac = np.zeros(c.shape)
        else:
            i0 = np.clip(np.floor(clamped).astype(np.intp), 0, n - 2)
            frac = clamped - i0
        lower.append(i0)
        upper.append(np.minimum(i0 + 1, n - 1))
        weights.append((1.0 - frac, frac))
        if with_gradient:
            inside = ((c >= 0.0) & (c <= n - 1.0)).astype(np.float64) if n > 1 else np.zeros(c.shape)
            slopes.append((-inside, inside))

    values = np.zeros(coords.shape[1:])
    gradient = np.zeros(coords.shape) if with_gradient else None
    for corner in itertools.product((0, 1), repeat=3):
        idx = tuple(upper[a] if corner[a] else lower[a] for a in range(3))
        v = frame[idx]
        wz, wy, wx = (weights[a][corner[a]] for a in range(3))
        values += wz * wy * wx * v
        if with_gradient:
            gz, gy, gx = (slopes[a][corner[a]] for a in range(3))
            gradient[0] += gz * wy * wx * v
            gradient[1] += wz * gy * wx * v
            gradient[2] += wz * wy * gx * v
    if with_gradient:
        return values, gradient
    return values


def trilinear_sample(frame, coord):
    """
    Sample a 3D array at one continuous ``(z, y, x)`` coordinate.

    Examples
    --------
    >>> f = np.zeros((1, 1, 2)); f[0, 0, 1] = 2.0
    >>> trilinear_sample(f, (0, 0, 0.5))
    1.0
    >>> trilinear_sample(f, (-5, -5, -5))
    0.0
    """
    coords = np.asarray(coord, dtype=np.float64).reshape(3)
    return float(trilinear_interpolate(frame, coords))


def identity_grid(shape):
    """Voxel coordinates of every point of a grid, shape ``(3, *shape)``."""
    return np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij"))


# --------------------------------------------------------------------------------------------
# Preprocessing
# --------------------------------------------------------------------------------------------


def resample_isotropic(vol, target=2.5):
    """
    Resample every frame to isotropic ``target`` mm spacing with trilinear interpolation.

    The new spatial shape is ``round(n * spacing / target)`` (at least 1) per axis. Output
    voxel ``i`` sits at ``i * target`` mm, the same physical origin as the input, so it samples
    input voxel coordinate ``i * target / spacing``. Samples past the last input voxel take the
    border value, so the output never leaves the input's intensity range.

    Raises
    ------
    ValueError
        If ``target`` is not positive.
    """
    if not target > 0:
        raise ValueError(f"target spacing must be positive, got {target}")
    in_shape = vol.spatial_shape
    out_shape = tuple(max(1, int(np.floor(n * s / target + 0.5))) for n, s in zip(in_shape, vol.spacing))
    if all(s == target for s in vol.spacing):
        logger.debug("Resampling is an identity on this grid")
        return Volume4D(vol.data, (target, target, target), vol.frame_duration)

    axes = [
        np.clip(np.arange(n_out, dtype=np.float64) * (target / s), 0.0, n_in - 1.0)
        for n_in, n_out, s in zip(in_shape, out_shape, vol.spacing)
    ]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    frames = np.stack(
        [
            ndimage.map_coordinates(np.asarray(vol.data[t], dtype=np.float64), coords, order=1, mode="nearest")
            for t in range(vol.T)
        ]
    )
    logger.info(f"Resampled {in_shape} @ {vol.spacing} mm -> {out_shape} @ {target} mm")
    return Volume4D(frames, (target, target, target), vol.frame_duration)


def repeat_temporal(vol, target_len):
    """
    Repeat frames cyclically until the sequence has ``target_len`` frames.

    Frame ``t`` of the output is input frame ``t mod T``.

    Returns
    -------
    (Volume4D, PreprocessReport)

    Raises
    ------
    ValueError
        If ``target_len`` is shorter than the sequence.
    """
    if target_len < vol.T:
        raise ValueError(f"target_len ({target_len}) must be >= T ({vol.T})")
    index = np.arange(target_len) % vol.T
    report = PreprocessReport(original_T=vol.T, repeated_to=int(target_len))
    logger.info(f"Repeated {vol.T} frames to {target_len}")
    return Volume4D(vol.data[index], vol.spacing, vol.frame_duration), report


def clip_standardize(vol, quantile=0.999):
    """
    Clip intensities above the per-4D ``quantile`` and standardise to zero mean, unit std.

    The quantile uses linear interpolation between order statistics.

    Returns
    -------
    (Volume4D, PreprocessReport)
        Standardised float64 sequence and a report with clip bounds and removed moments.

    Raises
    ------
    ValueError
        If ``quantile`` is not in (0.5, 1].
    DegenerateInputError
        If the clipped volume is constant.
    """
    if not 0.5 < quantile <= 1.0:
        raise ValueError(f"quantile must be in (0.5, 1], got {quantile}")
    data = np.asarray(vol.data, dtype=np.float64)
    high = float(np.quantile(data, quantile))
    low = float(data.min())
    clipped = np.minimum(data, high)
    mean = float(clipped.mean())
    std = float(clipped.std())
    if std <= 1e-12 * max(1.0, abs(mean)):
        raise DegenerateInputError("degenerate constant volume")
    out = (clipped - mean) / std
    n_clipped = int(np.count_nonzero(data > high))
    logger.info(f"Clipped {n_clipped} voxels above {high:.4g}; standardised with mean {mean:.4g}, std {std:.4g}")
    report = PreprocessReport(original_T=vol.T, clip_bounds=(low, high), mean=mean, std=std)
    return Volume4D(out, vol.spacing, vol.frame_duration), report


def crop_or_pad(vol, shape, center=None):
    """
    Crop or pad every frame to spatial ``shape`` around ``center``.

    Padding replicates the border voxels. ``center`` defaults to the volume center; passing a
    focus point gives a focus-centred crop.
    """
    shape = tuple(int(n) for n in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ValueError(f"crop shape must be three positive integers, got {shape}")
    if center is None:
        center = tuple((n - 1) / 2.0 for n in vol.spatial_shape)
    index = []
    for n, m, c in zip(vol.spatial_shape, shape, center):
        start = int(np.floor(c - (m - 1) / 2.0 + 0.5))
        index.append(np.clip(np.arange(start, start + m), 0, n - 1))
    data = vol.data[(slice(None),) + np.ix_(*index)]
    logger.info(f"Cropped/padded {vol.spatial_shape} -> {shape} around {tuple(round(float(c), 2) for c in center)}")
    return Volume4D(data, vol.spacing, vol.frame_duration)


def preprocess(vol, spacing_mm=2.5, quantile=0.999, repeat_to=None, crop_shape=None, crop_center=None):
    """
    Run the full preprocessing chain: resample, repeat, crop, then clip and standardise.

    Parameters
    ----------
    vol : Volume4D
        Raw sequence.
    spacing_mm : float
        Isotropic target spacing.
    quantile : float
        Upper clipping quantile.
    repeat_to : int, optional
        Temporal length to repeat to. Off by default.
    crop_shape : tuple of int, optional
        Spatial shape for :func:`crop_or_pad`.
    crop_center : tuple of float, optional
        Crop center on the resampled grid; volume center by default.

    Returns
    -------
    (Volume4D, PreprocessReport)
    """
    report = PreprocessReport(original_T=vol.T, resampled_spacing=float(spacing_mm))
    out = resample_isotropic(vol, spacing_mm)
    if repeat_to:
        out, rep = repeat_temporal(out, repeat_to)
        report = report.merge(rep)
    if crop_shape is not None:
        out = crop_or_pad(out, crop_shape, crop_center)
        report.crop_shape = tuple(int(n) for n in crop_shape)
    out, rep = clip_standardize(out, quantile)
    report = report.merge(rep)
    return out, report
