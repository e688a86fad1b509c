"""Geometric resampling onto a target (typically isotropic) voxel spacing.

Intensity volumes use cubic B-spline interpolation: the standard recursive
prefilter (pole sqrt(3) - 2 per axis, mirror boundaries) makes the spline
pass through the original samples.  Label maps use nearest-neighbor sampling
so no new class values can appear.  Interpolation is separable, so the volume
is processed one axis at a time; the result equals the full tensor-product
spline.

Output grids keep the input origin: voxel (0, 0, 0) is centered on the same
world point before and after, and output voxel ``j`` along an axis samples
input coordinate ``j * target_spacing / input_spacing``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import spline_filter1d

from .core import LabelMap, Volume

__all__ = ["ResampleSpec", "output_dims", "resample_volume", "resample_labels"]

DEFAULT_SPACING = (0.7636, 0.7636, 0.7636)

_ORDERS = (0, 1, 3)


@dataclass(frozen=True)
class ResampleSpec:
    """Target spacing plus interpolation orders for intensities and labels."""

    target_spacing: tuple[float, float, float] = DEFAULT_SPACING
    intensity_order: int = 3
    label_order: int = 0

    def __post_init__(self) -> None:
        spacing = tuple(float(s) for s in self.target_spacing)
        if len(spacing) != 3 or any(s <= 0 or not np.isfinite(s) for s in spacing):
            raise ValueError(f"target spacing must be 3 positive reals, got {spacing}")
        object.__setattr__(self, "target_spacing", spacing)
        if self.intensity_order not in _ORDERS:
            raise ValueError(f"intensity_order must be one of {_ORDERS}")
        if self.label_order != 0:
            raise ValueError("label maps are categorical; only nearest-neighbor "
                             "(label_order=0) is supported")


def output_dims(dims: tuple[int, int, int], spacing: tuple[float, float, float],
                target_spacing: tuple[float, float, float]) -> tuple[int, int, int]:
    """Rounded output grid shape: round-half-away-from-zero of dim*in/out, min 1."""
    return tuple(
        max(1, int(np.floor(d * s / t + 0.5)))
        for d, s, t in zip(dims, spacing, target_spacing)
    )  # type: ignore[return-value]


def _mirror_index(idx: np.ndarray, n: int) -> np.ndarray:
    # Whole-sample mirror: ... 2 1 | 0 1 2 ... n-1 | n-2 n-3 ...
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    j = np.remainder(idx, period)
    return np.where(j >= n, period - j, j)


def _cubic_weights(f: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    # Cubic B-spline kernel at offsets f+1, f, 1-f, 2-f for taps i-1 .. i+2.
    g = 1.0 - f
    return (g * g * g / 6.0,
            2.0 / 3.0 - f * f + 0.5 * f * f * f,
            2.0 / 3.0 - g * g + 0.5 * g * g * g,
            f * f * f / 6.0)


def _interp_axis(arr: np.ndarray, coords: np.ndarray, order: int, axis: int) -> np.ndarray:
    """Sample one axis of ``arr`` at fractional input coordinates ``coords``."""
    n = arr.shape[axis]
    a = np.moveaxis(arr, axis, -1)
    if order == 0:
        # Half-way points resolve to the lower index (first nearest center).
        idx = np.clip(np.ceil(coords - 0.5).astype(np.int64), 0, n - 1)
        out = a[..., idx]
    elif order == 1 or n < 2:
        lo = np.floor(coords).astype(np.int64)
        f = coords - lo
        i0 = _mirror_index(lo, n)
        i1 = _mirror_index(lo + 1, n)
        out = a[..., i0] * (1.0 - f) + a[..., i1] * f
    elif order == 3:
        coeff = spline_filter1d(np.ascontiguousarray(a, dtype=np.float64),
                                order=3, axis=-1, mode="mirror")
        lo = np.floor(coords).astype(np.int64)
        f = coords - lo
        weights = _cubic_weights(f)
        out = np.zeros(a.shape[:-1] + (coords.size,), dtype=np.float64)
        for m, w in enumerate(weights):
            out += coeff[..., _mirror_index(lo + m - 1, n)] * w
    else:
        raise ValueError(f"unsupported interpolation order {order}")
    return np.moveaxis(out, -1, axis)


def _axis_coords(out_n: int, in_spacing: float, out_spacing: float) -> np.ndarray:
    return np.arange(out_n, dtype=np.float64) * (out_spacing / in_spacing)


def resample_volume(volume: Volume, spec: ResampleSpec) -> Volume:
    """Resample intensities onto ``spec.target_spacing``.

    Cubic interpolation needs at least 4 samples per axis; shorter axes fall
    back to linear along that axis with a warning.  The orientation block is
    dropped because the grid geometry changes.
    """
    orders = []
    for axis in range(3):
        order = spec.intensity_order
        if order == 3 and volume.dims[axis] < 4:
            warnings.warn(f"axis {axis} has {volume.dims[axis]} < 4 samples; "
                          "falling back to linear interpolation on it")
            order = 1
        orders.append(order)
    dims_out = output_dims(volume.dims, volume.spacing, spec.target_spacing)
    data = volume.data
    for axis in range(3):
        coords = _axis_coords(dims_out[axis], volume.spacing[axis],
                              spec.target_spacing[axis])
        data = _interp_axis(data, coords, orders[axis], axis)
    return Volume(data, spacing=spec.target_spacing, origin=volume.origin)


def resample_labels(labels: LabelMap, spec: ResampleSpec) -> LabelMap:
    """Nearest-neighbor resampling of a label map onto ``spec.target_spacing``."""
    dims_out = output_dims(labels.dims, labels.spacing, spec.target_spacing)
    gathers = []
    for axis in range(3):
        coords = _axis_coords(dims_out[axis], labels.spacing[axis],
                              spec.target_spacing[axis])
        n = labels.dims[axis]
        gathers.append(np.clip(np.ceil(coords - 0.5).astype(np.int64), 0, n - 1))
    data = labels.data[np.ix_(*gathers)]
    return LabelMap(data, spacing=spec.target_spacing, origin=labels.origin,
                    vocabulary=labels.vocabulary)
