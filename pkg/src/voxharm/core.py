"""Core volumetric data types and dataset statistics.

A :class:`Volume` is a dense 3D scalar grid (CT intensities in HU) with voxel
spacing and origin metadata; a :class:`LabelMap` is the matching integer class
grid.  Arrays are stored Fortran-ordered so the in-memory layout is x-fastest,
z-slowest, matching the canonical on-disk order used by the I/O layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Collection, Iterable, Mapping, Sequence

import numpy as np

from .util import thread_map

__all__ = [
    "GeometryMismatchError",
    "Volume",
    "LabelMap",
    "DatasetStats",
    "RegionSpec",
    "compute_stats",
    "extract_region_mask",
    "same_geometry",
    "require_same_geometry",
]


class GeometryMismatchError(ValueError):
    """Two grids that must share dims/spacing/origin do not."""


def _as_triple(value, name: str) -> tuple[float, float, float]:
    t = tuple(float(v) for v in value)
    if len(t) != 3:
        raise ValueError(f"{name} must have exactly 3 components, got {len(t)}")
    if not all(math.isfinite(v) for v in t):
        raise ValueError(f"{name} must be finite, got {t}")
    return t


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense 3D intensity grid with geometry metadata.

    ``data`` is adopted as float64 in Fortran order (copied only when needed)
    and marked read-only.  ``orientation`` is an opaque header block carried
    through file round-trips; operations that change the grid geometry drop it.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    orientation: bytes | None = None

    def __post_init__(self) -> None:
        arr = np.asfortranarray(np.asarray(self.data, dtype=np.float64))
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3D, got {arr.ndim}D")
        if min(arr.shape) < 1:
            raise ValueError(f"dims must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("volume data contains NaN or infinite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        spacing = _as_triple(self.spacing, "spacing")
        if any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be strictly positive, got {spacing}")
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def voxel_count(self) -> int:
        return int(self.data.size)

    def with_data(self, data: np.ndarray, *, keep_orientation: bool = True) -> "Volume":
        """New volume with the same geometry and replaced intensities."""
        return Volume(data, self.spacing, self.origin,
                      self.orientation if keep_orientation else None)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Dense 3D integer class grid sharing a Volume's geometry.

    Every nonzero label present in ``data`` must appear in ``vocabulary``;
    label 0 is always the implicit background.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    vocabulary: Mapping[int, str] = field(default_factory=dict)
    orientation: bytes | None = None

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if not np.issubdtype(arr.dtype, np.integer):
            as_int = np.asarray(arr, dtype=np.int64)
            if not np.array_equal(as_int, arr):
                raise ValueError("label data must hold integer values")
            arr = as_int
        arr = np.asfortranarray(arr.astype(np.int32, copy=False))
        if arr.ndim != 3:
            raise ValueError(f"label data must be 3D, got {arr.ndim}D")
        if min(arr.shape) < 1:
            raise ValueError(f"dims must be positive, got {arr.shape}")
        if arr.min() < 0:
            raise ValueError("labels must be non-negative")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        spacing = _as_triple(self.spacing, "spacing")
        if any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be strictly positive, got {spacing}")
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))
        vocab = {int(k): str(v) for k, v in dict(self.vocabulary).items()}
        object.__setattr__(self, "vocabulary", vocab)
        present = set(np.unique(arr).tolist()) - {0}
        unknown = present - set(vocab)
        if unknown:
            raise ValueError(f"labels {sorted(unknown)} present in data but missing "
                             f"from vocabulary {sorted(vocab)}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def with_data(self, data: np.ndarray, *, vocabulary: Mapping[int, str] | None = None,
                  keep_orientation: bool = True) -> "LabelMap":
        return LabelMap(data, self.spacing, self.origin,
                        self.vocabulary if vocabulary is None else vocabulary,
                        self.orientation if keep_orientation else None)


@dataclass(frozen=True)
class DatasetStats:
    """Pooled voxel statistics of one or more volumes.

    ``std`` uses the population (divide-by-n) definition: these are dataset
    description moments, and z-normalizing by them maps the dataset exactly to
    mean 0 / std 1.  ``percentiles`` maps requested ranks (0..100) to values
    under the inclusive linear-interpolation convention (rank = p/100*(n-1)).
    """

    count: int
    mean: float
    std: float
    min: float
    max: float
    percentiles: Mapping[float, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.std < 0:
            raise ValueError(f"std must be >= 0, got {self.std}")
        pct = {float(k): float(v) for k, v in dict(self.percentiles).items()}
        bad = {k: v for k, v in pct.items() if not self.min <= v <= self.max}
        if bad:
            raise ValueError(f"percentiles {bad} outside [min, max] = "
                             f"[{self.min}, {self.max}]")
        object.__setattr__(self, "percentiles", pct)

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "mean": self.mean,
            "std": self.std,
            "min": self.min,
            "max": self.max,
            "percentiles": {repr(k): v for k, v in self.percentiles.items()},
        }


@dataclass(frozen=True)
class RegionSpec:
    """A named union of label IDs evaluated as one region."""

    name: str
    labels: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        labels = frozenset(int(v) for v in self.labels)
        if not labels:
            raise ValueError(f"region {self.name!r} has an empty label set")
        object.__setattr__(self, "labels", labels)


def same_geometry(a: Volume | LabelMap, b: Volume | LabelMap, *, atol: float = 1e-6) -> bool:
    return (a.dims == b.dims
            and np.allclose(a.spacing, b.spacing, rtol=0.0, atol=atol)
            and np.allclose(a.origin, b.origin, rtol=0.0, atol=atol))


def require_same_geometry(a: Volume | LabelMap, b: Volume | LabelMap,
                          what: str = "grids") -> None:
    if not same_geometry(a, b):
        raise GeometryMismatchError(
            f"{what} differ in geometry: dims {a.dims} vs {b.dims}, "
            f"spacing {a.spacing} vs {b.spacing}, origin {a.origin} vs {b.origin}")


def _foreground_mask(mask: LabelMap, foreground_labels: Collection[int] | None) -> np.ndarray:
    if foreground_labels is None:
        return mask.data != 0
    return np.isin(mask.data, np.asarray(sorted(set(foreground_labels)), dtype=np.int64))


def compute_stats(volumes: Sequence[Volume],
                  masks: Sequence[LabelMap] | None = None,
                  *,
                  foreground_labels: Collection[int] | None = None,
                  percentiles: Iterable[float] = (),
                  threads: int = 1) -> DatasetStats:
    """Pooled statistics over all voxels of ``volumes``.

    Parameters
    ----------
    volumes:
        One or more volumes; statistics pool across all of them.
    masks:
        Optional per-volume label maps (one per volume, matching geometry).
        When given, only voxels whose label passes the foreground rule count.
    foreground_labels:
        Labels treated as foreground when masking.  ``None`` means any
        nonzero label.
    percentiles:
        Percentile ranks (0..100) to report, inclusive linear-interpolation
        convention.  Requesting percentiles materializes all selected values
        in memory; moments alone stream volume by volume.
    threads:
        Per-volume passes may run in this many workers.  The pooled reduction
        uses exact summation in input order, so results do not depend on the
        worker count.

    The moments use a two-pass formulation (pooled mean first, then pooled
    sum of squared deviations) with exact accumulation of per-volume partial
    sums, which stays stable for datasets of billions of voxels; a single-pass
    sum-of-squares would cancel catastrophically there.
    """
    volumes = list(volumes)
    if not volumes:
        raise ValueError("compute_stats requires at least one volume")
    if masks is not None:
        masks = list(masks)
        if len(masks) != len(volumes):
            raise ValueError(f"got {len(volumes)} volumes but {len(masks)} masks")
        for vol, mask in zip(volumes, masks):
            require_same_geometry(vol, mask, "volume and mask")
        selectors = [_foreground_mask(m, foreground_labels) for m in masks]
    else:
        selectors = [None] * len(volumes)

    def selected(i: int) -> np.ndarray:
        sel = selectors[i]
        return volumes[i].data if sel is None else volumes[i].data[sel]

    def first_pass(i: int) -> tuple[int, float, float, float]:
        vals = selected(i)
        if vals.size == 0:
            return 0, 0.0, math.inf, -math.inf
        return int(vals.size), float(np.sum(vals, dtype=np.float64)), float(vals.min()), float(vals.max())

    partials = thread_map(first_pass, range(len(volumes)), threads)
    count = sum(p[0] for p in partials)
    if count == 0:
        raise ValueError("empty selection: the mask excluded every voxel")
    mean = math.fsum(p[1] for p in partials) / count
    vmin = min(p[2] for p in partials)
    vmax = max(p[3] for p in partials)

    def second_pass(i: int) -> float:
        vals = selected(i)
        if vals.size == 0:
            return 0.0
        d = vals - mean
        return float(np.sum(d * d, dtype=np.float64))

    ssd = math.fsum(thread_map(second_pass, range(len(volumes)), threads))
    std = math.sqrt(max(ssd / count, 0.0))

    ranks = [float(q) for q in percentiles]
    pct: dict[float, float] = {}
    if ranks:
        if any(q < 0 or q > 100 for q in ranks):
            raise ValueError(f"percentile ranks must lie in [0, 100], got {ranks}")
        pool = np.concatenate([selected(i).ravel() for i in range(len(volumes))])
        values = np.percentile(pool, ranks, method="linear")
        pct = {q: float(v) for q, v in zip(ranks, values)}

    return DatasetStats(count=count, mean=mean, std=std, min=vmin, max=vmax, percentiles=pct)


def extract_region_mask(labels: LabelMap, region: RegionSpec,
                        *, allow_missing: bool = False) -> np.ndarray:
    """Boolean mask of voxels whose label belongs to ``region``.

    Raises ``KeyError`` if the region references labels absent from the map's
    vocabulary, unless ``allow_missing`` is set.
    """
    known = set(labels.vocabulary) | {0}
    missing = set(region.labels) - known
    if missing and not allow_missing:
        raise KeyError(f"region {region.name!r} references labels {sorted(missing)} "
                       f"not in vocabulary {sorted(known)}")
    return np.isin(labels.data, np.asarray(sorted(region.labels), dtype=np.int64))
