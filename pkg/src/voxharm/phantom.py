"""Synthetic phantom volumes with paired label maps.

Phantoms enable desk-scale verification of the harmonization pipeline without
patient data: a Gaussian-mixture background plus ellipsoidal class regions
with fixed intensity offsets.  Generation is fully deterministic given the
spec's seed; each volume draws from an independently spawned substream, so
generation order and worker count cannot change the output.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nifti
from .core import LabelMap, Volume
from .util import thread_map

__all__ = [
    "GaussianMixture",
    "EllipsoidClass",
    "PhantomSpec",
    "generate_phantom",
    "generate_phantoms",
    "default_target_spec",
    "default_source_spec",
]


@dataclass(frozen=True)
class GaussianMixture:
    """Background intensity model (HU): component means, stds, and weights."""

    means: tuple[float, ...]
    stds: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        means = tuple(float(m) for m in self.means)
        stds = tuple(float(s) for s in self.stds)
        weights = tuple(float(w) for w in self.weights)
        if not (len(means) == len(stds) == len(weights)) or not means:
            raise ValueError("means, stds, weights must be non-empty and equal length")
        if any(s < 0 for s in stds):
            raise ValueError("component stds must be >= 0")
        if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
            raise ValueError(f"weights must be non-negative and sum to 1, got {weights}")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)
        object.__setattr__(self, "weights", weights)


@dataclass(frozen=True)
class EllipsoidClass:
    """Ellipsoid generator for one label class.

    Centers are drawn inside ``center_frac`` (per-axis fractions of the grid)
    and radii inside ``radii_vox`` (voxel units, drawn per axis).  Inside the
    ellipsoid the voxel keeps its background draw shifted by ``offset`` HU.
    """

    label: int
    name: str
    offset: float
    count: int = 1
    center_frac: tuple[tuple[float, float], ...] = ((0.2, 0.8),) * 3
    radii_vox: tuple[float, float] = (3.0, 6.0)

    def __post_init__(self) -> None:
        if self.label <= 0:
            raise ValueError("ellipsoid classes need a positive label")
        if self.count < 0:
            raise ValueError("count must be >= 0")
        frac = tuple((float(a), float(b)) for a, b in self.center_frac)
        if len(frac) != 3 or any(not 0 <= a <= b <= 1 for a, b in frac):
            raise ValueError(f"center_frac must be 3 (lo, hi) pairs in [0, 1], got {frac}")
        radii = (float(self.radii_vox[0]), float(self.radii_vox[1]))
        if not 0 < radii[0] <= radii[1]:
            raise ValueError(f"radii range must be positive and ordered, got {radii}")
        object.__setattr__(self, "center_frac", frac)
        object.__setattr__(self, "radii_vox", radii)


@dataclass(frozen=True)
class PhantomSpec:
    """Deterministic recipe for a phantom dataset.

    Classes are painted in the listed order, so later classes win overlaps;
    keep the highest-priority class (cyst over tumor over kidney) last.
    """

    count: int = 10
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    background: GaussianMixture = GaussianMixture((0.0,), (1.0,), (1.0,))
    classes: tuple[EllipsoidClass, ...] = ()
    seed: int = 0
    name: str = "phantom"

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ValueError("count must be >= 1")
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValueError(f"dims must be 3 positive integers, got {dims}")
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be 3 positive reals, got {spacing}")
        labels = [c.label for c in self.classes]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate class labels: {labels}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "classes", tuple(self.classes))

    @property
    def vocabulary(self) -> dict[int, str]:
        return {c.label: c.name for c in self.classes}


def _ellipsoid_mask(dims: tuple[int, int, int], center: np.ndarray,
                    radii: np.ndarray) -> np.ndarray:
    axes = np.ix_(*(np.arange(n, dtype=np.float64) for n in dims))
    q = sum(((ax - c) / r) ** 2 for ax, c, r in zip(axes, center, radii))
    return q <= 1.0


def generate_phantom(spec: PhantomSpec, index: int) -> tuple[Volume, LabelMap]:
    """Generate phantom ``index`` of the spec (independent of all others)."""
    if not 0 <= index < spec.count:
        raise IndexError(f"index {index} out of range for count {spec.count}")
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(spec.count)[index])
    mix = spec.background
    component = rng.choice(len(mix.means), size=spec.dims, p=np.asarray(mix.weights))
    background = rng.normal(np.asarray(mix.means)[component],
                            np.asarray(mix.stds)[component])
    data = background.copy()
    labels = np.zeros(spec.dims, dtype=np.int32)
    for cls in spec.classes:
        for _ in range(cls.count):
            center = np.array([
                rng.uniform(lo * (n - 1), hi * (n - 1))
                for (lo, hi), n in zip(cls.center_frac, spec.dims)
            ])
            radii = rng.uniform(cls.radii_vox[0], cls.radii_vox[1], size=3)
            mask = _ellipsoid_mask(spec.dims, center, radii)
            data[mask] = background[mask] + cls.offset
            labels[mask] = cls.label
    volume = Volume(data, spacing=spec.spacing)
    label_map = LabelMap(labels, spacing=spec.spacing, vocabulary=spec.vocabulary)
    return volume, label_map


def generate_phantoms(spec: PhantomSpec, out_dir: str | Path,
                      *, threads: int = 1) -> list[dict[str, str]]:
    """Write the phantom dataset to ``<out>/volumes`` and ``<out>/labels``.

    Returns one record per case with the relative file paths.  Identical
    specs produce byte-identical files.
    """
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)

    def build(i: int) -> dict[str, str]:
        volume, label_map = generate_phantom(spec, i)
        stem = f"{spec.name}_{i:03d}"
        vol_rel = f"volumes/{stem}.nii.gz"
        lab_rel = f"labels/{stem}.nii.gz"
        nifti.write_volume(volume, out_dir / vol_rel, "float32")
        nifti.write_labels(label_map, out_dir / lab_rel, "uint8")
        return {"case": stem, "volume": vol_rel, "labels": lab_rel}

    return thread_map(build, range(spec.count), threads)


def default_target_spec(count: int = 10, dims: Sequence[int] = (64, 64, 64),
                        seed: int = 2023) -> PhantomSpec:
    """Target-domain phantom: bimodal background near -1000 and 0 HU."""
    return PhantomSpec(
        count=count,
        dims=tuple(dims),
        background=GaussianMixture(means=(-1000.0, 0.0), stds=(80.0, 120.0),
                                   weights=(0.5, 0.5)),
        classes=(
            EllipsoidClass(label=1, name="kidney", offset=60.0, radii_vox=(5.0, 9.0)),
            EllipsoidClass(label=2, name="tumor", offset=140.0, radii_vox=(2.5, 5.0)),
            EllipsoidClass(label=3, name="cyst", offset=-60.0, radii_vox=(1.5, 3.0)),
        ),
        seed=seed,
        name="target",
    )


def default_source_spec(count: int = 10, dims: Sequence[int] = (64, 64, 64),
                        seed: int = 2024) -> PhantomSpec:
    """Source-domain phantom: unimodal background centered in 800..1500 HU."""
    return PhantomSpec(
        count=count,
        dims=tuple(dims),
        background=GaussianMixture(means=(1150.0,), stds=(120.0,), weights=(1.0,)),
        classes=(
            EllipsoidClass(label=1, name="kidney", offset=60.0, radii_vox=(5.0, 9.0)),
            EllipsoidClass(label=2, name="tumor", offset=140.0, radii_vox=(2.5, 5.0)),
            EllipsoidClass(label=3, name="artery", offset=220.0, radii_vox=(1.5, 3.0)),
            EllipsoidClass(label=4, name="vein", offset=180.0, radii_vox=(1.5, 3.0)),
        ),
        seed=seed,
        name="source",
    )
