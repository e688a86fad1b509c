"""Dataset-level histograms and distribution-distance metrics.

Histograms use fixed uniform bins with the half-open convention
``[edge_i, edge_i+1)`` and a closed last bin; values outside the range are
tallied as underflow/overflow.  Counts are exact integers, so pooling across
volumes is order-independent.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .core import Volume

__all__ = [
    "Histogram",
    "CdfDistance",
    "build_histogram",
    "cdf_distance",
    "emit_plot_data",
]


@dataclass(frozen=True, eq=False)
class Histogram:
    """Fixed-bin counts over an intensity range, poolable across volumes."""

    bin_edges: np.ndarray
    counts: np.ndarray
    underflow: int = 0
    overflow: int = 0

    def __post_init__(self) -> None:
        edges = np.asarray(self.bin_edges, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.int64)
        if edges.ndim != 1 or edges.size < 2:
            raise ValueError("bin_edges must be a 1D array of at least 2 edges")
        if not np.all(np.diff(edges) > 0):
            raise ValueError("bin_edges must be strictly increasing")
        if counts.shape != (edges.size - 1,):
            raise ValueError(f"expected {edges.size - 1} counts, got {counts.shape}")
        if counts.size and counts.min() < 0:
            raise ValueError("counts must be non-negative")
        if self.underflow < 0 or self.overflow < 0:
            raise ValueError("underflow/overflow must be non-negative")
        edges.setflags(write=False)
        counts.setflags(write=False)
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "underflow", int(self.underflow))
        object.__setattr__(self, "overflow", int(self.overflow))

    @property
    def bins(self) -> int:
        return int(self.counts.size)

    @property
    def total(self) -> int:
        """In-range count (excludes underflow/overflow)."""
        return int(self.counts.sum())

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    @property
    def density(self) -> np.ndarray:
        """Per-bin density; integrates to <= 1, and to 1 when nothing under/overflows."""
        grand = self.total + self.underflow + self.overflow
        if grand == 0:
            return np.zeros_like(self.counts, dtype=np.float64)
        widths = np.diff(self.bin_edges)
        return self.counts / (grand * widths)

    def cdf_points(self) -> tuple[np.ndarray, np.ndarray]:
        """Knots of the piecewise-linear empirical CDF across bin edges.

        Only in-range mass contributes; build the histogram over the full data
        range when underflow/overflow would matter.
        """
        total = self.total
        if total == 0:
            raise ValueError("cannot build a CDF from an empty histogram")
        cum = np.concatenate(([0.0], np.cumsum(self.counts, dtype=np.float64))) / total
        return self.bin_edges, cum

    def merge(self, other: "Histogram") -> "Histogram":
        """Exact integer merge; both histograms must share the same edges."""
        if self.bin_edges.shape != other.bin_edges.shape or \
                not np.array_equal(self.bin_edges, other.bin_edges):
            raise ValueError("cannot merge histograms with different bin edges")
        return Histogram(self.bin_edges, self.counts + other.counts,
                         self.underflow + other.underflow,
                         self.overflow + other.overflow)


class CdfDistance(NamedTuple):
    ks: float   # max absolute CDF difference, in [0, 1]
    emd: float  # integral of |CDF_a - CDF_b| over the value axis (1-Wasserstein)


def _values_of(item) -> np.ndarray:
    if isinstance(item, Volume):
        return item.data
    return np.asarray(item, dtype=np.float64)


def build_histogram(volumes: Sequence, value_range: tuple[float, float],
                    bins: int) -> Histogram:
    """Pooled histogram over volumes (or raw value arrays).

    Values outside ``value_range`` land in underflow/overflow.  Counting is
    exact, so the result is identical for any volume ordering or sharding.
    """
    items = list(volumes)
    if not items:
        raise ValueError("build_histogram requires at least one volume")
    lo, hi = float(value_range[0]), float(value_range[1])
    if not lo < hi:
        raise ValueError(f"invalid range [{lo}, {hi}]")
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    edges = np.linspace(lo, hi, bins + 1)
    counts = np.zeros(bins, dtype=np.int64)
    underflow = overflow = 0
    for item in items:
        vals = _values_of(item).ravel()
        underflow += int((vals < lo).sum())
        overflow += int((vals > hi).sum())
        c, _ = np.histogram(vals, bins=edges)
        counts += c
    return Histogram(edges, counts, underflow, overflow)


def cdf_distance(a: Histogram, b: Histogram) -> CdfDistance:
    """Kolmogorov-Smirnov and 1-Wasserstein distance between two histograms.

    Both CDFs are piecewise linear across their bin edges (0 below range, 1
    above), evaluated exactly on the union of the two edge sets.  Only
    in-range mass enters; build the histograms over the full data range if
    under/overflow would matter.
    """
    ea, ca = a.cdf_points()
    eb, cb = b.cdf_points()
    grid = np.union1d(ea, eb)
    fa = np.interp(grid, ea, ca, left=0.0, right=1.0)
    fb = np.interp(grid, eb, cb, left=0.0, right=1.0)
    diff = fa - fb
    ks = float(np.abs(diff).max())

    # Per union segment the difference is linear: integrate |linear| exactly,
    # splitting at the zero crossing when the endpoints change sign.
    d0, d1 = diff[:-1], diff[1:]
    w = np.diff(grid)
    same_sign = d0 * d1 >= 0
    seg = np.where(
        same_sign,
        0.5 * w * (np.abs(d0) + np.abs(d1)),
        0.5 * w * (d0 * d0 + d1 * d1) / np.where(same_sign, 1.0, np.abs(d0) + np.abs(d1)),
    )
    return CdfDistance(ks=ks, emd=float(np.sum(seg)))


def emit_plot_data(histograms: Mapping[str, Histogram], path: str | Path,
                   json_path: str | Path | None = None) -> None:
    """Write plot-ready histogram rows as CSV (and optionally a JSON mirror).

    Columns: ``series,bin_left,bin_right,count,density``; rows ordered by
    series name, then bin index; LF line endings, UTF-8.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["series", "bin_left", "bin_right", "count", "density"])
        for name in sorted(histograms):
            h = histograms[name]
            dens = h.density
            for i in range(h.bins):
                writer.writerow([name, repr(float(h.bin_edges[i])),
                                 repr(float(h.bin_edges[i + 1])),
                                 int(h.counts[i]), repr(float(dens[i]))])
    if json_path is not None:
        doc = {
            name: {
                "bin_edges": [float(e) for e in h.bin_edges],
                "counts": [int(c) for c in h.counts],
                "underflow": h.underflow,
                "overflow": h.overflow,
            }
            for name, h in histograms.items()
        }
        json_path = Path(json_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n",
                             encoding="utf-8")
