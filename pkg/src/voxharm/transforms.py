"""Intensity-domain transforms and label remapping.

Two harmonization fits produce an :class:`IntensityMap`: an affine moment
shift that matches a source dataset's mean/std to a target's, and empirical
histogram matching that composes the source CDF with the reference quantile
function.  The shared preprocessing chain (percentile clip, z-score
normalization) lives here as well.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .analysis import Histogram
from .core import DatasetStats, LabelMap, Volume, compute_stats

__all__ = [
    "IntensityMap",
    "LabelRemap",
    "fit_moment_shift",
    "fit_histogram_match",
    "apply_map",
    "clip_thresholds",
    "clip_percentiles",
    "znormalize",
    "remap_labels",
]


@dataclass(frozen=True, eq=False)
class IntensityMap:
    """Monotone piecewise-linear value-to-value mapping.

    ``breakpoints`` are strictly increasing inputs (HU) and ``outputs`` the
    non-decreasing mapped values.  Between breakpoints the map interpolates
    linearly; beyond the ends the ``policy`` decides: ``"clamp"`` holds the
    end values constant, ``"linear"`` extends the end segments (required for
    affine maps, whose moments would otherwise be wrong).
    """

    breakpoints: np.ndarray
    outputs: np.ndarray
    policy: str = "clamp"

    def __post_init__(self) -> None:
        bp = np.asarray(self.breakpoints, dtype=np.float64)
        out = np.asarray(self.outputs, dtype=np.float64)
        if bp.ndim != 1 or bp.size < 2:
            raise ValueError("need at least 2 breakpoints")
        if out.shape != bp.shape:
            raise ValueError(f"breakpoints {bp.shape} and outputs {out.shape} differ")
        if not np.all(np.isfinite(bp)) or not np.all(np.isfinite(out)):
            raise ValueError("breakpoints and outputs must be finite")
        if not np.all(np.diff(bp) > 0):
            raise ValueError("breakpoints must be strictly increasing")
        if np.any(np.diff(out) < 0):
            raise ValueError("outputs must be non-decreasing (monotone map)")
        if self.policy not in ("clamp", "linear"):
            raise ValueError(f"unknown out-of-range policy {self.policy!r}")
        bp.setflags(write=False)
        out.setflags(write=False)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "outputs", out)

    @property
    def is_identity(self) -> bool:
        """True when the map is the identity on the whole real line."""
        return self.policy == "linear" and np.array_equal(self.breakpoints, self.outputs)

    def __call__(self, values):
        """Evaluate the map on a scalar or array."""
        scalar = np.ndim(values) == 0
        x = np.asarray(values, dtype=np.float64)
        if self.is_identity:   # exact no-op; interpolation arithmetic would round
            return float(x) if scalar else x
        y = np.interp(x, self.breakpoints, self.outputs)
        if self.policy == "linear":
            bp, out = self.breakpoints, self.outputs
            lo_slope = (out[1] - out[0]) / (bp[1] - bp[0])
            hi_slope = (out[-1] - out[-2]) / (bp[-1] - bp[-2])
            below = x < bp[0]
            above = x > bp[-1]
            if np.any(below):
                y = np.where(below, out[0] + (x - bp[0]) * lo_slope, y)
            if np.any(above):
                y = np.where(above, out[-1] + (x - bp[-1]) * hi_slope, y)
        return float(y) if scalar else y

    def to_dict(self) -> dict:
        return {"breakpoints": self.breakpoints.tolist(),
                "outputs": self.outputs.tolist(),
                "policy": self.policy}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "IntensityMap":
        return cls(np.asarray(doc["breakpoints"], dtype=np.float64),
                   np.asarray(doc["outputs"], dtype=np.float64),
                   str(doc.get("policy", "clamp")))

    def save_json(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load_json(cls, path: str | Path) -> "IntensityMap":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class LabelRemap:
    """Source-to-destination label relabeling; absent IDs map to themselves."""

    mapping: Mapping[int, int]
    description: str = ""

    def __post_init__(self) -> None:
        mapping = {int(k): int(v) for k, v in dict(self.mapping).items()}
        if any(k < 0 or v < 0 for k, v in mapping.items()):
            raise ValueError("label IDs must be non-negative")
        object.__setattr__(self, "mapping", mapping)

    def apply_to_id(self, label: int) -> int:
        return self.mapping.get(label, label)


def fit_moment_shift(source_stats: DatasetStats, target_stats: DatasetStats) -> IntensityMap:
    """Affine map sending the source dataset's mean/std onto the target's.

    Returns x -> (x - mu_src) / sigma_src * sigma_tgt + mu_tgt as a
    two-breakpoint map with linear extension, so the transformed dataset's
    pooled moments equal the target's up to floating-point roundoff.
    """
    mu_s, sd_s = source_stats.mean, source_stats.std
    mu_t, sd_t = target_stats.mean, target_stats.std
    if not np.isfinite(sd_s) or sd_s <= 0:
        raise ValueError(f"source std must be finite and > 0, got {sd_s}")
    lo, hi = mu_s - sd_s, mu_s + sd_s
    return IntensityMap(np.array([lo, hi]),
                        np.array([mu_t - sd_t, mu_t + sd_t]),
                        policy="linear")


def _inverse_knots(hist: Histogram) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Distinct CDF levels with the first and last edge at each level.

    A flat CDF run (empty bins) makes first != last; the rising segment
    between adjacent levels always connects last[i] to first[i + 1].
    """
    edges, cum = hist.cdf_points()
    levels, first_idx = np.unique(cum, return_index=True)
    last_idx = cum.size - 1 - np.unique(cum[::-1], return_index=True)[1]
    return levels, edges[first_idx], edges[last_idx]


def _invert_cdf(p: np.ndarray, levels: np.ndarray, first_e: np.ndarray,
                last_e: np.ndarray, *, exact_side: str = "first") -> np.ndarray:
    """Evaluate the piecewise-linear CDF inverse at probabilities ``p``.

    Queries that hit a level exactly resolve to the flat segment's left edge
    (``exact_side="first"``, the lower-quantile convention) or right edge.
    """
    p = np.asarray(p, dtype=np.float64)
    idx = np.searchsorted(levels, p, side="left")
    idx = np.minimum(idx, levels.size - 1)
    exact = levels[idx] == p
    lo = np.maximum(idx - 1, 0)
    denom = levels[idx] - levels[lo]
    t = (p - levels[lo]) / np.where(denom == 0, 1.0, denom)
    between = last_e[lo] + t * (first_e[idx] - last_e[lo])
    at_level = first_e[idx] if exact_side == "first" else last_e[idx]
    return np.where(exact, at_level, between)


def fit_histogram_match(source_hist: Histogram, reference_hist: Histogram) -> IntensityMap:
    """Monotone map x -> Q_ref(F_src(x)) between two binned distributions.

    ``F_src`` is the source empirical CDF, piecewise linear across bin edges;
    ``Q_ref`` the piecewise-linear inverse of the reference CDF.  Where the
    reference CDF is flat (empty bins), the inverse takes the left edge of the
    flat segment at the exact level and jumps past it just above, so mass is
    never smeared into empty reference regions.  Breakpoints include the
    preimages of every reference CDF level, making the returned map the exact
    composition up to one float ULP around each jump.  A reference with a
    single occupied bin is degenerate: every input maps to that bin's center
    (a warning, not an error).
    """
    if source_hist.total == 0 or reference_hist.total == 0:
        raise ValueError("cannot fit histogram matching on an empty histogram")
    if source_hist.bins != reference_hist.bins:
        raise ValueError(
            f"source and reference must share one bin-count policy, "
            f"got {source_hist.bins} vs {reference_hist.bins} bins")

    src_edges, src_cum = source_hist.cdf_points()
    occupied = np.count_nonzero(reference_hist.counts)
    if occupied == 1:
        center = float(reference_hist.bin_centers[np.argmax(reference_hist.counts)])
        warnings.warn("degenerate reference histogram (single occupied bin); "
                      "mapping every input to its center")
        return IntensityMap(src_edges[[0, -1]], np.array([center, center]))

    ref_levels, ref_first, ref_last = _inverse_knots(reference_hist)
    src_levels, src_first, src_last = _inverse_knots(source_hist)

    # Knots of the composition: every source edge, plus the source preimage of
    # every reference level (where Q_ref changes slope), plus a one-ULP riser
    # after each reference flat to represent the quantile jump across it.
    bp_parts = [src_edges]
    out_parts = [_invert_cdf(src_cum, ref_levels, ref_first, ref_last)]

    pre_first = _invert_cdf(ref_levels, src_levels, src_first, src_last)
    bp_parts.append(pre_first)
    out_parts.append(ref_first)

    jumping = (ref_first != ref_last) & (ref_levels < 1.0)
    if np.any(jumping):
        pre_last = _invert_cdf(ref_levels[jumping], src_levels, src_first, src_last,
                               exact_side="last")
        bp_parts.append(np.nextafter(pre_last, np.inf))
        out_parts.append(ref_last[jumping])

    breakpoints = np.concatenate(bp_parts)
    outputs = np.concatenate(out_parts)
    order = np.lexsort((outputs, breakpoints))
    breakpoints, outputs = breakpoints[order], outputs[order]
    keep = np.concatenate([breakpoints[1:] != breakpoints[:-1], [True]])
    breakpoints, outputs = breakpoints[keep], outputs[keep]
    outputs = np.maximum.accumulate(outputs)
    return IntensityMap(breakpoints, outputs)


def apply_map(volume: Volume, intensity_map: IntensityMap) -> Volume:
    """Apply an intensity map voxelwise; geometry is unchanged."""
    return volume.with_data(intensity_map(volume.data))


def clip_thresholds(volumes: Sequence[Volume], lo_pct: float = 0.5, hi_pct: float = 99.5,
                    masks: Sequence[LabelMap] | None = None,
                    *, threads: int = 1) -> tuple[float, float]:
    """Pooled clip thresholds at the given percentile ranks."""
    if not 0 <= lo_pct < hi_pct <= 100:
        raise ValueError(f"need 0 <= lo_pct < hi_pct <= 100, got {lo_pct}, {hi_pct}")
    stats = compute_stats(volumes, masks, percentiles=(lo_pct, hi_pct), threads=threads)
    lo, hi = stats.percentiles[float(lo_pct)], stats.percentiles[float(hi_pct)]
    if lo == hi:
        warnings.warn(f"degenerate clip thresholds ({lo} == {hi}); output will be constant")
    return lo, hi


def clip_to(volumes: Sequence[Volume], lo: float, hi: float) -> list[Volume]:
    """Clamp every voxel into [lo, hi]."""
    if not lo <= hi:
        raise ValueError(f"need lo <= hi, got {lo}, {hi}")
    return [v.with_data(np.clip(v.data, lo, hi)) for v in volumes]


def clip_percentiles(volumes: Sequence[Volume], lo_pct: float = 0.5, hi_pct: float = 99.5,
                     *, per_volume: bool = False, threads: int = 1) -> list[Volume]:
    """Clip outlier intensities at pooled dataset percentiles.

    Thresholds are computed once over all volumes together (keeping multiple
    sources on one scale); ``per_volume=True`` switches to per-volume
    thresholds instead.
    """
    volumes = list(volumes)
    if not volumes:
        raise ValueError("clip_percentiles requires at least one volume")
    if per_volume:
        out = []
        for v in volumes:
            lo, hi = clip_thresholds([v], lo_pct, hi_pct)
            out.extend(clip_to([v], lo, hi))
        return out
    lo, hi = clip_thresholds(volumes, lo_pct, hi_pct, threads=threads)
    return clip_to(volumes, lo, hi)


def znormalize(volumes: Sequence[Volume], stats: DatasetStats) -> list[Volume]:
    """Voxelwise (x - mean) / std using the supplied dataset statistics."""
    if not np.isfinite(stats.std) or stats.std <= 0:
        raise ValueError(f"std must be finite and > 0 to normalize, got {stats.std}")
    return [v.with_data((v.data - stats.mean) / stats.std) for v in volumes]


def remap_labels(labels: LabelMap, remap: LabelRemap, *, strict: bool = False,
                 vocabulary: Mapping[int, str] | None = None) -> LabelMap:
    """Relabel a map through a lookup table; geometry is unchanged.

    Labels absent from the remap keep their ID.  With ``strict=True`` every
    nonzero label present in the data must be an explicit key of the remap.
    The destination vocabulary is derived from the source one unless supplied.
    """
    present = np.unique(labels.data)
    if strict:
        missing = set(int(v) for v in present if v != 0) - set(remap.mapping)
        if missing:
            raise ValueError(f"strict remap: labels {sorted(missing)} have no mapping")

    if vocabulary is None:
        vocab: dict[int, str] = {}
        for src_id in sorted(labels.vocabulary):
            dst = remap.apply_to_id(src_id)
            if dst != 0:
                vocab.setdefault(dst, labels.vocabulary.get(dst, labels.vocabulary[src_id]))
    else:
        vocab = {int(k): str(v) for k, v in dict(vocabulary).items()}
    bad = {d for d in remap.mapping.values() if d != 0 and d not in vocab}
    if bad:
        raise ValueError(f"remap destinations {sorted(bad)} missing from the "
                         f"destination vocabulary {sorted(vocab)}")

    top = int(max(int(present.max(initial=0)), max(remap.mapping, default=0)))
    lut = np.arange(top + 1, dtype=np.int32)
    for src_id, dst_id in remap.mapping.items():
        if src_id <= top:
            lut[src_id] = dst_id
    return labels.with_data(lut[labels.data], vocabulary=vocab)
