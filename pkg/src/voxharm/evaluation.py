"""Region-based Dice evaluation over hierarchical label unions.

Regions are named unions of label IDs (e.g. the whole-organ region is the
union of kidney, tumor and cyst).  Per-case scoring uses a single joint
label-pair count, which is exactly equivalent to building the union masks
voxel by voxel.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import LabelMap, RegionSpec, require_same_geometry
from .util import thread_map

__all__ = [
    "RegionSpec",
    "EvalReport",
    "DEFAULT_REGIONS",
    "dice",
    "evaluate_case",
    "evaluate_dataset",
    "load_regions",
]

# Default label IDs: 1=kidney, 2=tumor, 3=cyst.
DEFAULT_REGIONS: tuple[RegionSpec, ...] = (
    RegionSpec("kidney_and_masses", frozenset({1, 2, 3})),
    RegionSpec("masses", frozenset({2, 3})),
    RegionSpec("tumor", frozenset({2})),
    RegionSpec("kidney", frozenset({1})),
    RegionSpec("cyst", frozenset({3})),
)

_BOTH_EMPTY_MODES = ("undefined", "one")


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float | None:
    """Dice overlap 2|P&G| / (|P| + |G|); None when both masks are empty."""
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = int(pred.sum())
    g = int(gt.sum())
    if p + g == 0:
        return None
    i = int(np.logical_and(pred, gt).sum())
    return 2.0 * i / (p + g)


def _check_regions(regions: Sequence[RegionSpec]) -> None:
    names = [r.name for r in regions]
    if len(set(names)) != len(names):
        raise ValueError(f"region names must be unique, got {names}")


def evaluate_case(pred: LabelMap, gt: LabelMap, regions: Sequence[RegionSpec],
                  *, both_empty: str = "undefined",
                  allow_missing: bool = False) -> dict[str, float | None]:
    """Region Dice scores for one prediction/ground-truth pair.

    ``both_empty`` picks the convention for regions empty in both maps:
    ``"undefined"`` returns None (excluded from aggregates), ``"one"`` scores
    the case 1.0.  Scoring runs on a joint count of (pred, gt) label pairs,
    one pass over the voxels.
    """
    if both_empty not in _BOTH_EMPTY_MODES:
        raise ValueError(f"both_empty must be one of {_BOTH_EMPTY_MODES}")
    require_same_geometry(pred, gt, "prediction and ground truth")
    _check_regions(regions)
    known = set(pred.vocabulary) | set(gt.vocabulary) | {0}
    for region in regions:
        missing = set(region.labels) - known
        if missing and not allow_missing:
            raise KeyError(f"region {region.name!r} references labels "
                           f"{sorted(missing)} absent from both vocabularies")

    k = int(max(pred.data.max(initial=0), gt.data.max(initial=0))) + 1
    joint = np.bincount(
        pred.data.ravel().astype(np.int64) * k + gt.data.ravel().astype(np.int64),
        minlength=k * k,
    ).reshape(k, k)
    pred_tot = joint.sum(axis=1)
    gt_tot = joint.sum(axis=0)

    scores: dict[str, float | None] = {}
    for region in regions:
        members = np.array([label in region.labels for label in range(k)])
        p = int(pred_tot[members].sum())
        g = int(gt_tot[members].sum())
        if p + g == 0:
            scores[region.name] = 1.0 if both_empty == "one" else None
            continue
        i = int(joint[np.ix_(members, members)].sum())
        scores[region.name] = 2.0 * i / (p + g)
    return scores


@dataclass(frozen=True)
class EvalReport:
    """Per-case and aggregate region Dice scores.

    ``aggregate`` holds the arithmetic mean over cases with a defined score;
    regions undefined in every case aggregate to None.  ``undefined_counts``
    says how many cases were excluded per region.
    """

    cases: Mapping[str, Mapping[str, float | None]]
    aggregate: Mapping[str, float | None]
    undefined_counts: Mapping[str, int]

    def to_dict(self) -> dict:
        return {
            "cases": {cid: dict(scores) for cid, scores in self.cases.items()},
            "aggregate": dict(self.aggregate),
            "undefined_counts": dict(self.undefined_counts),
        }

    def to_json(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n",
                        encoding="utf-8")

    def to_csv(self, path: str | Path) -> None:
        """One row per (case, region); undefined scores leave the column empty."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["case", "region", "score"])
            for cid in sorted(self.cases):
                for region, score in self.cases[cid].items():
                    writer.writerow([cid, region, "" if score is None else repr(score)])


def evaluate_dataset(cases: Sequence[tuple[LabelMap, LabelMap]],
                     regions: Sequence[RegionSpec] = DEFAULT_REGIONS,
                     *, ids: Sequence[str] | None = None,
                     both_empty: str = "undefined",
                     allow_missing: bool = False,
                     threads: int = 1) -> EvalReport:
    """Evaluate (prediction, ground truth) pairs and aggregate per region.

    Cases may be scored in parallel; the aggregation always reduces in sorted
    case-ID order, so the report does not depend on the worker count.
    """
    cases = list(cases)
    if not cases:
        raise ValueError("evaluate_dataset requires at least one case")
    if ids is None:
        ids = [f"case_{i:04d}" for i in range(len(cases))]
    else:
        ids = [str(i) for i in ids]
        if len(ids) != len(cases):
            raise ValueError(f"{len(cases)} cases but {len(ids)} ids")
        if len(set(ids)) != len(ids):
            raise ValueError("case ids must be unique")
    _check_regions(regions)

    def score(pair: tuple[LabelMap, LabelMap]) -> dict[str, float | None]:
        return evaluate_case(pair[0], pair[1], regions,
                             both_empty=both_empty, allow_missing=allow_missing)

    results = dict(zip(ids, thread_map(score, cases, threads)))
    aggregate: dict[str, float | None] = {}
    undefined: dict[str, int] = {}
    for region in regions:
        defined = [results[cid][region.name] for cid in sorted(results)
                   if results[cid][region.name] is not None]
        undefined[region.name] = len(results) - len(defined)
        aggregate[region.name] = math.fsum(defined) / len(defined) if defined else None
    return EvalReport(cases=results, aggregate=aggregate, undefined_counts=undefined)


def load_regions(path: str | Path) -> tuple[RegionSpec, ...]:
    """Read region definitions from JSON: [{"name": ..., "labels": [...]}, ...]."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(doc, dict):
        doc = doc.get("regions", doc)
    regions = tuple(RegionSpec(str(r["name"]), frozenset(int(v) for v in r["labels"]))
                    for r in doc)
    _check_regions(regions)
    return regions
