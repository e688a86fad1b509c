"""Configuration-driven construction of harmonized training datasets.

A pipeline run loads a source dataset (volumes plus optional labels) and a
target dataset, then applies the fixed stage order

    remap -> harmonize -> clip -> normalize -> resample

where harmonization transforms only the source volumes onto the target
intensity distribution, and the shared clip/normalize/resample chain applies
to the combined dataset.  The run writes transformed volumes, label maps, the
fitted intensity maps, and a manifest with pooled statistics, thresholds, and
content digests; identical config + inputs reproduce byte-identical outputs
regardless of the worker count.

Configs are TOML documents (see ``presets/dataset1.toml`` and
``presets/dataset2.toml`` for the two shipped presets and the full schema).
"""

from __future__ import annotations

import dataclasses
import glob as globmod
import json
import shutil
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__, nifti
from .analysis import Histogram, build_histogram
from .core import DatasetStats, LabelMap, Volume, compute_stats
from .resample import ResampleSpec, resample_labels, resample_volume
from .transforms import (IntensityMap, LabelRemap, apply_map, clip_thresholds,
                         clip_to, fit_histogram_match, fit_moment_shift,
                         remap_labels, znormalize)
from .util import resolve_threads, sha256_hex, thread_map

__all__ = [
    "ConfigError",
    "PipelineError",
    "DatasetSource",
    "HarmonizationConfig",
    "ClipConfig",
    "OutputConfig",
    "PipelineConfig",
    "STAGE_ORDER",
    "load_config",
    "load_preset",
    "preset_path",
    "dataset1_config",
    "dataset2_config",
    "run_pipeline",
    "SOURCE_VOCABULARY",
    "TARGET_VOCABULARY",
    "DROP_VESSELS_REMAP",
]

STAGE_ORDER = ("remap", "harmonize", "clip", "normalize", "resample")

HARMONIZATION_METHODS = ("none", "moment_shift", "histogram_match")

# Source-domain classes (vessels included) and the target-domain classes.
SOURCE_VOCABULARY = {1: "kidney", 2: "tumor", 3: "artery", 4: "vein"}
TARGET_VOCABULARY = {1: "kidney", 2: "tumor", 3: "cyst"}
# Drop the vessel classes, keep kidney and tumor.
DROP_VESSELS_REMAP = {3: 0, 4: 0}


class ConfigError(ValueError):
    """The pipeline configuration is invalid."""


class PipelineError(RuntimeError):
    """A stage failed; carries the stage name and case ID."""

    def __init__(self, stage: str, case: str | None, message: str):
        self.stage = stage
        self.case = case
        where = f"stage {stage!r}" + (f", case {case!r}" if case else "")
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class DatasetSource:
    """Where to find one dataset: volume glob, optional label glob, vocabulary."""

    volumes: str
    labels: str | None = None
    vocabulary: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "vocabulary",
                           {int(k): str(v) for k, v in dict(self.vocabulary).items()})


@dataclass(frozen=True)
class HarmonizationConfig:
    method: str = "none"
    bins: int = 4096
    per_volume_source: bool = True
    subsample: int | None = None   # cap on reference voxels drawn per target volume

    def __post_init__(self) -> None:
        if self.method not in HARMONIZATION_METHODS:
            raise ConfigError(f"harmonization method must be one of "
                              f"{HARMONIZATION_METHODS}, got {self.method!r}")
        if self.bins < 2:
            raise ConfigError(f"harmonization bins must be >= 2, got {self.bins}")
        if self.subsample is not None and self.subsample < 1:
            raise ConfigError("subsample must be >= 1 when set")


@dataclass(frozen=True)
class ClipConfig:
    lo_pct: float = 0.5
    hi_pct: float = 99.5
    enabled: bool = True
    per_volume: bool = False

    def __post_init__(self) -> None:
        if not 0 <= self.lo_pct < self.hi_pct <= 100:
            raise ConfigError(f"need 0 <= lo_pct < hi_pct <= 100, "
                              f"got {self.lo_pct}, {self.hi_pct}")


@dataclass(frozen=True)
class OutputConfig:
    dir: str
    datatype: str = "float32"

    def __post_init__(self) -> None:
        if self.datatype not in ("float32", "int16"):
            raise ConfigError(f"output datatype must be float32 or int16, "
                              f"got {self.datatype!r}")


@dataclass(frozen=True)
class PipelineConfig:
    source: DatasetSource
    output: OutputConfig
    target: DatasetSource | None = None
    harmonization: HarmonizationConfig = HarmonizationConfig()
    label_remap: Mapping[int, int] = field(default_factory=dict)
    clip: ClipConfig = ClipConfig()
    normalize: bool = True
    resample: ResampleSpec | None = ResampleSpec()
    seed: int = 0
    threads: int | None = None
    stages: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "label_remap",
                           {int(k): int(v) for k, v in dict(self.label_remap).items()})
        if self.stages is not None:
            object.__setattr__(self, "stages", tuple(self.stages))
        self.validate()

    def validate(self) -> None:
        if self.stages is not None:
            unknown = set(self.stages) - set(STAGE_ORDER)
            if unknown:
                raise ConfigError(f"unknown stages {sorted(unknown)}; "
                                  f"valid stages: {list(STAGE_ORDER)}")
            if len(set(self.stages)) != len(self.stages):
                raise ConfigError(f"duplicate stages in {list(self.stages)}")
            canonical = tuple(s for s in STAGE_ORDER if s in self.stages)
            if tuple(self.stages) != canonical:
                raise ConfigError(
                    f"stages {list(self.stages)} violate the fixed order "
                    f"{list(STAGE_ORDER)}; expected {list(canonical)}")
            if "resample" in self.stages and self.resample is None:
                raise ConfigError("stage 'resample' requested but no [resample] "
                                  "section configured")
        if self.harmonization.method != "none" and self.target is None:
            raise ConfigError("harmonization requires a [target] dataset")
        if "harmonize" in self.active_stages() and self.harmonization.method == "none":
            raise ConfigError("stage 'harmonize' requested but harmonization.method "
                              "is 'none'")
        out_dir = Path(self.output.dir).resolve()
        for src in (self.source, self.target):
            if src is None:
                continue
            base = Path(src.volumes).parent.resolve()
            if base == out_dir:
                raise ConfigError(f"output dir {out_dir} collides with input {base}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")

    def active_stages(self) -> tuple[str, ...]:
        """The stages this run executes, in canonical order."""
        if self.stages is not None:
            return self.stages
        enabled = {
            "remap": bool(self.label_remap) and self.source.labels is not None,
            "harmonize": self.harmonization.method != "none",
            "clip": self.clip.enabled,
            "normalize": self.normalize,
            "resample": self.resample is not None,
        }
        return tuple(s for s in STAGE_ORDER if enabled[s])

    def to_dict(self) -> dict:
        """Config echo for the manifest; omits the worker count, which must
        not influence outputs."""
        def dataset(src: DatasetSource | None):
            if src is None:
                return None
            return {"volumes": src.volumes, "labels": src.labels,
                    "vocabulary": {str(k): v for k, v in src.vocabulary.items()}}

        return {
            "source": dataset(self.source),
            "target": dataset(self.target),
            "harmonization": dataclasses.asdict(self.harmonization),
            "label_remap": {str(k): v for k, v in self.label_remap.items()},
            "clip": dataclasses.asdict(self.clip),
            "normalize": self.normalize,
            "resample": None if self.resample is None else {
                "target_spacing": list(self.resample.target_spacing),
                "intensity_order": self.resample.intensity_order,
                "label_order": self.resample.label_order,
            },
            "output": dataclasses.asdict(self.output),
            "seed": self.seed,
            "stages": list(self.active_stages()),
        }


def _dataset_from_dict(doc: Mapping | None) -> DatasetSource | None:
    if doc is None:
        return None
    return DatasetSource(volumes=str(doc["volumes"]),
                         labels=doc.get("labels"),
                         vocabulary=doc.get("vocabulary", {}))


def config_from_dict(doc: Mapping, *, base_dir: str | Path | None = None) -> PipelineConfig:
    """Build a config from a parsed TOML document.

    Relative paths are resolved against ``base_dir`` (the config file's
    directory when loaded from disk).
    """
    doc = dict(doc)

    def resolve(p: str | None) -> str | None:
        if p is None or base_dir is None:
            return p
        path = Path(p)
        return str(path if path.is_absolute() else Path(base_dir) / path)

    try:
        source = _dataset_from_dict(doc["source"])
        output = OutputConfig(**doc["output"])
    except KeyError as err:
        raise ConfigError(f"missing required config section: {err}") from None
    target = _dataset_from_dict(doc.get("target"))
    resample_doc = doc.get("resample")
    if resample_doc is None:
        spec = None
    else:
        spec = ResampleSpec(
            target_spacing=tuple(resample_doc.get("target_spacing", (0.7636,) * 3)),
            intensity_order=int(resample_doc.get("intensity_order", 3)),
            label_order=int(resample_doc.get("label_order", 0)),
        )
    source = dataclasses.replace(source, volumes=resolve(source.volumes),
                                 labels=resolve(source.labels))
    if target is not None:
        target = dataclasses.replace(target, volumes=resolve(target.volumes),
                                     labels=resolve(target.labels))
    try:
        return PipelineConfig(
            source=source,
            target=target,
            harmonization=HarmonizationConfig(**doc.get("harmonization", {})),
            label_remap=doc.get("label_remap", {}),
            clip=ClipConfig(**doc.get("clip", {})),
            normalize=bool(doc.get("normalize", True)),
            resample=spec,
            output=dataclasses.replace(output, dir=resolve(output.dir)),
            seed=int(doc.get("seed", 0)),
            threads=doc.get("threads"),
            stages=doc.get("stages"),
        )
    except TypeError as err:   # unexpected keys in a section
        raise ConfigError(str(err)) from None


def load_config(path: str | Path) -> PipelineConfig:
    """Parse a TOML pipeline config; relative paths resolve next to the file."""
    path = Path(path)
    with open(path, "rb") as f:
        try:
            doc = tomllib.load(f)
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"{path}: {err}") from None
    return config_from_dict(doc, base_dir=path.parent)


def preset_path(name: str) -> Path:
    """Filesystem path of a shipped preset config (``dataset1`` or ``dataset2``)."""
    candidate = resources.files("voxharm").joinpath(f"presets/{name}.toml")
    if not candidate.is_file():
        raise ConfigError(f"unknown preset {name!r}")
    return Path(str(candidate))


def load_preset(name: str) -> PipelineConfig:
    return load_config(preset_path(name))


def _preset_config(method: str, source_dir: str | Path, target_dir: str | Path,
                   out_dir: str | Path, **overrides) -> PipelineConfig:
    kwargs: dict = dict(
        source=DatasetSource(volumes=str(Path(source_dir) / "volumes" / "*.nii.gz"),
                             labels=str(Path(source_dir) / "labels" / "*.nii.gz"),
                             vocabulary=SOURCE_VOCABULARY),
        target=DatasetSource(volumes=str(Path(target_dir) / "volumes" / "*.nii.gz"),
                             labels=str(Path(target_dir) / "labels" / "*.nii.gz"),
                             vocabulary=TARGET_VOCABULARY),
        harmonization=HarmonizationConfig(method=method),
        label_remap=DROP_VESSELS_REMAP,
        clip=ClipConfig(),
        normalize=True,
        resample=ResampleSpec(),
        output=OutputConfig(dir=str(out_dir)),
    )
    kwargs.update(overrides)
    return PipelineConfig(**kwargs)


def dataset1_config(source_dir: str | Path, target_dir: str | Path,
                    out_dir: str | Path, **overrides) -> PipelineConfig:
    """Merged-dataset construction with the source moment-shifted onto the target."""
    return _preset_config("moment_shift", source_dir, target_dir, out_dir, **overrides)


def dataset2_config(source_dir: str | Path, target_dir: str | Path,
                    out_dir: str | Path, **overrides) -> PipelineConfig:
    """Merged-dataset construction with the source histogram-matched onto the target."""
    return _preset_config("histogram_match", source_dir, target_dir, out_dir, **overrides)


@dataclass
class _Case:
    cid: str
    dataset: str                  # "source" | "target"
    volume: Volume
    labels: LabelMap | None
    map_rel: str | None = None    # fitted intensity-map path, relative to out dir


def _stem(path: str) -> str:
    name = Path(path).name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return Path(path).stem


def _discover(src: DatasetSource, dataset: str, threads: int) -> list[_Case]:
    vol_paths = sorted(globmod.glob(src.volumes))
    if not vol_paths:
        raise PipelineError("load", None, f"no volumes match {src.volumes!r}")
    lab_paths: dict[str, str] = {}
    if src.labels is not None:
        lab_paths = {_stem(p): p for p in globmod.glob(src.labels)}

    def load(vol_path: str) -> _Case:
        stem = _stem(vol_path)
        cid = f"{dataset}_{stem}"
        try:
            volume = nifti.read_volume(vol_path)
            labels = None
            if src.labels is not None:
                if stem not in lab_paths:
                    raise FileNotFoundError(f"no label file for {stem!r} "
                                            f"under {src.labels!r}")
                labels = nifti.read_labels(lab_paths[stem],
                                           vocabulary=src.vocabulary or None)
        except Exception as err:
            raise PipelineError("load", cid, str(err)) from err
        return _Case(cid=cid, dataset=dataset, volume=volume, labels=labels)

    cases = thread_map(load, vol_paths, threads)
    stems = [c.cid for c in cases]
    if len(set(stems)) != len(stems):
        raise PipelineError("load", None, f"duplicate case stems in {src.volumes!r}")
    return cases


def _stats_dict(stats: DatasetStats) -> dict:
    return stats.to_dict()


def _volume_range(volume: Volume) -> tuple[float, float]:
    lo = float(volume.data.min())
    hi = float(volume.data.max())
    if lo == hi:   # degenerate constant volume; widen so binning stays valid
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def _reference_histogram(targets: list[_Case], cfg: HarmonizationConfig,
                         seed: int, threads: int) -> Histogram:
    stats = compute_stats([c.volume for c in targets], threads=threads)
    lo, hi = stats.min, stats.max
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    children = np.random.SeedSequence(seed).spawn(len(targets))

    def values(i: int) -> np.ndarray:
        data = targets[i].volume.data.ravel()
        if cfg.subsample is not None and data.size > cfg.subsample:
            rng = np.random.default_rng(children[i])
            data = rng.choice(data, size=cfg.subsample, replace=False)
        return data

    return build_histogram([values(i) for i in range(len(targets))], (lo, hi), cfg.bins)


def _harmonize(sources: list[_Case], targets: list[_Case],
               cfg: HarmonizationConfig, seed: int, threads: int,
               maps_out: dict[str, IntensityMap]) -> dict:
    record: dict = {"method": cfg.method}
    if cfg.method == "moment_shift":
        src_stats = compute_stats([c.volume for c in sources], threads=threads)
        tgt_stats = compute_stats([c.volume for c in targets], threads=threads)
        imap = fit_moment_shift(src_stats, tgt_stats)
        maps_out["moment_shift"] = imap
        for case in sources:
            case.volume = apply_map(case.volume, imap)
            case.map_rel = "maps/moment_shift.json"
        record["source_stats"] = _stats_dict(src_stats)
        record["target_stats"] = _stats_dict(tgt_stats)
    else:  # histogram_match
        reference = _reference_histogram(targets, cfg, seed, threads)
        record["bins"] = cfg.bins
        record["per_volume_source"] = cfg.per_volume_source
        if cfg.per_volume_source:
            def fit(case: _Case) -> IntensityMap:
                try:
                    hist = build_histogram([case.volume], _volume_range(case.volume),
                                           cfg.bins)
                    return fit_histogram_match(hist, reference)
                except Exception as err:
                    raise PipelineError("harmonize", case.cid, str(err)) from err

            fitted = thread_map(fit, sources, threads)
            for case, imap in zip(sources, fitted):
                maps_out[case.cid] = imap
                case.volume = apply_map(case.volume, imap)
                case.map_rel = f"maps/{case.cid}.json"
        else:
            pooled_stats = compute_stats([c.volume for c in sources], threads=threads)
            lo, hi = pooled_stats.min, pooled_stats.max
            if lo == hi:
                lo, hi = lo - 0.5, hi + 0.5
            pooled = build_histogram([c.volume for c in sources], (lo, hi), cfg.bins)
            imap = fit_histogram_match(pooled, reference)
            maps_out["histogram_match"] = imap
            for case in sources:
                case.volume = apply_map(case.volume, imap)
                case.map_rel = "maps/histogram_match.json"
    record["source_stats_after"] = _stats_dict(
        compute_stats([c.volume for c in sources], threads=threads))
    return record


def run_pipeline(config: PipelineConfig, *, threads: int | None = None) -> dict:
    """Execute the configured stages and write the output dataset plus manifest.

    Outputs land in a staging directory next to ``config.output.dir`` and are
    promoted atomically on success; on failure the final directory is left
    untouched.  Returns the manifest as a dict (also written to
    ``manifest.json``).
    """
    workers = resolve_threads(threads, config.threads)
    stages = config.active_stages()

    sources = _discover(config.source, "source", workers)
    targets: list[_Case] = []
    if config.target is not None:
        targets = _discover(config.target, "target", workers)

    maps_out: dict[str, IntensityMap] = {}
    manifest: dict = {
        "tool": {"name": "voxharm", "version": __version__},
        "config": config.to_dict(),
        "stages": list(stages),
        "stats": {},
    }
    manifest["stats"]["source_raw"] = _stats_dict(
        compute_stats([c.volume for c in sources], threads=workers))
    if targets:
        manifest["stats"]["target_raw"] = _stats_dict(
            compute_stats([c.volume for c in targets], threads=workers))

    def per_case(stage: str, case: _Case, fn) -> None:
        try:
            fn()
        except PipelineError:
            raise
        except Exception as err:
            raise PipelineError(stage, case.cid, str(err)) from err

    def run_stage(stage: str) -> None:
        combined = sources + targets
        if stage == "remap":
            remap = LabelRemap(config.label_remap)

            def remap_one(case: _Case) -> None:
                if case.labels is not None:
                    case.labels = remap_labels(case.labels, remap)

            for case in sources:
                per_case("remap", case, lambda c=case: remap_one(c))
            manifest["remap"] = {str(k): v for k, v in config.label_remap.items()}
        elif stage == "harmonize":
            manifest["harmonize"] = _harmonize(sources, targets, config.harmonization,
                                               config.seed, workers, maps_out)
        elif stage == "clip":
            if config.clip.per_volume:
                manifest["clip"] = {"lo_pct": config.clip.lo_pct,
                                    "hi_pct": config.clip.hi_pct,
                                    "per_volume": True}
                for case in combined:
                    lo, hi = clip_thresholds([case.volume], config.clip.lo_pct,
                                             config.clip.hi_pct)
                    case.volume = clip_to([case.volume], lo, hi)[0]
            else:
                lo, hi = clip_thresholds([c.volume for c in combined],
                                         config.clip.lo_pct, config.clip.hi_pct,
                                         threads=workers)
                manifest["clip"] = {"lo_pct": config.clip.lo_pct,
                                    "hi_pct": config.clip.hi_pct,
                                    "per_volume": False, "lo": lo, "hi": hi}
                for case in combined:
                    case.volume = clip_to([case.volume], lo, hi)[0]
        elif stage == "normalize":
            stats = compute_stats([c.volume for c in combined], threads=workers)
            manifest["normalize"] = _stats_dict(stats)
            normalized = znormalize([c.volume for c in combined], stats)
            for case, volume in zip(combined, normalized):
                case.volume = volume
        elif stage == "resample":
            spec = config.resample

            def do_resample(case: _Case) -> None:
                def work() -> None:
                    case.volume = resample_volume(case.volume, spec)
                    if case.labels is not None:
                        case.labels = resample_labels(case.labels, spec)
                per_case("resample", case, work)

            thread_map(do_resample, combined, workers)
            manifest["resample"] = manifest["config"]["resample"]

    for stage in stages:
        try:
            run_stage(stage)
        except PipelineError:
            raise
        except Exception as err:
            raise PipelineError(stage, None, str(err)) from err

    manifest["stats"]["final"] = _stats_dict(
        compute_stats([c.volume for c in sources + targets], threads=workers))

    out_dir = Path(config.output.dir)
    staging = out_dir.parent / (out_dir.name + ".staging")
    if staging.exists():
        shutil.rmtree(staging)
    for sub in ("volumes", "labels", "maps"):
        (staging / sub).mkdir(parents=True, exist_ok=True)

    datatype = config.output.datatype

    def write_case(case: _Case) -> tuple[str, dict]:
        vol_rel = f"volumes/{case.cid}.nii.gz"
        entry: dict = {"dataset": case.dataset, "volume": vol_rel, "map": case.map_rel}
        try:
            nifti.write_volume(case.volume, staging / vol_rel, datatype)
            entry["volume_sha256"] = sha256_hex(
                case.volume.data.astype("<f4").tobytes(order="F")
                if datatype == "float32"
                else np.rint(case.volume.data).astype("<i2").tobytes(order="F"))
            if case.labels is not None:
                lab_rel = f"labels/{case.cid}.nii.gz"
                nifti.write_labels(case.labels, staging / lab_rel, "uint8")
                entry["labels"] = lab_rel
                entry["labels_sha256"] = sha256_hex(
                    case.labels.data.astype("<u1").tobytes(order="F"))
            else:
                entry["labels"] = None
                entry["labels_sha256"] = None
        except Exception as err:
            raise PipelineError("write", case.cid, str(err)) from err
        return case.cid, entry

    entries = thread_map(write_case, sources + targets, workers)
    manifest["cases"] = {cid: entry for cid, entry in sorted(entries)}
    for name, imap in sorted(maps_out.items()):
        rel = ("maps/moment_shift.json" if name == "moment_shift"
               else "maps/histogram_match.json" if name == "histogram_match"
               else f"maps/{name}.json")
        imap.save_json(staging / rel)
    manifest["dataset_sha256"] = sha256_hex("".join(
        f"{cid}:{entry['volume_sha256']}:{entry['labels_sha256']}"
        for cid, entry in sorted(entries)).encode())

    (staging / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")

    if out_dir.exists():
        old = out_dir.parent / (out_dir.name + ".old")
        if old.exists():
            shutil.rmtree(old)
        out_dir.rename(old)
        staging.rename(out_dir)
        shutil.rmtree(old)
    else:
        out_dir.parent.mkdir(parents=True, exist_ok=True)
        staging.rename(out_dir)
    return manifest
