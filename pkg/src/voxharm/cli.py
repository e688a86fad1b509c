"""Command-line interface.

Every subcommand accepts ``--threads`` (default: $VOXHARM_THREADS, then 1)
and ``--seed``.  On failure the process prints exactly one machine-parsable
line to stderr::

    voxharm-error {"command": ..., "error": ..., "stage": ..., "case": ...}

and exits nonzero (2 for usage/config problems, 1 for runtime failures).
"""

from __future__ import annotations

import argparse
import dataclasses
import glob as globmod
import json
import sys
from pathlib import Path

from . import __version__, nifti
from .analysis import build_histogram, emit_plot_data
from .core import compute_stats
from .evaluation import DEFAULT_REGIONS, evaluate_dataset, load_regions
from .phantom import (EllipsoidClass, GaussianMixture, PhantomSpec,
                      default_source_spec, default_target_spec, generate_phantoms)
from .pipeline import ConfigError, PipelineError, load_config, run_pipeline
from .resample import ResampleSpec, resample_labels, resample_volume
from .transforms import LabelRemap, remap_labels
from .util import resolve_threads, thread_map

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):   # keep failures one-line machine-parsable
        raise _UsageError(message)


def _emit_error(command: str, err: Exception) -> None:
    doc = {"command": command, "error": str(err)}
    if isinstance(err, PipelineError):
        doc["stage"] = err.stage
        doc["case"] = err.case
    print("voxharm-error " + json.dumps(doc, sort_keys=True), file=sys.stderr)


def _float_pair(text: str) -> tuple[float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}")
    return parts[0], parts[1]


def _float_triple(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected A,B,C spacing, got {text!r}")
    return parts[0], parts[1], parts[2]


def _expand(patterns: list[str]) -> list[str]:
    paths: list[str] = []
    for pattern in patterns:
        p = Path(pattern)
        if p.is_dir():
            pattern = str(p / "*.nii*")
        matched = sorted(globmod.glob(pattern))
        paths.extend(matched)
    if not paths:
        raise FileNotFoundError(f"no files match {patterns!r}")
    return paths


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--threads", type=int, default=None,
                     help="worker threads (default: $VOXHARM_THREADS, then 1)")
    sub.add_argument("--seed", type=int, default=None,
                     help="seed for any stochastic subsampling")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voxharm",
                     description="CT intensity harmonization and evaluation toolkit")
    parser.add_argument("--version", action="version", version=f"voxharm {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("stats", help="pooled intensity statistics of volumes")
    p.add_argument("globs", nargs="+", metavar="GLOB")
    p.add_argument("--percentiles", default="0.5,99.5",
                   help="comma-separated percentile ranks (default 0.5,99.5)")
    _add_common(p)

    p = subs.add_parser("histogram", help="pooled histogram as plot-ready CSV")
    p.add_argument("globs", nargs="+", metavar="GLOB")
    p.add_argument("--bins", type=int, default=256)
    p.add_argument("--range", dest="value_range", type=_float_pair, default=None,
                   help="LO,HI intensity range (default: pooled min,max)")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--json", dest="json_out", default=None, help="optional JSON mirror")
    p.add_argument("--series", default="all", help="series name in the CSV")
    _add_common(p)

    p = subs.add_parser("harmonize",
                        help="fit and apply an intensity harmonization to a dataset")
    p.add_argument("--method", choices=("shift", "match"), required=True)
    p.add_argument("--source", required=True, help="source volume dir or glob")
    p.add_argument("--reference", required=True, help="reference volume dir or glob")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--bins", type=int, default=4096)
    p.add_argument("--pooled-source", action="store_true",
                   help="fit one map from the pooled source instead of per volume")
    _add_common(p)

    p = subs.add_parser("preprocess",
                        help="clip/normalize/resample a dataset (no harmonization)")
    p.add_argument("--config", required=True)
    _add_common(p)

    p = subs.add_parser("remap", help="relabel label maps through a lookup table")
    p.add_argument("globs", nargs="+", metavar="GLOB")
    p.add_argument("--map", dest="map_file", required=True,
                   help='JSON file: {"3": 0, "4": 0} or {"mapping": {...}}')
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--strict", action="store_true")
    _add_common(p)

    p = subs.add_parser("resample", help="resample volumes onto a target spacing")
    p.add_argument("globs", nargs="+", metavar="GLOB")
    p.add_argument("--spacing", type=_float_triple, required=True, metavar="A,B,C")
    p.add_argument("--order", type=int, choices=(0, 1, 3), default=3)
    p.add_argument("--labels", action="store_true",
                   help="treat inputs as label maps (nearest-neighbor)")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)

    p = subs.add_parser("evaluate", help="region-Dice evaluation of predictions")
    p.add_argument("--pred", required=True, help="prediction dir or glob")
    p.add_argument("--gt", required=True, help="ground-truth dir or glob")
    p.add_argument("--regions", default=None,
                   help="JSON region definitions (default: the five standard regions)")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--csv", default=None, help="optional per-case CSV path")
    p.add_argument("--both-empty", choices=("undefined", "one"), default="undefined")
    _add_common(p)

    p = subs.add_parser("phantom", help="generate a synthetic phantom dataset")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--spec", help="TOML phantom spec")
    group.add_argument("--preset", choices=("source", "target"))
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=None, help="override volume count")
    _add_common(p)

    p = subs.add_parser("run", help="run the full pipeline from a TOML config")
    p.add_argument("--config", required=True)
    _add_common(p)

    return parser


def _phantom_spec_from_toml(path: str) -> PhantomSpec:
    with open(path, "rb") as f:
        doc = tomllib.load(f)
    background = GaussianMixture(
        means=tuple(doc["background"]["means"]),
        stds=tuple(doc["background"]["stds"]),
        weights=tuple(doc["background"]["weights"]),
    )
    classes = tuple(
        EllipsoidClass(
            label=int(c["label"]),
            name=str(c["name"]),
            offset=float(c["offset"]),
            count=int(c.get("count", 1)),
            center_frac=tuple(tuple(pair) for pair in
                              c.get("center_frac", ((0.2, 0.8),) * 3)),
            radii_vox=tuple(c.get("radii", (3.0, 6.0))),
        )
        for c in doc.get("classes", ())
    )
    return PhantomSpec(
        count=int(doc.get("count", 10)),
        dims=tuple(doc.get("dims", (64, 64, 64))),
        spacing=tuple(doc.get("spacing", (1.0, 1.0, 1.0))),
        background=background,
        classes=classes,
        seed=int(doc.get("seed", 0)),
        name=str(doc.get("name", "phantom")),
    )


def _cmd_stats(args) -> int:
    threads = resolve_threads(args.threads)
    ranks = [float(r) for r in args.percentiles.split(",") if r]
    volumes = thread_map(nifti.read_volume, _expand(args.globs), threads)
    stats = compute_stats(volumes, percentiles=ranks, threads=threads)
    print(json.dumps(stats.to_dict(), sort_keys=True, indent=2))
    return 0


def _cmd_histogram(args) -> int:
    threads = resolve_threads(args.threads)
    volumes = thread_map(nifti.read_volume, _expand(args.globs), threads)
    if args.value_range is None:
        stats = compute_stats(volumes, threads=threads)
        value_range = (stats.min, stats.max) if stats.min < stats.max \
            else (stats.min - 0.5, stats.max + 0.5)
    else:
        value_range = args.value_range
    hist = build_histogram(volumes, value_range, args.bins)
    emit_plot_data({args.series: hist}, args.out, args.json_out)
    print(f"wrote {args.out} ({hist.bins} bins, {hist.total} in-range voxels)")
    return 0


def _cmd_harmonize(args) -> int:
    from .pipeline import (ClipConfig, DatasetSource, HarmonizationConfig,
                           OutputConfig, PipelineConfig)

    def as_glob(text: str) -> str:
        p = Path(text)
        return str(p / "*.nii*") if p.is_dir() else text

    method = "moment_shift" if args.method == "shift" else "histogram_match"
    config = PipelineConfig(
        source=DatasetSource(volumes=as_glob(args.source)),
        target=DatasetSource(volumes=as_glob(args.reference)),
        harmonization=HarmonizationConfig(method=method, bins=args.bins,
                                          per_volume_source=not args.pooled_source),
        output=OutputConfig(dir=args.out),
        resample=None,
        normalize=False,
        clip=ClipConfig(enabled=False),
        seed=args.seed if args.seed is not None else 0,
    )
    manifest = run_pipeline(config, threads=args.threads)
    print(f"harmonized {len(manifest['cases'])} cases into {args.out}")
    return 0


def _cmd_preprocess(args) -> int:
    config = load_config(args.config)
    config = dataclasses.replace(
        config, stages=tuple(s for s in config.active_stages()
                             if s in ("clip", "normalize", "resample")))
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    run_pipeline(config, threads=args.threads)
    print(f"preprocessed into {config.output.dir}")
    return 0


def _cmd_remap(args) -> int:
    doc = json.loads(Path(args.map_file).read_text(encoding="utf-8"))
    mapping = doc.get("mapping", doc) if isinstance(doc, dict) else doc
    remap = LabelRemap({int(k): int(v) for k, v in mapping.items()},
                       description=str(doc.get("description", ""))
                       if isinstance(doc, dict) else "")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = _expand(args.globs)
    for path in paths:
        labels = nifti.read_labels(path)
        nifti.write_labels(remap_labels(labels, remap, strict=args.strict),
                           out / Path(path).name)
    print(f"remapped {len(paths)} label maps into {args.out}")
    return 0


def _cmd_resample(args) -> int:
    spec = ResampleSpec(target_spacing=args.spacing,
                        intensity_order=args.order if not args.labels else 3)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = _expand(args.globs)
    for path in paths:
        if args.labels:
            nifti.write_labels(resample_labels(nifti.read_labels(path), spec),
                               out / Path(path).name)
        else:
            nifti.write_volume(resample_volume(nifti.read_volume(path), spec),
                               out / Path(path).name)
    print(f"resampled {len(paths)} files into {args.out}")
    return 0


def _stem(path: str) -> str:
    name = Path(path).name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return Path(path).stem


def _cmd_evaluate(args) -> int:
    threads = resolve_threads(args.threads)
    regions = load_regions(args.regions) if args.regions else DEFAULT_REGIONS
    pred_paths = {_stem(p): p for p in _expand([args.pred])}
    gt_paths = {_stem(p): p for p in _expand([args.gt])}
    common = sorted(set(pred_paths) & set(gt_paths))
    if not common:
        raise FileNotFoundError("no prediction/ground-truth pairs share a file stem")
    pairs = thread_map(
        lambda s: (nifti.read_labels(pred_paths[s]), nifti.read_labels(gt_paths[s])),
        common, threads)
    # File-derived vocabularies only list the labels present in each case, and
    # cases may legitimately lack a class; regions score those as empty.
    report = evaluate_dataset(pairs, regions, ids=common,
                              both_empty=args.both_empty, allow_missing=True,
                              threads=threads)
    report.to_json(args.out)
    if args.csv:
        report.to_csv(args.csv)
    print(f"{'region':<20} {'mean dice':>10} {'x100':>12} {'undefined':>10}")
    for region in regions:
        score = report.aggregate[region.name]
        shown = "undefined" if score is None else f"{score:.6f}"
        pct = "" if score is None else f"{100 * score:.6f}"
        print(f"{region.name:<20} {shown:>10} {pct:>12} "
              f"{report.undefined_counts[region.name]:>10}")
    return 0


def _cmd_phantom(args) -> int:
    threads = resolve_threads(args.threads)
    if args.spec:
        spec = _phantom_spec_from_toml(args.spec)
    else:
        spec = default_source_spec() if args.preset == "source" else default_target_spec()
    if args.count is not None:
        spec = dataclasses.replace(spec, count=args.count)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    records = generate_phantoms(spec, args.out, threads=threads)
    print(f"generated {len(records)} phantoms into {args.out}")
    return 0


def _cmd_run(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    manifest = run_pipeline(config, threads=args.threads)
    print(f"wrote {len(manifest['cases'])} cases into {config.output.dir} "
          f"(dataset digest {manifest['dataset_sha256'][:16]})")
    return 0


_COMMANDS = {
    "stats": _cmd_stats,
    "histogram": _cmd_histogram,
    "harmonize": _cmd_harmonize,
    "preprocess": _cmd_preprocess,
    "remap": _cmd_remap,
    "resample": _cmd_resample,
    "evaluate": _cmd_evaluate,
    "phantom": _cmd_phantom,
    "run": _cmd_run,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    command = "voxharm"
    try:
        args = parser.parse_args(argv)
        command = args.command
        return _COMMANDS[command](args)
    except _UsageError as err:
        _emit_error(command, err)
        return 2
    except ConfigError as err:
        _emit_error(command, err)
        return 2
    except Exception as err:  # noqa: BLE001 - CLI boundary
        _emit_error(command, err)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
