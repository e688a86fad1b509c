import json

import numpy as np
import pytest

from voxharm import nifti
from voxharm.analysis import build_histogram, cdf_distance
from voxharm.core import compute_stats
from voxharm.phantom import default_source_spec, default_target_spec, generate_phantoms
from voxharm.pipeline import (ClipConfig, ConfigError, DatasetSource,
                              HarmonizationConfig, OutputConfig, PipelineConfig,
                              PipelineError, config_from_dict, dataset1_config,
                              dataset2_config, load_config, load_preset,
                              run_pipeline)
from voxharm.transforms import IntensityMap


@pytest.fixture(scope="module")
def phantom_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("phantoms")
    generate_phantoms(default_source_spec(count=3, dims=(24, 24, 24)), root / "source")
    generate_phantoms(default_target_spec(count=3, dims=(24, 24, 24)), root / "target")
    return root / "source", root / "target"


def read_dataset(out_dir, subset=None):
    vols = []
    for path in sorted((out_dir / "volumes").glob("*.nii.gz")):
        if subset is None or path.name.startswith(subset):
            vols.append(nifti.read_volume(path))
    return vols


class TestConfigValidation:
    def _base(self, **overrides):
        kwargs = dict(
            source=DatasetSource(volumes="in/src/*.nii.gz"),
            target=DatasetSource(volumes="in/tgt/*.nii.gz"),
            output=OutputConfig(dir="out"),
        )
        kwargs.update(overrides)
        return PipelineConfig(**kwargs)

    def test_valid_default(self):
        cfg = self._base()
        assert cfg.active_stages() == ("harmonize", "clip", "normalize", "resample") \
            or cfg.active_stages() == ("clip", "normalize", "resample")

    def test_stage_order_violation_rejected(self):
        with pytest.raises(ConfigError, match="fixed order"):
            self._base(stages=("normalize", "harmonize"))

    def test_unknown_stage_rejected(self):
        with pytest.raises(ConfigError, match="unknown stages"):
            self._base(stages=("harmonize", "polish"))

    def test_duplicate_stage_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            self._base(stages=("clip", "clip"))

    def test_harmonize_requires_target(self):
        with pytest.raises(ConfigError, match="target"):
            PipelineConfig(
                source=DatasetSource(volumes="in/src/*.nii.gz"),
                output=OutputConfig(dir="out"),
                harmonization=HarmonizationConfig(method="moment_shift"),
            )

    def test_harmonize_stage_without_method(self):
        with pytest.raises(ConfigError, match="'none'"):
            self._base(harmonization=HarmonizationConfig(method="none"),
                       stages=("harmonize",))

    def test_output_collision_rejected(self):
        with pytest.raises(ConfigError, match="collides"):
            PipelineConfig(
                source=DatasetSource(volumes="data/*.nii.gz"),
                output=OutputConfig(dir="data"),
            )

    def test_bad_method_rejected(self):
        with pytest.raises(ConfigError, match="method"):
            HarmonizationConfig(method="style_transfer")

    def test_bad_percentiles_rejected(self):
        with pytest.raises(ConfigError):
            ClipConfig(lo_pct=99.5, hi_pct=0.5)

    def test_explicit_resample_stage_needs_section(self):
        with pytest.raises(ConfigError, match="resample"):
            self._base(resample=None, stages=("clip", "resample"))

    def test_toml_roundtrip(self, tmp_path):
        doc = """
normalize = false
seed = 3

[source]
volumes = "src/*.nii.gz"

[target]
volumes = "tgt/*.nii.gz"

[harmonization]
method = "histogram_match"
bins = 128

[clip]
lo_pct = 1.0
hi_pct = 99.0

[resample]
target_spacing = [1.0, 1.0, 1.0]

[output]
dir = "out"
"""
        (tmp_path / "cfg.toml").write_text(doc)
        cfg = load_config(tmp_path / "cfg.toml")
        assert cfg.harmonization.bins == 128
        assert cfg.normalize is False
        assert cfg.seed == 3
        assert cfg.clip.lo_pct == 1.0
        # relative paths resolve next to the config file
        assert cfg.source.volumes == str(tmp_path / "src/*.nii.gz")
        assert cfg.output.dir == str(tmp_path / "out")

    def test_bad_toml_is_config_error(self, tmp_path):
        (tmp_path / "broken.toml").write_text("this is = not [ valid")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "broken.toml")

    def test_shipped_presets_parse(self):
        for name in ("dataset1", "dataset2"):
            cfg = load_preset(name)
            assert cfg.clip.lo_pct == 0.5 and cfg.clip.hi_pct == 99.5
            assert cfg.resample.target_spacing == (0.7636, 0.7636, 0.7636)
            assert cfg.label_remap == {3: 0, 4: 0}
        assert load_preset("dataset1").harmonization.method == "moment_shift"
        assert load_preset("dataset2").harmonization.method == "histogram_match"
        with pytest.raises(ConfigError, match="unknown preset"):
            load_preset("dataset99")


class TestRunPipeline:
    def test_all_identity_pipeline_roundtrips(self, tmp_path, rng):
        from voxharm.core import Volume
        from voxharm.resample import ResampleSpec
        src_dir = tmp_path / "in"
        volumes = [Volume(rng.normal(0, 100, (8, 8, 8)).astype(np.float32)
                          .astype(np.float64), spacing=(1.0, 1.0, 1.0))
                   for _ in range(2)]
        for i, v in enumerate(volumes):
            nifti.write_volume(v, src_dir / f"v{i}.nii.gz")
        cfg = PipelineConfig(
            source=DatasetSource(volumes=str(src_dir / "*.nii.gz")),
            output=OutputConfig(dir=str(tmp_path / "out")),
            harmonization=HarmonizationConfig(method="none"),
            clip=ClipConfig(lo_pct=0.0, hi_pct=100.0),
            normalize=False,
            resample=None,
        )
        run_pipeline(cfg)
        outs = read_dataset(tmp_path / "out")
        assert len(outs) == 2
        for before, after in zip(volumes, outs):
            assert np.array_equal(before.data, after.data)

        # Same chain with resampling at the native spacing: equal up to the
        # float32 round trip.
        cfg_native = PipelineConfig(
            source=DatasetSource(volumes=str(src_dir / "*.nii.gz")),
            output=OutputConfig(dir=str(tmp_path / "out_native")),
            harmonization=HarmonizationConfig(method="none"),
            clip=ClipConfig(lo_pct=0.0, hi_pct=100.0),
            normalize=False,
            resample=ResampleSpec(target_spacing=(1.0, 1.0, 1.0)),
        )
        run_pipeline(cfg_native)
        outs = read_dataset(tmp_path / "out_native")
        for before, after in zip(volumes, outs):
            assert after.dims == before.dims
            assert np.abs(after.data - before.data).max() < 1e-6

    def test_int16_output_datatype(self, tmp_path, rng):
        from voxharm.core import Volume
        src_dir = tmp_path / "in16"
        vol = Volume(np.rint(rng.normal(0, 300, (6, 6, 6))), spacing=(1.0, 1.0, 1.0))
        nifti.write_volume(vol, src_dir / "v.nii.gz")
        cfg = PipelineConfig(
            source=DatasetSource(volumes=str(src_dir / "*.nii.gz")),
            output=OutputConfig(dir=str(tmp_path / "out16"), datatype="int16"),
            harmonization=HarmonizationConfig(method="none"),
            clip=ClipConfig(lo_pct=0.0, hi_pct=100.0),
            normalize=False, resample=None,
        )
        manifest = run_pipeline(cfg)
        back = nifti.read_volume(tmp_path / "out16" / "volumes" / "source_v.nii.gz")
        assert np.array_equal(back.data, vol.data)  # integral HU fit int16 exactly
        assert nifti.read_header(
            tmp_path / "out16" / "volumes" / "source_v.nii.gz").datatype == nifti.DT_INT16
        assert len(manifest["cases"]) == 1

    def test_dataset2_preset_stage_order(self):
        cfg = dataset2_config("a", "b", "c")
        stages = cfg.active_stages()
        assert stages.index("harmonize") < stages.index("clip") < \
            stages.index("normalize") < stages.index("resample")
        assert stages.index("remap") < stages.index("harmonize")

    def test_dataset1_harmonization_matches_target_stats(self, phantom_dirs, tmp_path):
        source_dir, target_dir = phantom_dirs
        cfg = dataset1_config(source_dir, target_dir, tmp_path / "out1")
        manifest = run_pipeline(cfg)
        # Recompute from the persisted map and the original inputs.
        from voxharm.transforms import apply_map
        imap = IntensityMap.load_json(tmp_path / "out1" / "maps" / "moment_shift.json")
        src = [nifti.read_volume(p) for p in sorted((source_dir / "volumes").glob("*"))]
        tgt = [nifti.read_volume(p) for p in sorted((target_dir / "volumes").glob("*"))]
        got = compute_stats([apply_map(v, imap) for v in src])
        want = compute_stats(tgt)
        assert got.mean == pytest.approx(want.mean, rel=1e-6)
        assert got.std == pytest.approx(want.std, rel=1e-6)
        assert manifest["harmonize"]["method"] == "moment_shift"

    def test_dataset2_histogram_match_reaches_target(self, phantom_dirs, tmp_path):
        source_dir, target_dir = phantom_dirs
        cfg = dataset2_config(source_dir, target_dir, tmp_path / "out2")
        run_pipeline(cfg)
        from voxharm.transforms import apply_map
        src_paths = sorted((source_dir / "volumes").glob("*"))
        mapped = []
        for path in src_paths:
            imap = IntensityMap.load_json(
                tmp_path / "out2" / "maps" / f"source_{path.name.split('.nii')[0]}.json")
            mapped.append(apply_map(nifti.read_volume(path), imap))
        tgt = [nifti.read_volume(p) for p in sorted((target_dir / "volumes").glob("*"))]
        lo = min(min(float(v.data.min()) for v in mapped),
                 min(float(v.data.min()) for v in tgt))
        hi = max(max(float(v.data.max()) for v in mapped),
                 max(float(v.data.max()) for v in tgt))
        d = cdf_distance(build_histogram(mapped, (lo, hi), 4096),
                         build_histogram(tgt, (lo, hi), 4096))
        assert d.ks < 0.02

    def test_manifest_structure_and_files(self, phantom_dirs, tmp_path):
        source_dir, target_dir = phantom_dirs
        cfg = dataset2_config(source_dir, target_dir, tmp_path / "outm")
        manifest = run_pipeline(cfg)
        out = tmp_path / "outm"
        assert (out / "manifest.json").is_file()
        on_disk = json.loads((out / "manifest.json").read_text())
        assert on_disk == manifest
        assert set(manifest["cases"]) == {
            f"{ds}_{ds}_{i:03d}" for ds in ("source", "target") for i in range(3)}
        for cid, entry in manifest["cases"].items():
            assert (out / entry["volume"]).is_file()
            assert (out / entry["labels"]).is_file()
            if entry["map"]:
                assert (out / entry["map"]).is_file()
                IntensityMap.load_json(out / entry["map"])  # valid JSON schema
        assert "clip" in manifest and "lo" in manifest["clip"]
        assert manifest["stats"]["source_raw"]["count"] == 3 * 24 ** 3
        # volume digests match the written arrays
        cid, entry = sorted(manifest["cases"].items())[0]
        vol = nifti.read_volume(out / entry["volume"])
        import hashlib
        digest = hashlib.sha256(vol.data.astype("<f4").tobytes(order="F")).hexdigest()
        assert digest == entry["volume_sha256"]

    def test_source_labels_remapped_target_untouched(self, phantom_dirs, tmp_path):
        source_dir, target_dir = phantom_dirs
        cfg = dataset1_config(source_dir, target_dir, tmp_path / "outl",
                              resample=None)
        run_pipeline(cfg)
        out = tmp_path / "outl"
        src_labels = nifti.read_labels(out / "labels" / "source_source_000.nii.gz")
        assert set(np.unique(src_labels.data)) <= {0, 1, 2}  # vessels dropped
        tgt_before = nifti.read_labels(target_dir / "labels" / "target_000.nii.gz")
        tgt_after = nifti.read_labels(out / "labels" / "target_target_000.nii.gz")
        assert np.array_equal(tgt_before.data, tgt_after.data)

    def test_remap_preserves_kept_counts(self, phantom_dirs, tmp_path):
        source_dir, target_dir = phantom_dirs
        cfg = dataset1_config(source_dir, target_dir, tmp_path / "outc", resample=None)
        run_pipeline(cfg)
        before = nifti.read_labels(source_dir / "labels" / "source_000.nii.gz")
        after = nifti.read_labels(
            tmp_path / "outc" / "labels" / "source_source_000.nii.gz")
        for kept in (1, 2):
            assert int((after.data == kept).sum()) == int((before.data == kept).sum())

    def test_normalize_stage_yields_zero_one(self, phantom_dirs, tmp_path):
        source_dir, target_dir = phantom_dirs
        cfg = dataset1_config(source_dir, target_dir, tmp_path / "outn", resample=None)
        run_pipeline(cfg)
        outs = read_dataset(tmp_path / "outn")
        stats = compute_stats(outs)
        assert abs(stats.mean) < 1e-6
        assert abs(stats.std - 1.0) < 1e-6

    def test_rerun_is_byte_identical_across_threads(self, phantom_dirs, tmp_path):
        source_dir, target_dir = phantom_dirs
        cfg = dataset2_config(source_dir, target_dir, tmp_path / "outd")
        run_pipeline(cfg, threads=1)
        manifest_1 = (tmp_path / "outd" / "manifest.json").read_bytes()
        sample_1 = (tmp_path / "outd" / "volumes" / "source_source_000.nii.gz").read_bytes()
        run_pipeline(cfg, threads=4)
        manifest_4 = (tmp_path / "outd" / "manifest.json").read_bytes()
        sample_4 = (tmp_path / "outd" / "volumes" / "source_source_000.nii.gz").read_bytes()
        assert manifest_1 == manifest_4
        assert sample_1 == sample_4

    def test_failure_leaves_final_dir_untouched(self, phantom_dirs, tmp_path):
        source_dir, target_dir = phantom_dirs
        out = tmp_path / "outf"
        ok = dataset1_config(source_dir, target_dir, out, resample=None)
        run_pipeline(ok)
        marker = json.loads((out / "manifest.json").read_text())["dataset_sha256"]
        bad = dataset1_config(str(tmp_path / "nowhere"), target_dir, out, resample=None)
        with pytest.raises(PipelineError, match="no volumes match"):
            run_pipeline(bad)
        assert json.loads((out / "manifest.json").read_text())["dataset_sha256"] == marker

    def test_stage_subset_runs_only_those(self, phantom_dirs, tmp_path):
        source_dir, target_dir = phantom_dirs
        cfg = dataset1_config(source_dir, target_dir, tmp_path / "outs",
                              stages=("harmonize",))
        manifest = run_pipeline(cfg)
        assert manifest["stages"] == ["harmonize"]
        assert "clip" not in manifest
        src = read_dataset(tmp_path / "outs", subset="source")
        tgt = read_dataset(tmp_path / "outs", subset="target")
        got = compute_stats(src)
        want = compute_stats(tgt)
        assert got.mean == pytest.approx(want.mean, rel=1e-5)

    def test_pipeline_error_names_stage_and_case(self, tmp_path, rng):
        from voxharm.core import Volume
        src_dir = tmp_path / "in"
        nifti.write_volume(Volume(rng.normal(0, 1, (4, 4, 4))), src_dir / "a.nii.gz")
        (src_dir / "b.nii.gz").write_bytes(b"garbage")
        cfg = PipelineConfig(
            source=DatasetSource(volumes=str(src_dir / "*.nii.gz")),
            output=OutputConfig(dir=str(tmp_path / "out")),
            normalize=False, resample=None,
            clip=ClipConfig(enabled=False),
        )
        with pytest.raises(PipelineError) as err:
            run_pipeline(cfg)
        assert err.value.stage == "load"
        assert err.value.case == "source_b"

    def test_write_error_names_the_failing_case(self, tmp_path, rng):
        from voxharm.core import LabelMap, Volume
        src_dir = tmp_path / "inw"
        nifti.write_volume(Volume(rng.normal(0, 1, (4, 4, 4))),
                           src_dir / "volumes" / "a.nii.gz")
        big = LabelMap(np.full((4, 4, 4), 300, dtype=np.int32),
                       vocabulary={300: "big"})
        nifti.write_labels(big, src_dir / "labels" / "a.nii.gz", "int16")
        cfg = PipelineConfig(
            source=DatasetSource(volumes=str(src_dir / "volumes" / "*.nii.gz"),
                                 labels=str(src_dir / "labels" / "*.nii.gz"),
                                 vocabulary={300: "big"}),
            output=OutputConfig(dir=str(tmp_path / "outw")),
            normalize=False, resample=None, clip=ClipConfig(enabled=False),
        )
        with pytest.raises(PipelineError) as err:
            run_pipeline(cfg)  # label 300 cannot be stored as uint8
        assert err.value.stage == "write"
        assert err.value.case == "source_a"
        assert not (tmp_path / "outw").exists()  # staging never promoted

    def test_config_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ConfigError):
            config_from_dict({
                "source": {"volumes": "x/*.nii.gz"},
                "output": {"dir": "out"},
                "clip": {"low": 1},
            })

    def test_reference_subsampling_is_seeded_and_deterministic(self, phantom_dirs,
                                                               tmp_path):
        source_dir, target_dir = phantom_dirs
        cfg = dataset2_config(
            source_dir, target_dir, tmp_path / "outsub",
            harmonization=HarmonizationConfig(method="histogram_match",
                                              bins=512, subsample=2000),
            resample=None, seed=7)
        first = run_pipeline(cfg, threads=1)
        second = run_pipeline(cfg, threads=3)
        assert first["dataset_sha256"] == second["dataset_sha256"]
        other_seed = run_pipeline(
            dataset2_config(source_dir, target_dir, tmp_path / "outsub2",
                            harmonization=HarmonizationConfig(
                                method="histogram_match", bins=512, subsample=2000),
                            resample=None, seed=8))
        assert other_seed["dataset_sha256"] != first["dataset_sha256"]

    def test_pooled_source_mode_single_map(self, phantom_dirs, tmp_path):
        source_dir, target_dir = phantom_dirs
        cfg = dataset2_config(
            source_dir, target_dir, tmp_path / "outp",
            harmonization=HarmonizationConfig(method="histogram_match", bins=1024,
                                              per_volume_source=False),
            resample=None)
        manifest = run_pipeline(cfg)
        assert (tmp_path / "outp" / "maps" / "histogram_match.json").is_file()
        maps = {e["map"] for e in manifest["cases"].values() if e["map"]}
        assert maps == {"maps/histogram_match.json"}
