import numpy as np
import pytest

from voxharm import nifti
from voxharm.phantom import (EllipsoidClass, GaussianMixture, PhantomSpec,
                             default_source_spec, default_target_spec,
                             generate_phantom, generate_phantoms)


class TestSpecValidation:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum to 1"):
            GaussianMixture((0.0,), (1.0,), (0.5,))

    def test_radii_positive(self):
        with pytest.raises(ValueError, match="radii"):
            EllipsoidClass(label=1, name="a", offset=0.0, radii_vox=(0.0, 2.0))

    def test_duplicate_labels_rejected(self):
        cls = (EllipsoidClass(label=1, name="a", offset=0.0),
               EllipsoidClass(label=1, name="b", offset=1.0))
        with pytest.raises(ValueError, match="duplicate"):
            PhantomSpec(classes=cls)


class TestGeneration:
    def test_background_mean_within_statistical_bound(self):
        spec = PhantomSpec(count=1, dims=(24, 24, 24),
                           background=GaussianMixture((0.0,), (1.0,), (1.0,)),
                           seed=99)
        volume, labels = generate_phantom(spec, 0)
        n = volume.voxel_count
        assert abs(volume.data.mean()) < 4.0 / np.sqrt(n)
        assert not labels.data.any()

    def test_same_seed_same_bytes(self, tmp_path):
        spec = default_source_spec(count=2, dims=(16, 16, 16))
        generate_phantoms(spec, tmp_path / "a")
        generate_phantoms(spec, tmp_path / "b", threads=3)
        for rel in ("volumes/source_000.nii.gz", "labels/source_001.nii.gz"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_different_seed_different_data(self):
        a, _ = generate_phantom(default_source_spec(count=1, seed=1), 0)
        b, _ = generate_phantom(default_source_spec(count=1, seed=2), 0)
        assert not np.array_equal(a.data, b.data)

    def test_ellipsoid_count_matches_brute_force(self):
        spec = PhantomSpec(
            count=1, dims=(32, 32, 32),
            background=GaussianMixture((0.0,), (1.0,), (1.0,)),
            classes=(EllipsoidClass(label=1, name="ball", offset=100.0,
                                    center_frac=((0.5, 0.5),) * 3,
                                    radii_vox=(3.0, 3.0)),),
            seed=7,
        )
        _, labels = generate_phantom(spec, 0)
        # Brute force: center is exactly (15.5, 15.5, 15.5), radius exactly 3.
        count = 0
        for i in range(32):
            for j in range(32):
                for k in range(32):
                    if ((i - 15.5) ** 2 + (j - 15.5) ** 2 + (k - 15.5) ** 2) / 9.0 <= 1.0:
                        count += 1
        assert int((labels.data == 1).sum()) == count

    def test_overlap_priority_last_class_wins(self):
        common = dict(center_frac=((0.5, 0.5),) * 3, radii_vox=(4.0, 4.0))
        spec = PhantomSpec(
            count=1, dims=(24, 24, 24),
            background=GaussianMixture((0.0,), (0.0,), (1.0,)),
            classes=(EllipsoidClass(label=1, name="kidney", offset=10.0, **common),
                     EllipsoidClass(label=2, name="tumor", offset=20.0, **common),
                     EllipsoidClass(label=3, name="cyst", offset=30.0, **common)),
            seed=1,
        )
        volume, labels = generate_phantom(spec, 0)
        present = set(np.unique(labels.data).tolist())
        assert present == {0, 3}                        # cyst painted last wins
        assert volume.data[labels.data == 3].min() == pytest.approx(30.0)

    def test_default_specs_match_described_domains(self):
        src = default_source_spec(count=1)
        tgt = default_target_spec(count=1)
        assert len(tgt.background.means) == 2
        assert sorted(tgt.background.means) == [-1000.0, 0.0]
        assert 800.0 <= src.background.means[0] <= 1500.0
        vol, _ = generate_phantom(src, 0)
        assert 800.0 <= np.median(vol.data) <= 1500.0

    def test_written_files_readable(self, tmp_path):
        spec = default_target_spec(count=1, dims=(12, 12, 12))
        records = generate_phantoms(spec, tmp_path)
        vol = nifti.read_volume(tmp_path / records[0]["volume"])
        labels = nifti.read_labels(tmp_path / records[0]["labels"],
                                   vocabulary=spec.vocabulary)
        assert vol.dims == (12, 12, 12)
        assert labels.vocabulary == {1: "kidney", 2: "tumor", 3: "cyst"}
