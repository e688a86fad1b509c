import csv
import json

import numpy as np
import pytest

from voxharm.analysis import (Histogram, build_histogram, cdf_distance,
                              emit_plot_data)

from conftest import make_volume


class TestBuildHistogram:
    def test_constant_volume_single_bin(self):
        vol = make_volume(np.full((4, 4, 4), 5.0))
        h = build_histogram([vol], (0.0, 10.0), 10)
        assert h.counts[5] == 64
        assert h.total == 64
        assert h.counts.sum() == 64

    def test_hand_binned(self):
        h = build_histogram([np.array([0.5, 1.5, 2.5])], (0.0, 3.0), 3)
        assert h.counts.tolist() == [1, 1, 1]

    def test_interior_edge_goes_right_last_bin_closed(self):
        h = build_histogram([np.array([1.0, 3.0])], (0.0, 3.0), 3)
        assert h.counts.tolist() == [0, 1, 1]  # 1.0 -> bin [1,2); 3.0 -> closed last bin

    def test_under_overflow_accounting(self, rng):
        vals = rng.normal(0, 100, 5000)
        h = build_histogram([vals], (-50.0, 50.0), 16)
        assert h.total + h.underflow + h.overflow == 5000
        assert h.underflow == int((vals < -50).sum())
        assert h.overflow == int((vals > 50).sum())

    def test_order_and_sharding_invariance(self, rng):
        a, b = rng.normal(0, 1, 999), rng.normal(0, 1, 501)
        pooled = build_histogram([a, b], (-4.0, 4.0), 64)
        swapped = build_histogram([b, a], (-4.0, 4.0), 64)
        merged = build_histogram([a], (-4.0, 4.0), 64).merge(
            build_histogram([b], (-4.0, 4.0), 64))
        assert np.array_equal(pooled.counts, swapped.counts)
        assert np.array_equal(pooled.counts, merged.counts)

    def test_density_integrates_to_one_without_overflow(self, rng):
        vals = rng.uniform(-1, 1, 4096)
        h = build_histogram([vals], (-1.0, 1.0), 32)
        assert float(h.density @ np.diff(h.bin_edges)) == pytest.approx(1.0)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError, match="at least one"):
            build_histogram([], (0, 1), 4)
        with pytest.raises(ValueError, match="range"):
            build_histogram([np.zeros(3)], (1.0, 1.0), 4)
        with pytest.raises(ValueError, match="bins"):
            build_histogram([np.zeros(3)], (0.0, 1.0), 0)


class TestCdfDistance:
    def test_identical_histograms(self, rng):
        h = build_histogram([rng.normal(0, 1, 2000)], (-4, 4), 64)
        d = cdf_distance(h, h)
        assert d.ks == 0.0 and d.emd == 0.0

    def test_point_masses(self):
        a = Histogram(np.array([-0.5, 0.5]), np.array([100]))
        b = Histogram(np.array([99.5, 100.5]), np.array([10]))
        d = cdf_distance(a, b)
        assert d.ks == pytest.approx(1.0)
        assert d.emd == pytest.approx(100.0)

    def test_matches_dense_grid_integration_oracle(self, rng):
        a = build_histogram([rng.normal(-30, 55, 20000)], (-300, 300), 73)
        b = build_histogram([rng.normal(10, 40, 30000)], (-250, 260), 91)
        d = cdf_distance(a, b)

        # Oracle: sample both piecewise-linear CDFs on a very fine common grid
        # and integrate |difference| with the trapezoid rule.
        ea, ca = a.cdf_points()
        eb, cb = b.cdf_points()
        grid = np.linspace(min(ea[0], eb[0]), max(ea[-1], eb[-1]), 2_000_001)
        fa = np.interp(grid, ea, ca, left=0.0, right=1.0)
        fb = np.interp(grid, eb, cb, left=0.0, right=1.0)
        ks_oracle = np.abs(fa - fb).max()
        emd_oracle = np.trapezoid(np.abs(fa - fb), grid)
        assert d.ks == pytest.approx(ks_oracle, abs=1e-6)
        assert d.emd == pytest.approx(emd_oracle, abs=1e-6)

    def test_symmetry_exact(self, rng):
        a = build_histogram([rng.normal(0, 1, 888)], (-5, 5), 40)
        b = build_histogram([rng.normal(1, 2, 777)], (-6, 8), 40)
        dab, dba = cdf_distance(a, b), cdf_distance(b, a)
        assert dab.ks == dba.ks and dab.emd == dba.emd
        assert 0.0 <= dab.ks <= 1.0 and dab.emd >= 0.0

    def test_empty_histogram_rejected(self):
        empty = Histogram(np.array([0.0, 1.0]), np.array([0]))
        full = Histogram(np.array([0.0, 1.0]), np.array([3]))
        with pytest.raises(ValueError, match="empty"):
            cdf_distance(empty, full)

    def test_emd_zero_iff_identical_cdf(self, rng):
        base = build_histogram([rng.normal(0, 1, 1500)], (-4, 4), 32)
        scaled = Histogram(base.bin_edges, base.counts * 3)  # same CDF shape
        assert cdf_distance(base, scaled).emd == 0.0
        nudged_counts = base.counts.copy()
        nudged_counts[0] += 1
        nudged = Histogram(base.bin_edges, nudged_counts)
        assert cdf_distance(base, nudged).emd > 0.0

    def test_density_leq_one_with_overflow(self, rng):
        vals = rng.normal(0, 100, 4000)
        h = build_histogram([vals], (-50, 50), 16)
        assert h.overflow > 0 or h.underflow > 0
        integral = float(h.density @ np.diff(h.bin_edges))
        assert integral < 1.0


class TestEmitPlotData:
    def test_single_bin_row_count(self, tmp_path):
        h = Histogram(np.array([0.0, 1.0]), np.array([5]))
        out = tmp_path / "h.csv"
        emit_plot_data({"only": h}, out)
        lines = out.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "series,bin_left,bin_right,count,density"
        assert len(lines) == 2

    def test_csv_roundtrip_counts(self, tmp_path, rng):
        h = build_histogram([rng.normal(0, 1, 3000)], (-4, 4), 16)
        out = tmp_path / "h.csv"
        emit_plot_data({"x": h}, out, json_path=tmp_path / "h.json")
        with open(out, newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        assert [int(r["count"]) for r in rows] == h.counts.tolist()
        assert [float(r["bin_left"]) for r in rows] == h.bin_edges[:-1].tolist()
        mirror = json.loads((tmp_path / "h.json").read_text())
        assert mirror["x"]["counts"] == h.counts.tolist()

    def test_three_series_golden(self, tmp_path):
        # Golden output frozen from hand-computed two-bin histograms.
        raw = Histogram(np.array([0.0, 1.0, 2.0]), np.array([1, 3]))
        shifted = Histogram(np.array([0.0, 1.0, 2.0]), np.array([2, 2]))
        matched = Histogram(np.array([0.0, 1.0, 2.0]), np.array([4, 0]))
        out = tmp_path / "fig.csv"
        emit_plot_data({"raw": raw, "shifted": shifted, "matched": matched}, out)
        golden = (
            "series,bin_left,bin_right,count,density\n"
            "matched,0.0,1.0,4,1.0\n"
            "matched,1.0,2.0,0,0.0\n"
            "raw,0.0,1.0,1,0.25\n"
            "raw,1.0,2.0,3,0.75\n"
            "shifted,0.0,1.0,2,0.5\n"
            "shifted,1.0,2.0,2,0.5\n"
        )
        assert out.read_text(encoding="utf-8") == golden

    def test_lf_line_endings(self, tmp_path):
        h = Histogram(np.array([0.0, 1.0]), np.array([5]))
        emit_plot_data({"s": h}, tmp_path / "h.csv")
        raw = (tmp_path / "h.csv").read_bytes()
        assert b"\r" not in raw


class TestHarmonizationOrdering:
    def test_matched_beats_shifted_beats_raw(self, rng):
        """The distribution-distance ordering the harmonization comparison rests on."""
        from voxharm.core import compute_stats
        from voxharm.transforms import (apply_map, fit_histogram_match,
                                        fit_moment_shift)

        # Source bimodal, target unimodal: shapes differ beyond any affine map.
        source = np.concatenate([rng.normal(900, 40, 40000),
                                 rng.normal(1400, 60, 40000)])
        target = rng.normal(0, 120, 80000)
        sv, tv = make_volume(source.reshape(80, 100, 10)), make_volume(target.reshape(80, 100, 10))

        bins = 1024
        tgt_range = (target.min(), target.max())
        ht = build_histogram([tv], tgt_range, bins)

        shifted = apply_map(sv, fit_moment_shift(compute_stats([sv]), compute_stats([tv])))
        matched = apply_map(sv, fit_histogram_match(
            build_histogram([sv], (source.min(), source.max()), bins), ht))

        def ks_to_target(vol):
            lo = min(float(vol.data.min()), tgt_range[0])
            hi = max(float(vol.data.max()), tgt_range[1])
            return cdf_distance(build_histogram([vol], (lo, hi), bins),
                                build_histogram([tv], (lo, hi), bins)).ks

        ks_raw = ks_to_target(sv)
        ks_shift = ks_to_target(shifted)
        ks_match = ks_to_target(matched)
        assert ks_match < ks_shift < ks_raw
