import csv

import numpy as np
import pytest

from segforge.errors import DimensionError, UsageError
from segforge.metrics import comparison_rows, convergence, dice_per_label, dsc, emit_report, gain_points, summarize


def brute_dice(pred, ref, label):
    inter = sum(1 for p, r in zip(pred.ravel(), ref.ravel()) if p == label and r == label)
    total = sum(1 for p in pred.ravel() if p == label) + sum(1 for r in ref.ravel() if r == label)
    return 1.0 if total == 0 else 2 * inter / total


class TestDsc:
    def test_identical(self):
        a = np.array([0, 1, 1, 2])
        assert dsc(a, a, 1) == 1.0

    def test_disjoint(self):
        assert dsc(np.array([1, 1, 0, 0]), np.array([0, 0, 1, 1]), 1) == 0.0

    def test_half(self):
        pred = np.array([1, 1, 1, 1, 0, 0, 0, 0])
        ref = np.array([0, 0, 1, 1, 1, 1, 0, 0])
        assert dsc(pred, ref, 1) == 0.5

    def test_both_empty(self):
        assert dsc(np.zeros(4), np.zeros(4), 1) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            dsc(np.zeros(3), np.zeros(4), 1)

    def test_eight_voxel_enumeration(self, rng):
        for _ in range(20):
            pred = rng.integers(0, 3, size=(2, 2, 2))
            ref = rng.integers(0, 3, size=(2, 2, 2))
            for lbl in (1, 2):
                assert dsc(pred, ref, lbl) == pytest.approx(brute_dice(pred, ref, lbl))

    def test_summarize(self):
        rep = summarize([{1: 1.0, 2: 0.5}, {1: 0.0, 2: 0.5}], [1, 2])
        assert rep.per_label == {1: 0.5, 2: 0.5} and rep.mean == 0.5

    def test_all_background_prediction(self):
        ref = np.array([0, 1, 2, 2])
        scores = dice_per_label(np.zeros(4, int), ref, [1, 2])
        assert scores == {1: 0.0, 2: 0.0}


class TestConvergence:
    def test_reference_curve(self):
        s = convergence([0.2, 0.5, 0.8, 0.85, 0.9])
        assert (s.peak_epoch, s.peak_value, s.epoch_at_85) == (5, 0.9, 3)

    def test_ties_pick_earliest(self):
        s = convergence([0.7, 0.7])
        assert s.peak_epoch == 1 and s.epoch_at_85 == 1

    def test_single_point(self):
        s = convergence([0.4])
        assert s.peak_epoch == s.epoch_at_85 == 1

    def test_empty(self):
        with pytest.raises(UsageError):
            convergence([])


class TestReport:
    def test_gain_arithmetic(self):
        assert gain_points(0.8864, 0.7987) == 8.77

    def test_rows_cross_check(self):
        runs = {"scratch": [0.1, 0.5, 0.7987], "lora": [0.8, 0.8864, 0.85]}
        rows = {r["strategy"]: r for r in comparison_rows(runs, "scratch")}
        assert rows["lora"]["gain_vs_scratch_pts"] == 8.77
        assert rows["scratch"]["gain_vs_scratch_pts"] is None
        for name, curve in runs.items():
            s = convergence(curve)
            assert rows[name]["peak_epoch"] == s.peak_epoch
            assert rows[name]["epoch_at_85"] == s.epoch_at_85

    def test_files(self, tmp_path):
        emit_report({"scratch": [0.5, 0.7987], "gu": [0.86, 0.8864]}, tmp_path, baseline="scratch")
        with open(tmp_path / "comparison.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert rows[1]["gain_vs_scratch_pts"] == "8.77"
        assert (tmp_path / "curve_gu.csv").read_text().splitlines()[0] == "epoch,mean_dsc"
        assert "+8.77" in (tmp_path / "comparison.txt").read_text()

    def test_no_baseline_has_no_gain_column(self, tmp_path):
        emit_report({"only": [0.3, 0.4]}, tmp_path)
        header = (tmp_path / "comparison.csv").read_text().splitlines()[0]
        assert "gain" not in header

    def test_unknown_baseline(self, tmp_path):
        with pytest.raises(UsageError, match="baseline"):
            emit_report({"a": [0.1]}, tmp_path, baseline="b")
