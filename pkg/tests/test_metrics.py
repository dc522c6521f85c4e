import unittest
import sys
import os

import numpy as np

# Add parent directory to path to import modules directly
current_dir = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(current_dir)
sys.path.insert(0, parent_dir)

from climnorm import Climatology
from core import ForecastCase, SkillRecord
from exceptions import ContractError, DimensionError
from metrics import (CorrectedRun, acc, acc_flagged, bias_map, improvement_table, latitude_weights,
                     mean_rmse, region_bias_summary, rmse, skill_frame, skill_table)


def _clim(grid=(2, 2)):
    shape = (366,) + grid
    return Climatology("T2m", np.zeros(shape), np.ones(shape), (2001, 2002), 1, 1e-3)


def _case(init, offset=1.0, seed=0, leads=2, grid=(2, 2)):
    truth = np.random.default_rng(seed).standard_normal((leads,) + grid)
    return ForecastCase(np.datetime64(init), truth + offset, truth)


class TestScores(unittest.TestCase):
    """Test RMSE and anomaly correlation"""

    def test_rmse(self):
        self.assertAlmostEqual(rmse([1.0, 3.0], [0.0, 1.0]), np.sqrt(2.5))
        weights = np.array([3.0, 1.0])
        self.assertAlmostEqual(rmse([1.0, 3.0], [0.0, 1.0], weights), np.sqrt((3.0 + 4.0) / 4.0))
        with self.assertRaises(DimensionError):
            rmse(np.zeros(3), np.zeros(4))

    def test_acc_extremes(self):
        truth = np.array([[1.0, -2.0], [0.5, 3.0]])
        clim = np.zeros((2, 2))
        self.assertAlmostEqual(acc(2.0 * truth, truth, clim), 1.0)
        self.assertAlmostEqual(acc(-truth, truth, clim), -1.0)

    def test_acc_uses_uncentered_anomalies(self):
        truth = np.array([1.0, 2.0])
        clim = np.array([0.0, 0.0])
        # a constant offset still correlates once anomalies are uncentered
        self.assertGreater(acc(truth + 1.0, truth, clim), 0.9)

    def test_acc_zero_anomaly_flagged(self):
        truth = np.array([1.0, 2.0])
        value, flagged = acc_flagged(truth, truth + 1.0, truth)
        self.assertEqual(value, 0.0)
        self.assertTrue(flagged)
        self.assertFalse(acc_flagged(truth, truth, np.zeros(2))[1])

    def test_scores_match_double_loops(self):
        rng = np.random.default_rng(7)
        for trial in range(100):
            n_lat, n_lon = rng.integers(2, 7), rng.integers(2, 9)
            pred, truth, clim = (rng.standard_normal((n_lat, n_lon)) * 3.0 for _ in range(3))
            weights = latitude_weights(n_lat, n_lon) if trial % 2 else np.ones((n_lat, n_lon))
            sq = cross = norm_p = norm_t = total_w = 0.0
            for i in range(n_lat):
                for j in range(n_lon):
                    w = weights[i, j]
                    ap, at = pred[i, j] - clim[i, j], truth[i, j] - clim[i, j]
                    sq += w * (pred[i, j] - truth[i, j]) ** 2
                    cross += w * ap * at
                    norm_p += w * ap * ap
                    norm_t += w * at * at
                    total_w += w
            self.assertAlmostEqual(rmse(pred, truth, weights), np.sqrt(sq / total_w), delta=1e-12)
            self.assertAlmostEqual(acc(pred, truth, clim, weights), cross / np.sqrt(norm_p * norm_t), delta=1e-12)
            if trial % 2 == 0:
                self.assertAlmostEqual(rmse(pred, truth), np.sqrt(sq / total_w), delta=1e-12)

    def test_acc_ignores_positive_scaling(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            pred, truth, clim = (rng.standard_normal((4, 6)) for _ in range(3))
            scale = rng.uniform(0.1, 10.0)
            base = acc(pred, truth, clim)
            self.assertAlmostEqual(acc(clim + scale * (pred - clim), truth, clim), base, delta=1e-12)
            self.assertAlmostEqual(acc(pred, clim + scale * (truth - clim), clim), base, delta=1e-12)

    def test_latitude_weights(self):
        w = latitude_weights(6, 4)
        self.assertAlmostEqual(float(w.mean()), 1.0)
        self.assertGreater(w[2, 0], w[0, 0])
        np.testing.assert_allclose(w[0], w[5])


class TestBias(unittest.TestCase):
    """Test bias maps and regional composites"""

    def test_bias_map(self):
        cases = [_case("2001-01-01", 2.0, seed=1), _case("2001-02-01", 2.0, seed=2)]
        np.testing.assert_allclose(bias_map(cases), 2.0)
        corrected = [c.truth for c in cases]
        np.testing.assert_allclose(bias_map(cases, corrected), 0.0)
        with self.assertRaises(ContractError):
            bias_map([])

    def test_region_summary(self):
        cases = [_case("2001-01-01", 0.0)]
        pred = [cases[0].truth + np.array([[1.0, 1.0], [-1.0, -1.0]])]
        regions = {"north": np.array([[True, True], [False, False]]),
                   "south": np.array([[False, False], [True, True]])}
        summary = region_bias_summary(cases, pred, regions)
        self.assertAlmostEqual(summary["north"], 1.0)
        self.assertAlmostEqual(summary["south"], -1.0)
        with self.assertRaises(ContractError):
            region_bias_summary(cases, pred, {"empty": np.zeros((2, 2), dtype=bool)})


class TestSkillTable(unittest.TestCase):
    """Test per-lead skill aggregation"""

    def setUp(self):
        self.clim = _clim()
        self.cases = [_case("2001-01-01", seed=1), _case("2001-01-05", seed=2), _case("2001-02-01", seed=3)]

    def test_month_start_only(self):
        records = skill_table([CorrectedRun.raw(self.cases)], self.clim)
        self.assertEqual([r.lead_days for r in records], [1, 2])
        for r in records:
            self.assertEqual(r.model, "raw")
            self.assertEqual(r.n_cases, 2)
            self.assertAlmostEqual(r.rmse, 1.0)
        everything = skill_table([CorrectedRun.raw(self.cases)], self.clim, month_start_only=False)
        self.assertEqual(everything[0].n_cases, 3)

    def test_perfect_model(self):
        perfect = CorrectedRun("oracle", self.cases, [c.truth for c in self.cases])
        records = skill_table([CorrectedRun.raw(self.cases), perfect], self.clim)
        oracle = [r for r in records if r.model == "oracle"]
        self.assertTrue(all(r.rmse == 0.0 for r in oracle))
        self.assertTrue(all(abs(r.acc - 1.0) < 1e-12 for r in oracle))
        self.assertAlmostEqual(mean_rmse(records, "raw"), 1.0)
        self.assertEqual(list(skill_frame(records).columns),
                         ["model", "variable", "lead_days", "rmse", "acc", "n_cases"])

    def test_area_weighted(self):
        records = skill_table([CorrectedRun.raw(self.cases)], self.clim, area_weighted=True)
        self.assertAlmostEqual(records[0].rmse, 1.0)

    def test_mismatched_case_sets(self):
        other = CorrectedRun.raw(self.cases[:2], "other")
        with self.assertRaises(ContractError):
            skill_table([CorrectedRun.raw(self.cases), other], self.clim)
        with self.assertRaises(ContractError):
            CorrectedRun("bad", self.cases, [])

    def test_no_month_start(self):
        with self.assertRaises(ContractError):
            skill_table([CorrectedRun.raw(self.cases[1:2])], self.clim)


class TestImprovement(unittest.TestCase):
    """Test relative RMSE reduction"""

    def test_reduction(self):
        records = [
            SkillRecord("raw", "T2m", 1, 2.0, 0.5, 4),
            SkillRecord("resa", "T2m", 1, 1.5, 0.6, 4),
            SkillRecord("raw", "T2m", 2, 0.0, 0.5, 4),
            SkillRecord("resa", "T2m", 2, 0.1, 0.6, 4),
        ]
        table = improvement_table(records)
        resa = table[table["model"] == "resa"].set_index("lead_days")
        self.assertAlmostEqual(resa.loc[1, "reduction_pct"], 25.0)
        self.assertEqual(resa.loc[2, "reduction_pct"], 0.0)
        with self.assertRaises(ContractError):
            improvement_table(records, reference="persistence")

    def test_mean_rmse_subset(self):
        records = [SkillRecord("raw", "T2m", 1, 1.0, 0.5, 1), SkillRecord("raw", "T2m", 2, 3.0, 0.5, 1)]
        self.assertEqual(mean_rmse(records, "raw", leads=[2]), 3.0)
        with self.assertRaises(ContractError):
            mean_rmse(records, "resa")


if __name__ == "__main__":
    unittest.main()
