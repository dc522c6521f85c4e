import unittest
import sys
import os

import numpy as np

# Add parent directory to path to import modules directly
current_dir = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(current_dir)
sys.path.insert(0, parent_dir)

from core import SynthConfig, is_month_start
from exceptions import ConfigurationError
from synth import (PRESETS, analytic_mean, bias_pattern, bias_region, init_dates, lead_growth, preset,
                   resolved, synth_generate)


def _config(**overrides):
    values = dict(variable="T2m", grid_lat=6, grid_lon=12, years=(2000, 2001), leads=3, init_stride_days=14)
    values.update(overrides)
    return SynthConfig(**values)


class TestSynthGenerate(unittest.TestCase):
    """Test the synthetic truth and forecast generator"""

    @classmethod
    def setUpClass(cls):
        cls.config = _config()
        cls.truth, cls.cases = synth_generate(cls.config, seed=7)

    def test_deterministic_for_seed(self):
        truth, cases = synth_generate(self.config, seed=7)
        np.testing.assert_array_equal(truth.values, self.truth.values)
        np.testing.assert_array_equal(cases[5].forecast, self.cases[5].forecast)

        other, _ = synth_generate(self.config, seed=8)
        self.assertFalse(np.array_equal(other.values, self.truth.values))

    def test_truth_extends_past_last_init(self):
        # 2000 is a leap year
        self.assertEqual(self.truth.n_times, 366 + 365 + 3)
        self.assertEqual(self.truth.grid, (6, 12))
        last = self.cases[-1]
        self.assertGreaterEqual(self.truth.index_of(last.valid_dates[-1]), 0)

    def test_case_truth_matches_series(self):
        case = self.cases[10]
        start = self.truth.index_of(case.init_date) + 1
        np.testing.assert_array_equal(case.truth, self.truth.values[start:start + 3])

    def test_bias_grows_with_lead_in_region(self):
        region = bias_region(self.config)
        self.assertTrue(region.any())
        errors = np.stack([c.forecast - c.truth for c in self.cases]).mean(axis=0)
        amplitude = PRESETS["T2m"].bias_amplitude
        for t in range(3):
            expected = amplitude * lead_growth(self.config, t + 1)
            self.assertAlmostEqual(float(errors[t][region].mean()), expected, delta=0.2)

    def test_init_dates(self):
        dates = init_dates(self.config)
        months = {str(d)[:7] for d in dates if is_month_start(d)}
        self.assertEqual(len(months), 24)
        self.assertEqual(str(dates[0]), "2000-01-01")
        self.assertIn(np.datetime64("2000-01-15"), dates)
        self.assertTrue(np.all(dates[1:] > dates[:-1]))
        self.assertTrue(np.all(dates < np.datetime64("2002-01-01")))
        np.testing.assert_array_equal(dates, np.array([c.init_date for c in self.cases]))


class TestPresets(unittest.TestCase):
    """Test variable presets and the deterministic fields"""

    def test_unknown_variable(self):
        with self.assertRaises(ConfigurationError):
            preset("Q850")

    def test_resolved_fills_preset(self):
        config = resolved(_config(variable="SLP", noise_std=1.0))
        self.assertEqual(config.noise_std, 1.0)
        self.assertEqual(config.weather_std, PRESETS["SLP"].weather_std)
        self.assertEqual(config.bias_amplitude, PRESETS["SLP"].bias_amplitude)

    def test_every_preset_generates(self):
        for variable in PRESETS:
            truth, cases = synth_generate(_config(variable=variable, years=(2000,), init_stride_days=60), seed=1)
            self.assertEqual(truth.variable, variable)
            self.assertTrue(cases)

    def test_hemispheric_seasons(self):
        config = _config()
        mean = analytic_mean(config, np.array(["2000-01-15", "2000-07-15"], dtype="datetime64[D]"))
        north, south = 1, 4
        self.assertGreater(mean[1, north, 0], mean[0, north, 0])
        self.assertLess(mean[1, south, 0], mean[0, south, 0])

    def test_external_pattern_differs(self):
        internal = bias_pattern(_config())
        external = bias_pattern(_config(external=True))
        self.assertFalse(np.array_equal(internal, external))
        self.assertLessEqual(np.abs(internal).max(), 2.0)

    def test_lead_growth(self):
        config = _config(bias_growth=0.5)
        self.assertEqual(lead_growth(config, 1), 1.0)
        self.assertEqual(lead_growth(config, 3), 2.0)


if __name__ == "__main__":
    unittest.main()
