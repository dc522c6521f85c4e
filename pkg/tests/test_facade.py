import unittest
from unittest.mock import patch, MagicMock
import sys
import os
import asyncio
import tempfile
import time

import numpy as np

# Add parent directory to path to import modules directly
current_dir = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(current_dir)
sys.path.insert(0, parent_dir)

from facade import BiasCorrectionToolkit, ExperimentRunner, bias_regions
from baselines import fit_gridwise_linear, gridwise_handle
from core import Architecture, NormalizationMode, RunConfig
from exceptions import ConfigurationError
from model import ReSAConvLSTM, param_count
from processing import CorrectionEngine

SLOW = os.environ.get("RESA_SLOW_TESTS") == "1"


# Helper function to run async tests
def run_async(coro):
    loop = asyncio.new_event_loop()
    asyncio.set_event_loop(loop)
    try:
        return loop.run_until_complete(coro)
    finally:
        loop.close()


def _run_config(**overrides):
    values = dict(
        seed=0, threads=2, smoothing_window=31, sigma_floor=1e-3, area_weighted=False,
        model={"hidden_channels": [4], "kernel_size": 3, "attention_reduction": 2, "aux_channels": "latlon",
               "lon_wrap": False, "attention_cap": 4096},
        train={"epochs": 1, "batch_size": 8, "learning_rate": 0.01, "patience": 5},
        synth={"grid_lat": 4, "grid_lon": 6, "years": [2000, 2001, 2002], "leads": 3, "init_stride_days": 30},
    )
    values.update(overrides)
    return RunConfig(**values)


class TestExperimentRunner(unittest.TestCase):
    """Test the ExperimentRunner class"""

    def test_results_keep_job_order(self):
        runner = ExperimentRunner(max_workers=3)
        jobs = [lambda d=d, i=i: (time.sleep(d), i)[1] for i, d in enumerate((0.05, 0.0, 0.02))]
        self.assertEqual(runner.run_sync(jobs), [0, 1, 2])

    def test_run_async(self):
        runner = ExperimentRunner(max_workers=2)
        job = MagicMock(return_value=7)
        self.assertEqual(run_async(runner.run_async([job, job])), [7, 7])
        self.assertEqual(job.call_count, 2)

    def test_worker_floor(self):
        self.assertEqual(ExperimentRunner(0).max_workers, 1)


class TestBiasRegions(unittest.TestCase):
    """Test the regional masks used for bias composites"""

    def test_latitude_bands_and_cores(self):
        raw = np.zeros((4, 6))
        raw[0, 1] = 2.0
        raw[3, 4] = -1.0
        regions = bias_regions(raw)
        self.assertEqual(set(regions), {"tropics", "northern_extratropics", "southern_extratropics",
                                        "warm_bias", "cold_bias"})
        self.assertTrue(regions["tropics"][1:3].all())
        self.assertFalse(regions["tropics"][0].any())
        self.assertEqual(int(regions["warm_bias"].sum()), 1)

    def test_no_cold_core(self):
        regions = bias_regions(np.ones((4, 6)))
        self.assertNotIn("cold_bias", regions)
        self.assertIn("warm_bias", regions)


class TestBiasCorrectionToolkit(unittest.TestCase):
    """Test the BiasCorrectionToolkit class"""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.toolkit = BiasCorrectionToolkit(_run_config())
        cls.manifest = cls.toolkit.synthesize(cls.tmp.name)
        cls.manifest_path = os.path.join(cls.tmp.name, "manifest.json")
        cls.data = cls.toolkit.load(cls.manifest_path)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_synthesize_writes_files(self):
        """Test that truth, per-lead forecasts and the manifest are written"""
        names = ["T2m_truth.gts", "T2m_forecast_lead1.gts", "T2m_forecast_lead2.gts",
                 "T2m_forecast_lead3.gts", "manifest.json"]
        for name in names:
            self.assertTrue(os.path.exists(os.path.join(self.tmp.name, name)), name)
        self.assertEqual(len(self.manifest.files), 4)
        self.assertEqual(tuple(self.manifest.test_years), (2001,))

    def test_external_prefix(self):
        with tempfile.TemporaryDirectory() as tmp:
            toolkit = BiasCorrectionToolkit(_run_config(synth={"grid_lat": 4, "grid_lon": 6, "years": [2002, 2003],
                                                               "leads": 2, "init_stride_days": 60,
                                                               "external": True}))
            manifest = toolkit.synthesize(tmp)
            self.assertTrue(os.path.exists(os.path.join(tmp, "T2m_external_truth.gts")))
            # no decadal year present: the last year is held out
            self.assertEqual(tuple(manifest.test_years), (2003,))

    def test_load_splits_by_year(self):
        self.assertEqual(self.data.variable, "T2m")
        self.assertEqual(self.data.test_years, (2001,))
        self.assertEqual(self.data.grid, (4, 6))
        self.assertEqual(self.data.leads, 3)
        self.assertEqual(self.data.train_truth.years, [2000, 2002])
        self.assertTrue(all(str(c.init_date).startswith("2001") for c in self.data.test_cases))
        self.assertFalse(any(str(c.init_date).startswith("2001") for c in self.data.train_cases))
        self.assertTrue(all(str(c.init_date).endswith("-01") for c in self.data.month_start_tests()))

    def test_load_errors(self):
        with self.assertRaises(ConfigurationError):
            BiasCorrectionToolkit(_run_config()).load()
        with self.assertRaises(ConfigurationError):
            self.toolkit.load(os.path.join(self.tmp.name, "missing.json"))

    def test_normalizers(self):
        static = self.toolkit.make_normalizer(self.data, "static")
        dynamic = self.toolkit.make_normalizer(self.data, "dynamic")
        self.assertEqual(static.mode, NormalizationMode.STATIC)
        self.assertEqual(dynamic.mode, NormalizationMode.DYNAMIC)

    def test_normalization_diagnostics(self):
        clim = self.toolkit.fit_climatology(self.data)
        diagnostics = self.toolkit.normalization_diagnostics(self.data, clim)
        self.assertEqual(set(diagnostics), {"raw", "static", "dynamic", "gridpoint_mean_spread"})
        self.assertEqual(len(diagnostics["dynamic"]["histogram"]["counts"]), 101)
        spread = diagnostics["gridpoint_mean_spread"]
        self.assertLess(spread["dynamic"], spread["static"])

    def test_model_config(self):
        config = self.toolkit.model_config(self.data, seed=5, architecture=Architecture.CONVLSTM)
        self.assertEqual((config.grid_lat, config.grid_lon), (4, 6))
        self.assertEqual(config.seed, 5)
        self.assertEqual(config.architecture, Architecture.CONVLSTM)
        self.assertEqual(self.toolkit.train_config(seed=9).seed, 9)

    def test_parameter_report(self):
        config = self.toolkit.model_config(self.data)
        report = self.toolkit.parameter_report(config)
        self.assertEqual(report["n_parameters"], param_count(config))
        self.assertEqual(report["reference_layout_parameters"], 9_523_781)
        self.assertEqual(report["published_parameters"], 10_648_834)
        self.assertEqual(report["reference_discrepancy"], 9_523_781 - 10_648_834)

    def test_train_model(self):
        """Test that a trained model carries its variable and normalizer"""
        toolkit = BiasCorrectionToolkit(_run_config())
        normalizer = toolkit.make_normalizer(self.data, "static")
        result = toolkit.train_model(self.data, normalizer, run_id="unit")
        self.assertEqual(result.epochs_run, 1)
        self.assertEqual(result.model.metadata["variable"], "T2m")
        self.assertEqual(result.model.metadata["normalizer"]["mode"], "static")
        self.assertEqual(toolkit.monitor.get_total_runs(), 1)

    @patch('facade.train')
    def test_train_model_passes_normalized_cases(self, mock_train):
        mock_train.return_value = MagicMock()
        normalizer = self.toolkit.make_normalizer(self.data, "dynamic")
        self.toolkit.train_model(self.data, normalizer, Architecture.RESIDUAL_CONVLSTM, seed=3)
        model, dataset, train_config = mock_train.call_args[0]
        self.assertEqual(model.config.architecture, Architecture.RESIDUAL_CONVLSTM)
        self.assertEqual(len(dataset), len(self.data.train_cases))
        self.assertEqual(train_config.seed, 3)
        self.assertEqual(mock_train.call_args[1]["run_id"], "residual-convlstm")

    def test_evaluate(self):
        clim = self.toolkit.fit_climatology(self.data)
        engines = [self.toolkit.raw_engine(),
                   CorrectionEngine(gridwise_handle(fit_gridwise_linear(self.data.train_cases)))]
        report = self.toolkit.evaluate(self.data, engines, clim)
        self.assertEqual(len(report.records), 2 * 3)
        self.assertEqual(set(report.bias_maps), {"raw", "gridwise-linear"})
        self.assertIn("tropics", report.region_bias["raw"])
        self.assertEqual(report.bias_maps["raw"].shape, (4, 6))

    def test_audit(self):
        """Test the causality audit of an untrained corrector"""
        model = ReSAConvLSTM(self.toolkit.model_config(self.data))
        report = self.toolkit.audit(self.data, model, baseline_epochs=1)
        self.assertEqual(report.handles["resa"]["verdict"], "CAUSAL")
        self.assertTrue(report.handles["resa"]["consistent"])
        self.assertTrue(report.handles["raw"]["consistent"])
        self.assertFalse(report.handles["acausal-baseline"]["causal_claim"])
        self.assertEqual(len(report.to_dict()["probes"]), len(report.reports))

    def test_plot_frames(self):
        clim = self.toolkit.fit_climatology(self.data)
        frames = self.toolkit.plot_frames(self.data, clim)
        self.assertEqual(set(frames), {"skill_by_lead", "bias_map", "distribution", "distribution_moments"})
        self.assertEqual(len(frames["bias_map"]), 4 * 6)
        self.assertEqual(len(frames["distribution"]), 3 * 101)
        self.assertEqual(set(frames["skill_by_lead"]["metric"]), {"rmse", "acc"})


@unittest.skipUnless(SLOW, "set RESA_SLOW_TESTS=1 to run the ablation experiments")
class TestAblations(unittest.TestCase):
    """Test the ablation experiments end to end"""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.toolkit = BiasCorrectionToolkit(_run_config())
        cls.toolkit.synthesize(cls.tmp.name)
        cls.data = cls.toolkit.load(os.path.join(cls.tmp.name, "manifest.json"))

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_ablate_norm(self):
        report = self.toolkit.ablate_norm(self.data)
        self.assertEqual(set(report.training), {"static", "dynamic"})
        self.assertEqual(report.summary["late_leads"], [1, 2, 3])
        self.assertGreater(report.summary["static_rmse"], 0.0)

    def test_ablate_arch(self):
        report = self.toolkit.ablate_arch(self.data, seeds=(0,))
        self.assertEqual(set(report.summary["mean_rmse"]),
                         {"convlstm", "sa-convlstm", "residual-convlstm", "resa"})
        self.assertEqual(len(report.records), 4 * 3)

    def test_ablate_leadtime(self):
        report = self.toolkit.ablate_leadtime(self.data, horizons=(2, 3, 9))
        self.assertEqual([m.horizons for m in report.matrices], [[2, 3], [2, 3]])
        self.assertGreaterEqual(report.noise_band, 0.0)
        self.assertIn("resa", report.to_dict()["invariance"])


def _benchmark_config(**train_overrides):
    train = {"epochs": 30, "batch_size": 8, "learning_rate": 0.003, "patience": 30}
    train.update(train_overrides)
    return _run_config(
        model={"hidden_channels": [8], "kernel_size": 3, "attention_reduction": 2, "aux_channels": "latlon",
               "lon_wrap": True, "attention_cap": 4096},
        train=train,
        synth={"grid_lat": 8, "grid_lon": 12, "years": list(range(2000, 2006)), "leads": 3, "init_stride_days": 7},
    )


@unittest.skipUnless(SLOW, "set RESA_SLOW_TESTS=1 to run the correction and transfer benchmarks")
class TestBenchmarks(unittest.TestCase):
    """Test correction skill and cross-variable transfer on synthetic data"""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.toolkit = BiasCorrectionToolkit(_benchmark_config())
        t2m_dir = os.path.join(cls.tmp.name, "t2m")
        u10_dir = os.path.join(cls.tmp.name, "u10")
        cls.toolkit.synthesize(t2m_dir)
        cls.toolkit.synthesize(u10_dir, cls.toolkit.config.synth_config().updated(variable="U10"))
        cls.t2m = cls.toolkit.load(os.path.join(t2m_dir, "manifest.json"))
        cls.u10 = cls.toolkit.load(os.path.join(u10_dir, "manifest.json"))
        cls.t2m_clim = cls.toolkit.fit_climatology(cls.t2m)
        cls.t2m_normalizer = cls.toolkit.make_normalizer(cls.t2m, clim=cls.t2m_clim)
        cls.t2m_result = cls.toolkit.train_model(cls.t2m, cls.t2m_normalizer)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_corrected_rmse_below_raw_at_every_lead(self):
        engines = [self.toolkit.raw_engine(),
                   self.toolkit.engine_for(self.t2m_result.model, self.t2m_normalizer, "resa")]
        report = self.toolkit.evaluate(self.t2m, engines, self.t2m_clim)
        raw = {r.lead_days: r.rmse for r in report.records if r.model == "raw"}
        corrected = {r.lead_days: r.rmse for r in report.records if r.model == "resa"}
        self.assertEqual(sorted(corrected), [1, 2, 3])
        for lead, value in corrected.items():
            self.assertLess(value, raw[lead], f"lead {lead}")

    def test_warm_start_reaches_scratch_loss_in_half_the_epochs(self):
        normalizer = self.toolkit.make_normalizer(self.u10)
        scratch = self.toolkit.train_model(self.u10, normalizer)
        target = scratch.loss_curve[-1].val_loss

        tuner = BiasCorrectionToolkit(_benchmark_config(freeze_spec=["none"]))
        tuned = tuner.finetune_model(self.t2m_result.model.state(), self.u10, normalizer, target_loss=target)
        self.assertEqual(tuned.model.metadata["pretrained_variable"], "T2m")
        self.assertIsNotNone(tuned.epochs_to_target)
        self.assertLessEqual(tuned.epochs_to_target, 0.5 * scratch.epochs_run)


if __name__ == "__main__":
    unittest.main()
