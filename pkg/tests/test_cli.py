import unittest
from unittest.mock import patch
import sys
import os
import io
import json
import tempfile

import pandas as pd

# Add parent directory to path to import modules directly
current_dir = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(current_dir)
sys.path.insert(0, parent_dir)

from cli import COMMANDS, RUN_RECORD, build_parser, load_run_config, main, sha256_file
from exceptions import ConfigurationError
from facade import BiasCorrectionToolkit

SLOW = os.environ.get("RESA_SLOW_TESTS") == "1"

SYNTH_ARGS = ["--grid-lat", "4", "--grid-lon", "6", "--years", "2000-2002", "--leads", "2",
              "--init-stride", "60", "--seed", "1"]
SMALL_MODEL = ["--hidden", "4", "--kernel-size", "3", "--epochs", "1", "--batch-size", "8",
               "--learning-rate", "0.01", "--patience", "5", "--seed", "1"]


def run_cli(argv):
    """Run the command line quietly; returns the exit code"""
    with patch("sys.stdout", new_callable=io.StringIO):
        return main(argv)


def _subcommand_help(command):
    """Help text of one subcommand; argparse exits after printing it"""
    with patch("sys.stdout", new_callable=io.StringIO) as out:
        try:
            build_parser().parse_args([command, "--help"])
        except SystemExit:
            pass
    return out.getvalue()


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


class TestParser(unittest.TestCase):
    """Test argument parsing and configuration merging"""

    def test_all_subcommands(self):
        parser = build_parser()
        for command in COMMANDS:
            self.assertEqual(parser.parse_args([command]).command, command)

    def test_lists_and_defaults(self):
        args = build_parser().parse_args(["ablate-leadtime", "--hidden", "4,8"])
        self.assertEqual(args.hidden, [4, 8])
        self.assertEqual(args.horizons, [3, 5, 7])
        self.assertEqual(build_parser().parse_args(["ablate-arch"]).seeds, [0, 1, 2])

    def test_years(self):
        args = build_parser().parse_args(["synth", "--years", "1990-1992,2001"])
        self.assertEqual(load_run_config(args).synth["years"], [1990, 1991, 1992, 2001])
        with self.assertRaises(ConfigurationError):
            load_run_config(build_parser().parse_args(["synth", "--years", ","]))

    def test_flags_override_config_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "run.json")
            with open(path, "w", encoding="utf-8") as f:
                json.dump({"version": 1, "seed": 3, "train": {"epochs": 9, "patience": 2},
                           "model": {"kernel_size": 5}}, f)
            args = build_parser().parse_args(["finetune", "--config", path, "--epochs", "2", "--freeze",
                                              "convlstm, head", "--no-attention"])
            config = load_run_config(args)
        self.assertEqual(config.subcommand, "finetune")
        self.assertEqual(config.seed, 3)
        self.assertEqual(config.train["epochs"], 2)
        self.assertEqual(config.train["patience"], 2)
        self.assertEqual(config.train["freeze_spec"], ["convlstm", "head"])
        self.assertEqual(config.model, {"kernel_size": 5, "use_attention": False})

    def test_threads_size_the_experiment_runner(self):
        config = load_run_config(build_parser().parse_args(["ablate-arch", "--threads", "3"]))
        self.assertEqual(config.threads, 3)
        self.assertEqual(BiasCorrectionToolkit(config).runner.max_workers, 3)
        self.assertIn("OMP_NUM_THREADS", _subcommand_help("ablate-arch"))

    def test_synth_options_only_for_synth(self):
        args = build_parser().parse_args(["synth", "--variable", "U10", "--leads", "3", "--years", "2001"])
        config = load_run_config(args)
        self.assertEqual(config.synth, {"variable": "U10", "leads": 3, "years": [2001]})


class TestExitCodes(unittest.TestCase):
    """Test error mapping to exit codes"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = self.tmp.name

    def tearDown(self):
        self.tmp.cleanup()

    def _config_file(self, data):
        path = os.path.join(self.out, "config.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f)
        return path

    def test_configuration_errors(self):
        self.assertEqual(run_cli(["synth", "-o", self.out, "--config", self._config_file({"seed": 1})]), 2)
        self.assertEqual(run_cli(["synth", "-o", self.out, "--config", self._config_file({"version": 2})]), 2)
        self.assertEqual(run_cli(["synth", "-o", self.out,
                                  "--config", self._config_file({"version": 1, "dropout": 0.1})]), 2)
        self.assertEqual(run_cli(["synth", "-o", self.out, "--log-level", "chatty"]), 2)
        self.assertEqual(run_cli(["train", "-o", self.out, "--kernel-size", "4"]), 2)

    def test_missing_inputs(self):
        self.assertEqual(run_cli(["climatology", "-o", self.out]), 2)
        self.assertEqual(run_cli(["climatology", "-o", self.out, "--manifest",
                                  os.path.join(self.out, "nope.json")]), 2)
        self.assertEqual(run_cli(["finetune", "-o", self.out]), 2)
        self.assertEqual(run_cli(["correct", "-o", self.out]), 2)
        self.assertEqual(run_cli(["correct", "-o", self.out, "--checkpoint",
                                  os.path.join(self.out, "none.resa")]), 2)
        self.assertEqual(run_cli(["finetune", "-o", self.out, "--checkpoint",
                                  os.path.join(self.out, "none.resa")]), 2)

    def test_corrupt_checkpoint(self):
        path = os.path.join(self.out, "broken.resa")
        with open(path, "wb") as f:
            f.write(b"NOPE" + bytes(32))
        self.assertEqual(run_cli(["correct", "-o", self.out, "--checkpoint", path]), 3)


class TestDataCommands(unittest.TestCase):
    """Test synth, climatology and evaluate on a small synthetic dataset"""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.data_dir = os.path.join(cls.tmp.name, "data")
        cls.code = run_cli(["synth", "-o", cls.data_dir] + SYNTH_ARGS)
        cls.manifest = os.path.join(cls.data_dir, "manifest.json")

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_synth_run_record(self):
        self.assertEqual(self.code, 0)
        record = read_json(os.path.join(self.data_dir, RUN_RECORD))
        self.assertEqual(record["subcommand"], "synth")
        self.assertEqual(record["seed"], 1)
        self.assertEqual(record["config"]["synth"]["leads"], 2)
        self.assertEqual(len(record["outputs"]), 4)
        for path, digest in record["outputs"].items():
            self.assertEqual(sha256_file(path), digest)

    def test_synth_is_deterministic(self):
        other = os.path.join(self.tmp.name, "again")
        self.assertEqual(run_cli(["synth", "-o", other] + SYNTH_ARGS), 0)
        for name in ("T2m_truth.gts", "T2m_forecast_lead1.gts", "T2m_forecast_lead2.gts"):
            self.assertEqual(sha256_file(os.path.join(self.data_dir, name)), sha256_file(os.path.join(other, name)))

    def test_climatology(self):
        out = os.path.join(self.tmp.name, "clim")
        self.assertEqual(run_cli(["climatology", "-o", out, "--manifest", self.manifest]), 0)
        self.assertTrue(os.path.exists(os.path.join(out, "climatology_T2m.gtcl")))
        report = read_json(os.path.join(out, "normalization_report_T2m.json"))
        self.assertLess(report["gridpoint_mean_spread"]["dynamic"], report["gridpoint_mean_spread"]["static"])
        record = read_json(os.path.join(out, RUN_RECORD))
        self.assertIn(os.path.abspath(self.manifest), [os.path.abspath(p) for p in record["inputs"]])

    def test_evaluate_baselines(self):
        out = os.path.join(self.tmp.name, "eval")
        self.assertEqual(run_cli(["evaluate", "-o", out, "--manifest", self.manifest]), 0)
        skill = pd.read_csv(os.path.join(out, "skill_T2m.csv"))
        self.assertEqual(set(skill["model"]), {"raw", "gridwise-linear"})
        self.assertEqual(len(skill), 2 * 2)
        improvement = pd.read_csv(os.path.join(out, "improvement_T2m.csv"))
        raw = improvement[improvement["model"] == "raw"]
        self.assertTrue((raw["reduction_pct"] == 0.0).all())


@unittest.skipUnless(SLOW, "set RESA_SLOW_TESTS=1 to run the end-to-end workflow")
class TestWorkflow(unittest.TestCase):
    """Test train, correct, finetune, audit and plotdata end to end"""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.data_dir = os.path.join(cls.tmp.name, "data")
        cls.model_dir = os.path.join(cls.tmp.name, "model")
        run_cli(["synth", "-o", cls.data_dir] + SYNTH_ARGS)
        cls.manifest = os.path.join(cls.data_dir, "manifest.json")
        cls.train_code = run_cli(["train", "-o", cls.model_dir, "--manifest", cls.manifest] + SMALL_MODEL)
        cls.checkpoint = os.path.join(cls.model_dir, "model_T2m.resa")

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_train_outputs(self):
        self.assertEqual(self.train_code, 0)
        self.assertTrue(os.path.exists(self.checkpoint))
        self.assertTrue(os.path.exists(os.path.join(self.model_dir, "climatology_T2m.gtcl")))
        curve = pd.read_csv(os.path.join(self.model_dir, "loss_curve_T2m.csv"))
        self.assertEqual(len(curve), 2)

    def test_correct_test_years(self):
        out = os.path.join(self.tmp.name, "corrected")
        self.assertEqual(run_cli(["correct", "-o", out, "--manifest", self.manifest,
                                  "--checkpoint", self.checkpoint]), 0)
        self.assertTrue(os.path.exists(os.path.join(out, "corrected_T2m_lead2.gts")))

    def test_correct_plugin_files(self):
        out = os.path.join(self.tmp.name, "plugin")
        files = [os.path.join(self.data_dir, f"T2m_forecast_lead{lead}.gts") for lead in (1, 2)]
        self.assertEqual(run_cli(["correct", "-o", out, "--checkpoint", self.checkpoint, "--forecast"] + files), 0)
        self.assertTrue(os.path.exists(os.path.join(out, "corrected_T2m_forecast_lead1.gts")))

    def test_evaluate_with_checkpoint(self):
        out = os.path.join(self.tmp.name, "eval")
        self.assertEqual(run_cli(["evaluate", "-o", out, "--manifest", self.manifest,
                                  "--checkpoint", self.checkpoint]), 0)
        skill = pd.read_csv(os.path.join(out, "skill_T2m.csv"))
        self.assertIn("model_T2m", set(skill["model"]))

    def test_finetune(self):
        out = os.path.join(self.tmp.name, "finetuned")
        self.assertEqual(run_cli(["finetune", "-o", out, "--manifest", self.manifest, "--checkpoint",
                                  self.checkpoint, "--epochs", "1", "--seed", "1"]), 0)
        self.assertTrue(os.path.exists(os.path.join(out, "model_T2m_finetuned.resa")))

    def test_audit(self):
        out = os.path.join(self.tmp.name, "audit")
        code = run_cli(["audit", "-o", out, "--manifest", self.manifest, "--checkpoint", self.checkpoint,
                        "--baseline-epochs", "1"])
        self.assertIn(code, (0, 5))
        report = read_json(os.path.join(out, "audit.json"))
        self.assertEqual(report["handles"]["resa"]["verdict"], "CAUSAL")
        self.assertEqual(code == 0, report["passed"])

    def test_plotdata(self):
        out = os.path.join(self.tmp.name, "plots")
        self.assertEqual(run_cli(["plotdata", "-o", out, "--manifest", self.manifest,
                                  "--checkpoint", self.checkpoint]), 0)
        for name in ("skill_by_lead", "bias_map", "distribution", "distribution_moments"):
            self.assertTrue(os.path.exists(os.path.join(out, f"plot_{name}.csv")))


if __name__ == "__main__":
    unittest.main()
