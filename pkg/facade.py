"""
Main facade class implementing the Facade pattern.
Provides a simplified interface to data preparation, training, correction,
verification and the ablation experiments. Independent training runs go
through an async experiment runner backed by a thread pool.
"""

import asyncio
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from audit import (CAUSAL, InvarianceReport, LeadtimeMatrix, ProbeReport, leadtime_experiment,
                   leadtime_invariance, overall_verdict, probe_all, seed_noise_band)
from baselines import build_acausal_baseline, raw_passthrough
from climnorm import (Climatology, DynamicNormalizer, StaticNormalizer, distribution_report, fit_climatology,
                      gridpoint_mean_spread, normalize_dynamic, normalize_static, normalizer_record)
from core import (DECADAL_TEST_YEARS, PUBLISHED_PARAMETERS, Architecture, DatasetManifest, ForecastCase, GridSeries,
                  ManifestEntry, ReSAConfig, Role, RunConfig, SkillRecord, SynthConfig, TrainConfig,
                  is_month_start, latitudes, longitudes)
from exceptions import ConfigurationError
from gridio import (assemble_cases, decadal_split, forecast_series_by_lead, load_manifest, load_truth,
                    save_manifest, split_cases, write_gridts)
from interfaces import INormalizer
from metrics import bias_map, mean_rmse, region_bias_summary, skill_table
from model import ModelState, ReSAConvLSTM, param_count, resa_handle
from monitoring import PerformanceMonitor
from processing import CorrectionEngine, CorrectionResult
from synth import synth_generate
from train import TrainingResult, finetune, train

logger = logging.getLogger(__name__)

ARCHITECTURE_VARIANTS = (Architecture.CONVLSTM, Architecture.SA_CONVLSTM,
                         Architecture.RESIDUAL_CONVLSTM, Architecture.RESA)


class ExperimentRunner:
    """Runs independent jobs on a thread pool; results keep job order"""

    def __init__(self, max_workers: int = 1):
        self.max_workers = max(1, max_workers)

    async def run_async(self, jobs: Sequence[Callable[[], Any]]) -> List[Any]:
        loop = asyncio.get_running_loop()
        with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            futures = [loop.run_in_executor(executor, job) for job in jobs]
            return list(await asyncio.gather(*futures))

    def run_sync(self, jobs: Sequence[Callable[[], Any]]) -> List[Any]:
        """Synchronous wrapper for run_async"""
        return asyncio.run(self.run_async(jobs))


@dataclass
class ExperimentData:
    """One variable's dataset after the decadal split"""
    variable: str
    train_cases: List[ForecastCase]
    test_cases: List[ForecastCase]
    train_truth: GridSeries
    test_years: Tuple[int, ...]
    manifest: Optional[DatasetManifest] = None

    @property
    def grid(self) -> Tuple[int, int]:
        return self.train_truth.grid

    @property
    def leads(self) -> int:
        return self.train_cases[0].leads

    def month_start_tests(self) -> List[ForecastCase]:
        cases = [c for c in self.test_cases if is_month_start(c.init_date)]
        return cases or list(self.test_cases)


@dataclass
class EvaluationReport:
    records: List[SkillRecord]
    bias_maps: Dict[str, np.ndarray]
    region_bias: Dict[str, Dict[str, float]]
    results: List[CorrectionResult] = field(default_factory=list)


@dataclass
class AblationReport:
    """Skill rows of an ablation plus its headline comparison"""
    records: List[SkillRecord]
    summary: Dict[str, Any]
    training: Dict[str, TrainingResult] = field(default_factory=dict)


@dataclass
class LeadtimeReport:
    matrices: List[LeadtimeMatrix]
    noise_band: float
    invariance: Dict[str, InvarianceReport]

    def to_dict(self) -> Dict[str, Any]:
        return {"noise_band": self.noise_band,
                "invariance": {k: v.to_dict() for k, v in self.invariance.items()},
                "max_difference": {m.architecture: m.max_difference() for m in self.matrices}}


@dataclass
class AuditReport:
    reports: List[ProbeReport]
    handles: Dict[str, Dict[str, Any]]

    @property
    def passed(self) -> bool:
        return all(h["consistent"] for h in self.handles.values())

    def to_dict(self) -> Dict[str, Any]:
        return {"passed": self.passed, "handles": self.handles,
                "probes": [r.to_dict() for r in self.reports]}


def bias_regions(raw_bias: np.ndarray) -> Dict[str, np.ndarray]:
    """Latitude bands plus the strongest warm/cold cores of a raw bias map"""
    n_lat, n_lon = raw_bias.shape
    lat = latitudes(n_lat)[:, None] * np.ones((1, n_lon))
    regions = {
        "tropics": np.abs(lat) < 23.5,
        "northern_extratropics": lat >= 23.5,
        "southern_extratropics": lat <= -23.5,
    }
    if raw_bias.max() > 0:
        regions["warm_bias"] = raw_bias >= 0.5 * raw_bias.max()
    if raw_bias.min() < 0:
        regions["cold_bias"] = raw_bias <= 0.5 * raw_bias.min()
    return {name: mask for name, mask in regions.items() if mask.any()}


class BiasCorrectionToolkit:
    """Entry point behind every command-line subcommand"""

    def __init__(self, config: Optional[RunConfig] = None, monitor: Optional[PerformanceMonitor] = None):
        self.config = config or RunConfig()
        self.monitor = monitor or PerformanceMonitor()
        self.runner = ExperimentRunner(self.config.threads)

    # -- data ---------------------------------------------------------------

    def synthesize(self, output_dir: str, synth_config: Optional[SynthConfig] = None,
                   seed: Optional[int] = None) -> DatasetManifest:
        """Write synthetic truth, per-lead forecasts and a manifest to ``output_dir``"""
        cfg = synth_config or self.config.synth_config()
        seed = self.config.seed if seed is None else seed
        truth, cases = synth_generate(cfg, seed)
        os.makedirs(output_dir, exist_ok=True)
        prefix = f"{cfg.variable}_external" if cfg.external else cfg.variable

        entries = [ManifestEntry(f"{prefix}_truth.gts", cfg.variable, Role.TRUTH, cfg.years)]
        write_gridts(truth, os.path.join(output_dir, entries[0].path))
        for lead, series in enumerate(forecast_series_by_lead(cases, cfg.variable), start=1):
            entry = ManifestEntry(f"{prefix}_forecast_lead{lead}.gts", cfg.variable, Role.FORECAST, cfg.years, lead)
            write_gridts(series, os.path.join(output_dir, entry.path))
            entries.append(entry)
        test_years = tuple(y for y in DECADAL_TEST_YEARS if y in cfg.years) or (cfg.years[-1],)
        manifest = DatasetManifest(entries, test_years, os.path.abspath(output_dir))
        save_manifest(manifest, os.path.join(output_dir, "manifest.json"))
        logger.info("wrote %d synthetic files to %s", len(entries), output_dir)
        return manifest

    def load(self, manifest_path: Optional[str] = None, variable: Optional[str] = None) -> ExperimentData:
        path = manifest_path or self.config.manifest
        if not path:
            raise ConfigurationError("A dataset manifest is required")
        manifest = load_manifest(path)
        if variable is None:
            if len(manifest.variables) != 1:
                raise ConfigurationError("Manifest holds several variables; choose one",
                                         {"variables": manifest.variables})
            variable = manifest.variables[0]
        train_manifest, test_manifest = decadal_split(manifest)
        train_cases, test_cases = split_cases(assemble_cases(manifest, variable), test_manifest.test_years)
        truth = load_truth(manifest, variable).select_years(train_manifest.years)
        return ExperimentData(variable, train_cases, test_cases, truth,
                              tuple(test_manifest.test_years), manifest)

    # -- normalization ----------------------------------------------------

    def fit_climatology(self, data: ExperimentData) -> Climatology:
        return fit_climatology(data.train_truth, self.config.smoothing_window, self.config.sigma_floor)

    def make_normalizer(self, data: ExperimentData, mode: Optional[str] = None,
                        clim: Optional[Climatology] = None) -> INormalizer:
        mode = mode or self.config.normalization
        if mode == "static":
            return StaticNormalizer.fit(data.train_truth, self.config.sigma_floor)
        return DynamicNormalizer(clim if clim is not None else self.fit_climatology(data))

    def normalization_diagnostics(self, data: ExperimentData, clim: Climatology) -> Dict[str, Any]:
        """Distribution reports of raw, static and dynamic training truth"""
        static, _, _ = normalize_static(data.train_truth, sigma_floor=self.config.sigma_floor)
        dynamic = normalize_dynamic(data.train_truth, clim)
        return {
            "raw": distribution_report(data.train_truth).to_dict(),
            "static": distribution_report(static).to_dict(),
            "dynamic": distribution_report(dynamic).to_dict(),
            "gridpoint_mean_spread": {
                "static": gridpoint_mean_spread(static.series.values),
                "dynamic": gridpoint_mean_spread(dynamic.series.values),
            },
        }

    # -- training ---------------------------------------------------------

    def model_config(self, data: ExperimentData, seed: Optional[int] = None,
                     architecture: Optional[Architecture] = None) -> ReSAConfig:
        i, j = data.grid
        cfg = self.config.model_config(grid_lat=i, grid_lon=j)
        if seed is not None:
            cfg = cfg.updated(seed=seed)
        return cfg.for_architecture(architecture) if architecture is not None else cfg

    def train_config(self, seed: Optional[int] = None) -> TrainConfig:
        cfg = self.config.train_config()
        return cfg.updated(seed=seed) if seed is not None else cfg

    def train_model(self, data: ExperimentData, normalizer: INormalizer,
                    architecture: Optional[Architecture] = None, seed: Optional[int] = None,
                    run_id: Optional[str] = None) -> TrainingResult:
        mcfg = self.model_config(data, seed, architecture)
        model = ReSAConvLSTM(mcfg)
        result = train(model, normalizer.normalize_cases(data.train_cases), self.train_config(seed),
                       normalizer=normalizer, monitor=self.monitor,
                       run_id=run_id or mcfg.architecture.value)
        model.metadata.update({"normalizer": normalizer_record(normalizer), "variable": data.variable})
        return result

    def finetune_model(self, state: ModelState, data: ExperimentData, normalizer: INormalizer,
                       target_loss: Optional[float] = None) -> TrainingResult:
        result = finetune(state, normalizer.normalize_cases(data.train_cases), self.train_config(),
                          normalizer=normalizer, target_loss=target_loss, monitor=self.monitor)
        result.model.metadata.update({"normalizer": normalizer_record(normalizer), "variable": data.variable,
                                      "pretrained_variable": state.metadata.get("variable", "")})
        return result

    def parameter_report(self, config: ReSAConfig) -> Dict[str, Any]:
        """Trainable-parameter count of a layout next to the full-scale reference layout"""
        reference = param_count(ReSAConfig.reference_layout())
        return {
            "n_parameters": param_count(config),
            "reference_layout_parameters": reference,
            "published_parameters": PUBLISHED_PARAMETERS,
            "reference_discrepancy": reference - PUBLISHED_PARAMETERS,
            "note": "depth, widths and attention layout of the published model are unknown; counts are reported, not matched",
        }

    # -- correction and verification ----------------------------------------

    @staticmethod
    def engine_for(model: ReSAConvLSTM, normalizer: INormalizer, model_id: Optional[str] = None) -> CorrectionEngine:
        return CorrectionEngine(resa_handle(model, model_id), normalizer)

    def evaluate(self, data: ExperimentData, engines: Sequence[CorrectionEngine],
                 clim: Climatology) -> EvaluationReport:
        cases = data.test_cases
        results = [engine.correct_cases(cases) for engine in engines]
        records = skill_table([r.as_run() for r in results], clim, data.variable, self.config.area_weighted)
        regions = bias_regions(bias_map(cases))
        return EvaluationReport(
            records,
            {r.model_id: bias_map(r.cases, r.corrected) for r in results},
            {r.model_id: region_bias_summary(r.cases, r.corrected, regions) for r in results},
            results,
        )

    @staticmethod
    def raw_engine() -> CorrectionEngine:
        return CorrectionEngine(raw_passthrough(), None)

    # -- ablations --------------------------------------------------------

    def ablate_norm(self, data: ExperimentData, seed: Optional[int] = None) -> AblationReport:
        """Same model and seed trained on static versus dynamic normalization"""
        clim = self.fit_climatology(data)
        normalizers = {"static": self.make_normalizer(data, "static"), "dynamic": DynamicNormalizer(clim)}
        modes = list(normalizers)
        results = self.runner.run_sync([
            (lambda m=m: self.train_model(data, normalizers[m], Architecture.RESA, seed, f"resa-{m}"))
            for m in modes])
        engines = [self.raw_engine()] + [self.engine_for(r.model, normalizers[m], f"resa-{m}")
                                         for m, r in zip(modes, results)]
        report = self.evaluate(data, engines, clim)
        late = [t for t in range(4, data.leads + 1)] or None
        static_rmse = mean_rmse(report.records, "resa-static", late)
        dynamic_rmse = mean_rmse(report.records, "resa-dynamic", late)
        summary = {
            "late_leads": late or list(range(1, data.leads + 1)),
            "static_rmse": static_rmse,
            "dynamic_rmse": dynamic_rmse,
            "gain_pct": 100.0 * (static_rmse - dynamic_rmse) / static_rmse if static_rmse > 0 else 0.0,
        }
        logger.info("normalization ablation: static %.4g dynamic %.4g (%.1f%%)",
                    static_rmse, dynamic_rmse, summary["gain_pct"])
        return AblationReport(report.records, summary, dict(zip(modes, results)))

    def ablate_arch(self, data: ExperimentData, seeds: Sequence[int] = (0, 1, 2)) -> AblationReport:
        """The four ConvLSTM variants, averaged over seeds"""
        clim = self.fit_climatology(data)
        normalizer = DynamicNormalizer(clim)
        runs = [(arch, seed) for arch in ARCHITECTURE_VARIANTS for seed in seeds]
        results = self.runner.run_sync([
            (lambda a=a, s=s: self.train_model(data, normalizer, a, s, f"{a.value}-s{s}")) for a, s in runs])
        engines = [self.engine_for(r.model, normalizer, f"{a.value}-s{s}") for (a, s), r in zip(runs, results)]
        per_seed = self.evaluate(data, engines, clim).records

        records = []
        for arch in ARCHITECTURE_VARIANTS:
            ids = {f"{arch.value}-s{s}" for s in seeds}
            for lead in sorted({r.lead_days for r in per_seed}):
                rows = [r for r in per_seed if r.model in ids and r.lead_days == lead]
                records.append(SkillRecord(arch.value, data.variable, lead,
                                           float(np.mean([r.rmse for r in rows])),
                                           float(np.mean([r.acc for r in rows])), rows[0].n_cases))
        means = {arch.value: mean_rmse(records, arch.value) for arch in ARCHITECTURE_VARIANTS}
        ordered = (means[Architecture.RESA.value]
                   <= min(means[Architecture.SA_CONVLSTM.value], means[Architecture.RESIDUAL_CONVLSTM.value])
                   <= means[Architecture.CONVLSTM.value])
        summary = {"mean_rmse": means, "seeds": list(seeds), "ordering_holds": bool(ordered)}
        return AblationReport(records, summary, {f"{a.value}-s{s}": r for (a, s), r in zip(runs, results)})

    def ablate_leadtime(self, data: ExperimentData, horizons: Sequence[int] = (3, 5, 7),
                        seed: Optional[int] = None, noise_seeds: Optional[Tuple[int, int]] = None) -> LeadtimeReport:
        seed = self.config.seed if seed is None else seed
        horizons = [h for h in horizons if h <= data.leads]
        if not horizons:
            raise ConfigurationError("No training horizon fits the available leads", {"leads": data.leads})
        normalizer = self.make_normalizer(data, "dynamic")
        train_data = normalizer.normalize_cases(data.train_cases)
        tests = data.month_start_tests()
        mcfg, tcfg = self.model_config(data, seed), self.train_config(seed)
        with ThreadPoolExecutor(max_workers=self.config.threads) as executor:
            matrices = [leadtime_experiment(train_data, tests, normalizer, arch, horizons, seed, mcfg, tcfg, executor)
                        for arch in (Architecture.RESA, Architecture.ACAUSAL_BASELINE)]
            band = seed_noise_band(train_data, tests, normalizer, max(horizons),
                                   noise_seeds or (seed, seed + 1), mcfg, tcfg, executor)
        invariance = {m.architecture: leadtime_invariance(m, band) for m in matrices}
        return LeadtimeReport(matrices, band, invariance)

    def audit(self, data: ExperimentData, model: Optional[ReSAConvLSTM] = None,
              normalizer: Optional[INormalizer] = None, seed: Optional[int] = None,
              baseline_epochs: int = 10) -> AuditReport:
        """Probe the corrector, a trained acausal baseline and the passthrough"""
        normalizer = normalizer or self.make_normalizer(data, "dynamic")
        case = data.month_start_tests()[0]
        sequence = normalizer.normalize_forecast(case.forecast, case.init_date)
        if model is None:
            model = ReSAConvLSTM(self.model_config(data, seed))
        tcfg = self.train_config(seed)
        tcfg = tcfg.updated(epochs=min(tcfg.epochs, baseline_epochs))
        baseline = build_acausal_baseline(self.model_config(data, seed), data.leads,
                                          normalizer.normalize_cases(data.train_cases), tcfg, normalizer)

        reports, handles = [], {}
        for handle in (resa_handle(model), baseline, raw_passthrough()):
            probes = probe_all(handle, sequence)
            verdict = overall_verdict(probes)
            handles[handle.model_id] = {"causal_claim": handle.causal_claim, "verdict": verdict,
                                        "consistent": (verdict == CAUSAL) == handle.causal_claim}
            reports.extend(probes)
        return AuditReport(reports, handles)

    # -- plot data --------------------------------------------------------

    def plot_frames(self, data: ExperimentData, clim: Climatology,
                    engines: Sequence[CorrectionEngine] = ()) -> Dict[str, pd.DataFrame]:
        """Tidy tables for external plotting: skill by lead, bias maps, distributions"""
        report = self.evaluate(data, [self.raw_engine()] + list(engines), clim)
        skill = pd.DataFrame(
            [[r.model, r.variable, r.lead_days, metric, getattr(r, metric)]
             for r in report.records for metric in ("rmse", "acc")],
            columns=["model", "variable", "lead_days", "metric", "value"])

        i, j = data.grid
        lat = np.repeat(latitudes(i), j)
        lon = np.tile(longitudes(j), i)
        bias = pd.concat([pd.DataFrame({"model": name, "lat": lat, "lon": lon, "bias": m.reshape(-1)})
                          for name, m in report.bias_maps.items()], ignore_index=True)

        diagnostics = self.normalization_diagnostics(data, clim)
        hist_rows, moment_rows = [], []
        for name in ("raw", "static", "dynamic"):
            d = diagnostics[name]
            edges, counts = d["histogram"]["edges"], d["histogram"]["counts"]
            hist_rows.extend([name, edges[k], edges[k + 1], counts[k]] for k in range(len(counts)))
            g = d["global"]
            moment_rows.append([name, g["mean"], g["std"], g["skewness"], g["excess_kurtosis"]])
        return {
            "skill_by_lead": skill,
            "bias_map": bias,
            "distribution": pd.DataFrame(hist_rows, columns=["normalization", "bin_left", "bin_right", "count"]),
            "distribution_moments": pd.DataFrame(moment_rows, columns=["normalization", "mean", "std",
                                                                       "skewness", "excess_kurtosis"]),
        }
