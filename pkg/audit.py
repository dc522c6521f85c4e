"""
Black-box temporal causality audit and the lead-time invariance experiment.

The probe only ever calls ``handle.apply``; it never looks inside a model.
"""

import itertools
import logging
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from baselines import build_acausal_baseline
from climnorm import NormalizedDataset
from core import Architecture, ForecastCase, ReSAConfig, TrainConfig
from exceptions import ConfigurationError, ContractError
from interfaces import CorrectorHandle, INormalizer
from metrics import rmse
from model import ReSAConvLSTM, resa_handle
from train import train

logger = logging.getLogger(__name__)

CAUSAL = "CAUSAL"
LEAKY = "LEAKY"
PROBE_EPSILONS = (1e-3, -1e-3, 1.0, -1.0)
MATRIX_COLUMNS = ["architecture", "train_horizon", "lead", "rmse"]


@dataclass
class ProbeReport:
    """Per-lead max |output change| after shifting one input lead"""
    model_id: str
    lead: int
    epsilon: float
    deltas: List[float]
    causal_claim: bool

    @property
    def verdict(self) -> str:
        return CAUSAL if all(d == 0.0 for d in self.deltas[:self.lead - 1]) else LEAKY

    @property
    def consistent(self) -> bool:
        """Whether the verdict agrees with the model's own causality claim"""
        return (self.verdict == CAUSAL) == self.causal_claim

    def to_dict(self) -> Dict[str, Any]:
        return {"model_id": self.model_id, "lead": self.lead, "epsilon": self.epsilon,
                "deltas": list(self.deltas), "verdict": self.verdict,
                "causal_claim": self.causal_claim, "consistent": self.consistent}


def perturb_probe(handle: CorrectorHandle, sequence: np.ndarray, lead: int, epsilon: float) -> ProbeReport:
    sequence = np.asarray(sequence, dtype=np.float64)
    if sequence.ndim != 3:
        raise ContractError("The probe expects one [L, I, J] sequence", {"shape": sequence.shape})
    if not 1 <= lead <= sequence.shape[0]:
        raise ConfigurationError("Probe lead out of range", {"lead": lead, "leads": sequence.shape[0]})
    if epsilon == 0:
        raise ConfigurationError("Probe magnitude must be nonzero")

    base = handle.apply(sequence)
    shifted = sequence.copy()
    shifted[lead - 1] += epsilon
    moved = handle.apply(shifted)
    deltas = [float(np.max(np.abs(moved[t] - base[t]))) for t in range(sequence.shape[0])]
    return ProbeReport(handle.model_id, lead, float(epsilon), deltas, handle.causal_claim)


def probe_all(handle: CorrectorHandle, sequence: np.ndarray,
              leads: Optional[Sequence[int]] = None,
              epsilons: Sequence[float] = PROBE_EPSILONS) -> List[ProbeReport]:
    """Probe every lead 2..L with every magnitude"""
    leads = leads if leads is not None else range(2, np.shape(sequence)[0] + 1)
    reports = [perturb_probe(handle, sequence, k, eps) for k in leads for eps in epsilons]
    leaky = [r for r in reports if r.verdict == LEAKY]
    logger.info("probe of %s: %d/%d runs leaky", handle.model_id, len(leaky), len(reports))
    return reports


def overall_verdict(reports: Sequence[ProbeReport]) -> str:
    return CAUSAL if all(r.verdict == CAUSAL for r in reports) else LEAKY


# ---------------------------------------------------------------------------
# lead-time experiment

@dataclass
class LeadtimeMatrix:
    """Per-lead test RMSE of one architecture for each training horizon"""
    architecture: str
    rmse: Dict[int, List[float]]
    seed: int = 0

    @property
    def horizons(self) -> List[int]:
        return sorted(self.rmse)

    def pairs(self) -> List[Tuple[int, int, int, float]]:
        """(horizon_a, horizon_b, lead, |difference|) for every shared lead"""
        out = []
        for a, b in itertools.combinations(self.horizons, 2):
            for d in range(min(a, b)):
                out.append((a, b, d + 1, abs(self.rmse[a][d] - self.rmse[b][d])))
        return out

    def max_difference(self) -> float:
        diffs = [p[3] for p in self.pairs()]
        return max(diffs) if diffs else 0.0

    def frame(self) -> pd.DataFrame:
        rows = [[self.architecture, h, d + 1, v] for h in self.horizons for d, v in enumerate(self.rmse[h])]
        return pd.DataFrame(rows, columns=MATRIX_COLUMNS)


@dataclass
class InvarianceReport:
    max_difference: float
    noise_band: float
    factor: float
    violations: List[Tuple[int, int, int, float]] = field(default_factory=list)

    @property
    def bound(self) -> float:
        return self.factor * self.noise_band

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> Dict[str, Any]:
        return {"max_difference": self.max_difference, "noise_band": self.noise_band,
                "bound": self.bound, "passed": self.passed,
                "violations": [list(v) for v in self.violations]}


def write_matrix_csv(matrices: Sequence[LeadtimeMatrix], path) -> None:
    pd.concat([m.frame() for m in matrices], ignore_index=True).to_csv(path, index=False)


def evaluate_handle(handle: CorrectorHandle, cases: Sequence[ForecastCase], normalizer: INormalizer,
                    leads: int) -> List[float]:
    """Mean physical-space RMSE per lead of a normalized-space corrector"""
    if not cases:
        raise ConfigurationError("No test cases to evaluate")
    scores = np.zeros((len(cases), leads))
    for i, case in enumerate(cases):
        z = normalizer.normalize_forecast(case.forecast[:leads], case.init_date)
        pred = normalizer.denormalize_forecast(handle.apply(z), case.init_date)
        for t in range(leads):
            scores[i, t] = rmse(pred[t], case.truth[t])
    return scores.mean(axis=0).tolist()


def train_handle(architecture: Architecture, horizon: int, data: NormalizedDataset, seed: int,
                 model_config: ReSAConfig, train_config: TrainConfig,
                 normalizer: Optional[INormalizer] = None) -> CorrectorHandle:
    """Train one corrector on ``data`` truncated to ``horizon`` leads"""
    data = data.truncated(horizon)
    tcfg = train_config.updated(seed=seed)
    if architecture == Architecture.ACAUSAL_BASELINE:
        return build_acausal_baseline(model_config.updated(seed=seed), horizon, data, tcfg, normalizer)
    model = ReSAConvLSTM(model_config.updated(seed=seed).for_architecture(architecture))
    train(model, data, tcfg, normalizer=normalizer, run_id=f"{architecture.value}-L{horizon}")
    return resa_handle(model)


def _check_leadtime_inputs(train_data: NormalizedDataset, horizons: Sequence[int]):
    if len(train_data) < 2:
        raise ConfigurationError("Not enough training cases for the lead-time experiment",
                                 {"cases": len(train_data)})
    if not horizons or min(horizons) < 1 or max(horizons) > train_data.leads:
        raise ConfigurationError("Training horizons exceed the available leads",
                                 {"horizons": list(horizons), "leads": train_data.leads})


def leadtime_experiment(train_data: NormalizedDataset, test_cases: Sequence[ForecastCase],
                        normalizer: INormalizer, architecture: Architecture,
                        horizons: Sequence[int] = (3, 5, 7), seed: int = 0,
                        model_config: Optional[ReSAConfig] = None,
                        train_config: Optional[TrainConfig] = None,
                        executor: Optional[Executor] = None) -> LeadtimeMatrix:
    """Train one model per horizon with shared seed and data order; test RMSE per lead"""
    if architecture not in (Architecture.RESA, Architecture.ACAUSAL_BASELINE):
        raise ConfigurationError("Lead-time experiment supports resa and acausal-baseline",
                                 {"architecture": architecture.value})
    horizons = sorted(set(horizons))
    _check_leadtime_inputs(train_data, horizons)
    model_config = model_config or ReSAConfig(seed=seed)
    train_config = train_config or TrainConfig(seed=seed)

    def run(horizon):
        handle = train_handle(architecture, horizon, train_data, seed, model_config, train_config, normalizer)
        return evaluate_handle(handle, test_cases, normalizer, horizon)

    results = list(executor.map(run, horizons)) if executor is not None else [run(h) for h in horizons]
    matrix = LeadtimeMatrix(architecture.value, dict(zip(horizons, results)), seed)
    logger.info("lead-time matrix for %s: max cross-horizon difference %.4g",
                architecture.value, matrix.max_difference())
    return matrix


def seed_noise_band(train_data: NormalizedDataset, test_cases: Sequence[ForecastCase],
                    normalizer: INormalizer, horizon: int, seeds: Tuple[int, int] = (0, 1),
                    model_config: Optional[ReSAConfig] = None,
                    train_config: Optional[TrainConfig] = None,
                    executor: Optional[Executor] = None) -> float:
    """Max over leads of |RMSE difference| between two resa runs differing only in seed"""
    _check_leadtime_inputs(train_data, [horizon])
    model_config = model_config or ReSAConfig()
    train_config = train_config or TrainConfig()

    def run(seed):
        handle = train_handle(Architecture.RESA, horizon, train_data, seed, model_config, train_config, normalizer)
        return evaluate_handle(handle, test_cases, normalizer, horizon)

    a, b = list(executor.map(run, seeds)) if executor is not None else [run(s) for s in seeds]
    band = float(np.max(np.abs(np.array(a) - np.array(b))))
    logger.info("seed noise band at horizon %d: %.4g", horizon, band)
    return band


def leadtime_invariance(matrix: LeadtimeMatrix, noise_band: float, factor: float = 2.0) -> InvarianceReport:
    """Cross-horizon differences must stay within ``factor`` times the seed-noise band"""
    bound = factor * noise_band
    violations = [p for p in matrix.pairs() if p[3] > bound]
    return InvarianceReport(matrix.max_difference(), noise_band, factor, violations)
