"""
Physical-space verification: RMSE, anomaly correlation, bias maps and skill tables.

Scores are unweighted sums over the grid unless latitude weights are passed.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from climnorm import Climatology
from core import ForecastCase, SkillRecord, is_month_start, latitudes
from exceptions import ContractError, DimensionError

logger = logging.getLogger(__name__)

SKILL_COLUMNS = ["model", "variable", "lead_days", "rmse", "acc", "n_cases"]


def _check_fields(*arrays: np.ndarray):
    shape = np.shape(arrays[0])
    for a in arrays[1:]:
        if np.shape(a) != shape:
            raise DimensionError("Fields have different dimensions",
                                 {"shapes": [np.shape(x) for x in arrays]})


def latitude_weights(n_lat: int, n_lon: int) -> np.ndarray:
    """cos(latitude) area weights [I, J] scaled to mean 1"""
    w = np.cos(np.deg2rad(latitudes(n_lat)))[:, None] * np.ones((1, n_lon))
    return w / w.mean()


def rmse(pred: np.ndarray, truth: np.ndarray, weights: Optional[np.ndarray] = None) -> float:
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    _check_fields(pred, truth)
    sq = (pred - truth) ** 2
    if weights is None:
        return float(np.sqrt(sq.mean()))
    _check_fields(pred, weights)
    return float(np.sqrt(np.sum(weights * sq) / np.sum(weights)))


def acc_flagged(pred: np.ndarray, truth: np.ndarray, clim_mean: np.ndarray,
                weights: Optional[np.ndarray] = None) -> Tuple[float, bool]:
    """Uncentered anomaly correlation and whether an anomaly field had zero norm"""
    pred, truth, clim_mean = (np.asarray(a, dtype=np.float64) for a in (pred, truth, clim_mean))
    _check_fields(pred, truth, clim_mean)
    w = np.ones_like(pred) if weights is None else np.asarray(weights, dtype=np.float64)
    _check_fields(pred, w)
    a_pred, a_truth = pred - clim_mean, truth - clim_mean
    norm_pred = np.sum(w * a_pred * a_pred)
    norm_truth = np.sum(w * a_truth * a_truth)
    if norm_pred == 0.0 or norm_truth == 0.0:
        logger.warning("ACC undefined for a zero anomaly field; reporting 0")
        return 0.0, True
    value = np.sum(w * a_pred * a_truth) / np.sqrt(norm_pred * norm_truth)
    return float(np.clip(value, -1.0, 1.0)), False


def acc(pred: np.ndarray, truth: np.ndarray, clim_mean: np.ndarray,
        weights: Optional[np.ndarray] = None) -> float:
    return acc_flagged(pred, truth, clim_mean, weights)[0]


@dataclass
class CorrectedRun:
    """One model's corrected fields [L, I, J] for each evaluation case"""
    model_id: str
    cases: Sequence[ForecastCase]
    corrected: Sequence[np.ndarray]

    def __post_init__(self):
        if len(self.cases) != len(self.corrected):
            raise ContractError("Corrected fields do not line up with the cases",
                                {"model": self.model_id, "cases": len(self.cases),
                                 "corrected": len(self.corrected)})

    @staticmethod
    def raw(cases: Sequence[ForecastCase], model_id: str = "raw") -> "CorrectedRun":
        return CorrectedRun(model_id, cases, [c.forecast for c in cases])


def bias_map(cases: Sequence[ForecastCase], corrected: Optional[Sequence[np.ndarray]] = None) -> np.ndarray:
    """Mean signed error (pred - truth) per gridpoint over all cases and leads"""
    if not cases:
        raise ContractError("bias_map needs at least one case")
    preds = [c.forecast for c in cases] if corrected is None else corrected
    total = np.zeros(cases[0].grid)
    count = 0
    for case, pred in zip(cases, preds):
        _check_fields(pred, case.truth)
        total += np.sum(pred - case.truth, axis=0)
        count += case.leads
    return total / count


def region_bias_summary(cases: Sequence[ForecastCase], corrected: Optional[Sequence[np.ndarray]],
                        regions: Dict[str, np.ndarray]) -> Dict[str, float]:
    """Region-mean of the composite bias map for each named boolean mask"""
    bias = bias_map(cases, corrected)
    out = {}
    for name, mask in regions.items():
        mask = np.asarray(mask, dtype=bool)
        _check_fields(mask, bias)
        if not mask.any():
            raise ContractError(f"Region {name!r} is empty")
        out[name] = float(bias[mask].mean())
    return out


def _evaluation_index(run: CorrectedRun, month_start_only: bool) -> List[int]:
    keep = [i for i, c in enumerate(run.cases) if not month_start_only or is_month_start(c.init_date)]
    if not keep:
        raise ContractError("No month-start initializations to evaluate", {"model": run.model_id})
    return keep


def skill_table(runs: Sequence[CorrectedRun], clim: Climatology, variable: Optional[str] = None,
                area_weighted: bool = False, month_start_only: bool = True) -> List[SkillRecord]:
    """Per-lead mean RMSE and ACC for every run over the shared case set"""
    if not runs:
        raise ContractError("skill_table needs at least one run")
    reference = [c.init_date for c in runs[0].cases]
    for run in runs[1:]:
        if [c.init_date for c in run.cases] != reference:
            raise ContractError("Runs were evaluated on different case sets",
                                {"models": [runs[0].model_id, run.model_id]})
    variable = variable or clim.variable
    index = _evaluation_index(runs[0], month_start_only)
    leads = min(runs[0].cases[i].leads for i in index)
    weights = latitude_weights(*clim.grid) if area_weighted else None

    records = []
    for run in runs:
        for t in range(leads):
            scores = []
            for i in index:
                case, pred = run.cases[i], run.corrected[i]
                clim_mean = clim.mean_at(case.valid_dates[t])[0]
                scores.append((rmse(pred[t], case.truth[t], weights),
                               acc(pred[t], case.truth[t], clim_mean, weights)))
            scores = np.array(scores)
            records.append(SkillRecord(run.model_id, variable, t + 1, float(scores[:, 0].mean()),
                                       float(scores[:, 1].mean()), len(index)))
    return records


def skill_frame(records: Sequence[SkillRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.to_dict() for r in records], columns=SKILL_COLUMNS)


def write_skill_csv(records: Sequence[SkillRecord], path) -> None:
    skill_frame(records).to_csv(path, index=False)


def improvement_table(records: Sequence[SkillRecord], reference: str = "raw") -> pd.DataFrame:
    """Per-lead percentage RMSE reduction of every model against ``reference``"""
    frame = skill_frame(records)
    base = frame[frame["model"] == reference][["variable", "lead_days", "rmse"]]
    if base.empty:
        raise ContractError(f"No rows for reference model {reference!r}")
    merged = frame.merge(base.rename(columns={"rmse": "reference_rmse"}), on=["variable", "lead_days"])
    merged["reduction_pct"] = np.where(merged["reference_rmse"] > 0,
                                       100.0 * (merged["reference_rmse"] - merged["rmse"]) / merged["reference_rmse"],
                                       0.0)
    return merged[["model", "variable", "lead_days", "rmse", "reference_rmse", "reduction_pct"]]


def mean_rmse(records: Sequence[SkillRecord], model_id: str, leads: Optional[Sequence[int]] = None) -> float:
    """Average RMSE of one model over the given leads (all leads by default)"""
    values = [r.rmse for r in records if r.model == model_id and (leads is None or r.lead_days in leads)]
    if not values:
        raise ContractError(f"No skill rows for {model_id!r}")
    return float(np.mean(values))
