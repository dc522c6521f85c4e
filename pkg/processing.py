"""
Correction engine implementing the Facade pattern.
Orchestrates normalize -> corrector -> denormalize for forecast cases and
for per-lead forecast files of external models.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from core import ForecastCase, GridSeries
from exceptions import DimensionError, InternalError, ResaError
from interfaces import CorrectorHandle, INormalizer
from metrics import CorrectedRun

logger = logging.getLogger(__name__)


@dataclass
class CorrectionResult:
    """Corrected physical fields [L, I, J] aligned with the input cases"""
    model_id: str
    cases: List[ForecastCase]
    corrected: List[np.ndarray]
    processing_time: float
    metadata: Dict[str, Any] = field(default_factory=dict)

    def as_run(self) -> CorrectedRun:
        return CorrectedRun(self.model_id, self.cases, self.corrected)


class CorrectionEngine:
    """Applies a normalized-space corrector to physical forecasts.

    ``normalizer`` may be None for correctors that already work in physical
    units (passthrough, gridwise regression).
    """

    def __init__(self, handle: CorrectorHandle, normalizer: Optional[INormalizer] = None):
        self.handle = handle
        self.normalizer = normalizer

    @property
    def model_id(self) -> str:
        return self.handle.model_id

    def correct(self, forecast: np.ndarray, init_date) -> np.ndarray:
        forecast = np.asarray(forecast, dtype=np.float64)
        if forecast.ndim != 3:
            raise DimensionError("correct expects one [L, I, J] forecast", {"shape": forecast.shape})
        if self.normalizer is None:
            return np.asarray(self.handle.apply(forecast), dtype=np.float64)
        z = self.normalizer.normalize_forecast(forecast, init_date)
        return self.normalizer.denormalize_forecast(self.handle.apply(z), init_date)

    def correct_cases(self, cases: Sequence[ForecastCase]) -> CorrectionResult:
        start_time = time.time()
        try:
            corrected = [self.correct(case.forecast, case.init_date) for case in cases]
        except ResaError:
            raise
        except Exception as e:
            raise InternalError(f"Correction failed: {e}", {"model": self.model_id})
        processing_time = time.time() - start_time
        logger.info("corrected %d cases with %s in %.2fs", len(cases), self.model_id, processing_time)
        return CorrectionResult(
            model_id=self.model_id,
            cases=list(cases),
            corrected=corrected,
            processing_time=processing_time,
            metadata={
                "normalization": self.normalizer.mode.value if self.normalizer is not None else "none",
                "reference": self.normalizer.identifier if self.normalizer is not None else "",
                "cases": len(cases),
            },
        )

    def correct_lead_series(self, per_lead: Sequence[GridSeries]) -> List[GridSeries]:
        """Plugin correction of forecast files holding one lead each (lead 1 first).

        Every series is indexed by init date; inits absent from any lead are dropped.
        """
        if not per_lead:
            raise DimensionError("No forecast series to correct")
        inits = per_lead[0].times.astype("datetime64[D]")
        for series in per_lead[1:]:
            inits = np.intersect1d(inits, series.times.astype("datetime64[D]"))
        if inits.size == 0:
            raise DimensionError("Per-lead forecast files share no init dates")
        stack = np.stack([np.stack([s.values[s.index_of(d)] for s in per_lead]) for d in inits])
        try:
            corrected = np.stack([self.correct(stack[n], d) for n, d in enumerate(inits)])
        except ResaError:
            raise
        except Exception as e:
            raise InternalError(f"Plugin correction failed: {e}", {"model": self.model_id})
        return [GridSeries(s.variable, inits, corrected[:, lead]) for lead, s in enumerate(per_lead)]
