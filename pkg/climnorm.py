"""
Day-of-year climatology and the two normalization schemes.

Static z-score uses one global mean/std; dynamic normalization uses the
per-gridpoint, per-day-of-year climatology of the verifying date.
"""

import logging
import zlib
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from checkpoint import CLIMATOLOGY_MAGIC, read_container, write_container
from core import (LEAP_SLOT, N_SLOTS, ForecastCase, GridSeries, NormalizationMode, as_day,
                  climate_slots, latitudes, years_of)
from exceptions import ConfigurationError, ContractError, DimensionError, FormatError

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 31
DEFAULT_SIGMA_FLOOR = 1e-3
HISTOGRAM_BINS = 101
_FEB28, _MAR1 = 58, 59


@dataclass
class Climatology:
    """Per-gridpoint mean and standard deviation for each of 366 day slots"""
    variable: str
    mu: np.ndarray
    sigma: np.ndarray
    fit_years: Tuple[int, ...]
    window: int
    sigma_floor: float

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.ndim != 3 or self.mu.shape[0] != N_SLOTS or self.mu.shape != self.sigma.shape:
            raise DimensionError("Climatology arrays must both be [366, I, J]",
                                 {"mu": self.mu.shape, "sigma": self.sigma.shape})
        if not np.all(np.isfinite(self.mu)):
            raise ContractError("Climatology mean is not finite")
        if np.any(self.sigma < self.sigma_floor):
            raise ContractError("Climatology sigma below its floor")
        self.fit_years = tuple(int(y) for y in self.fit_years)

    @property
    def grid(self) -> Tuple[int, int]:
        return int(self.mu.shape[1]), int(self.mu.shape[2])

    @property
    def identifier(self) -> str:
        crc = zlib.crc32(self.mu.tobytes())
        crc = zlib.crc32(self.sigma.tobytes(), crc)
        crc = zlib.crc32(f"{self.variable}|{self.fit_years}|{self.window}|{self.sigma_floor}".encode(), crc)
        return f"clim-{self.variable}-{crc & 0xFFFFFFFF:08x}"

    def mean_at(self, days) -> np.ndarray:
        return self.mu[climate_slots(np.atleast_1d(np.asarray(days, dtype="datetime64[D]")))]

    def std_at(self, days) -> np.ndarray:
        return self.sigma[climate_slots(np.atleast_1d(np.asarray(days, dtype="datetime64[D]")))]


@dataclass
class NormalizedSeries:
    """Dimensionless series plus the id of the reference it was scaled with"""
    series: GridSeries
    reference: str


def fit_climatology(train: GridSeries, window: int = DEFAULT_WINDOW,
                    sigma_floor: float = DEFAULT_SIGMA_FLOOR) -> Climatology:
    """Mean/std per gridpoint and day slot over a circular window of days.

    Std uses the n-1 divisor; slot 366 (Feb 29) pools the Feb 28 and Mar 1
    windows with any Feb 29 samples.
    """
    if window < 1 or window % 2 == 0 or window > 365:
        raise ConfigurationError("window must be an odd number of days in 1..365", {"window": window})
    if not sigma_floor > 0:
        raise ConfigurationError("sigma_floor must be positive")
    years = train.years
    if len(years) < 2:
        raise ContractError("Climatology needs at least two distinct years", {"years": years})

    slots = climate_slots(train.times)
    ref = train.values.mean(axis=0)
    anomalies = train.values - ref[None]
    shape = (N_SLOTS,) + train.grid
    s1, s2 = np.zeros(shape), np.zeros(shape)
    n = np.zeros(N_SLOTS)
    np.add.at(s1, slots, anomalies)
    np.add.at(s2, slots, anomalies * anomalies)
    np.add.at(n, slots, 1.0)

    half = window // 2
    w1, w2, wn = np.zeros(shape), np.zeros(shape), np.zeros(N_SLOTS)
    regular = slice(0, LEAP_SLOT)
    for offset in range(-half, half + 1):
        w1[regular] += np.roll(s1[regular], -offset, axis=0)
        w2[regular] += np.roll(s2[regular], -offset, axis=0)
        wn[regular] += np.roll(n[regular], -offset)
    neighbours = np.arange(_FEB28 - half, _MAR1 + half + 1) % LEAP_SLOT
    w1[LEAP_SLOT] = s1[neighbours].sum(axis=0) + s1[LEAP_SLOT]
    w2[LEAP_SLOT] = s2[neighbours].sum(axis=0) + s2[LEAP_SLOT]
    wn[LEAP_SLOT] = n[neighbours].sum() + n[LEAP_SLOT]

    empty = np.flatnonzero(wn == 0)
    if empty.size:
        raise ContractError("Some day slots have no samples; widen the window",
                            {"slots": empty[:10].tolist()})
    count = wn[:, None, None]
    mean = w1 / count
    var = np.where(count > 1, (w2 - count * mean * mean) / np.maximum(count - 1, 1), 0.0)
    sigma = np.maximum(np.sqrt(np.maximum(var, 0.0)), sigma_floor)
    clim = Climatology(train.variable, mean + ref[None], sigma, tuple(years), window, sigma_floor)
    logger.info("fitted %s climatology over %d years (window %d)", train.variable, len(years), window)
    return clim


def normalize_static(x: GridSeries, mu: Optional[float] = None, sigma: Optional[float] = None,
                     sigma_floor: float = DEFAULT_SIGMA_FLOOR) -> Tuple[NormalizedSeries, float, float]:
    """Global z-score; mu/sigma are estimated from ``x`` unless given"""
    if x.values.size == 0:
        raise ContractError("Cannot normalize an empty series")
    if mu is None:
        mu = float(x.values.mean())
    if sigma is None:
        sigma = float(x.values.std())
    sigma = max(sigma, sigma_floor)
    z = GridSeries(x.variable, x.times, (x.values - mu) / sigma)
    return NormalizedSeries(z, f"static-{x.variable}-{mu!r}-{sigma!r}"), mu, sigma


def _check_grid(series: GridSeries, clim: Climatology):
    if series.grid != clim.grid:
        raise ContractError("Series grid does not match the climatology",
                            {"series": series.grid, "climatology": clim.grid})


def normalize_dynamic(x: GridSeries, clim: Climatology) -> NormalizedSeries:
    _check_grid(x, clim)
    slots = climate_slots(x.times)
    z = (x.values - clim.mu[slots]) / clim.sigma[slots]
    return NormalizedSeries(GridSeries(x.variable, x.times, z), clim.identifier)


def denormalize_dynamic(z: Union[NormalizedSeries, GridSeries], clim: Climatology) -> GridSeries:
    series = z.series if isinstance(z, NormalizedSeries) else z
    _check_grid(series, clim)
    slots = climate_slots(series.times)
    return GridSeries(series.variable, series.times, series.values * clim.sigma[slots] + clim.mu[slots])


def gridpoint_mean_spread(values: np.ndarray) -> float:
    """max - min over gridpoints of the temporal mean of a [T, I, J] array"""
    means = np.asarray(values).mean(axis=0)
    return float(means.max() - means.min())


# ---------------------------------------------------------------------------
# distribution diagnostics

@dataclass
class DistributionStats:
    mean: float
    std: float
    skewness: float
    excess_kurtosis: float
    n: int

    @staticmethod
    def of(values: np.ndarray) -> "DistributionStats":
        flat = np.asarray(values, dtype=np.float64).reshape(-1)
        std = float(flat.std())
        if std == 0.0:
            skew, kurt = 0.0, 0.0
        else:
            skew = float(stats.skew(flat))
            kurt = float(stats.kurtosis(flat, fisher=True))
        return DistributionStats(float(flat.mean()), std, skew, kurt, int(flat.size))


@dataclass
class DistributionReport:
    """Global and per-latitude-band moments plus a 101-bin histogram"""
    overall: DistributionStats
    bands: List[Dict[str, Any]]
    histogram_counts: np.ndarray
    histogram_edges: np.ndarray
    reference: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "reference": self.reference,
            "global": vars(self.overall),
            "bands": [{"lat_min": b["lat_min"], "lat_max": b["lat_max"], **vars(b["stats"])} for b in self.bands],
            "histogram": {"counts": self.histogram_counts.tolist(), "edges": self.histogram_edges.tolist()},
        }


def distribution_report(z: Union[NormalizedSeries, GridSeries, np.ndarray], n_bands: int = 6) -> DistributionReport:
    if isinstance(z, NormalizedSeries):
        values, reference = z.series.values, z.reference
    elif isinstance(z, GridSeries):
        values, reference = z.values, z.variable
    else:
        values, reference = np.asarray(z, dtype=np.float64), ""
    if values.size == 0:
        raise ContractError("distribution_report needs data")

    bands = []
    if values.ndim == 3:
        lats = latitudes(values.shape[1])
        edges = np.linspace(90.0, -90.0, n_bands + 1)
        for hi, lo in zip(edges[:-1], edges[1:]):
            rows = (lats <= hi) & (lats > lo) if lo > -90.0 else (lats <= hi) & (lats >= lo)
            if rows.any():
                bands.append({"lat_min": float(lo), "lat_max": float(hi),
                              "stats": DistributionStats.of(values[:, rows, :])})
    counts, hist_edges = np.histogram(values.reshape(-1), bins=HISTOGRAM_BINS)
    return DistributionReport(DistributionStats.of(values), bands, counts, hist_edges, reference)


# ---------------------------------------------------------------------------
# normalizers used by training and correction

@dataclass
class NormalizedDataset:
    """Normalized forecast/truth pairs [N, L, I, J] with their init dates"""
    forecast: np.ndarray
    truth: np.ndarray
    init_dates: np.ndarray

    def __len__(self):
        return int(self.forecast.shape[0])

    @property
    def leads(self) -> int:
        return int(self.forecast.shape[1])

    def subset(self, index) -> "NormalizedDataset":
        return NormalizedDataset(self.forecast[index], self.truth[index], self.init_dates[index])

    def truncated(self, leads: int) -> "NormalizedDataset":
        if not 1 <= leads <= self.leads:
            raise ConfigurationError("Cannot truncate to that many leads",
                                     {"leads": leads, "available": self.leads})
        return NormalizedDataset(self.forecast[:, :leads], self.truth[:, :leads], self.init_dates)

    def hold_out_last_year(self) -> Tuple["NormalizedDataset", Optional["NormalizedDataset"]]:
        years = years_of(self.init_dates)
        last = years.max()
        if np.all(years == last):
            return self, None
        return self.subset(np.flatnonzero(years != last)), self.subset(np.flatnonzero(years == last))


class _CaseNormalizer:
    mode: NormalizationMode

    def normalize_case(self, case: ForecastCase) -> Tuple[np.ndarray, np.ndarray]:
        mu, sigma = self._reference(case.valid_dates)
        return (case.forecast - mu) / sigma, (case.truth - mu) / sigma

    def normalize_forecast(self, forecast: np.ndarray, init_date) -> np.ndarray:
        mu, sigma = self._reference(self._valid(forecast, init_date))
        return (forecast - mu) / sigma

    def denormalize_forecast(self, z: np.ndarray, init_date) -> np.ndarray:
        mu, sigma = self._reference(self._valid(z, init_date))
        return z * sigma + mu

    def normalize_cases(self, cases: Sequence[ForecastCase]) -> NormalizedDataset:
        if not cases:
            raise ContractError("No cases to normalize")
        pairs = [self.normalize_case(c) for c in cases]
        return NormalizedDataset(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]),
                                 np.array([c.init_date for c in cases], dtype="datetime64[D]"))

    @staticmethod
    def _valid(fields: np.ndarray, init_date) -> np.ndarray:
        return as_day(init_date) + np.arange(1, fields.shape[0] + 1) * np.timedelta64(1, "D")

    def _reference(self, valid_dates: np.ndarray):
        raise NotImplementedError


class StaticNormalizer(_CaseNormalizer):
    """Single global mean/std fitted on training truth"""
    mode = NormalizationMode.STATIC

    def __init__(self, mu: float, sigma: float):
        self.mu = float(mu)
        self.sigma = float(sigma)

    @staticmethod
    def fit(train: GridSeries, sigma_floor: float = DEFAULT_SIGMA_FLOOR) -> "StaticNormalizer":
        _, mu, sigma = normalize_static(train, sigma_floor=sigma_floor)
        return StaticNormalizer(mu, sigma)

    @property
    def identifier(self) -> str:
        return f"static-{self.mu!r}-{self.sigma!r}"

    def _reference(self, valid_dates):
        return self.mu, self.sigma


class DynamicNormalizer(_CaseNormalizer):
    """Per-gridpoint climatology of each lead's verifying date"""
    mode = NormalizationMode.DYNAMIC

    def __init__(self, clim: Climatology):
        self.clim = clim

    @property
    def identifier(self) -> str:
        return self.clim.identifier

    def _reference(self, valid_dates):
        slots = climate_slots(valid_dates)
        return self.clim.mu[slots], self.clim.sigma[slots]


# ---------------------------------------------------------------------------
# persistence

def save_climatology(clim: Climatology, path) -> None:
    header = {"variable": clim.variable, "fit_years": list(clim.fit_years), "window": clim.window,
              "sigma_floor": clim.sigma_floor, "grid": list(clim.grid)}
    write_container(path, CLIMATOLOGY_MAGIC, header, [("mu", clim.mu), ("sigma", clim.sigma)])


def load_climatology(path) -> Climatology:
    header, blocks = read_container(path, CLIMATOLOGY_MAGIC)
    if set(blocks) != {"mu", "sigma"}:
        raise FormatError("Climatology container must hold mu and sigma blocks", 4)
    return Climatology(header["variable"], blocks["mu"], blocks["sigma"],
                       tuple(header["fit_years"]), int(header["window"]), float(header["sigma_floor"]))


def normalizer_record(normalizer: _CaseNormalizer) -> Dict[str, Any]:
    """JSON-able description stored next to a trained model"""
    if isinstance(normalizer, StaticNormalizer):
        return {"mode": "static", "mu": normalizer.mu, "sigma": normalizer.sigma}
    return {"mode": "dynamic", "climatology": normalizer.identifier}


def normalizer_from_record(record: Dict[str, Any], clim: Optional[Climatology] = None) -> _CaseNormalizer:
    mode = record.get("mode")
    if mode == "static":
        return StaticNormalizer(record["mu"], record["sigma"])
    if mode != "dynamic":
        raise ConfigurationError(f"Unknown normalization mode {mode!r}")
    if clim is None:
        raise ConfigurationError("Dynamic normalization needs the fitted climatology")
    if record.get("climatology") and record["climatology"] != clim.identifier:
        raise ContractError("Climatology differs from the one the model was trained with",
                            {"expected": record["climatology"], "given": clim.identifier})
    return DynamicNormalizer(clim)
