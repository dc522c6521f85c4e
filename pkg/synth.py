"""
Synthetic desk-scale truth and forecast generator.

Truth is a meridional base profile plus a hemispheric seasonal cycle whose
amplitude grows toward the poles, plus spatially smooth red-noise weather.
Forecasts add a regional systematic bias that grows with lead time and
white noise. Everything is a pure function of (config, seed).
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from core import DAY, ForecastCase, GridSeries, SynthConfig, as_day, latitudes, longitudes
from exceptions import ConfigurationError

logger = logging.getLogger(__name__)

BLOB_WIDTH_DEG = 15.0


@dataclass(frozen=True)
class VariablePreset:
    """Physical character of one synthetic variable"""
    units: str
    seasonal_amplitude: float
    weather_std: float
    bias_amplitude: float
    noise_std: float

    def base(self, lat_rad: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class _T2m(VariablePreset):
    def base(self, lat_rad):
        # warm equator, cold poles
        return 250.0 + 50.0 * np.cos(lat_rad) ** 2


class _U10(VariablePreset):
    def base(self, lat_rad):
        # easterly trades, mid-latitude westerlies
        return -5.0 + 11.0 * np.sin(2.0 * lat_rad) ** 2


class _V10(VariablePreset):
    def base(self, lat_rad):
        return 2.0 * np.sin(2.0 * lat_rad)


class _SLP(VariablePreset):
    def base(self, lat_rad):
        return 101325.0 + 1200.0 * np.cos(4.0 * lat_rad)


PRESETS: Dict[str, VariablePreset] = {
    "T2m": _T2m("K", seasonal_amplitude=6.0, weather_std=1.5, bias_amplitude=2.0, noise_std=0.5),
    "U10": _U10("m/s", seasonal_amplitude=2.0, weather_std=2.0, bias_amplitude=1.5, noise_std=0.5),
    "V10": _V10("m/s", seasonal_amplitude=1.0, weather_std=1.5, bias_amplitude=1.0, noise_std=0.4),
    "SLP": _SLP("Pa", seasonal_amplitude=300.0, weather_std=600.0, bias_amplitude=200.0, noise_std=80.0),
}

# (lat, lon, sign) of the regional bias blobs
_OPERATIONAL_BLOBS = ((10.0, 20.0, 1.0), (40.0, 110.0, -1.0), (45.0, 260.0, -1.0), (-20.0, 300.0, -0.8))
_EXTERNAL_BLOBS = ((-10.0, 200.0, 1.0), (50.0, 30.0, -1.0), (20.0, 100.0, 0.6))


def preset(variable: str) -> VariablePreset:
    if variable not in PRESETS:
        raise ConfigurationError(f"No synthetic preset for variable {variable!r}",
                                 {"known": sorted(PRESETS)})
    return PRESETS[variable]


def resolved(config: SynthConfig) -> SynthConfig:
    """Fill preset-dependent fields left as None"""
    p = preset(config.variable)
    overrides = {}
    for name in ("seasonal_amplitude", "weather_std", "bias_amplitude", "noise_std"):
        if getattr(config, name) is None:
            overrides[name] = getattr(p, name)
    return config.updated(**overrides) if overrides else config


def _grid_radians(config: SynthConfig) -> Tuple[np.ndarray, np.ndarray]:
    lat = np.deg2rad(latitudes(config.grid_lat))[:, None] * np.ones((1, config.grid_lon))
    lon = np.deg2rad(longitudes(config.grid_lon))[None, :] * np.ones((config.grid_lat, 1))
    return lat, lon


def polar_factor(config: SynthConfig) -> np.ndarray:
    """[I, 1] amplitude multiplier: 1 at the equator, polar_amplification at the poles"""
    lat = np.deg2rad(latitudes(config.grid_lat))[:, None]
    return 1.0 + (config.polar_amplification - 1.0) * np.abs(np.sin(lat))


def bias_pattern(config: SynthConfig) -> np.ndarray:
    """[I, J] regional bias shape with flat cores of exactly +-1"""
    lat = latitudes(config.grid_lat)[:, None]
    lon = longitudes(config.grid_lon)[None, :]
    pattern = np.zeros((config.grid_lat, config.grid_lon))
    for clat, clon, sign in (_EXTERNAL_BLOBS if config.external else _OPERATIONAL_BLOBS):
        dlon = (lon - clon + 180.0) % 360.0 - 180.0
        dist2 = (lat - clat) ** 2 + dlon ** 2
        blob = np.minimum(1.0, 2.0 * np.exp(-dist2 / (2.0 * BLOB_WIDTH_DEG ** 2)))
        blob[dist2 > (3.0 * BLOB_WIDTH_DEG) ** 2] = 0.0
        pattern += sign * blob
    return pattern


def bias_region(config: SynthConfig) -> np.ndarray:
    """Boolean mask of the warm-bias core where the pattern is exactly 1"""
    return bias_pattern(config) == 1.0


def lead_growth(config: SynthConfig, lead: int) -> float:
    """g(t): monotone bias growth with lead, g(1) = 1"""
    return 1.0 + config.bias_growth * (lead - 1)


def analytic_mean(config: SynthConfig, days: np.ndarray) -> np.ndarray:
    """Noise-free truth (base + seasonal cycle) at the given dates, [T, I, J]"""
    config = resolved(config)
    p = preset(config.variable)
    lat, _ = _grid_radians(config)
    days = np.asarray(days, dtype="datetime64[D]")
    doy = (days - days.astype("datetime64[Y]").astype("datetime64[D]")).astype(np.float64)
    phase = np.sin(2.0 * np.pi * (doy - 105.0) / 365.25)[:, None, None]
    amplitude = config.seasonal_amplitude * polar_factor(config) * np.sign(lat)
    return p.base(lat)[None] + amplitude[None] * phase


def _red_noise(config: SynthConfig, n_times: int, rng: np.random.Generator) -> np.ndarray:
    shape = (config.grid_lat, config.grid_lon)
    modes = ("nearest", "nearest", "wrap")
    eps = gaussian_filter(rng.standard_normal((n_times,) + shape), sigma=(0.0, 1.0, 1.0), mode=modes)
    delta = np.zeros((1,) + shape)
    delta[0, shape[0] // 2, shape[1] // 2] = 1.0
    kernel = gaussian_filter(delta, sigma=(0.0, 1.0, 1.0), mode=modes)
    eps /= np.sqrt(np.sum(kernel ** 2))

    phi = config.red_noise_phi
    innovation = np.sqrt(1.0 - phi ** 2)
    weather = np.empty_like(eps)
    weather[0] = eps[0]
    for t in range(1, n_times):
        weather[t] = phi * weather[t - 1] + innovation * eps[t]
    return weather


def init_dates(config: SynthConfig) -> np.ndarray:
    """Every ``init_stride_days``-th day of the configured years plus every month start"""
    start = as_day(f"{config.years[0]}-01-01")
    stop = as_day(f"{config.years[-1] + 1}-01-01")
    days = np.arange(start, stop, DAY)
    offsets = (days - start).astype(np.int64)
    month_start = days.astype("datetime64[M]").astype("datetime64[D]") == days
    years = days.astype("datetime64[Y]").astype(np.int64) + 1970
    keep = ((offsets % config.init_stride_days == 0) | month_start) & np.isin(years, config.years)
    return days[keep]


def synth_generate(config: SynthConfig, seed: int) -> Tuple[GridSeries, List[ForecastCase]]:
    """Generate a truth series and forecast cases at leads 1..L"""
    config = resolved(config)
    rng = np.random.default_rng(seed)

    start = as_day(f"{config.years[0]}-01-01")
    stop = as_day(f"{config.years[-1] + 1}-01-01") + config.leads * DAY
    days = np.arange(start, stop, DAY)
    weather = _red_noise(config, days.size, rng)
    truth_values = analytic_mean(config, days) + config.weather_std * polar_factor(config)[None] * weather
    truth = GridSeries(config.variable, days, truth_values)

    pattern = bias_pattern(config)
    cases = []
    for init in init_dates(config):
        first = int((init - start).astype(np.int64)) + 1
        window = truth_values[first:first + config.leads]
        forecast = np.empty_like(window)
        for t in range(config.leads):
            lead = t + 1
            noise = config.noise_std * (1.0 + config.noise_growth * t)
            forecast[t] = (window[t]
                           + config.bias_amplitude * lead_growth(config, lead) * pattern
                           + noise * rng.standard_normal(pattern.shape))
        cases.append(ForecastCase(init, forecast, window))
    logger.info("generated %s: %d days of truth, %d forecast cases on a %dx%d grid",
                config.variable, days.size, len(cases), config.grid_lat, config.grid_lon)
    return truth, cases
