"""
Core types and data classes for the bias-correction toolkit.
Contains the gridded value objects, calendar helpers and configuration classes.
"""

import os
import datetime as dt
from enum import Enum
from dataclasses import dataclass, field, asdict, fields
from typing import Dict, Any, Optional, List, Tuple, Sequence, Iterable

import numpy as np

from exceptions import ConfigurationError, ContractError, DimensionError

DECADAL_TEST_YEARS = (1981, 1991, 2001, 2011, 2021)
EPOCH = np.datetime64("1970-01-01", "D")
DAY = np.timedelta64(1, "D")
LEAP_SLOT = 365  # zero-based slot of Feb 29
N_SLOTS = 366
PUBLISHED_PARAMETERS = 10_648_834


class Role(Enum):
    """Role of a gridded file in a dataset manifest"""
    FORECAST = "forecast"
    TRUTH = "truth"


class Padding(Enum):
    SAME = "same"
    VALID = "valid"


class NormalizationMode(Enum):
    """Static z-score versus per-gridpoint, per-day-of-year climatology"""
    STATIC = "static"
    DYNAMIC = "dynamic"


class Architecture(Enum):
    """Corrector architectures known to the experiment harness"""
    CONVLSTM = "convlstm"
    SA_CONVLSTM = "sa-convlstm"
    RESIDUAL_CONVLSTM = "residual-convlstm"
    RESA = "resa"
    ACAUSAL_BASELINE = "acausal-baseline"


# ---------------------------------------------------------------------------
# calendar helpers

def as_day(value) -> np.datetime64:
    """Coerce a date, ISO string or datetime64 to a day-resolution datetime64"""
    if isinstance(value, np.datetime64):
        return value.astype("datetime64[D]")
    if isinstance(value, dt.datetime):
        value = value.date()
    return np.datetime64(value, "D")


def as_days(values: Iterable) -> np.ndarray:
    return np.array([as_day(v) for v in values], dtype="datetime64[D]")


def to_date(value: np.datetime64) -> dt.date:
    return as_day(value).astype(dt.date)


def year_of(value) -> int:
    return int(str(as_day(value))[:4])


def years_of(days: np.ndarray) -> np.ndarray:
    return days.astype("datetime64[Y]").astype(np.int64) + 1970


def is_month_start(value) -> bool:
    return str(as_day(value))[8:10] == "01"


def climate_slots(days: np.ndarray) -> np.ndarray:
    """Zero-based day-of-year slot per date.

    Regular days use their non-leap calendar position (0..364) in every year,
    so Mar 1 is always slot 59; Feb 29 maps to the extra slot 365.
    """
    days = np.asarray(days, dtype="datetime64[D]")
    years = days.astype("datetime64[Y]")
    doy = (days - years.astype("datetime64[D]")).astype(np.int64)
    y = years.astype(np.int64) + 1970
    leap = (y % 4 == 0) & ((y % 100 != 0) | (y % 400 == 0))
    slots = doy.copy()
    slots[leap & (doy > 59)] -= 1
    slots[leap & (doy == 59)] = LEAP_SLOT
    return slots


def latitudes(n_lat: int) -> np.ndarray:
    """Cell-centre latitudes in degrees, north to south"""
    return 90.0 - (np.arange(n_lat) + 0.5) * 180.0 / n_lat


def longitudes(n_lon: int) -> np.ndarray:
    return (np.arange(n_lon) + 0.5) * 360.0 / n_lon


# ---------------------------------------------------------------------------
# gridded value objects

@dataclass
class GridSeries:
    """Time-ordered stack of lat/lon fields of one variable in physical units"""
    variable: str
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times).reshape(-1)
        # daily series use day resolution; sub-daily input keeps its own unit
        if not np.issubdtype(times.dtype, np.datetime64):
            times = as_days(times)
        self.times = times
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise DimensionError("GridSeries values must be [T, I, J]",
                                 {"shape": self.values.shape})
        if self.values.shape[0] != self.times.size:
            raise DimensionError("GridSeries has a different number of dates and fields",
                                 {"dates": self.times.size, "fields": self.values.shape[0]})
        if self.times.size == 0 or min(self.values.shape[1:]) < 1:
            raise ContractError("GridSeries must contain at least one non-empty field")
        if self.times.size > 1 and not np.all(self.times[1:] > self.times[:-1]):
            raise ContractError("GridSeries dates must be strictly increasing",
                                {"variable": self.variable})
        if not np.all(np.isfinite(self.values)):
            raise ContractError("GridSeries contains NaN or Inf", {"variable": self.variable})

    @property
    def n_times(self) -> int:
        return int(self.times.size)

    @property
    def grid(self) -> Tuple[int, int]:
        return int(self.values.shape[1]), int(self.values.shape[2])

    @property
    def years(self) -> List[int]:
        return sorted(set(int(y) for y in years_of(self.times)))

    def dates(self) -> List[dt.date]:
        return [to_date(t) for t in self.times]

    def index_of(self, day) -> int:
        """Position of a date in the series, -1 when absent"""
        day = as_day(day)
        pos = int(np.searchsorted(self.times, day))
        if pos < self.times.size and self.times[pos] == day:
            return pos
        return -1

    def select_years(self, years: Iterable[int]) -> "GridSeries":
        mask = np.isin(years_of(self.times), list(years))
        if not mask.any():
            raise ContractError("No dates left after year selection",
                                {"variable": self.variable, "years": sorted(years)})
        return GridSeries(self.variable, self.times[mask], self.values[mask])

    @staticmethod
    def concat(parts: Sequence["GridSeries"]) -> "GridSeries":
        """Join series of one variable; the result is sorted by date"""
        if not parts:
            raise ContractError("Nothing to concatenate")
        variable, grid = parts[0].variable, parts[0].grid
        for part in parts[1:]:
            if part.variable != variable or part.grid != grid:
                raise ContractError("Cannot concatenate series of different variables or grids")
        times = np.concatenate([p.times for p in parts])
        values = np.concatenate([p.values for p in parts])
        order = np.argsort(times, kind="stable")
        return GridSeries(variable, times[order], values[order])


@dataclass
class ForecastCase:
    """One initialization: forecast fields at leads 1..L and verifying analyses"""
    init_date: np.datetime64
    forecast: np.ndarray
    truth: np.ndarray

    def __post_init__(self):
        self.init_date = as_day(self.init_date)
        self.forecast = np.asarray(self.forecast, dtype=np.float64)
        self.truth = np.asarray(self.truth, dtype=np.float64)
        if self.forecast.ndim != 3 or self.forecast.shape != self.truth.shape:
            raise DimensionError("Forecast and truth must both be [L, I, J] of equal shape",
                                 {"forecast": self.forecast.shape, "truth": self.truth.shape})

    @property
    def leads(self) -> int:
        return int(self.forecast.shape[0])

    @property
    def grid(self) -> Tuple[int, int]:
        return int(self.forecast.shape[1]), int(self.forecast.shape[2])

    @property
    def valid_dates(self) -> np.ndarray:
        """Verifying date of each lead: init + t days"""
        return self.init_date + np.arange(1, self.leads + 1) * DAY

    def truncated(self, leads: int) -> "ForecastCase":
        return ForecastCase(self.init_date, self.forecast[:leads], self.truth[:leads])


@dataclass(frozen=True)
class ManifestEntry:
    """One GRIDTS file listed in a dataset manifest"""
    path: str
    variable: str
    role: Role
    years: Tuple[int, ...]
    lead: Optional[int] = None

    def __post_init__(self):
        if self.role == Role.FORECAST and (self.lead is None or self.lead < 1):
            raise ConfigurationError("Forecast manifest entries need a lead >= 1",
                                     {"path": self.path})

    def to_dict(self) -> Dict[str, Any]:
        data = {"path": self.path, "variable": self.variable,
                "role": self.role.value, "years": list(self.years)}
        if self.lead is not None:
            data["lead"] = self.lead
        return data

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "ManifestEntry":
        unknown = set(data) - {"path", "variable", "role", "years", "lead"}
        if unknown:
            raise ConfigurationError(f"Unknown manifest entry keys: {sorted(unknown)}")
        try:
            return ManifestEntry(
                path=str(data["path"]),
                variable=str(data["variable"]),
                role=Role(data["role"]),
                years=tuple(int(y) for y in data["years"]),
                lead=int(data["lead"]) if data.get("lead") is not None else None,
            )
        except (KeyError, ValueError) as e:
            raise ConfigurationError(f"Invalid manifest entry: {e}", {"entry": data})


@dataclass
class DatasetManifest:
    """Files of a dataset plus the held-out test years"""
    files: List[ManifestEntry]
    test_years: Tuple[int, ...] = DECADAL_TEST_YEARS
    base_dir: str = "."

    @property
    def years(self) -> List[int]:
        return sorted(set(y for entry in self.files for y in entry.years))

    @property
    def variables(self) -> List[str]:
        return sorted(set(entry.variable for entry in self.files))

    def to_dict(self) -> Dict[str, Any]:
        return {"files": [e.to_dict() for e in self.files], "test_years": list(self.test_years)}


@dataclass(frozen=True)
class SkillRecord:
    """Per-lead verification scores of one model on one variable"""
    model: str
    variable: str
    lead_days: int
    rmse: float
    acc: float
    n_cases: int

    def __post_init__(self):
        if self.rmse < 0:
            raise ValueError("rmse must be nonnegative")
        if not -1.0 - 1e-12 <= self.acc <= 1.0 + 1e-12:
            raise ValueError("acc must be between -1 and 1")
        if self.n_cases < 1:
            raise ValueError("n_cases must be at least 1")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# ---------------------------------------------------------------------------
# configuration

def _env_int(name: str, default: int) -> int:
    return int(os.environ.get(name, default))


def _env_float(name: str, default: float) -> float:
    return float(os.environ.get(name, default))


def _env_tuple(name: str, default: str) -> Tuple[int, ...]:
    raw = os.environ.get(name, default).strip()
    return tuple(int(v) for v in raw.split(",") if v.strip())


def parse_years(raw: str) -> Tuple[int, ...]:
    """Years from "1981-2021" or "1990,1991" style lists"""
    years = []
    try:
        for part in raw.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = part.split("-")
                years.extend(range(int(lo), int(hi) + 1))
            elif part:
                years.append(int(part))
    except ValueError:
        raise ConfigurationError(f"Cannot parse years from {raw!r}")
    if not years:
        raise ConfigurationError(f"No years in {raw!r}")
    return tuple(years)


class _ConfigMixin:
    """Dict round-trip shared by the configuration dataclasses"""

    def to_dict(self) -> Dict[str, Any]:
        data = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Enum):
                value = value.value
            elif isinstance(value, tuple):
                value = list(value)
            data[f.name] = value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"Unknown {cls.__name__} keys: {sorted(unknown)}")
        values = {k: (tuple(v) if isinstance(v, list) else v) for k, v in data.items()}
        return cls(**values)

    def updated(self, **overrides):
        data = self.to_dict()
        data.update(overrides)
        return type(self).from_dict(data)


@dataclass
class SynthConfig(_ConfigMixin):
    """Synthetic truth/forecast generator settings; None picks the variable preset"""
    variable: str = "T2m"
    grid_lat: int = None
    grid_lon: int = None
    years: Tuple[int, ...] = None
    leads: int = None
    init_stride_days: int = None
    bias_amplitude: Optional[float] = None
    bias_growth: float = 0.1
    noise_std: Optional[float] = None
    noise_growth: float = 0.1
    weather_std: Optional[float] = None
    seasonal_amplitude: Optional[float] = None
    polar_amplification: float = 2.0
    red_noise_phi: float = 0.8
    external: bool = False

    def __post_init__(self):
        if self.grid_lat is None:
            self.grid_lat = _env_int('RESA_GRID_LAT', 24)
        if self.grid_lon is None:
            self.grid_lon = _env_int('RESA_GRID_LON', 48)
        if self.years is None:
            self.years = parse_years(os.environ.get('RESA_SYNTH_YEARS', '1981-2021'))
        if self.leads is None:
            self.leads = _env_int('RESA_LEADS', 7)
        if self.init_stride_days is None:
            self.init_stride_days = _env_int('RESA_INIT_STRIDE', 14)
        self.years = tuple(sorted(int(y) for y in self.years))

        if self.grid_lat < 1 or self.grid_lon < 1:
            raise ConfigurationError("Grid dimensions must be positive",
                                     {"grid": (self.grid_lat, self.grid_lon)})
        if self.leads < 1:
            raise ConfigurationError("leads must be at least 1")
        if not self.years:
            raise ConfigurationError("At least one year is required")
        if self.init_stride_days < 1:
            raise ConfigurationError("init_stride_days must be at least 1")
        if not 0.0 <= self.red_noise_phi < 1.0:
            raise ConfigurationError("red_noise_phi must be in [0, 1)")
        if self.polar_amplification <= 0:
            raise ConfigurationError("polar_amplification must be positive")
        for name in ("noise_std", "weather_std", "bias_amplitude", "seasonal_amplitude"):
            value = getattr(self, name)
            if name != "bias_amplitude" and value is not None and value < 0:
                raise ConfigurationError(f"{name} must be nonnegative")


@dataclass
class ReSAConfig(_ConfigMixin):
    """Architecture of the recurrent corrector; parameter count follows from it"""
    in_channels: int = 1
    out_channels: int = 1
    hidden_channels: Tuple[int, ...] = None
    kernel_size: int = None
    attention_reduction: int = None
    grid_lat: int = None
    grid_lon: int = None
    lon_wrap: bool = None
    use_attention: bool = True
    use_residual: bool = True
    norm_before_attention: bool = False
    aux_channels: str = "latlon"
    attention_cap: int = None
    attention_tile: Optional[Tuple[int, int]] = None
    seed: int = None

    def __post_init__(self):
        if self.hidden_channels is None:
            self.hidden_channels = _env_tuple('RESA_HIDDEN', '32,32')
        if self.kernel_size is None:
            self.kernel_size = _env_int('RESA_KERNEL', 3)
        if self.attention_reduction is None:
            self.attention_reduction = _env_int('RESA_ATTENTION_REDUCTION', 4)
        if self.grid_lat is None:
            self.grid_lat = _env_int('RESA_GRID_LAT', 24)
        if self.grid_lon is None:
            self.grid_lon = _env_int('RESA_GRID_LON', 48)
        if self.lon_wrap is None:
            self.lon_wrap = os.environ.get('RESA_LON_WRAP', 'false').lower() == 'true'
        if self.attention_cap is None:
            self.attention_cap = _env_int('RESA_ATTENTION_CAP', 4096)
        if self.seed is None:
            self.seed = _env_int('RESA_SEED', 0)
        self.hidden_channels = tuple(int(c) for c in self.hidden_channels)
        if self.attention_tile is not None:
            self.attention_tile = tuple(int(t) for t in self.attention_tile)

        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError("Channel counts must be positive")
        if any(c < 1 for c in self.hidden_channels):
            raise ConfigurationError("Hidden channel counts must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError("kernel_size must be odd for same padding",
                                     {"kernel_size": self.kernel_size})
        if self.attention_reduction < 1:
            raise ConfigurationError("attention_reduction must be at least 1")
        if self.use_attention and any(c // self.attention_reduction < 1 for c in self.hidden_channels):
            raise ConfigurationError("attention_reduction leaves no query channels")
        if self.aux_channels not in ("none", "latlon"):
            raise ConfigurationError("aux_channels must be 'none' or 'latlon'")
        if self.grid_lat < 1 or self.grid_lon < 1:
            raise ConfigurationError("Grid dimensions must be positive")
        if self.attention_tile is not None:
            ti, tj = self.attention_tile
            if ti < 1 or tj < 1 or self.grid_lat % ti or self.grid_lon % tj:
                raise ConfigurationError("attention_tile must evenly divide the grid",
                                         {"tile": self.attention_tile})

    @property
    def n_aux(self) -> int:
        return 3 if self.aux_channels == "latlon" else 0

    @property
    def total_in_channels(self) -> int:
        return self.in_channels + self.n_aux

    @property
    def architecture(self) -> Architecture:
        return {
            (True, True): Architecture.RESA,
            (True, False): Architecture.SA_CONVLSTM,
            (False, True): Architecture.RESIDUAL_CONVLSTM,
            (False, False): Architecture.CONVLSTM,
        }[(self.use_attention, self.use_residual)]

    def for_architecture(self, architecture: Architecture) -> "ReSAConfig":
        flags = {
            Architecture.RESA: (True, True),
            Architecture.SA_CONVLSTM: (True, False),
            Architecture.RESIDUAL_CONVLSTM: (False, True),
            Architecture.CONVLSTM: (False, False),
        }
        if architecture not in flags:
            raise ConfigurationError(f"{architecture.value} is not a ConvLSTM variant")
        attention, residual = flags[architecture]
        return self.updated(use_attention=attention, use_residual=residual)

    @staticmethod
    def reference_layout() -> "ReSAConfig":
        """Full-resolution reference layout used only for parameter accounting"""
        return ReSAConfig(hidden_channels=(192, 192, 192, 192), kernel_size=3,
                          attention_reduction=4, grid_lat=180, grid_lon=360,
                          aux_channels="none", lon_wrap=True, attention_tile=(18, 36))


@dataclass
class TrainConfig(_ConfigMixin):
    """Adam/MSE training settings"""
    epochs: int = None
    batch_size: int = None
    learning_rate: float = None
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = None
    patience: int = None
    freeze_spec: Tuple[str, ...] = ()
    hold_out_last_year: bool = True

    def __post_init__(self):
        if self.epochs is None:
            self.epochs = _env_int('RESA_EPOCHS', 100)
        if self.batch_size is None:
            self.batch_size = _env_int('RESA_BATCH_SIZE', 4)
        if self.learning_rate is None:
            self.learning_rate = _env_float('RESA_LEARNING_RATE', 1e-3)
        if self.seed is None:
            self.seed = _env_int('RESA_SEED', 0)
        if self.patience is None:
            self.patience = _env_int('RESA_PATIENCE', 10)
        self.freeze_spec = tuple(self.freeze_spec)

        if self.epochs < 0:
            raise ConfigurationError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("Adam betas must be in [0, 1)")
        if not self.epsilon > 0:
            raise ConfigurationError("Adam epsilon must be positive")
        if self.patience < 1:
            raise ConfigurationError("patience must be at least 1")


@dataclass
class RunConfig(_ConfigMixin):
    """Resolved command-line run: paths, seed, overrides and flags"""
    subcommand: str = ""
    version: int = 1
    manifest: Optional[str] = None
    checkpoint: Optional[str] = None
    climatology: Optional[str] = None
    output_dir: str = "."
    seed: int = None
    threads: int = None
    normalization: str = "dynamic"
    area_weighted: bool = None
    smoothing_window: int = None
    sigma_floor: float = None
    train: Dict[str, Any] = field(default_factory=dict)
    model: Dict[str, Any] = field(default_factory=dict)
    synth: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.seed is None:
            self.seed = _env_int('RESA_SEED', 0)
        if self.threads is None:
            self.threads = _env_int('RESA_THREADS', 1)
        if self.area_weighted is None:
            self.area_weighted = os.environ.get('RESA_AREA_WEIGHTED', 'false').lower() == 'true'
        if self.smoothing_window is None:
            self.smoothing_window = _env_int('RESA_SMOOTHING_WINDOW', 31)
        if self.sigma_floor is None:
            self.sigma_floor = _env_float('RESA_SIGMA_FLOOR', 1e-3)

        if self.version != 1:
            raise ConfigurationError(f"Unsupported config version {self.version}")
        if self.threads < 1:
            raise ConfigurationError("threads must be at least 1")
        if self.normalization not in ("static", "dynamic"):
            raise ConfigurationError("normalization must be 'static' or 'dynamic'")
        if self.smoothing_window < 1 or self.smoothing_window % 2 == 0:
            raise ConfigurationError("smoothing_window must be a positive odd number")
        if not self.sigma_floor > 0:
            raise ConfigurationError("sigma_floor must be positive")
        # Section overrides are validated against their own dataclasses.
        TrainConfig.from_dict(self.train)
        ReSAConfig.from_dict(self.model)
        SynthConfig.from_dict(self.synth)

    def train_config(self) -> TrainConfig:
        data = {"seed": self.seed}
        data.update(self.train)
        return TrainConfig.from_dict(data)

    def model_config(self, **extra) -> ReSAConfig:
        data = {"seed": self.seed}
        data.update(extra)
        data.update(self.model)
        return ReSAConfig.from_dict(data)

    def synth_config(self, **extra) -> SynthConfig:
        data = dict(extra)
        data.update(self.synth)
        return SynthConfig.from_dict(data)
