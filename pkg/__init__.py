import env_loader

from core import (
    Architecture,
    NormalizationMode,
    GridSeries,
    ForecastCase,
    DatasetManifest,
    SkillRecord,
    SynthConfig,
    ReSAConfig,
    TrainConfig,
    RunConfig,
)

from facade import BiasCorrectionToolkit, ExperimentRunner

from exceptions import (
    ResaError,
    ConfigurationError,
    DimensionError,
    ContractError,
    FormatError,
    NumericFault,
    AcceptanceError,
    InternalError,
)

from interfaces import (
    ITrainableCorrector,
    INormalizer,
    ICorrector,
    CorrectorHandle,
)

from model import ReSAConvLSTM
from monitoring import PerformanceMonitor

__version__ = "1.0.0"
__author__ = "Bias Correction Team"

# Main API exports
__all__ = [
    # Core classes
    "BiasCorrectionToolkit",
    "ExperimentRunner",
    "ReSAConvLSTM",
    "Architecture",
    "NormalizationMode",
    "GridSeries",
    "ForecastCase",
    "DatasetManifest",
    "SkillRecord",
    "SynthConfig",
    "ReSAConfig",
    "TrainConfig",
    "RunConfig",

    # Exceptions
    "ResaError",
    "ConfigurationError",
    "DimensionError",
    "ContractError",
    "FormatError",
    "NumericFault",
    "AcceptanceError",
    "InternalError",

    # Interfaces
    "ITrainableCorrector",
    "INormalizer",
    "ICorrector",
    "CorrectorHandle",

    # Utilities
    "PerformanceMonitor"
]
