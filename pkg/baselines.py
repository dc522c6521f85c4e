"""
Reference correctors: identity passthrough, per-gridpoint linear regression
and a deliberately acausal network that sees all leads at once.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from checkpoint import BASELINE_MAGIC, read_container, write_container
from climnorm import NormalizedDataset
from core import ForecastCase, ReSAConfig, TrainConfig
from exceptions import ContractError, DimensionError, FormatError
from interfaces import CorrectorHandle, INormalizer
from model import aux_fields
from tensor import Tensor, add, concat, conv2d, tanh
from train import train

logger = logging.getLogger(__name__)

ACAUSAL_ID = "acausal-baseline"


@dataclass
class GridwiseLinearParams:
    """Per-lead, per-gridpoint affine map truth ~ slope * forecast + intercept"""
    slope: np.ndarray
    intercept: np.ndarray

    def __post_init__(self):
        self.slope = np.asarray(self.slope, dtype=np.float64)
        self.intercept = np.asarray(self.intercept, dtype=np.float64)
        if self.slope.ndim != 3 or self.slope.shape != self.intercept.shape:
            raise DimensionError("Linear coefficients must both be [L, I, J]",
                                 {"slope": self.slope.shape, "intercept": self.intercept.shape})
        if not (np.all(np.isfinite(self.slope)) and np.all(np.isfinite(self.intercept))):
            raise ContractError("Linear coefficients are not finite")

    @property
    def leads(self) -> int:
        return int(self.slope.shape[0])


def fit_gridwise_linear(cases: Sequence[ForecastCase]) -> GridwiseLinearParams:
    """Ordinary least squares of truth on forecast at every gridpoint and lead.

    Points whose forecast never varies fall back to slope 1 and the mean bias.
    """
    if not cases:
        raise ContractError("Cannot fit a linear baseline on an empty training set")
    if len(cases) < 2:
        raise ContractError("The linear baseline needs at least two training cases per lead")
    x = np.stack([c.forecast for c in cases])
    y = np.stack([c.truth for c in cases])
    mx, my = x.mean(axis=0), y.mean(axis=0)
    dx = x - mx
    var = np.sum(dx * dx, axis=0)
    cov = np.sum(dx * (y - my), axis=0)
    degenerate = var <= 1e-12 * x.shape[0] * (1.0 + mx * mx)
    slope = np.where(degenerate, 1.0, cov / np.where(degenerate, 1.0, var))
    intercept = np.where(degenerate, my - mx, my - slope * mx)
    if degenerate.any():
        logger.warning("%d gridpoint-leads without forecast variance use the mean-bias fallback",
                       int(degenerate.sum()))
    return GridwiseLinearParams(slope, intercept)


def apply_gridwise_linear(params: GridwiseLinearParams, forecast: np.ndarray) -> np.ndarray:
    forecast = np.asarray(forecast, dtype=np.float64)
    leads = forecast.shape[0]
    if forecast.ndim != 3 or leads > params.leads or forecast.shape[1:] != params.slope.shape[1:]:
        raise DimensionError("Forecast does not fit the linear coefficients",
                             {"forecast": forecast.shape, "coefficients": params.slope.shape})
    return params.slope[:leads] * forecast + params.intercept[:leads]


def gridwise_handle(params: GridwiseLinearParams) -> CorrectorHandle:
    return CorrectorHandle("gridwise-linear", lambda seq: apply_gridwise_linear(params, seq), causal_claim=True)


def raw_passthrough() -> CorrectorHandle:
    """The uncorrected forecast"""
    return CorrectorHandle("raw", lambda seq: np.array(seq, dtype=np.float64, copy=True), causal_claim=True)


class LeadStackedConvNet:
    """Convolutional corrector that stacks all L leads as input channels.

    Every output lead mixes information from every input lead, so once
    trained it leaks later leads into earlier ones.
    """

    def __init__(self, config: ReSAConfig, horizon: int, hidden: Optional[int] = None):
        if horizon < 1:
            raise DimensionError("horizon must be at least 1")
        self.config = config
        self.horizon = horizon
        self.hidden = hidden or (config.hidden_channels[0] if config.hidden_channels else 16)
        rng = np.random.default_rng(config.seed)
        k = config.kernel_size
        cin = horizon + config.n_aux

        def init(shape, fan_in, name):
            bound = 1.0 / np.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)

        self.conv1_weight = init((self.hidden, cin, k, k), cin * k * k, "conv1.weight")
        self.conv1_bias = Tensor(np.zeros(self.hidden), requires_grad=True, name="conv1.bias")
        self.conv2_weight = init((self.hidden, self.hidden, k, k), self.hidden * k * k, "conv2.weight")
        self.conv2_bias = Tensor(np.zeros(self.hidden), requires_grad=True, name="conv2.bias")
        self.head_weight = Tensor(np.zeros((horizon, self.hidden, 1, 1)), requires_grad=True, name="head.weight")
        self.head_bias = Tensor(np.zeros(horizon), requires_grad=True, name="head.bias")
        self._aux = aux_fields(config)
        self.clim_reference = ""
        self.normalization = "dynamic"
        self.metadata: Dict[str, Any] = {}

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((t.name, t) for t in (self.conv1_weight, self.conv1_bias, self.conv2_weight,
                                                 self.conv2_bias, self.head_weight, self.head_bias))

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def parameter_groups(self) -> Dict[str, List[Tensor]]:
        return {"conv": self.parameters()[:4], "head": self.parameters()[4:]}

    def forward(self, z: Tensor, training: bool = False) -> Tensor:
        if z.ndim != 4 or z.shape[1] != self.horizon or z.shape[2:] != (self.config.grid_lat, self.config.grid_lon):
            raise DimensionError("Lead-stacked baseline expects [N, horizon, I, J]",
                                 {"shape": z.shape, "horizon": self.horizon})
        x = z
        if self.config.n_aux:
            x = concat([z, Tensor(np.broadcast_to(self._aux, (z.shape[0],) + self._aux.shape))], axis=1)
        wrap = self.config.lon_wrap
        h = tanh(conv2d(x, self.conv1_weight, self.conv1_bias, padding="same", wrap_lon=wrap))
        h = tanh(conv2d(h, self.conv2_weight, self.conv2_bias, padding="same", wrap_lon=wrap))
        return add(z, conv2d(h, self.head_weight, self.head_bias, padding="same"))

    def predict(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 3
        out = self.forward(Tensor(z[None] if single else z)).data
        return out[0] if single else out


def build_acausal_baseline(config: ReSAConfig, horizon: int, dataset: Optional[NormalizedDataset] = None,
                           train_config: Optional[TrainConfig] = None,
                           normalizer: Optional[INormalizer] = None) -> CorrectorHandle:
    """Lead-stacked network, trained with the shared loop when data is given"""
    net = LeadStackedConvNet(config, horizon)
    if dataset is not None:
        data = dataset.truncated(horizon) if dataset.leads != horizon else dataset
        result = train(net, data, train_config or TrainConfig(seed=config.seed),
                       normalizer=normalizer, run_id=ACAUSAL_ID)
        logger.info("acausal baseline trained for %d epochs (best %d)", result.epochs_run, result.best_epoch)
    return CorrectorHandle(ACAUSAL_ID, net.predict, causal_claim=False, model=net)


# ---------------------------------------------------------------------------
# persistence

def save_baseline(baseline: Union[GridwiseLinearParams, LeadStackedConvNet], path) -> None:
    if isinstance(baseline, GridwiseLinearParams):
        header = {"kind": "gridwise-linear"}
        blocks = [("slope", baseline.slope), ("intercept", baseline.intercept)]
    else:
        header = {"kind": "lead-stacked-conv", "config": baseline.config.to_dict(),
                  "horizon": baseline.horizon, "hidden": baseline.hidden,
                  "clim_reference": baseline.clim_reference, "normalization": baseline.normalization}
        blocks = [(name, t.data) for name, t in baseline.named_parameters().items()]
    write_container(path, BASELINE_MAGIC, header, blocks)


def load_baseline(path) -> Union[GridwiseLinearParams, LeadStackedConvNet]:
    header, blocks = read_container(path, BASELINE_MAGIC)
    kind = header.get("kind")
    if kind == "gridwise-linear":
        return GridwiseLinearParams(blocks["slope"], blocks["intercept"])
    if kind == "lead-stacked-conv":
        net = LeadStackedConvNet(ReSAConfig.from_dict(header["config"]), int(header["horizon"]),
                                 int(header["hidden"]))
        named = net.named_parameters()
        if list(named) != list(blocks):
            raise FormatError("Baseline blocks do not match the lead-stacked layout", 8)
        for name, t in named.items():
            t.assign(blocks[name])
        net.clim_reference = header.get("clim_reference", "")
        net.normalization = header.get("normalization", "dynamic")
        return net
    raise FormatError(f"Unknown baseline kind {kind!r}", 8)
