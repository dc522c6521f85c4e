"""
Residual self-attention ConvLSTM corrector.

Stacked ConvLSTM layers scan the forecast leads in order. At every lead each
layer's hidden state is refined by spatial self-attention (within that lead
only) and batch normalization before feeding the next layer; a 1x1 head
turns the last layer's features into a correction added to the input field.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from checkpoint import MODEL_MAGIC, read_container, write_container
from core import ReSAConfig, latitudes, longitudes
from exceptions import ConfigurationError, DimensionError, FormatError, NumericFault
from interfaces import CorrectorHandle
from tensor import (BatchNormState, Tensor, add, batchnorm, concat, conv2d, matmul, mul, reshape,
                    scale, sigmoid, slice_axis, softmax, split, tanh, transpose)

logger = logging.getLogger(__name__)

GROUPS = ("convlstm", "attention", "norm", "head")
FORGET_BIAS = 1.0


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class ConvLSTMCellParams:
    """Fused gate convolution over [x_t; h_prev], gates stacked as i, f, o, g"""
    in_channels: int
    hidden_channels: int
    kernel_size: int
    kernel: Tensor
    bias: Tensor

    def __post_init__(self):
        k, ch = self.kernel_size, self.hidden_channels
        expected = (4 * ch, self.in_channels + ch, k, k)
        if self.kernel.shape != expected or self.bias.shape != (4 * ch,):
            raise DimensionError("ConvLSTM gate parameters have the wrong shape",
                                 {"kernel": self.kernel.shape, "expected": expected})

    @staticmethod
    def create(in_channels: int, hidden_channels: int, kernel_size: int,
               rng: np.random.Generator, name: str = "cell") -> "ConvLSTMCellParams":
        fan_in = (in_channels + hidden_channels) * kernel_size ** 2
        kernel = _uniform(rng, (4 * hidden_channels, in_channels + hidden_channels, kernel_size, kernel_size), fan_in)
        bias = np.zeros(4 * hidden_channels)
        bias[hidden_channels:2 * hidden_channels] = FORGET_BIAS
        return ConvLSTMCellParams(in_channels, hidden_channels, kernel_size,
                                  Tensor(kernel, requires_grad=True, name=f"{name}.kernel"),
                                  Tensor(bias, requires_grad=True, name=f"{name}.bias"))

    @staticmethod
    def zeros(in_channels: int, hidden_channels: int, kernel_size: int) -> "ConvLSTMCellParams":
        shape = (4 * hidden_channels, in_channels + hidden_channels, kernel_size, kernel_size)
        return ConvLSTMCellParams(in_channels, hidden_channels, kernel_size,
                                  Tensor(np.zeros(shape), requires_grad=True),
                                  Tensor(np.zeros(4 * hidden_channels), requires_grad=True))

    def tensors(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict([("kernel", self.kernel), ("bias", self.bias)])


@dataclass
class SelfAttentionBlockParams:
    """1x1 query/key/value projections; ``gamma`` is None for plain (non-residual) attention"""
    channels: int
    reduction: int
    query_weight: Tensor
    query_bias: Tensor
    key_weight: Tensor
    key_bias: Tensor
    value_weight: Tensor
    value_bias: Tensor
    gamma: Optional[Tensor] = None

    @property
    def query_channels(self) -> int:
        return self.channels // self.reduction

    @staticmethod
    def create(channels: int, reduction: int, rng: np.random.Generator,
               residual: bool = True, name: str = "attn") -> "SelfAttentionBlockParams":
        d = channels // reduction
        if d < 1:
            raise ConfigurationError("attention reduction leaves no query channels",
                                     {"channels": channels, "reduction": reduction})

        def param(suffix, values):
            return Tensor(values, requires_grad=True, name=f"{name}.{suffix}")

        return SelfAttentionBlockParams(
            channels, reduction,
            param("query.weight", _uniform(rng, (d, channels, 1, 1), channels)),
            param("query.bias", np.zeros(d)),
            param("key.weight", _uniform(rng, (d, channels, 1, 1), channels)),
            param("key.bias", np.zeros(d)),
            param("value.weight", _uniform(rng, (channels, channels, 1, 1), channels)),
            param("value.bias", np.zeros(channels)),
            param("gamma", np.zeros(1)) if residual else None,
        )

    def tensors(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict([
            ("query.weight", self.query_weight), ("query.bias", self.query_bias),
            ("key.weight", self.key_weight), ("key.bias", self.key_bias),
            ("value.weight", self.value_weight), ("value.bias", self.value_bias),
        ])
        if self.gamma is not None:
            out["gamma"] = self.gamma
        return out


# ---------------------------------------------------------------------------
# building blocks

def cell_step(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, params: ConvLSTMCellParams,
              wrap_lon: bool = False) -> Tuple[Tensor, Tensor]:
    """One ConvLSTM update for [C,I,J] or [N,C,I,J] inputs"""
    axis = x_t.ndim - 3
    if x_t.ndim not in (3, 4) or h_prev.shape != c_prev.shape or h_prev.ndim != x_t.ndim:
        raise DimensionError("cell_step: input and state ranks differ",
                             {"x": x_t.shape, "h": h_prev.shape, "c": c_prev.shape})
    if x_t.shape[axis] != params.in_channels or h_prev.shape[axis] != params.hidden_channels:
        raise DimensionError("cell_step: channel counts do not match the cell",
                             {"x": x_t.shape, "h": h_prev.shape,
                              "cell": (params.in_channels, params.hidden_channels)})
    if x_t.shape[axis + 1:] != h_prev.shape[axis + 1:] or x_t.shape[:axis] != h_prev.shape[:axis]:
        raise DimensionError("cell_step: spatial or batch shapes differ",
                             {"x": x_t.shape, "h": h_prev.shape})

    gates = conv2d(concat([x_t, h_prev], axis=axis), params.kernel, params.bias,
                   padding="same", wrap_lon=wrap_lon)
    i, f, o, g = split(gates, 4, axis=axis)
    i, f, o, g = sigmoid(i), sigmoid(f), sigmoid(o), tanh(g)
    c_t = add(mul(f, c_prev), mul(i, g))
    h_t = mul(o, tanh(c_t))
    return h_t, c_t


def _dense_attention(x: Tensor, params: SelfAttentionBlockParams) -> Tuple[Tensor, Tensor]:
    b, c, hh, ww = x.shape
    p, d = hh * ww, params.query_channels
    q = conv2d(x, params.query_weight, params.query_bias, padding="same")
    k = conv2d(x, params.key_weight, params.key_bias, padding="same")
    v = conv2d(x, params.value_weight, params.value_bias, padding="same")
    q_rows = transpose(reshape(q, (b, d, p)), (0, 2, 1))
    scores = scale(matmul(q_rows, reshape(k, (b, d, p))), 1.0 / np.sqrt(d))
    weights = softmax(scores, axis=2)
    out = matmul(reshape(v, (b, c, p)), transpose(weights, (0, 2, 1)))
    return reshape(out, (b, c, hh, ww)), weights


def _to_tiles(x: Tensor, ti: int, tj: int) -> Tensor:
    n, c, hh, ww = x.shape
    t = reshape(x, (n, c, hh // ti, ti, ww // tj, tj))
    t = transpose(t, (0, 2, 4, 1, 3, 5))
    return reshape(t, (n * (hh // ti) * (ww // tj), c, ti, tj))


def _from_tiles(t: Tensor, n: int, hh: int, ww: int, ti: int, tj: int) -> Tensor:
    c = t.shape[1]
    x = reshape(t, (n, hh // ti, ww // tj, c, ti, tj))
    x = transpose(x, (0, 3, 1, 4, 2, 5))
    return reshape(x, (n, c, hh, ww))


def _attention(h: Tensor, params: SelfAttentionBlockParams, tile: Optional[Tuple[int, int]],
               cap: Optional[int]) -> Tuple[Tensor, Tensor]:
    squeeze = h.ndim == 3
    if h.ndim not in (3, 4):
        raise DimensionError("attention expects [C,I,J] or [N,C,I,J]", {"shape": h.shape})
    x = reshape(h, (1,) + h.shape) if squeeze else h
    n, c, hh, ww = x.shape
    if c != params.channels:
        raise DimensionError("attention: channel count does not match the block",
                             {"input": h.shape, "channels": params.channels})
    ti, tj = tile if tile is not None else (hh, ww)
    if hh % ti or ww % tj:
        raise ConfigurationError("attention_tile must evenly divide the grid", {"tile": tile, "grid": (hh, ww)})
    if cap is not None and ti * tj > cap:
        raise ConfigurationError(
            f"Attention over {ti * tj} positions exceeds the cap of {cap}; "
            "set attention_tile to use tiled attention",
            {"positions": ti * tj, "cap": cap})

    tiled = (ti, tj) != (hh, ww)
    out, weights = _dense_attention(_to_tiles(x, ti, tj) if tiled else x, params)
    if tiled:
        out = _from_tiles(out, n, hh, ww, ti, tj)
    if params.gamma is not None:
        out = add(x, mul(params.gamma, out))
    if squeeze:
        out = reshape(out, h.shape)
    return out, weights


def attention_apply(h: Tensor, params: SelfAttentionBlockParams,
                    tile: Optional[Tuple[int, int]] = None, cap: Optional[int] = None) -> Tensor:
    """Spatial self-attention within one timestep; residual when the block has gamma"""
    return _attention(h, params, tile, cap)[0]


def attention_weights(h: Tensor, params: SelfAttentionBlockParams,
                      tile: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Row-stochastic weight matrices, [P, P] for a single field"""
    weights = _attention(h, params, tile, None)[1].data
    return weights[0] if h.ndim == 3 and weights.shape[0] == 1 else weights


# ---------------------------------------------------------------------------
# parameter accounting

def convlstm_layer_param_count(in_channels: int, hidden_channels: int, kernel_size: int) -> int:
    return 4 * ((in_channels + hidden_channels) * hidden_channels * kernel_size ** 2 + hidden_channels)


def attention_param_count(channels: int, reduction: int, residual: bool) -> int:
    d = channels // reduction
    return 2 * (channels * d + d) + channels * channels + channels + (1 if residual else 0)


def param_count(config: ReSAConfig) -> int:
    """Exact number of trainable scalars implied by the configuration"""
    total = 0
    cin = config.total_in_channels
    for ch in config.hidden_channels:
        total += convlstm_layer_param_count(cin, ch, config.kernel_size)
        if config.use_attention:
            total += attention_param_count(ch, config.attention_reduction, config.use_residual)
        total += 2 * ch
        cin = ch
    return total + cin * config.out_channels + config.out_channels


def aux_fields(config: ReSAConfig) -> np.ndarray:
    """Static positional channels [n_aux, I, J]: sin(lat), sin(lon), cos(lon)"""
    if config.n_aux == 0:
        return np.zeros((0, config.grid_lat, config.grid_lon))
    lat = np.deg2rad(latitudes(config.grid_lat))[:, None] * np.ones((1, config.grid_lon))
    lon = np.deg2rad(longitudes(config.grid_lon))[None, :] * np.ones((config.grid_lat, 1))
    return np.stack([np.sin(lat), np.sin(lon), np.cos(lon)])


# ---------------------------------------------------------------------------
# model

@dataclass
class ModelState:
    """Serializable snapshot of a corrector"""
    config: ReSAConfig
    parameters: "OrderedDict[str, np.ndarray]"
    buffers: "OrderedDict[str, np.ndarray]"
    clim_reference: str = ""
    normalization: str = "dynamic"
    metadata: Dict[str, Any] = field(default_factory=dict)


class ReSAConvLSTM:
    """Recurrent corrector over normalized forecast sequences [N, L, I, J]"""

    def __init__(self, config: ReSAConfig, rng: Optional[np.random.Generator] = None):
        self.config = config
        rng = np.random.default_rng(config.seed) if rng is None else rng
        self.cells: List[ConvLSTMCellParams] = []
        self.attention: List[Optional[SelfAttentionBlockParams]] = []
        self.norm_affine: List[Tuple[Tensor, Tensor]] = []
        self.norm_states: List[BatchNormState] = []

        cin = config.total_in_channels
        for i, ch in enumerate(config.hidden_channels):
            prefix = f"layer{i}"
            self.cells.append(ConvLSTMCellParams.create(cin, ch, config.kernel_size, rng, f"{prefix}.cell"))
            self.attention.append(
                SelfAttentionBlockParams.create(ch, config.attention_reduction, rng,
                                                residual=config.use_residual, name=f"{prefix}.attn")
                if config.use_attention else None)
            self.norm_affine.append((Tensor(np.ones(ch), requires_grad=True, name=f"{prefix}.norm.gamma"),
                                     Tensor(np.zeros(ch), requires_grad=True, name=f"{prefix}.norm.beta")))
            self.norm_states.append(BatchNormState.create(ch))
            cin = ch

        head_shape = (config.out_channels, cin, 1, 1)
        # a zero head makes the residual model start as the identity
        head = np.zeros(head_shape) if config.use_residual else _uniform(rng, head_shape, cin)
        self.head_weight = Tensor(head, requires_grad=True, name="head.weight")
        self.head_bias = Tensor(np.zeros(config.out_channels), requires_grad=True, name="head.bias")
        self._aux = aux_fields(config)
        # set while the norm group is frozen: batchnorm then uses and keeps its running stats
        self.freeze_running_stats = False
        self.clim_reference = ""
        self.normalization = "dynamic"
        self.metadata: Dict[str, Any] = {}

    # -- parameters -------------------------------------------------------

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        named: "OrderedDict[str, Tensor]" = OrderedDict()
        for i, cell in enumerate(self.cells):
            for name, t in cell.tensors().items():
                named[f"layer{i}.cell.{name}"] = t
            if self.attention[i] is not None:
                for name, t in self.attention[i].tensors().items():
                    named[f"layer{i}.attn.{name}"] = t
            gamma, beta = self.norm_affine[i]
            named[f"layer{i}.norm.gamma"] = gamma
            named[f"layer{i}.norm.beta"] = beta
        named["head.weight"] = self.head_weight
        named["head.bias"] = self.head_bias
        return named

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def parameter_groups(self) -> Dict[str, List[Tensor]]:
        groups: Dict[str, List[Tensor]] = {g: [] for g in GROUPS}
        for name, t in self.named_parameters().items():
            if name.startswith("head."):
                groups["head"].append(t)
            else:
                groups[{"cell": "convlstm", "attn": "attention", "norm": "norm"}[name.split(".")[1]]].append(t)
        return groups

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for i, state in enumerate(self.norm_states):
            out[f"layer{i}.norm.running_mean"] = state.running_mean.copy()
            out[f"layer{i}.norm.running_var"] = state.running_var.copy()
        return out

    def n_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    # -- computation ------------------------------------------------------

    def _refine(self, h: Tensor, layer: int, training: bool) -> Tensor:
        gamma, beta = self.norm_affine[layer]
        block = self.attention[layer]
        training = training and not self.freeze_running_stats

        def attend(x):
            if block is None:
                return x
            return attention_apply(x, block, self.config.attention_tile, self.config.attention_cap)

        if self.config.norm_before_attention:
            return attend(batchnorm(h, gamma, beta, self.norm_states[layer], training))
        return batchnorm(attend(h), gamma, beta, self.norm_states[layer], training)

    def forward(self, z: Tensor, training: bool = False) -> Tensor:
        """Correct a normalized batch [N, L, I, J]; lead t only sees leads 1..t"""
        cfg = self.config
        if cfg.in_channels != 1 or cfg.out_channels != 1:
            raise ConfigurationError("The corrector handles one variable (one channel) at a time")
        if z.ndim != 4 or z.shape[2:] != (cfg.grid_lat, cfg.grid_lon):
            raise DimensionError("forward expects [N, L, I, J] on the configured grid",
                                 {"shape": z.shape, "grid": (cfg.grid_lat, cfg.grid_lon)})
        n, leads = z.shape[0], z.shape[1]
        if leads < 1 or n < 1:
            raise DimensionError("forward needs at least one sample and one lead", {"shape": z.shape})

        aux = Tensor(np.broadcast_to(self._aux, (n,) + self._aux.shape)) if cfg.n_aux else None
        spatial = z.shape[2:]
        h = [Tensor(np.zeros((n, ch) + spatial)) for ch in cfg.hidden_channels]
        c = [Tensor(np.zeros((n, ch) + spatial)) for ch in cfg.hidden_channels]

        outputs = []
        for t in range(leads):
            x_t = slice_axis(z, t, t + 1, axis=1)
            features = concat([x_t, aux], axis=1) if aux is not None else x_t
            for layer, cell in enumerate(self.cells):
                h[layer], c[layer] = cell_step(features, h[layer], c[layer], cell, cfg.lon_wrap)
                features = self._refine(h[layer], layer, training)
            correction = conv2d(features, self.head_weight, self.head_bias, padding="same")
            out_t = add(x_t, correction) if cfg.use_residual else correction
            if not out_t.is_valid():
                raise NumericFault("Non-finite activations in the corrector", {"lead": t + 1})
            outputs.append(out_t)
        return concat(outputs, axis=1) if len(outputs) > 1 else outputs[0]

    def predict(self, z: np.ndarray) -> np.ndarray:
        """Inference on [L, I, J] or [N, L, I, J] arrays"""
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 3
        out = self.forward(Tensor(z[None] if single else z), training=False).data
        return out[0] if single else out

    # -- persistence ------------------------------------------------------

    def state(self) -> ModelState:
        return ModelState(
            self.config,
            OrderedDict((name, t.data.copy()) for name, t in self.named_parameters().items()),
            self.buffers(),
            self.clim_reference,
            self.normalization,
            dict(self.metadata),
        )

    def load_state(self, state: ModelState) -> None:
        named = self.named_parameters()
        if list(named) != list(state.parameters):
            raise FormatError("Checkpoint parameter names do not match the configured architecture", 0,
                              {"missing": sorted(set(named) - set(state.parameters)),
                               "unexpected": sorted(set(state.parameters) - set(named))})
        for name, t in named.items():
            t.assign(state.parameters[name])
        for i, bn in enumerate(self.norm_states):
            bn.running_mean = np.array(state.buffers[f"layer{i}.norm.running_mean"], dtype=np.float64)
            bn.running_var = np.array(state.buffers[f"layer{i}.norm.running_var"], dtype=np.float64)
        self.clim_reference = state.clim_reference
        self.normalization = state.normalization
        self.metadata = dict(state.metadata)

    @staticmethod
    def from_state(state: ModelState) -> "ReSAConvLSTM":
        model = ReSAConvLSTM(state.config)
        model.load_state(state)
        return model


def save_checkpoint(state: ModelState, path) -> None:
    header = {
        "config": state.config.to_dict(),
        "clim_reference": state.clim_reference,
        "normalization": state.normalization,
        "metadata": state.metadata,
        "buffers": list(state.buffers),
        "n_parameters": int(sum(v.size for v in state.parameters.values())),
    }
    blocks = list(state.parameters.items()) + list(state.buffers.items())
    write_container(path, MODEL_MAGIC, header, blocks)
    logger.info("saved %s checkpoint with %d parameters to %s",
                state.config.architecture.value, header["n_parameters"], path)


def load_checkpoint(path) -> ModelState:
    header, blocks = read_container(path, MODEL_MAGIC)
    try:
        config = ReSAConfig.from_dict(header["config"])
        buffer_names = set(header["buffers"])
    except KeyError as e:
        raise FormatError(f"Checkpoint header lacks {e}", 8)
    parameters = OrderedDict((k, v) for k, v in blocks.items() if k not in buffer_names)
    buffers = OrderedDict((k, v) for k, v in blocks.items() if k in buffer_names)
    count = sum(v.size for v in parameters.values())
    expected = param_count(config)
    if count != expected:
        raise FormatError("Checkpoint parameter count does not match its configuration", 8,
                          {"stored": count, "expected": expected})
    return ModelState(config, parameters, buffers, header.get("clim_reference", ""),
                      header.get("normalization", "dynamic"), header.get("metadata", {}))


def resa_handle(model: ReSAConvLSTM, model_id: Optional[str] = None) -> CorrectorHandle:
    """Audit handle over normalized [L, I, J] sequences"""
    return CorrectorHandle(model_id or model.config.architecture.value, model.predict,
                           causal_claim=True, model=model)
