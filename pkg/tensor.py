"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the tape that is active in the current
thread (``with Tape() as tape:``). Outside a tape, or when no input requires
a gradient, operations are plain numpy computations and record nothing.
"""

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from core import Padding
from exceptions import ConfigurationError, ContractError, DimensionError, InternalError, NumericFault

logger = logging.getLogger(__name__)

BATCHNORM_EPSILON = 1e-5
BATCHNORM_MOMENTUM = 0.1

_local = threading.local()


def _tape_stack() -> List["Tape"]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """n-dimensional float64 array that can take part in differentiation"""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.node_id: Optional[int] = None
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() needs a single-element tensor", {"shape": self.shape})
        return float(self.data.reshape(-1)[0])

    def is_valid(self) -> bool:
        """False when the data holds NaN or Inf"""
        return bool(np.all(np.isfinite(self.data)))

    def check_finite(self, **context) -> "Tensor":
        if not self.is_valid():
            raise NumericFault(f"Non-finite values in {self.name or 'tensor'}", context)
        return self

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def apply_update(self, delta: np.ndarray):
        """Optimizer entry point: the only in-place mutation of tensor data"""
        if delta.shape != self.data.shape:
            raise DimensionError("Update shape does not match parameter",
                                 {"parameter": self.shape, "update": delta.shape})
        self.data -= delta

    def assign(self, values: np.ndarray):
        """Restore a snapshot (checkpoint loading, best-epoch rollback)"""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.data.shape:
            raise DimensionError("Assigned values do not match parameter shape",
                                 {"parameter": self.shape, "values": values.shape})
        self.data = values.copy()

    # operator sugar over the recorded operations
    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class TapeEntry:
    """One recorded operation"""
    op: str
    inputs: Tuple[int, ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of operations; inputs always precede their outputs"""

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self.nodes: Dict[int, Tensor] = {}
        self._ids: Dict[int, int] = {}

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self):
        return len(self.entries)

    def register(self, tensor: Tensor) -> int:
        key = id(tensor)
        if key in self._ids and self.nodes.get(self._ids[key]) is tensor:
            return self._ids[key]
        node_id = len(self.nodes)
        self.nodes[node_id] = tensor
        self._ids[key] = node_id
        tensor.node_id = node_id
        return node_id

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn) -> None:
        input_ids = tuple(self.register(t) for t in inputs)
        output_id = self.register(output)
        output._tape = self
        self.entries.append(TapeEntry(op, input_ids, output_id, backward_fn))


def _result(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward_fn) -> Tensor:
    tape = active_tape()
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad and tape is not None)
    if tape is not None and needs_grad:
        tape.record(op, inputs, out, backward_fn)
    return out


def backward(loss: Tensor, parameters: Optional[Iterable[Tensor]] = None) -> None:
    """Reverse sweep from a scalar loss.

    Every leaf reachable from the loss that requires a gradient gets ``.grad``
    assigned (overwriting earlier values); listed parameters that the loss
    does not reach get a zero gradient.
    """
    if loss.data.size != 1:
        raise ContractError("backward() needs a scalar loss", {"shape": loss.shape})
    tape = loss._tape
    if tape is None or not tape.entries:
        raise ContractError("The tape is empty; run the forward pass inside a Tape")

    produced = set()
    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        if entry.inputs and max(entry.inputs) >= entry.output:
            raise InternalError("Tape is not in topological order", {"op": entry.op})
        if entry.output in produced:
            raise InternalError("Tape node produced twice", {"op": entry.op})
        produced.add(entry.output)
        grad_out = grads.pop(entry.output, None)
        if grad_out is None:
            continue
        for node_id, grad_in in zip(entry.inputs, entry.backward(grad_out)):
            if grad_in is None or not tape.nodes[node_id].requires_grad:
                continue
            if node_id in grads:
                grads[node_id] = grads[node_id] + grad_in
            else:
                grads[node_id] = grad_in

    for node_id, tensor in tape.nodes.items():
        if node_id not in produced and tensor.requires_grad:
            tensor.grad = grads.get(node_id, np.zeros_like(tensor.data))
    if parameters is not None:
        for p in parameters:
            node_id = tape._ids.get(id(p))
            if node_id is None or tape.nodes.get(node_id) is not p:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# elementwise

def _check_binary(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ",
                             {"op": op, "a": a.shape, "b": b.shape})


def _reduce_to(grad: np.ndarray, like: Tensor) -> np.ndarray:
    """Fold a broadcast gradient back onto a scalar operand"""
    if like.size == 1 and grad.shape != like.shape:
        return np.full(like.shape, grad.sum())
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")
    return _result("add", (a, b), a.data + b.data,
                   lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "sub")
    return _result("sub", (a, b), a.data - b.data,
                   lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "mul")
    return _result("mul", (a, b), a.data * b.data,
                   lambda g: (_reduce_to(g * b.data, a), _reduce_to(g * a.data, b)))


def scale(a: Tensor, factor: float) -> Tensor:
    return _result("scale", (a,), a.data * factor, lambda g: (g * factor,))


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so exp never overflows
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


_UNARY = {"sigmoid": sigmoid, "tanh": tanh}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dispatch add|sub|mul|sigmoid|tanh by name"""
    if op in _BINARY:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ConfigurationError(f"Unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    out = a.data.reshape(tuple(shape))
    return _result("reshape", (a,), out, lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result("transpose", (a,), np.ascontiguousarray(a.data.transpose(axes)),
                   lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(d1 != d2 for i, (d1, d2) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise DimensionError("concat: shapes differ off the join axis",
                                 {"shapes": [x.shape for x in tensors], "axis": axis})
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis), backward_fn)


def slice_axis(a: Tensor, start: int, stop: int, axis: int) -> Tensor:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _result("slice", (a,), a.data[index].copy(), backward_fn)


def split(a: Tensor, sections: int, axis: int) -> List[Tensor]:
    if a.shape[axis] % sections:
        raise DimensionError("split: axis not divisible", {"shape": a.shape, "sections": sections})
    width = a.shape[axis] // sections
    return [slice_axis(a, i * width, (i + 1) * width, axis) for i in range(sections)]


# ---------------------------------------------------------------------------
# reductions and products

def sum_all(a: Tensor) -> Tensor:
    return _result("sum", (a,), np.array(a.data.sum()), lambda g: (np.full(a.shape, float(g)),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    return _result("mean", (a,), np.array(a.data.mean()), lambda g: (np.full(a.shape, float(g) / n),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (no broadcasting)"""
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul: incompatible shapes", {"a": a.shape, "b": b.shape})
    out = np.matmul(a.data, b.data)

    def backward_fn(g):
        return (np.matmul(g, np.swapaxes(b.data, -1, -2)),
                np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _result("matmul", (a, b), out, backward_fn)


def softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError("softmax: axis out of range", {"axis": axis, "rank": x.ndim})
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result("softmax", (x,), out, backward_fn)


# ---------------------------------------------------------------------------
# convolution

def _pad(x: np.ndarray, p: int, wrap_lon: bool) -> np.ndarray:
    if p == 0:
        return x
    if wrap_lon:
        x = np.concatenate([x[..., -p:], x, x[..., :p]], axis=-1)
        return np.pad(x, [(0, 0)] * (x.ndim - 2) + [(p, p), (0, 0)])
    return np.pad(x, [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)])


def _unpad(g: np.ndarray, p: int, wrap_lon: bool) -> np.ndarray:
    if p == 0:
        return g
    g = g[..., p:-p, :]
    if wrap_lon:
        core = g[..., p:-p].copy()
        core[..., -p:] += g[..., :p]
        core[..., :p] += g[..., -p:]
        return core
    return g[..., p:-p]


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           padding="same", wrap_lon: bool = False) -> Tensor:
    """Cross-correlation of [C_in,H,W] (or [N,C_in,H,W]) with [C_out,C_in,k,k].

    Same padding fills with zeros, or wraps the longitude (last) axis when
    ``wrap_lon`` is set; latitude edges are always zero-padded.
    """
    padding = Padding(padding) if not isinstance(padding, Padding) else padding
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or kernel.ndim != 4:
        raise DimensionError("conv2d expects [C,H,W] or [N,C,H,W] input and a 4-D kernel",
                             {"input": x.shape, "kernel": kernel.shape})
    c_out, c_in, kh, kw = kernel.shape
    if kh != kw:
        raise DimensionError("conv2d kernels must be square", {"kernel": kernel.shape})
    k = kh
    xin = x.data if batched else x.data[None]
    if xin.shape[1] != c_in:
        raise DimensionError("conv2d: input channels do not match the kernel",
                             {"input": x.shape, "kernel": kernel.shape})
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError("conv2d: bias must be [C_out]", {"bias": bias.shape})
    if padding == Padding.SAME:
        if k % 2 == 0:
            raise ConfigurationError("Same padding needs an odd kernel size", {"kernel": k})
        p = k // 2
    else:
        p = 0
        if k > xin.shape[2] or k > xin.shape[3]:
            raise DimensionError("conv2d: kernel larger than input", {"input": x.shape, "kernel": k})
    wrap = wrap_lon and p > 0

    xp = _pad(xin, p, wrap)
    n, _, hp, wp = xp.shape
    ho, wo = hp - k + 1, wp - k + 1
    # [N, C, Ho, Wo, k, k] -> [N, Ho, Wo, C*k*k]
    cols = sliding_window_view(xp, (k, k), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c_in * k * k)
    wmat = kernel.data.reshape(c_out, c_in * k * k)
    out = np.matmul(cols, wmat.T).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    if not batched:
        out = out[0]

    def backward_fn(g):
        g4 = g if batched else g[None]
        gk = np.ascontiguousarray(g4.transpose(0, 2, 3, 1))  # [N, Ho, Wo, C_out]
        grad_kernel = np.tensordot(gk, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(kernel.shape)
        gcols = np.matmul(gk, wmat).reshape(n, ho, wo, c_in, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + ho, j:j + wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = _unpad(gxp, p, wrap)
        grad_bias = g4.sum(axis=(0, 2, 3)) if bias is not None else None
        grads = [gx if batched else gx[0], grad_kernel]
        if bias is not None:
            grads.append(grad_bias)
        return tuple(grads)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _result("conv2d", inputs, out, backward_fn)


# ---------------------------------------------------------------------------
# batch normalization

@dataclass
class BatchNormState:
    """Per-channel running statistics (not trainable)"""
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BATCHNORM_MOMENTUM
    epsilon: float = BATCHNORM_EPSILON

    @staticmethod
    def create(channels: int) -> "BatchNormState":
        return BatchNormState(np.zeros(channels), np.ones(channels))


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalization of [C,H,W] or [N,C,H,W] with affine gamma/beta"""
    if x.ndim not in (3, 4):
        raise DimensionError("batchnorm expects [C,H,W] or [N,C,H,W]", {"shape": x.shape})
    axis = 1 if x.ndim == 4 else 0
    c = x.shape[axis]
    if c == 0 or x.size == 0:
        raise DimensionError("batchnorm: empty channel", {"shape": x.shape})
    if gamma.shape != (c,) or beta.shape != (c,) or state.running_mean.shape != (c,):
        raise DimensionError("batchnorm: parameter shapes do not match channels",
                             {"channels": c, "gamma": gamma.shape})
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)
    bshape = [1] * x.ndim
    bshape[axis] = c
    count = x.size // c

    if training:
        mean = x.data.mean(axis=reduce_axes)
        var = x.data.var(axis=reduce_axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mean
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * unbiased
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward_fn(g):
        grad_gamma = (g * xhat).sum(axis=reduce_axes)
        grad_beta = g.sum(axis=reduce_axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            sum_d = dxhat.sum(axis=reduce_axes).reshape(bshape)
            sum_dx = (dxhat * xhat).sum(axis=reduce_axes).reshape(bshape)
            gx = inv_std.reshape(bshape) / count * (count * dxhat - sum_d - xhat * sum_dx)
        else:
            gx = dxhat * inv_std.reshape(bshape)
        return gx, grad_gamma, grad_beta

    return _result("batchnorm", (x, gamma, beta), out, backward_fn)


# ---------------------------------------------------------------------------
# finite-difference checking

@dataclass
class GradientCheck:
    """Outcome of comparing tape gradients with central differences"""
    max_relative_error: float
    worst_parameter: Optional[str] = None
    per_parameter: Dict[str, float] = field(default_factory=dict)

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_relative_error < tolerance


def gradient_check(loss_fn: Callable[[], Tensor], parameters: Dict[str, Tensor],
                   step: float = 1e-5, floor: float = 1e-3,
                   max_entries: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> GradientCheck:
    """Compare ``backward`` gradients of ``loss_fn()`` with central differences.

    Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
    ``max_entries`` samples that many coordinates per parameter.
    """
    with Tape():
        loss = loss_fn()
    backward(loss, parameters.values())
    analytic = {name: p.grad.copy() for name, p in parameters.items()}

    worst, worst_name, per = 0.0, None, {}
    for name, p in parameters.items():
        flat = p.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        err = 0.0
        for idx in indices:
            orig = flat[idx]
            flat[idx] = orig + step
            up = loss_fn().item()
            flat[idx] = orig - step
            down = loss_fn().item()
            flat[idx] = orig
            numeric = (up - down) / (2 * step)
            a = analytic[name].reshape(-1)[idx]
            err = max(err, abs(a - numeric) / max(abs(a), abs(numeric), floor))
        per[name] = err
        if err > worst:
            worst, worst_name = err, name
    logger.debug("gradient check max relative error %.3e (%s)", worst, worst_name)
    return GradientCheck(worst, worst_name, per)
