"""
Dense tensors with reverse-mode differentiation.

Every model in the toolkit is built from the pieces in this module:
- Tensor: numpy-backed float64 array that records the ops producing it
- differentiable ops (arithmetic, matmul, reductions, activations, softmax,
  layer norm, dropout, the selective-scan kernel)
- orthonormal DCT-II along the temporal axis
- Adam / RAdam with decoupled weight decay, OneCycle schedule, weight EMA
- grad_check: reverse-mode gradients vs central finite differences
"""

from __future__ import annotations

import contextlib
import functools
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numba import jit
from scipy import fft as sp_fft

DTYPE = np.float64


# --------------------------
# ERRORS
# --------------------------
class HandcraftError(Exception):
    """Base class for every error raised by the toolkit."""


class ShapeError(HandcraftError, ValueError):
    pass


class RangeError(HandcraftError, ValueError):
    pass


class ConfigError(HandcraftError, ValueError):
    pass


class NonFiniteError(HandcraftError, FloatingPointError):
    pass


class LabelIndexError(HandcraftError, IndexError):
    pass


def check_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"Non-finite values in {what}")


# --------------------------
# TENSOR
# --------------------------
def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _is_advanced_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


class Tensor:
    """A float64 array plus the bookkeeping needed for a backward pass."""

    __array_priority__ = 1000
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple["Tensor", ...] = (),
                 backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
                 op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = parents
        self._backward = backward
        self.op = op

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op or 'leaf'})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate .grad on every reachable tensor that requires it."""
        if not self.requires_grad:
            raise HandcraftError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed gradient needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = self.grad + np.asarray(grad, dtype=DTYPE)
        for node in reversed(order):
            if node._backward is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad += _unbroadcast(np.asarray(g, dtype=DTYPE), parent.shape)

    # arithmetic -------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        return _node(self.data + other.data, (self, other), lambda g: (g, g), "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        return _node(self.data - other.data, (self, other), lambda g: (g, -g), "sub")

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return _node(a * b, (self, other), lambda g: (g * b, g * a), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return _node(a / b, (self, other), lambda g: (g / b, -g * a / (b * b)), "div")

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return _node(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float):
        a = self.data
        return _node(a ** exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        shape = self.shape
        advanced = _is_advanced_index(idx)

        def backward(g):
            full = np.zeros(shape, dtype=DTYPE)
            if advanced:
                np.add.at(full, idx, g)
            else:
                full[idx] += g
            return (full,)

        return _node(self.data[idx], (self,), backward, "getitem")

    # shape ------------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.shape
        return _node(self.data.reshape(shape), (self,), lambda g: (g.reshape(orig),), "reshape")

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        return _node(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),), "transpose")

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    # reductions -------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return _node(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # elementwise ------------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return _node(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        a = self.data
        return _node(np.log(a), (self,), lambda g: (g / a,), "log")

    def sqrt(self):
        out = np.sqrt(self.data)
        return _node(out, (self,), lambda g: (g / (2.0 * out),), "sqrt")

    def tanh(self):
        out = np.tanh(self.data)
        return _node(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


_grad_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (per thread)."""
    previous = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def _node(data, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if not grad_enabled() or not any(p.requires_grad for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, backward=backward, op=op)


# --------------------------
# OPS
# --------------------------
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(y, -1, -2), np.swapaxes(x, -1, -2) @ g

    return _node(x @ y, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else out + bias


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _node(data, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(data, tuple(tensors), backward, "stack")


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    a = x.data
    return _node(np.logaddexp(0.0, a), (x,), lambda g: (g / (1.0 + np.exp(-a)),), "softplus")


def silu(x: Tensor) -> Tensor:
    a = x.data
    s = 1.0 / (1.0 + np.exp(-a))
    return _node(a * s, (x,), lambda g: (g * (s + a * s * (1.0 - s)),), "silu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    a = x.data
    t = np.tanh(_GELU_C * (a + 0.044715 * a ** 3))

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * a * a)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * dt),)

    return _node(0.5 * a * (1.0 + t), (x,), backward, "gelu")


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax with an optional additive mask (0 keeps, -inf drops)."""
    z = x.data if mask is None else x.data + mask
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _node(p, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), backward, "log_softmax")


def norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along axis; the gradient at a zero vector is zero."""
    a = x.data
    out = np.sqrt((a * a).sum(axis=axis))

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        scale = np.where(out > 0, g / safe, 0.0)
        return (np.expand_dims(scale, axis) * a,)

    return _node(out, (x,), backward, "norm")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Zero-mean / unit-variance along axis, then the per-position affine."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"layer_norm axis {axis} invalid for shape {x.shape}")
    axis = axis % x.ndim
    d = x.shape[axis]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match axis length {d}")
    mu = x.mean(axis=axis, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=axis, keepdims=True)
    normalized = centered / (var + eps).sqrt()
    shape = [1] * x.ndim
    shape[axis] = d
    return normalized * gain.reshape(shape) + bias.reshape(shape)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity outside training."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


@jit(cache=True, nopython=True, nogil=True)
def _scan_states(decay, drive):
    batch, length, channels, state = decay.shape
    hs = np.empty_like(decay)
    for bi in range(batch):
        for e in range(channels):
            for s in range(state):
                h = 0.0
                for t in range(length):
                    h = decay[bi, t, e, s] * h + drive[bi, t, e, s]
                    hs[bi, t, e, s] = h
    return hs


@jit(cache=True, nopython=True, nogil=True)
def _scan_adjoint(g, c, decay):
    # dL/dh_t, accumulated backwards through h_t = decay_t * h_{t-1} + ...
    batch, length, channels, state = decay.shape
    g_h = np.empty_like(decay)
    for bi in range(batch):
        for e in range(channels):
            for s in range(state):
                carry = 0.0
                for t in range(length - 1, -1, -1):
                    carry = carry + g[bi, t, e] * c[bi, t, s]
                    g_h[bi, t, e, s] = carry
                    carry = carry * decay[bi, t, e, s]
    return g_h


def selective_scan(u: Tensor, delta: Tensor, a: Tensor, b: Tensor, c: Tensor, d: Tensor) -> Tensor:
    """
    Diagonal selective state-space recurrence with zero-order-hold discretization.

    Shapes: u, delta (batch, length, channels); a (channels, state);
    b, c (batch, length, state); d (channels). Returns (batch, length, channels):

        h_t = exp(delta_t * a) * h_{t-1} + delta_t * b_t * u_t
        y_t = sum_s c_t * h_t + d * u_t
    """
    U, DT, A, B, C, D = (t.data for t in (u, delta, a, b, c, d))
    if U.ndim != 3 or DT.shape != U.shape:
        raise ShapeError(f"selective_scan expects u/delta of equal rank-3 shape, got {U.shape}/{DT.shape}")
    batch, length, channels = U.shape
    state = A.shape[-1]
    if A.shape != (channels, state) or B.shape != (batch, length, state) or C.shape != B.shape:
        raise ShapeError("selective_scan parameter shapes do not agree")

    decay = np.ascontiguousarray(np.exp(DT[..., None] * A))                        # (B, L, E, S)
    drive = np.ascontiguousarray(DT[..., None] * B[:, :, None, :] * U[..., None])  # (B, L, E, S)
    hs = _scan_states(decay, drive)
    y = np.einsum("bles,bls->ble", hs, C) + D * U

    def backward(g):
        g_c = np.einsum("ble,bles->bls", g, hs)
        g_h = _scan_adjoint(np.ascontiguousarray(g, dtype=DTYPE), np.ascontiguousarray(C, dtype=DTYPE), decay)
        prev = np.concatenate([np.zeros_like(hs[:, :1]), hs[:, :-1]], axis=1)
        g_decay = g_h * prev * decay
        g_delta = (g_decay * A).sum(-1) + (g_h * B[:, :, None, :]).sum(-1) * U
        g_a = np.einsum("bles,ble->es", g_decay, DT)
        g_b = np.einsum("bles,ble->bls", g_h, DT * U)
        g_u = (g_h * B[:, :, None, :]).sum(-1) * DT + g * D
        g_d = (g * U).sum(axis=(0, 1))
        return g_u, g_delta, g_a, g_b, g_c, g_d

    return _node(y, (u, delta, a, b, c, d), backward, "selective_scan")


# --------------------------
# DCT
# --------------------------
@dataclass(frozen=True, eq=False)
class DctBasis:
    size: int
    forward_matrix: np.ndarray
    inverse_matrix: np.ndarray


@functools.lru_cache(maxsize=None)
def dct_basis(size: int) -> DctBasis:
    """Orthonormal DCT-II matrix of the given length (cached, read-only)."""
    if size < 1:
        raise ShapeError(f"DCT length must be positive, got {size}")
    forward = sp_fft.dct(np.eye(size), type=2, norm="ortho", axis=0)
    inverse = np.ascontiguousarray(forward.T)
    forward.setflags(write=False)
    inverse.setflags(write=False)
    return DctBasis(size=size, forward_matrix=forward, inverse_matrix=inverse)


def _temporal_transform(x, basis: DctBasis | None, inverse: bool) -> Tensor:
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"DCT input must be (..., frames, features), got {x.shape}")
    frames = x.shape[-2]
    basis = basis or dct_basis(frames)
    if basis.size != frames:
        raise ShapeError(f"DCT basis of size {basis.size} cannot transform {frames} frames")
    matrix = basis.inverse_matrix if inverse else basis.forward_matrix
    return matmul(Tensor(matrix), x)


def dct(x, basis: DctBasis | None = None) -> Tensor:
    return _temporal_transform(x, basis, inverse=False)


def idct(x, basis: DctBasis | None = None) -> Tensor:
    return _temporal_transform(x, basis, inverse=True)


# --------------------------
# INITIALIZATION
# --------------------------
def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> Tensor:
    bound = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)))


def zeros(*shape: int) -> Tensor:
    return parameter(np.zeros(shape))


def ones(*shape: int) -> Tensor:
    return parameter(np.ones(shape))


# --------------------------
# OPTIMIZERS
# --------------------------
OPTIMIZER_KINDS = ("adam", "radam")


@dataclass
class OptimizerState:
    kind: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ConfigError(f"Unknown optimizer kind '{self.kind}', expected one of {OPTIMIZER_KINDS}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")


def optimizer_step(state: OptimizerState, params: Mapping[str, np.ndarray],
                   grads: Mapping[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    """One Adam/RAdam update with decoupled weight decay. Returns new parameter arrays."""
    if set(params) != set(grads):
        raise ShapeError("params and grads name different tensors")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} differs from parameter '{name}' {params[name].shape}")
        check_finite(g, f"gradient of '{name}'")

    beta1, beta2 = state.betas
    state.step_count += 1
    t = state.step_count
    bias1 = 1.0 - beta1 ** t
    bias2 = 1.0 - beta2 ** t
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    rho_t = rho_inf - 2.0 * t * beta2 ** t / bias2

    updated = {}
    for name, p in params.items():
        g = grads[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v

        p = p - lr * state.weight_decay * p
        m_hat = m / bias1
        if state.kind == "adam":
            p = p - lr * m_hat / (np.sqrt(v / bias2) + state.eps)
        elif rho_t > 4.0:
            rect = math.sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf
                             / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
            p = p - lr * rect * m_hat / (np.sqrt(v / bias2) + state.eps)
        else:
            # variance not tractable yet: un-adapted momentum step
            p = p - lr * m_hat
        updated[name] = p
    return updated


class Optimizer:
    """Applies optimizer_step to a named set of parameter tensors."""

    def __init__(self, params: Mapping[str, Tensor], kind: str = "adam",
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = dict(params)
        self.state = OptimizerState(kind=kind, betas=betas, eps=eps, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        arrays = {name: p.data for name, p in self.params.items()}
        grads = {name: p.grad for name, p in self.params.items()}
        for name, new in optimizer_step(self.state, arrays, grads, lr).items():
            self.params[name].data = new


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if total > max_norm > 0:
        scale = max_norm / total
        for p in params:
            p.grad = p.grad * scale
    return total


class Ema:
    """Exponential moving average of parameter values."""

    def __init__(self, params: Mapping[str, Tensor], decay: float = 0.999):
        if not 0.0 < decay < 1.0:
            raise ConfigError(f"EMA decay must be in (0, 1), got {decay}")
        self.decay = decay
        self.shadow = {name: p.data.copy() for name, p in params.items()}

    def update(self, params: Mapping[str, Tensor]) -> None:
        for name, p in params.items():
            self.shadow[name] = self.decay * self.shadow[name] + (1.0 - self.decay) * p.data

    def copy_to(self, params: Mapping[str, Tensor]) -> None:
        for name, p in params.items():
            p.data = self.shadow[name].copy()


# --------------------------
# SCHEDULE
# --------------------------
@dataclass(frozen=True)
class OneCycleSchedule:
    peak_lr: float
    total_steps: int
    warmup_ratio: float = 0.3
    initial_div: float = 25.0
    final_div: float = 1e4

    def __post_init__(self):
        if self.total_steps < 2:
            raise ConfigError(f"OneCycle needs total_steps >= 2, got {self.total_steps}")
        if not 0.0 < self.warmup_ratio < 1.0:
            raise ConfigError(f"warmup_ratio must be in (0, 1), got {self.warmup_ratio}")
        if self.peak_lr <= 0 or self.initial_div <= 1 or self.final_div <= 1:
            raise ConfigError("peak_lr must be positive and both divisors greater than 1")
        if math.ceil(self.warmup_ratio * self.total_steps) >= self.total_steps:
            raise ConfigError(f"warmup_ratio {self.warmup_ratio} leaves no annealing step out of {self.total_steps}")

    @property
    def warmup_steps(self) -> int:
        return math.ceil(self.warmup_ratio * self.total_steps)


def onecycle_lr(sched: OneCycleSchedule, step: int) -> float:
    """Cosine warmup to peak, then cosine anneal to peak/final_div."""
    if not 0 <= step <= sched.total_steps:
        raise RangeError(f"step {step} outside [0, {sched.total_steps}]")
    warm = sched.warmup_steps
    if step <= warm:
        start = sched.peak_lr / sched.initial_div
        frac = step / warm
        return sched.peak_lr - (sched.peak_lr - start) * (1.0 + math.cos(math.pi * frac)) / 2.0
    end = sched.peak_lr / sched.final_div
    frac = (step - warm) / (sched.total_steps - warm)
    return end + (sched.peak_lr - end) * (1.0 + math.cos(math.pi * frac)) / 2.0


# --------------------------
# GRADIENT CHECK
# --------------------------
def grad_check(f: Callable[[], Tensor], params: Mapping[str, Tensor] | Sequence[Tensor],
               h: float = 1e-5, samples_per_param: int | None = None,
               rng: np.random.Generator | None = None, floor: float = 1e-6) -> float:
    """
    Max relative error between reverse-mode and central-difference gradients.

    f must be deterministic and read the parameters it is checked against.
    samples_per_param limits the number of checked elements per tensor.
    Parameter grads are left at zero.
    """
    if not isinstance(params, Mapping):
        params = {str(i): p for i, p in enumerate(params)}
    for p in params.values():
        p.data = np.ascontiguousarray(p.data)
        p.zero_grad()
    f().backward()
    analytic = {name: p.grad.copy() for name, p in params.items()}
    for p in params.values():
        p.zero_grad()
    rng = rng or np.random.default_rng(0)

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        indices = np.arange(flat.size)
        if samples_per_param is not None and flat.size > samples_per_param:
            indices = rng.choice(flat.size, size=samples_per_param, replace=False)
        for i in indices:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f().data)
            flat[i] = orig - h
            f_minus = float(f().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            exact = analytic[name].reshape(-1)[i]
            err = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            worst = max(worst, err)
    return worst
