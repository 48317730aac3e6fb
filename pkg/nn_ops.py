"""
nn_ops.py — network building blocks and the Adam optimizer.

Convolution is cross-correlation with zero padding (no kernel flip), for
1-D, 2-D and 3-D inputs laid out as [N, C, spatial...]. The forward pass
uses strided sliding-window views and a single tensordot; the input
gradient is scattered back one kernel offset at a time.

Public API:
  ConvSpec(in_channels, out_channels, kernel, stride=1, padding=0, dims=2)
  conv(x, spec, weights, bias)          -> Tensor [N, out, spatial'...]
  upsample2x(x, mode="nearest")         -> Tensor, every spatial dim doubled
  init_params(spec, seed)               -> He-normal weights (requires_grad)
  init_bias(spec)                       -> zero bias (requires_grad)
  AdamState.create(params, ...)         -> zero moments, t = 0
  adam_step(params, grads, state, lr)   -> new AdamState (params updated)

Adam defaults β1=0.9, β2=0.999, ε=1e-8; the learning rate default used by
training is 0.00005.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from tensor_core import Function, GradientMap, ShapeError, Tensor, get_dtype, make_rng

logger = logging.getLogger(__name__)

DEFAULT_LR = 0.00005


class NonFiniteGradientError(ValueError):
    """Raised by adam_step when a gradient holds NaN or inf."""

    def __init__(self, param_name: str):
        super().__init__(f"non-finite gradient for parameter {param_name!r}")
        self.param_name = param_name


# ---------------------------------------------------------------------------
# ConvSpec
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    dims: int = 2

    def __post_init__(self):
        if self.dims not in (1, 2, 3):
            raise ShapeError(f"dims must be 1, 2 or 3 (got {self.dims})")
        for label in ("in_channels", "out_channels", "kernel", "stride"):
            if getattr(self, label) < 1:
                raise ShapeError(f"{label} must be positive (got {getattr(self, label)})")
        if self.padding < 0:
            raise ShapeError(f"padding must be non-negative (got {self.padding})")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels) + (self.kernel,) * self.dims

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel ** self.dims

    def output_size(self, size: int) -> int:
        out = (size + 2 * self.padding - self.kernel) // self.stride + 1
        if out < 1:
            raise ShapeError(f"spatial size {size} is too small for {self}")
        return out


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

class Conv(Function):
    def forward(self, x, w, b, stride=1, padding=0):
        dims = w.ndim - 2
        kernel = w.shape[2:]
        self.dims, self.stride, self.padding = dims, stride, padding
        self.x_shape = x.shape
        xp = np.pad(x, [(0, 0), (0, 0)] + [(padding, padding)] * dims) if padding else x
        self.padded_shape = xp.shape
        windows = sliding_window_view(xp, kernel, axis=tuple(range(2, 2 + dims)))
        windows = windows[(slice(None), slice(None)) + (slice(None, None, stride),) * dims]
        self.windows, self.w = windows, w
        self.out_sizes = windows.shape[2:2 + dims]
        out = np.tensordot(
            windows, w,
            axes=((1,) + tuple(range(2 + dims, 2 + 2 * dims)), (1,) + tuple(range(2, 2 + dims))),
        )
        out = np.moveaxis(out, -1, 1) + b.reshape((1, -1) + (1,) * dims)
        return np.ascontiguousarray(out)

    def backward(self, grad):
        dims, stride = self.dims, self.stride
        spatial = tuple(range(2, 2 + dims))
        grad_b = grad.sum(axis=(0,) + spatial)
        grad_w = np.tensordot(grad, self.windows, axes=((0,) + spatial, (0,) + spatial))

        grad_xp = np.zeros(self.padded_shape, dtype=grad.dtype)
        for offset in itertools.product(*(range(k) for k in self.w.shape[2:])):
            # [N, O, out...] x [O, C] -> [N, out..., C]
            part = np.tensordot(grad, self.w[(slice(None), slice(None)) + offset], axes=((1,), (0,)))
            part = np.moveaxis(part, -1, 1)
            target = tuple(
                slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offset, self.out_sizes)
            )
            grad_xp[(slice(None), slice(None)) + target] += part
        if self.padding:
            p = self.padding
            grad_xp = grad_xp[(slice(None), slice(None)) + tuple(slice(p, p + n) for n in self.x_shape[2:])]
        return grad_xp, grad_w, grad_b


def conv(x: Tensor, spec: ConvSpec, weights: Tensor, bias: Tensor) -> Tensor:
    """Cross-correlate `x` [N, C, spatial...] with `weights` [out, in, k...]."""
    if x.ndim != spec.dims + 2:
        raise ShapeError(f"conv{spec.dims}d expects a {spec.dims + 2}-d input, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if weights.shape != spec.weight_shape:
        raise ShapeError(f"weights shape {weights.shape} does not match spec {spec.weight_shape}")
    if bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape} does not match ({spec.out_channels},)")
    for size in x.shape[2:]:
        spec.output_size(size)
    return Conv.apply(x, weights, bias, stride=spec.stride, padding=spec.padding)


# ---------------------------------------------------------------------------
# Upsampling
# ---------------------------------------------------------------------------

class Upsample2x(Function):
    def forward(self, x):
        self.x_shape = x.shape
        out = x
        for axis in range(2, x.ndim):
            out = np.repeat(out, 2, axis=axis)
        return out

    def backward(self, grad):
        blocked = []
        for n in self.x_shape[2:]:
            blocked.extend((n, 2))
        grad = grad.reshape(self.x_shape[:2] + tuple(blocked))
        return (grad.sum(axis=tuple(range(3, grad.ndim, 2))),)


def upsample2x(x: Tensor, mode: str = "nearest") -> Tensor:
    """Double every spatial dim by nearest-neighbour replication."""
    if mode != "nearest":
        raise ValueError(f"unsupported upsampling mode {mode!r}")
    if x.ndim < 3:
        raise ShapeError(f"upsample2x needs at least one spatial dim, got shape {x.shape}")
    return Upsample2x.apply(x)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def init_params(spec: ConvSpec, seed: int, name: str | None = None) -> Tensor:
    """He-style normal weights with variance 2 / fan_in."""
    std = np.sqrt(2.0 / spec.fan_in)
    values = make_rng(seed).standard_normal(spec.weight_shape) * std
    return Tensor(values.astype(get_dtype()), requires_grad=True, name=name)


def init_bias(spec: ConvSpec, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(spec.out_channels, dtype=get_dtype()), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: Mapping[str, Tensor], beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
            t=0, beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(params: Mapping[str, Tensor], grads: GradientMap, state: AdamState,
              lr: float = DEFAULT_LR) -> AdamState:
    """One bias-corrected Adam update.

    Parameter arrays are replaced (not mutated) so graphs built before the
    step keep their values. All gradients are validated before any
    parameter changes.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive (got {lr})")
    gradients = {}
    for name, param in params.items():
        g = grads.array(param)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
        gradients[name] = g

    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    new_m, new_v = {}, {}
    for name, param in params.items():
        g = gradients[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    return AdamState(m=new_m, v=new_v, t=t, beta1=b1, beta2=b2, eps=state.eps)
