"""
losses.py — training losses and their weighted combination.

All image losses reduce by mean so the weights below keep their meaning at
any resolution. Images are [N, C, H, W] in [0, 1].

Public API:
  LossWeights(alpha=1, beta=5, gamma=10, lam=0.5)
  FeatureNet.create(seed) / FeatureNet.from_npz(path)   frozen perceptual net
  color_loss(a, b)            mean |a - b|
  feature_loss(a, b, net)     sum over tapped layers of mean squared difference
  ssim(a, b, window=7)        mean SSIM over windows and channels
  ssim_loss(a, b)             1 - ssim
  edge_map(image)             [N, 1, H, W] Sobel magnitude, max-normalized
  shape_loss(a, b, ...)       mean |edge(a) - edge(b)| (or stored segments)
  adversarial_losses(real, fake, discriminator) -> (L_A, L_D)   least squares
  total_loss(target, synthesized, weights, net, discriminator, ...) -> LossBreakdown

L_Total = L_R + alpha*L_SSIM + beta*L_V + gamma*L_S + lam*L_A, evaluated
left to right in exactly that order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from nn_ops import ConvSpec, conv, init_params
from tensor_core import (
    ShapeError,
    Tensor,
    absolute,
    clamp_min,
    derive_seed,
    get_dtype,
    pad,
    relu,
    sqrt,
    square,
)

logger = logging.getLogger(__name__)

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
EDGE_EPS = 2.0 ** -20
EDGE_FLOOR = 1e-6

Discriminator = Callable[[Tensor], Tensor]


class LossConfigError(ValueError):
    """Raised for invalid loss weights or feature-net weights."""


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0   # SSIM
    beta: float = 5.0    # feature
    gamma: float = 10.0  # shape
    lam: float = 0.5     # adversarial

    def __post_init__(self):
        for label in ("alpha", "beta", "gamma", "lam"):
            value = float(getattr(self, label))
            if not math.isfinite(value) or value < 0:
                raise LossConfigError(f"loss weight {label} must be finite and >= 0 (got {value})")
            object.__setattr__(self, label, value)


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# Frozen feature network
# ---------------------------------------------------------------------------

class FeatureNet:
    """Four frozen 3x3 conv layers; activations tapped after layers 2 and 4."""

    CHANNELS = (8, 16, 16, 32)
    STRIDES = (1, 2, 1, 2)
    TAPS = (1, 3)

    def __init__(self, specs: Sequence[ConvSpec], weights: Sequence[Tensor], biases: Sequence[Tensor]):
        self.specs = list(specs)
        self.weights = [w.detach() for w in weights]
        self.biases = [b.detach() for b in biases]

    @classmethod
    def _specs(cls) -> list[ConvSpec]:
        specs, prev = [], 3
        for ch, stride in zip(cls.CHANNELS, cls.STRIDES):
            specs.append(ConvSpec(prev, ch, 3, stride=stride, padding=1))
            prev = ch
        return specs

    @classmethod
    def create(cls, seed: int) -> "FeatureNet":
        specs = cls._specs()
        weights = [init_params(spec, derive_seed(seed, 100 + i)) for i, spec in enumerate(specs)]
        biases = [Tensor(np.zeros(spec.out_channels)) for spec in specs]
        return cls(specs, weights, biases)

    @classmethod
    def from_npz(cls, path: str | Path) -> "FeatureNet":
        """Load weights saved as conv{i}.weight / conv{i}.bias arrays."""
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"feature-net weights not found: {path}")
        specs = cls._specs()
        weights, biases = [], []
        with np.load(path) as archive:
            for i, spec in enumerate(specs):
                try:
                    w = archive[f"conv{i}.weight"]
                    b = archive[f"conv{i}.bias"]
                except KeyError as exc:
                    raise LossConfigError(f"{path}: missing array {exc}") from None
                if w.shape != spec.weight_shape or b.shape != (spec.out_channels,):
                    raise LossConfigError(
                        f"{path}: conv{i} has shapes {w.shape}/{b.shape}, expected "
                        f"{spec.weight_shape}/({spec.out_channels},)"
                    )
                weights.append(Tensor(w.astype(get_dtype())))
                biases.append(Tensor(b.astype(get_dtype())))
        logger.info("Loaded feature-net weights from %s", path)
        return cls(specs, weights, biases)

    def save_npz(self, path: str | Path) -> None:
        arrays = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"conv{i}.weight"] = w.data
            arrays[f"conv{i}.bias"] = b.data
        np.savez(path, **arrays)

    def features(self, x: Tensor) -> list[Tensor]:
        taps = []
        for i, (spec, w, b) in enumerate(zip(self.specs, self.weights, self.biases)):
            x = relu(conv(x, spec, w, b))
            if i in self.TAPS:
                taps.append(x)
        return taps


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def color_loss(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "color_loss")
    return absolute(a - b).mean()


def feature_loss(a: Tensor, b: Tensor, net: FeatureNet) -> Tensor:
    _same_shape(a, b, "feature_loss")
    total: Optional[Tensor] = None
    for fa, fb in zip(net.features(a), net.features(b)):
        term = square(fa - fb).mean()
        total = term if total is None else total + term
    assert total is not None
    return total


def _box_filter(x: Tensor, window: int) -> Tensor:
    spec = ConvSpec(1, 1, window)
    weights = Tensor(np.full(spec.weight_shape, 1.0 / (window * window)), dtype=x.dtype)
    bias = Tensor(np.zeros(1), dtype=x.dtype)
    return conv(x, spec, weights, bias)


def ssim(a: Tensor, b: Tensor, window: int = 7, c1: float = SSIM_C1, c2: float = SSIM_C2) -> Tensor:
    """Mean SSIM with a uniform `window` x `window` window (valid positions only).

    Variances and covariance are population statistics over each window.
    """
    _same_shape(a, b, "ssim")
    if window < 1 or window % 2 == 0:
        raise LossConfigError(f"ssim window must be odd and positive (got {window})")
    if a.ndim != 4:
        raise ShapeError(f"ssim expects [N, C, H, W] images, got shape {a.shape}")
    n, c, h, w = a.shape
    if h < window or w < window:
        raise ShapeError(f"images of size {h}x{w} are smaller than the {window}x{window} window")
    a1 = a.reshape(n * c, 1, h, w)
    b1 = b.reshape(n * c, 1, h, w)

    mu_a = _box_filter(a1, window)
    mu_b = _box_filter(b1, window)
    mu_ab = mu_a * mu_b
    var_a = _box_filter(a1 * a1, window) - mu_a * mu_a
    var_b = _box_filter(b1 * b1, window) - mu_b * mu_b
    cov = _box_filter(a1 * b1, window) - mu_ab

    numerator = (2.0 * mu_ab + c1) * (2.0 * cov + c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return (numerator / denominator).mean()


def ssim_loss(a: Tensor, b: Tensor, window: int = 7) -> Tensor:
    return 1.0 - ssim(a, b, window)


def edge_map(image: Tensor) -> Tensor:
    """Sobel gradient magnitude of the channel-mean image, scaled to [0, 1].

    The 3x3 Sobel is applied as a difference along one axis and a
    [1, 2, 1] smoothing along the other, at valid positions; the border
    ring is zero. Constant images map to exactly zero.
    """
    if image.ndim != 4:
        raise ShapeError(f"edge_map expects [N, C, H, W], got shape {image.shape}")
    n, _, h, w = image.shape
    if h < 3 or w < 3:
        raise ShapeError(f"edge_map needs at least 3x3 images, got {h}x{w}")
    gray = image.mean(axes=1, keepdims=True)

    dx = gray[:, :, :, 2:] - gray[:, :, :, :-2]
    gx = dx[:, :, :-2, :] + 2.0 * dx[:, :, 1:-1, :] + dx[:, :, 2:, :]
    dy = gray[:, :, 2:, :] - gray[:, :, :-2, :]
    gy = dy[:, :, :, :-2] + 2.0 * dy[:, :, :, 1:-1] + dy[:, :, :, 2:]

    magnitude = sqrt(square(gx) + square(gy) + EDGE_EPS * EDGE_EPS) - EDGE_EPS
    magnitude = pad(magnitude, [(0, 0), (0, 0), (1, 1), (1, 1)])
    peak = clamp_min(magnitude.max(axes=(2, 3), keepdims=True), EDGE_FLOOR)
    return magnitude / peak


def shape_loss(a: Tensor, b: Tensor, *, a_segment: Optional[Tensor] = None,
               b_segment: Optional[Tensor] = None) -> Tensor:
    """Mean |S_a - S_b|; a side without a given segment map uses edge_map."""
    _same_shape(a, b, "shape_loss")
    seg_a = a_segment if a_segment is not None else edge_map(a)
    seg_b = b_segment if b_segment is not None else edge_map(b)
    _same_shape(seg_a, seg_b, "shape_loss segments")
    return absolute(seg_a - seg_b).mean()


def adversarial_losses(real: Tensor, fake: Tensor, discriminator: Discriminator) -> tuple[Tensor, Tensor]:
    """Least-squares GAN terms (L_A for the generator, L_D for the critic).

    L_D scores a detached copy of `fake`, so it carries no gradient to
    whatever produced it.
    """
    _same_shape(real, fake, "adversarial_losses")
    l_d = square(discriminator(real) - 1.0).mean() + square(discriminator(fake.detach())).mean()
    l_a = square(discriminator(fake) - 1.0).mean()
    return l_a, l_d


# ---------------------------------------------------------------------------
# Breakdown
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossBreakdown:
    l_r: Tensor
    l_ssim: Tensor
    l_v: Tensor
    l_s: Tensor
    l_a: Tensor
    l_total: Tensor
    l_d: Tensor

    def as_dict(self) -> dict[str, float]:
        return {
            "L_R": self.l_r.item(),
            "L_SSIM": self.l_ssim.item(),
            "L_V": self.l_v.item(),
            "L_S": self.l_s.item(),
            "L_A": self.l_a.item(),
            "L_Total": self.l_total.item(),
            "L_D": self.l_d.item(),
        }

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_dict().values())


def combine(weights: LossWeights, l_r, l_ssim, l_v, l_s, l_a):
    """The weighted sum, in the fixed evaluation order (works on floats too)."""
    return l_r + weights.alpha * l_ssim + weights.beta * l_v + weights.gamma * l_s + weights.lam * l_a


def total_loss(target: Tensor, synthesized: Tensor, weights: LossWeights, net: FeatureNet,
               discriminator: Discriminator, *, predicted_segment: Optional[Tensor] = None,
               target_segment: Optional[Tensor] = None) -> LossBreakdown:
    _same_shape(target, synthesized, "total_loss")
    l_r = color_loss(synthesized, target)
    l_ssim = ssim_loss(synthesized, target)
    l_v = feature_loss(synthesized, target, net)
    l_s = shape_loss(synthesized, target, a_segment=predicted_segment, b_segment=target_segment)
    l_a, l_d = adversarial_losses(target, synthesized, discriminator)
    l_total = combine(weights, l_r, l_ssim, l_v, l_s, l_a)
    return LossBreakdown(l_r=l_r, l_ssim=l_ssim, l_v=l_v, l_s=l_s, l_a=l_a, l_total=l_total, l_d=l_d)
