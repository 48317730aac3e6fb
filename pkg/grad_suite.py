"""
grad_suite.py — finite-difference checks for every differentiable op.

Each case builds a scalar function of one input tensor from a seed and
hands it to tensor_core.grad_check. Inputs are drawn away from kinks
(relu / abs / leaky-relu at 0, ties in max) so the central difference
is valid. Cases run at float64 whatever the global precision is.

Public API:
  CASES                       name -> GradCase
  run_suite(seeds, names)     -> list[GradResult]
  format_result(result)       "PASS: <case> seed=<s> max_rel_err=<e>"
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from geometry import Pose, rotate_volume, rotation_between
from losses import (
    FeatureNet,
    LossWeights,
    adversarial_losses,
    color_loss,
    edge_map,
    feature_loss,
    shape_loss,
    ssim,
    total_loss,
)
from model import ModelConfig, discriminate, forward, init_model_params
from nn_ops import ConvSpec, conv, init_bias, init_params, upsample2x
from tensor_core import (
    GradCheckReport,
    Tensor,
    derive_seed,
    elementwise,
    grad_check,
    make_rng,
    precision,
    reduce,
)

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2)
MODEL_TOL = 1e-3

Check = tuple[Callable[[Tensor], Tensor], Tensor]


@dataclass(frozen=True)
class GradCase:
    name: str
    build: Callable[[int], Check]
    tol: float = 1e-4
    max_elements: Optional[int] = 24


@dataclass(frozen=True)
class GradResult:
    case: str
    seed: int
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _leaf(values: np.ndarray) -> Tensor:
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def _away_from_zero(rng: np.random.Generator, shape, low: float = 0.1, high: float = 1.0) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, high, size=shape)


def _weighted_sum(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    weights = Tensor(rng.standard_normal(out.shape))
    return lambda y: (y * weights).sum()


# ---------------------------------------------------------------------------
# Cases
# ---------------------------------------------------------------------------

def _unary(kind: str, low: float = 0.1, positive: bool = False) -> Callable[[int], Check]:
    def build(seed: int) -> Check:
        rng = make_rng(seed)
        shape = (3, 4)
        values = rng.uniform(0.5, 2.0, shape) if positive else _away_from_zero(rng, shape, low)
        x = _leaf(values)
        proj = _weighted_sum(x, rng)
        return (lambda t: proj(elementwise(kind, t))), x
    return build


def _binary(kind: str) -> Callable[[int], Check]:
    def build(seed: int) -> Check:
        rng = make_rng(seed)
        x = _leaf(_away_from_zero(rng, (3, 4), 0.5, 1.5))
        other = Tensor(_away_from_zero(rng, (4,), 0.5, 1.5))
        proj = _weighted_sum(x, rng)
        return (lambda t: proj(elementwise(kind, t, other)) + proj(elementwise(kind, other, t))), x
    return build


def _reduction(kind: str) -> Callable[[int], Check]:
    def build(seed: int) -> Check:
        rng = make_rng(seed)
        x = _leaf(rng.standard_normal((2, 3, 4)))
        return (lambda t: (reduce(kind, t, axes=(1,)) * Tensor(np.arange(1.0, 9.0).reshape(2, 4))).sum()), x
    return build


def _conv(dims: int, wrt: str) -> Callable[[int], Check]:
    def build(seed: int) -> Check:
        rng = make_rng(seed)
        spec = ConvSpec(2, 3, 3, stride=1 + seed % 2, padding=1, dims=dims)
        x = _leaf(rng.standard_normal((2, 2) + (5,) * dims))
        w, b = init_params(spec, seed), init_bias(spec)
        b.data = rng.standard_normal(b.shape)
        out_shape = (2, 3) + (spec.output_size(5),) * dims
        weights = Tensor(rng.standard_normal(out_shape))
        target = {"input": x, "weight": w, "bias": b}[wrt]
        return (lambda _: (conv(x, spec, w, b) * weights).sum()), target
    return build


def _upsample(seed: int) -> Check:
    rng = make_rng(seed)
    x = _leaf(rng.standard_normal((1, 2, 3, 3)))
    weights = Tensor(rng.standard_normal((1, 2, 6, 6)))
    return (lambda t: (upsample2x(t) * weights).sum()), x


def _rotate(seed: int) -> Check:
    rng = make_rng(seed)
    R = rotation_between(Pose(0, 0), Pose(rng.uniform(10, 80), rng.uniform(-40, 40)))
    x = _leaf(rng.standard_normal((1, 2, 5, 5, 5)))
    weights = Tensor(rng.standard_normal((1, 2, 5, 5, 5)))
    return (lambda t: (rotate_volume(t, R, "trilinear") * weights).sum()), x


def _image_pair(rng: np.random.Generator, size: int = 9) -> tuple[Tensor, Tensor]:
    a = rng.uniform(0.2, 0.8, (1, 3, size, size))
    b = np.clip(a + _away_from_zero(rng, a.shape, 0.05, 0.2), 0.0, 1.0)
    return _leaf(a), Tensor(b)


def _loss_case(kind: str) -> Callable[[int], Check]:
    def build(seed: int) -> Check:
        rng = make_rng(seed)
        a, b = _image_pair(rng)
        if kind == "color":
            return (lambda t: color_loss(t, b)), a
        if kind == "ssim":
            return (lambda t: ssim(t, b, window=5)), a
        if kind == "edge":
            weights = Tensor(rng.standard_normal((1, 1, 9, 9)))
            return (lambda t: (edge_map(t) * weights).sum()), a
        if kind == "feature":
            net = FeatureNet.create(derive_seed(seed, 7))
            return (lambda t: feature_loss(t, b, net)), a
        if kind == "shape":
            seg_b = Tensor(rng.uniform(0.0, 1.0, (1, 1, 9, 9)))
            return (lambda t: shape_loss(t, b, b_segment=seg_b)), a
        raise KeyError(kind)
    return build


MICRO_MODEL = ModelConfig(
    image_size=16,
    encoder_channels=(4, 8),
    token_conv_layers=2,
    volume_size=4,
    volume_channels=2,
    discriminator_channels=(4, 8),
)


def _adversarial(seed: int) -> Check:
    rng = make_rng(seed)
    params = init_model_params(MICRO_MODEL, derive_seed(seed, 11))
    real = Tensor(rng.uniform(0, 1, (2, 3, 16, 16)))
    fake = _leaf(rng.uniform(0, 1, (2, 3, 16, 16)))
    critic = lambda img: discriminate(img, params, MICRO_MODEL)  # noqa: E731
    return (lambda t: adversarial_losses(real, t, critic)[0]), fake


def _model(param: str, which: str = "total") -> Callable[[int], Check]:
    """End-to-end: one parameter tensor of the micro model against L_Total (or L_D)."""
    def build(seed: int) -> Check:
        rng = make_rng(seed)
        params = init_model_params(MICRO_MODEL, derive_seed(seed, 13))
        for name, p in params.items():
            if name.endswith(".bias"):
                p.data = rng.normal(0.0, 0.05, p.shape)
        source = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)))
        target = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)))
        target_segment = Tensor(rng.uniform(0, 1, (1, 1, 16, 16)))
        net = FeatureNet.create(derive_seed(seed, 17))
        pose = Pose(90.0, 0.0)

        def loss(_: Tensor) -> Tensor:
            fp = forward(source, pose, params, MICRO_MODEL)
            out = total_loss(target, fp.image, LossWeights(), net,
                             lambda img: discriminate(img, params, MICRO_MODEL),
                             predicted_segment=fp.segment, target_segment=target_segment)
            return out.l_total if which == "total" else out.l_d

        return loss, params[param]
    return build


CASES: dict[str, GradCase] = {
    case.name: case
    for case in [
        *(GradCase(f"binary.{k}", _binary(k)) for k in ("add", "sub", "mul", "div")),
        GradCase("unary.neg", _unary("neg")),
        GradCase("unary.relu", _unary("relu")),
        GradCase("unary.leaky_relu", _unary("leaky_relu")),
        GradCase("unary.sigmoid", _unary("sigmoid")),
        GradCase("unary.tanh", _unary("tanh")),
        GradCase("unary.abs", _unary("abs")),
        GradCase("unary.sqrt", _unary("sqrt", positive=True)),
        GradCase("unary.square", _unary("square")),
        *(GradCase(f"reduce.{k}", _reduction(k)) for k in ("sum", "mean", "max")),
        *(GradCase(f"conv{d}d.{w}", _conv(d, w)) for d in (1, 2, 3) for w in ("input", "weight", "bias")),
        GradCase("upsample2x", _upsample),
        GradCase("rotate_volume", _rotate),
        *(GradCase(f"loss.{k}", _loss_case(k)) for k in ("color", "ssim", "edge", "feature", "shape")),
        GradCase("loss.adversarial", _adversarial),
        GradCase("model.encoder", _model("encoder.conv0.weight"), tol=MODEL_TOL, max_elements=6),
        GradCase("model.ttm", _model("ttm.token0.weight"), tol=MODEL_TOL, max_elements=6),
        GradCase("model.vgm", _model("vgm.render3d0.weight"), tol=MODEL_TOL, max_elements=6),
        GradCase("model.disc", _model("disc.conv0.weight", "critic"), tol=MODEL_TOL, max_elements=6),
    ]
}


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------

def run_case(case: GradCase, seed: int) -> GradResult:
    with precision("float64"):
        f, x = case.build(seed)
        report = grad_check(f, x, tol=case.tol, max_elements=case.max_elements, seed=seed)
    if not report.passed:
        logger.warning("grad check %s (seed %d) failed: max_rel_err=%.3e", case.name, seed, report.max_rel_err)
    return GradResult(case.name, seed, report)


def run_suite(seeds: Sequence[int] = DEFAULT_SEEDS, names: Optional[Sequence[str]] = None) -> list[GradResult]:
    selected = list(names) if names else list(CASES)
    unknown = [n for n in selected if n not in CASES]
    if unknown:
        raise KeyError(f"unknown gradient check(s): {', '.join(unknown)}")
    return [run_case(CASES[name], seed) for name in selected for seed in seeds]


def format_result(result: GradResult) -> str:
    status = "PASS" if result.passed else "FAIL"
    return (f"{status}: {result.case} seed={result.seed} "
            f"max_rel_err={result.report.max_rel_err:.3e} checked={result.report.checked}")
