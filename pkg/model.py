"""
model.py — the view-synthesis network.

Data flow for one source image I [N, 3, S, S]:

  encode2d            stride-2 3x3 convs              -> F  [N, C, S', S']
  features_to_tokens  one token per channel            -> T  [N, C, S'*S']
  transform_tokens    1-D convs along the token axis   -> T' [N, C, S'*S']
  tokens_to_features + refine (conv, act, upsample)    -> IR [N, 3, S, S]
  vgm_lift            2-D convs, depth-from-channels, 3-D convs -> V [N, vc, D, D, D]
  vgm_render          rotate(reference -> target), 3-D convs, depth-to-channels,
                      2-D decoder, sigmoid heads       -> image [N, 3, S, S], segment [N, 1, S, S]

`synthesize` takes the source image and target pose(s) only. The source
pose never enters the network.

Parameters live in one flat dict keyed `<group>.<layer>.weight|bias` with
groups encoder / ttm / vgm (the generator) and disc (the discriminator).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence, Union

import numpy as np

from geometry import REFERENCE_POSE, Pose, rotate_volume, rotation_between
from nn_ops import ConvSpec, conv, init_bias, init_params, upsample2x
from tensor_core import Tensor, concat, derive_seed, leaky_relu, relu, sigmoid

logger = logging.getLogger(__name__)

ModelParams = dict[str, Tensor]
PoseArg = Union[Pose, Sequence[Pose]]

GENERATOR_GROUPS = ("encoder", "ttm", "vgm")
DISCRIMINATOR_GROUP = "disc"


class ModelConfigError(ValueError):
    """Raised when a model config or an input does not fit the network."""


def _power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    encoder_channels: tuple[int, ...] = (16, 32, 64, 128)
    token_conv_layers: int = 3
    volume_size: int = 16
    volume_channels: int = 8
    reference_pose: Pose = field(default_factory=lambda: REFERENCE_POSE)
    discriminator_channels: tuple[int, ...] = (16, 32, 64)

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "discriminator_channels", tuple(int(c) for c in self.discriminator_channels))
        s = self.image_size
        if not self.encoder_channels or min(self.encoder_channels) < 1:
            raise ModelConfigError("encoder_channels must be a non-empty list of positive ints")
        if s % (2 ** len(self.encoder_channels)) or s // 2 ** len(self.encoder_channels) < 2:
            raise ModelConfigError(
                f"image_size {s} must be divisible by 2^{len(self.encoder_channels)} "
                "and leave a feature map of at least 2x2"
            )
        if self.token_conv_layers < 1:
            raise ModelConfigError(f"token_conv_layers must be >= 1 (got {self.token_conv_layers})")
        if self.volume_channels < 1 or self.volume_size < 1:
            raise ModelConfigError("volume_size and volume_channels must be positive")
        if s % self.volume_size or not _power_of_two(s // self.volume_size):
            raise ModelConfigError(
                f"image_size / volume_size must be a power of two (got {s} / {self.volume_size})"
            )
        if not self.discriminator_channels or min(self.discriminator_channels) < 1:
            raise ModelConfigError("discriminator_channels must be a non-empty list of positive ints")
        if s // 2 ** len(self.discriminator_channels) < 1:
            raise ModelConfigError(f"too many discriminator layers for image_size {s}")

    @property
    def feature_size(self) -> int:
        return self.image_size // 2 ** len(self.encoder_channels)

    @property
    def token_length(self) -> int:
        return self.feature_size ** 2

    @property
    def scale_steps(self) -> int:
        """log2(image_size / volume_size): lift downsamples and decoder upsamples."""
        return (self.image_size // self.volume_size).bit_length() - 1

    @property
    def lift_channels(self) -> int:
        return self.volume_size * self.volume_channels


# ---------------------------------------------------------------------------
# Layers + parameters
# ---------------------------------------------------------------------------

@lru_cache(maxsize=16)
def layer_specs(config: ModelConfig) -> dict[str, ConvSpec]:
    """Every conv layer of the model, in forward order."""
    specs: dict[str, ConvSpec] = {}

    prev = 3
    for i, ch in enumerate(config.encoder_channels):
        specs[f"encoder.conv{i}"] = ConvSpec(prev, ch, 3, stride=2, padding=1)
        prev = ch

    length = config.token_length
    for i in range(config.token_conv_layers):
        specs[f"ttm.token{i}"] = ConvSpec(length, length, 3, stride=1, padding=1, dims=1)

    refine = list(reversed(config.encoder_channels[:-1])) + [3]
    prev = config.encoder_channels[-1]
    for i, ch in enumerate(refine):
        specs[f"ttm.refine{i}"] = ConvSpec(prev, ch, 3, stride=1, padding=1)
        prev = ch

    steps, lifted, vc = config.scale_steps, config.lift_channels, config.volume_channels
    prev = 3
    if steps == 0:
        specs["vgm.lift0"] = ConvSpec(prev, lifted, 3, stride=1, padding=1)
    for i in range(steps):
        ch = max(lifted // 2 ** (steps - 1 - i), 1)
        specs[f"vgm.lift{i}"] = ConvSpec(prev, ch, 3, stride=2, padding=1)
        prev = ch
    for i in range(2):
        specs[f"vgm.lift3d{i}"] = ConvSpec(vc, vc, 3, stride=1, padding=1, dims=3)
    for i in range(2):
        specs[f"vgm.render3d{i}"] = ConvSpec(vc, vc, 3, stride=1, padding=1, dims=3)
    prev = lifted
    for i in range(steps):
        ch = max(lifted // 2 ** (i + 1), 4)
        specs[f"vgm.decode{i}"] = ConvSpec(prev, ch, 3, stride=1, padding=1)
        prev = ch
    specs["vgm.image_head"] = ConvSpec(prev, 3, 3, stride=1, padding=1)
    specs["vgm.segment_head"] = ConvSpec(prev, 1, 3, stride=1, padding=1)

    prev = 3
    for i, ch in enumerate(config.discriminator_channels):
        specs[f"disc.conv{i}"] = ConvSpec(prev, ch, 3, stride=2, padding=1)
        prev = ch
    specs["disc.score"] = ConvSpec(prev, 1, 3, stride=1, padding=1)
    return specs


def init_model_params(config: ModelConfig, seed: int) -> ModelParams:
    """He-normal weights and zero biases; each layer seeded from (seed, index)."""
    params: ModelParams = {}
    for index, (layer, spec) in enumerate(layer_specs(config).items()):
        params[f"{layer}.weight"] = init_params(spec, derive_seed(seed, index), name=f"{layer}.weight")
        params[f"{layer}.bias"] = init_bias(spec, name=f"{layer}.bias")
    logger.debug("Initialized %d parameter tensors (seed=%d)", len(params), seed)
    return params


def param_group(params: Mapping[str, Tensor], *groups: str) -> ModelParams:
    return {name: p for name, p in params.items() if name.split(".", 1)[0] in groups}


def generator_params(params: Mapping[str, Tensor]) -> ModelParams:
    return param_group(params, *GENERATOR_GROUPS)


def discriminator_params(params: Mapping[str, Tensor]) -> ModelParams:
    return param_group(params, DISCRIMINATOR_GROUP)


def frozen(params: Mapping[str, Tensor]) -> ModelParams:
    """Detached copies for inference: no graph is recorded through them."""
    return {name: p.detach() for name, p in params.items()}


def parameter_count(params: Mapping[str, Tensor]) -> int:
    return sum(p.size for p in params.values())


def _layer(x: Tensor, params: Mapping[str, Tensor], specs: Mapping[str, ConvSpec], layer: str) -> Tensor:
    return conv(x, specs[layer], params[f"{layer}.weight"], params[f"{layer}.bias"])


# ---------------------------------------------------------------------------
# Encoder + token transformation
# ---------------------------------------------------------------------------

def _check_image(image: Tensor, config: ModelConfig) -> None:
    s = config.image_size
    if image.ndim != 4 or image.shape[1:] != (3, s, s):
        raise ModelConfigError(f"expected images of shape [N, 3, {s}, {s}], got {image.shape}")


def encode2d(image: Tensor, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    _check_image(image, config)
    specs = layer_specs(config)
    x = image
    for i in range(len(config.encoder_channels)):
        x = relu(_layer(x, params, specs, f"encoder.conv{i}"))
    return x


def features_to_tokens(features: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C, H*W]: token i is channel i in scanline order."""
    n, c, h, w = features.shape
    return features.reshape(n, c, h * w)


def tokens_to_features(tokens: Tensor, size: int) -> Tensor:
    n, c, length = tokens.shape
    if length != size * size:
        raise ModelConfigError(f"token length {length} does not match a {size}x{size} map")
    return tokens.reshape(n, c, size, size)


def transform_tokens(tokens: Tensor, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    """1-D convs across tokens: the channel axis is the sequence, token content the channels."""
    specs = layer_specs(config)
    x = tokens.transpose(0, 2, 1)
    for i in range(config.token_conv_layers):
        x = _layer(x, params, specs, f"ttm.token{i}")
        if i < config.token_conv_layers - 1:
            x = relu(x)
    return x.transpose(0, 2, 1)


def refine(features: Tensor, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    specs = layer_specs(config)
    blocks = len(config.encoder_channels)
    x = features
    for i in range(blocks):
        x = _layer(x, params, specs, f"ttm.refine{i}")
        x = sigmoid(x) if i == blocks - 1 else relu(x)
        x = upsample2x(x)
    return x


def intrinsic_representation(image: Tensor, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    tokens = transform_tokens(features_to_tokens(encode2d(image, params, config)), params, config)
    return refine(tokens_to_features(tokens, config.feature_size), params, config)


# ---------------------------------------------------------------------------
# View generation
# ---------------------------------------------------------------------------

def vgm_lift(ir: Tensor, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    _check_image(ir, config)
    specs = layer_specs(config)
    x = ir
    for i in range(max(config.scale_steps, 1)):
        x = relu(_layer(x, params, specs, f"vgm.lift{i}"))
    d, vc = config.volume_size, config.volume_channels
    if x.shape[1:] != (d * vc, d, d):
        raise ModelConfigError(f"lift produced {x.shape}, expected [N, {d * vc}, {d}, {d}]")
    vol = x.reshape(x.shape[0], vc, d, d, d)
    for i in range(2):
        vol = relu(_layer(vol, params, specs, f"vgm.lift3d{i}"))
    return vol


def _rotations(n: int, target: PoseArg, reference: Pose) -> np.ndarray:
    if isinstance(target, Pose):
        return rotation_between(reference, target)
    poses = list(target)
    if len(poses) != n:
        raise ModelConfigError(f"{len(poses)} target poses for a batch of {n}")
    return np.stack([rotation_between(reference, p) for p in poses])


def vgm_render(vol: Tensor, target: PoseArg, reference: Pose, params: Mapping[str, Tensor],
               config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Rotate the volume from `reference` to `target` and decode image + segment.

    `target` is one pose for the whole batch or one pose per sample.
    """
    specs = layer_specs(config)
    n, d, vc = vol.shape[0], config.volume_size, config.volume_channels
    if vol.shape[1:] != (vc, d, d, d):
        raise ModelConfigError(f"expected a volume [N, {vc}, {d}, {d}, {d}], got {vol.shape}")
    x = rotate_volume(vol, _rotations(n, target, reference), "trilinear")
    for i in range(2):
        x = relu(_layer(x, params, specs, f"vgm.render3d{i}"))
    x = x.reshape(n, vc * d, d, d)
    for i in range(config.scale_steps):
        x = upsample2x(relu(_layer(x, params, specs, f"vgm.decode{i}")))
    image = sigmoid(_layer(x, params, specs, "vgm.image_head"))
    segment = sigmoid(_layer(x, params, specs, "vgm.segment_head"))
    return image, segment


# ---------------------------------------------------------------------------
# Full passes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ForwardPass:
    features: Tensor
    tokens: Tensor
    transformed: Tensor
    intrinsic: Tensor
    volume: Tensor
    image: Tensor
    segment: Tensor


def forward(source: Tensor, target: PoseArg, params: Mapping[str, Tensor], config: ModelConfig) -> ForwardPass:
    features = encode2d(source, params, config)
    tokens = features_to_tokens(features)
    transformed = transform_tokens(tokens, params, config)
    intrinsic = refine(tokens_to_features(transformed, config.feature_size), params, config)
    volume = vgm_lift(intrinsic, params, config)
    image, segment = vgm_render(volume, target, config.reference_pose, params, config)
    return ForwardPass(features, tokens, transformed, intrinsic, volume, image, segment)


def synthesize(source: Tensor, target: PoseArg, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    """Novel view(s) of `source` at `target`.

    With a single source image and a sequence of poses the one volume is
    rendered at every pose ([T, 3, S, S]); otherwise poses pair up with
    the batch.
    """
    _check_image(source, config)
    if not isinstance(target, Pose):
        poses = list(target)
        if source.shape[0] == 1 and len(poses) != 1:
            volume = vgm_lift(intrinsic_representation(source, params, config), params, config)
            volume = concat([volume] * len(poses), axis=0)
            image, _ = vgm_render(volume, poses, config.reference_pose, params, config)
            return image
        target = poses
    return forward(source, target, params, config).image


def discriminate(image: Tensor, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    """Patch realness scores [N, 1, s, s]; no output activation."""
    _check_image(image, config)
    specs = layer_specs(config)
    x = image
    for i in range(len(config.discriminator_channels)):
        x = leaky_relu(_layer(x, params, specs, f"disc.conv{i}"), 0.2)
    return _layer(x, params, specs, "disc.score")
