"""
tests/test_model.py — network shapes, parameter groups and data flow.
"""

import numpy as np
import pytest

from geometry import REFERENCE_POSE, Pose, rotate_volume, rotation_between
from losses import FeatureNet, LossWeights, total_loss
from model import (
    ModelConfig,
    ModelConfigError,
    discriminate,
    discriminator_params,
    features_to_tokens,
    forward,
    frozen,
    generator_params,
    init_model_params,
    layer_specs,
    parameter_count,
    synthesize,
    tokens_to_features,
    vgm_render,
)
from tensor_core import Tensor, backward, make_rng


def _images(n, size=16, seed=0):
    return Tensor(make_rng(seed).uniform(0, 1, (n, 3, size, size)))


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

def test_default_config_is_valid():
    config = ModelConfig()
    assert config.feature_size == 4
    assert config.scale_steps == 2
    assert config.lift_channels == 16 * 8


@pytest.mark.parametrize("kwargs", [
    {"image_size": 20},                                 # not divisible by 2^4
    {"image_size": 16, "encoder_channels": (4, 8, 16, 32)},  # 1x1 feature map
    {"image_size": 16, "encoder_channels": (4,), "volume_size": 3},
    {"token_conv_layers": 0},
    {"discriminator_channels": ()},
])
def test_invalid_configs_raise(kwargs):
    with pytest.raises(ModelConfigError):
        ModelConfig(**kwargs)


def test_layer_specs_cover_every_group(micro_model):
    groups = {name.split(".")[0] for name in layer_specs(micro_model)}
    assert groups == {"encoder", "ttm", "vgm", "disc"}
    assert layer_specs(micro_model)["ttm.token0"].dims == 1
    assert layer_specs(micro_model)["vgm.lift3d0"].dims == 3


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def test_init_is_deterministic_per_seed(micro_model):
    a = init_model_params(micro_model, 4)
    b = init_model_params(micro_model, 4)
    c = init_model_params(micro_model, 5)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert not np.array_equal(a["encoder.conv0.weight"].data, c["encoder.conv0.weight"].data)


def test_parameter_groups_partition_the_model(micro_model):
    params = init_model_params(micro_model, 0)
    gen, disc = generator_params(params), discriminator_params(params)
    assert set(gen) | set(disc) == set(params)
    assert not set(gen) & set(disc)
    assert all(name.startswith("disc.") for name in disc)
    assert parameter_count(params) == parameter_count(gen) + parameter_count(disc)


def test_frozen_copies_do_not_require_grad(micro_model):
    params = frozen(init_model_params(micro_model, 0))
    assert not any(p.requires_grad for p in params.values())


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def test_forward_shapes(micro_model):
    params = init_model_params(micro_model, 0)
    out = forward(_images(2), [Pose(0, 0), Pose(90, 0)], params, micro_model)
    assert out.features.shape == (2, 8, 4, 4)
    assert out.tokens.shape == (2, 8, 16)
    assert out.transformed.shape == (2, 8, 16)
    assert out.intrinsic.shape == (2, 3, 16, 16)
    assert out.volume.shape == (2, 2, 4, 4, 4)
    assert out.image.shape == (2, 3, 16, 16)
    assert out.segment.shape == (2, 1, 16, 16)
    assert 0.0 <= out.image.data.min() and out.image.data.max() <= 1.0


def test_default_64px_shapes():
    config = ModelConfig()
    params = frozen(init_model_params(config, 0))
    out = forward(_images(2, size=64), [Pose(0, 0), Pose(40, 10)], params, config)
    assert out.features.shape == (2, 128, 4, 4)
    assert out.tokens.shape == (2, 128, 16)
    assert out.intrinsic.shape == (2, 3, 64, 64)
    assert out.volume.shape == (2, 8, 16, 16, 16)
    assert out.image.shape == (2, 3, 64, 64)
    assert out.segment.shape == (2, 1, 64, 64)
    assert discriminate(out.image, params, config).shape == (2, 1, 8, 8)


def test_160px_five_layer_shapes():
    config = ModelConfig(image_size=160, encoder_channels=(16, 32, 64, 128, 256), volume_size=20)
    assert [layer_specs(config)[f"ttm.refine{i}"].out_channels for i in range(5)] == [128, 64, 32, 16, 3]
    params = frozen(init_model_params(config, 0))
    out = forward(_images(1, size=160), Pose(20, 0), params, config)
    assert out.features.shape == (1, 256, 5, 5)
    assert out.tokens.shape == (1, 256, 25)
    assert out.intrinsic.shape == (1, 3, 160, 160)
    assert out.image.shape == (1, 3, 160, 160)


def test_tokens_round_trip_features():
    x = Tensor(np.arange(2 * 3 * 4 * 4, dtype=float).reshape(2, 3, 4, 4))
    tokens = features_to_tokens(x)
    assert np.array_equal(tokens.data[0, 1], x.data[0, 1].ravel())
    assert np.array_equal(tokens_to_features(tokens, 4).data, x.data)
    with pytest.raises(ModelConfigError):
        tokens_to_features(tokens, 3)


def test_wrong_image_size_is_rejected(micro_model):
    params = init_model_params(micro_model, 0)
    with pytest.raises(ModelConfigError):
        synthesize(_images(1, size=32), Pose(0, 0), params, micro_model)


def test_pose_count_must_match_batch(micro_model):
    params = init_model_params(micro_model, 0)
    with pytest.raises(ModelConfigError):
        forward(_images(2), [Pose(0, 0)] * 3, params, micro_model)


def test_multi_pose_synthesis_matches_single_renders(micro_model):
    params = frozen(init_model_params(micro_model, 1))
    source = _images(1, seed=3)
    poses = [Pose(0, 0), Pose(90, 0), Pose(45, 10)]
    batch = synthesize(source, poses, params, micro_model).data
    for i, pose in enumerate(poses):
        single = synthesize(source, pose, params, micro_model).data
        assert np.allclose(batch[i], single[0], atol=1e-12)


def test_synthesis_is_deterministic(micro_model):
    params = frozen(init_model_params(micro_model, 2))
    source = _images(1, seed=4)
    a = synthesize(source, Pose(30, 10), params, micro_model).data
    b = synthesize(source, Pose(30, 10), params, micro_model).data
    assert np.array_equal(a, b)


def test_render_rotates_from_the_reference_pose(micro_model):
    """Rendering at 90 degrees equals rendering a pre-rotated volume at the reference."""
    params = frozen(init_model_params(micro_model, 3))
    vol = Tensor(make_rng(5).uniform(0, 1, (1, 2, 4, 4, 4)))
    R = rotation_between(REFERENCE_POSE, Pose(90, 0))
    turned = rotate_volume(vol, R, "nearest")
    a, _ = vgm_render(vol, Pose(90, 0), REFERENCE_POSE, params, micro_model)
    b, _ = vgm_render(turned, REFERENCE_POSE, REFERENCE_POSE, params, micro_model)
    assert np.allclose(a.data, b.data, atol=1e-12)


def test_discriminator_scores_patches(micro_model):
    params = init_model_params(micro_model, 0)
    scores = discriminate(_images(2), params, micro_model)
    assert scores.shape == (2, 1, 4, 4)


# ---------------------------------------------------------------------------
# Gradient routing
# ---------------------------------------------------------------------------

def test_total_loss_reaches_every_generator_parameter(micro_model):
    params = init_model_params(micro_model, 6)
    source = _images(2, seed=7)
    out = forward(source, [Pose(90, 0), Pose(0, 0)], params, micro_model)
    breakdown = total_loss(source, out.image, LossWeights(), FeatureNet.create(0),
                           lambda img: discriminate(img, params, micro_model),
                           predicted_segment=out.segment,
                           target_segment=Tensor(np.zeros((2, 1, 16, 16))))
    gen_grads = backward(breakdown.l_total)
    for name, p in generator_params(params).items():
        assert p in gen_grads, name
    critic_grads = backward(breakdown.l_d)
    assert all(p not in critic_grads for p in generator_params(params).values())
    assert all(p in critic_grads for p in discriminator_params(params).values())
