"""
tests/test_losses.py — image losses, SSIM, edge maps and the weighted total.
"""

import numpy as np
import pytest

from losses import (
    SSIM_C1,
    SSIM_C2,
    FeatureNet,
    LossConfigError,
    LossWeights,
    adversarial_losses,
    color_loss,
    combine,
    edge_map,
    feature_loss,
    shape_loss,
    ssim,
    ssim_loss,
    total_loss,
)
from tensor_core import ShapeError, Tensor, backward, grad_check, make_rng


def _ssim_oracle(a, b, window=7):
    """Direct per-window scalar formula with population statistics."""
    values = []
    n, c, h, w = a.shape
    for i in range(n):
        for ch in range(c):
            for y in range(h - window + 1):
                for x in range(w - window + 1):
                    pa = a[i, ch, y:y + window, x:x + window]
                    pb = b[i, ch, y:y + window, x:x + window]
                    ma, mb = pa.mean(), pb.mean()
                    va, vb = pa.var(), pb.var()
                    cov = ((pa - ma) * (pb - mb)).mean()
                    values.append(((2 * ma * mb + SSIM_C1) * (2 * cov + SSIM_C2))
                                  / ((ma ** 2 + mb ** 2 + SSIM_C1) * (va + vb + SSIM_C2)))
    return float(np.mean(values))


def _constant_critic(value):
    return lambda image: image.mean(axes=(1, 2, 3), keepdims=True) * 0.0 + value


# ---------------------------------------------------------------------------
# color / feature
# ---------------------------------------------------------------------------

def test_color_loss_is_mean_absolute_difference():
    a = Tensor(np.zeros((1, 3, 2, 2)))
    b = Tensor(np.full((1, 3, 2, 2), 0.25))
    assert color_loss(a, b).item() == 0.25


def test_color_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        color_loss(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 3, 4, 5))))


def test_feature_loss_zero_for_identical_images_and_positive_otherwise():
    net = FeatureNet.create(0)
    rng = make_rng(1)
    a = Tensor(rng.uniform(0, 1, (2, 3, 16, 16)))
    b = Tensor(rng.uniform(0, 1, (2, 3, 16, 16)))
    assert feature_loss(a, a, net).item() == 0.0
    assert feature_loss(a, b, net).item() > 0.0


def test_feature_net_weights_round_trip(tmp_path):
    net = FeatureNet.create(5)
    path = tmp_path / "features.npz"
    net.save_npz(path)
    loaded = FeatureNet.from_npz(path)
    x = Tensor(make_rng(2).uniform(0, 1, (1, 3, 8, 8)))
    for fa, fb in zip(net.features(x), loaded.features(x)):
        assert np.array_equal(fa.data, fb.data)


def test_feature_net_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        FeatureNet.from_npz(tmp_path / "missing.npz")
    bad = tmp_path / "bad.npz"
    np.savez(bad, **{"conv0.weight": np.zeros((1, 1, 1, 1))})
    with pytest.raises(LossConfigError):
        FeatureNet.from_npz(bad)


def test_feature_net_is_frozen():
    net = FeatureNet.create(0)
    x = Tensor(make_rng(3).uniform(0, 1, (1, 3, 8, 8)), requires_grad=True)
    grads = backward(feature_loss(x, Tensor(np.zeros((1, 3, 8, 8))), net))
    assert grads.params() == [x]


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

def test_ssim_matches_scalar_oracle_on_random_pairs():
    rng = make_rng(10)
    for _ in range(20):
        a = rng.uniform(0, 1, (1, 1, 16, 16))
        b = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
        assert abs(ssim(Tensor(a), Tensor(b)).item() - _ssim_oracle(a, b)) < 1e-6


def test_ssim_of_identical_images_is_exactly_one():
    a = Tensor(make_rng(11).uniform(0, 1, (2, 3, 16, 16)))
    assert ssim(a, a).item() == 1.0
    assert ssim_loss(a, a).item() == 0.0


def test_ssim_is_bounded():
    rng = make_rng(12)
    a = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)))
    assert -1.0 <= ssim(a, 1.0 - a).item() < 0.5


def test_ssim_rejects_small_images_and_even_windows():
    with pytest.raises(ShapeError):
        ssim(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((1, 1, 5, 5))))
    with pytest.raises(LossConfigError):
        ssim(Tensor(np.zeros((1, 1, 9, 9))), Tensor(np.zeros((1, 1, 9, 9))), window=4)


def test_ssim_gradient():
    rng = make_rng(13)
    a = Tensor(rng.uniform(0.2, 0.8, (1, 2, 9, 9)), requires_grad=True)
    b = Tensor(rng.uniform(0.2, 0.8, (1, 2, 9, 9)))
    assert grad_check(lambda t: ssim(t, b), a, max_elements=20).passed


# ---------------------------------------------------------------------------
# edge_map / shape_loss
# ---------------------------------------------------------------------------

def test_edge_map_of_constant_image_is_zero():
    out = edge_map(Tensor(np.full((2, 3, 8, 8), 0.7)))
    assert out.shape == (2, 1, 8, 8)
    assert np.array_equal(out.data, np.zeros((2, 1, 8, 8)))


def test_edge_map_is_max_normalized_and_finds_a_step():
    img = np.zeros((1, 3, 8, 8))
    img[..., 4:] = 1.0
    out = edge_map(Tensor(img)).data[0, 0]
    assert out.max() == pytest.approx(1.0)
    assert out[4, 3] > 0.9 and out[4, 0] == 0.0
    assert np.all(out[0] == 0.0) and np.all(out[:, -1] == 0.0)


def test_shape_loss_uses_given_segments():
    a = Tensor(np.zeros((1, 3, 8, 8)))
    seg_a = Tensor(np.ones((1, 1, 8, 8)))
    seg_b = Tensor(np.zeros((1, 1, 8, 8)))
    assert shape_loss(a, a, a_segment=seg_a, b_segment=seg_b).item() == 1.0
    assert shape_loss(a, a).item() == 0.0


def test_edge_map_gradient():
    rng = make_rng(14)
    x = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)), requires_grad=True)
    w = Tensor(rng.standard_normal((1, 1, 8, 8)))
    assert grad_check(lambda t: (edge_map(t) * w).sum(), x, max_elements=20).passed


# ---------------------------------------------------------------------------
# adversarial
# ---------------------------------------------------------------------------

def test_least_squares_terms():
    real = Tensor(np.zeros((1, 3, 4, 4)))
    fake = Tensor(np.zeros((1, 3, 4, 4)), requires_grad=True)
    l_a, l_d = adversarial_losses(real, fake, _constant_critic(0.5))
    assert l_a.item() == 0.25
    assert l_d.item() == 0.25 + 0.25


def test_critic_loss_sends_no_gradient_to_the_generator():
    fake = Tensor(np.ones((1, 3, 4, 4)), requires_grad=True)
    real = Tensor(np.zeros((1, 3, 4, 4)))
    _, l_d = adversarial_losses(real, fake, lambda img: img.mean(axes=(1, 2, 3), keepdims=True))
    assert fake not in backward(l_d)


# ---------------------------------------------------------------------------
# LossWeights / total
# ---------------------------------------------------------------------------

def test_weights_defaults_and_validation():
    w = LossWeights()
    assert (w.alpha, w.beta, w.gamma, w.lam) == (1.0, 5.0, 10.0, 0.5)
    with pytest.raises(LossConfigError):
        LossWeights(beta=-1)
    with pytest.raises(LossConfigError):
        LossWeights(gamma=float("inf"))


def test_total_is_weighted_sum_in_fixed_order():
    rng = make_rng(20)
    net = FeatureNet.create(1)
    for _ in range(5):
        target = Tensor(rng.uniform(0, 1, (2, 3, 16, 16)))
        synth = Tensor(rng.uniform(0, 1, (2, 3, 16, 16)))
        out = total_loss(target, synth, LossWeights(), net, _constant_critic(0.3))
        parts = out.as_dict()
        expected = (parts["L_R"] + 1.0 * parts["L_SSIM"] + 5.0 * parts["L_V"]
                    + 10.0 * parts["L_S"] + 0.5 * parts["L_A"])
        assert parts["L_Total"] == expected
        assert combine(LossWeights(), parts["L_R"], parts["L_SSIM"], parts["L_V"],
                       parts["L_S"], parts["L_A"]) == expected


def test_breakdown_keys_and_finiteness():
    target = Tensor(np.zeros((1, 3, 8, 8)))
    out = total_loss(target, target, LossWeights(), FeatureNet.create(0), _constant_critic(1.0))
    assert list(out.as_dict()) == ["L_R", "L_SSIM", "L_V", "L_S", "L_A", "L_Total", "L_D"]
    assert out.is_finite()
    assert out.l_total.item() == 0.0
