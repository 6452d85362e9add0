import math

import numpy as np
import pytest
import torch

import oracles
from isgan.errors import DimensionMismatchError, EmptyInputError, ImageTooSmallError
from isgan.image import GrayImage
from isgan.metrics import (
    LossWeights,
    SsimConfig,
    divergence,
    image_loss,
    js_divergence,
    kl_divergence,
    loss_terms,
    ms_ssim,
    mse,
    psnr,
    ssim,
    total_loss,
)


def test_mse_cases():
    x = np.random.default_rng(0).random((4, 4))
    assert float(mse(x, x)) == 0.0
    assert float(mse(np.zeros((3, 3)), np.ones((3, 3)))) == 1.0
    assert float(mse(np.array([[0.0, 0.5]]), np.array([[0.5, 0.5]]))) == 0.125
    with pytest.raises(DimensionMismatchError):
        mse(np.zeros((2, 2)), np.zeros((3, 3)))


def test_psnr_cases():
    x = np.full((4, 4), 0.2)
    assert psnr(x, x) == math.inf
    assert psnr(np.zeros((2, 2)), np.ones((2, 2))) == 0.0
    b = x + math.sqrt(1e-3)
    assert psnr(x, b) == pytest.approx(30.0, abs=1e-9)


def test_ssim_identity_exact(rng):
    x = rng.random((32, 32))
    assert float(ssim(x, x)) == 1.0
    assert float(ms_ssim(x, x, SsimConfig().fitted(32, 32))) == 1.0


def test_ssim_constant_images():
    c1 = 0.01 ** 2
    assert float(ssim(np.zeros((16, 16)), np.ones((16, 16)))) == pytest.approx(c1 / (1 + c1), rel=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_oracle(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((64, 64)), r.random((64, 64))
    b = np.clip(a + 0.2 * (b - 0.5), 0, 1)
    assert abs(float(ssim(a, b)) - oracles.ssim(a, b)) < 1e-6


def test_ms_ssim_matches_oracle_256():
    r = np.random.default_rng(3)
    a = r.random((256, 256))
    b = np.clip(a + 0.1 * r.standard_normal(a.shape), 0, 1)
    assert abs(float(ms_ssim(a, b)) - oracles.ms_ssim(a, b)) < 1e-5


def test_ms_ssim_single_scale_is_ssim(rng):
    a, b = rng.random((24, 24)), rng.random((24, 24))
    cfg = SsimConfig(msssim_scale_weights=(1.0,))
    assert abs(float(ms_ssim(a, b, cfg)) - float(ssim(a, b, cfg))) < 1e-9


def test_explicit_exponents_match_collapsed_form(rng):
    a, b = rng.random((20, 20)), rng.random((20, 20))
    lum, con, struct = oracles.ssim_terms(a, b)
    cfg = SsimConfig(l=1.0, m=1.0, n=1.0 + 1e-15)     # forces the three-term path
    assert float(ssim(a, b, cfg)) == pytest.approx(float(np.mean(lum * con * struct)), abs=1e-9)


def test_ssim_too_small():
    with pytest.raises(ImageTooSmallError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))
    with pytest.raises(ImageTooSmallError):
        ms_ssim(np.zeros((64, 64)), np.zeros((64, 64)))


def test_config_validation_and_fitting():
    with pytest.raises(ValueError):
        SsimConfig(window_size=10)
    with pytest.raises(ValueError):
        SsimConfig(msssim_scale_weights=(0.5, 0.6))
    assert SsimConfig().fitted(256, 256).scales == 5
    for side, scales in ((64, 3), (32, 2), (16, 1)):
        cfg = SsimConfig().fitted(side, side)
        assert cfg.scales == scales
        assert sum(cfg.msssim_scale_weights) == pytest.approx(1.0, abs=1e-12)


def test_image_loss_cases(rng):
    cfg = SsimConfig().fitted(32, 32)
    a, b = rng.random((32, 32)), rng.random((32, 32))
    assert float(image_loss(a, a, LossWeights(), cfg)) == 0.0
    w1 = LossWeights(alpha=1.0, beta=0.0)
    assert float(image_loss(a, b, w1, cfg)) == pytest.approx(1 - float(ssim(a, b, cfg)), abs=1e-12)
    manual = 0.5 * (1 - float(ssim(a, b, cfg))) + 0.5 * (1 - float(ms_ssim(a, b, cfg))) + 0.3 * float(mse(a, b))
    assert float(image_loss(a, b, LossWeights(), cfg)) == pytest.approx(manual, abs=1e-12)


def test_total_loss_cases(rng):
    cfg = SsimConfig().fitted(32, 32)
    c, s = rng.random((32, 32)), rng.random((32, 32))
    c2, s2 = rng.random((32, 32)), rng.random((32, 32))
    assert float(total_loss(c, c, s, s, LossWeights(), cfg)) == 0.0
    w0 = LossWeights(gamma=0.0)
    assert float(total_loss(c, c2, s, s2, w0, cfg)) == float(image_loss(c, c2, w0, cfg))
    # constant 0 vs constant v has 1 - SSIM = v^2 / (v^2 + C1); v^2 = C1 / 9 gives exactly 0.1
    w = LossWeights(alpha=1.0, beta=0.0, gamma=0.85)
    v = math.sqrt(0.01 ** 2 / 9)
    zero, lifted = np.zeros((16, 16)), np.full((16, 16), v)
    assert float(image_loss(zero, lifted, w, cfg)) == pytest.approx(0.1, abs=1e-12)
    assert float(total_loss(zero, lifted, zero, lifted, w, cfg)) == pytest.approx(0.185, abs=1e-12)


def test_loss_terms_mixed_equals_total(rng):
    cfg = SsimConfig().fitted(32, 32)
    t = [torch.from_numpy(rng.random((2, 1, 32, 32))) for _ in range(4)]
    terms = loss_terms(*t, LossWeights(), cfg)
    assert float(terms.total) == pytest.approx(float(total_loss(*t, LossWeights(), cfg)), abs=1e-12)
    mse_terms = loss_terms(*t, LossWeights(), cfg, kind="mse")
    assert float(mse_terms.cover) == float(mse(t[0], t[1]))


def test_loss_weight_validation():
    with pytest.raises(ValueError):
        LossWeights(alpha=1.5)
    with pytest.raises(ValueError):
        LossWeights(gamma=-1)


def test_gray_image_inputs():
    a = GrayImage(np.full((12, 12), 0.5))
    assert float(ssim(a, a)) == 1.0


def test_divergence_cases(rng):
    x = rng.random(1000)
    assert divergence(x, x, "JS").value == pytest.approx(0.0, abs=1e-9)
    disjoint = divergence(np.zeros(500), np.ones(500), "JS")
    assert 0 < disjoint.value < math.log(2)
    kl = kl_divergence([0.5, 0.5], [0.25, 0.75])
    assert kl == pytest.approx(0.5 * math.log(2) + 0.5 * math.log(2 / 3), abs=1e-12)
    assert kl == pytest.approx(0.1438, abs=1e-4)
    assert js_divergence([1, 0], [0, 1]) == pytest.approx(math.log(2))
    with pytest.raises(EmptyInputError):
        divergence([], [1.0])
