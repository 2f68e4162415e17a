import numpy as np
import pytest
from scipy.ndimage import gaussian_filter
from scipy.special import rel_entr, softmax

from gausshead import autodiff as ad
from gausshead.autodiff import Tensor
from gausshead.errors import NonFiniteError, ValidationError
from gausshead.losses import (NEUTRAL, LossWeights, emotion_score, lmd, loss_geo, loss_kl, loss_render, loss_score,
                              psnr, ssim, total_loss)


def ssim_oracle(x, y):
    """scipy Gaussian filter with zero padding, radius 5, sigma 1.5."""
    def f(img):
        return np.stack([gaussian_filter(img[..., c], 1.5, mode="constant", truncate=5 / 1.5)
                         for c in range(img.shape[-1])], -1)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mx, my = f(x), f(y)
    sxx, syy, sxy = f(x * x) - mx ** 2, f(y * y) - my ** 2, f(x * y) - mx * my
    return np.mean((2 * mx * my + c1) * (2 * sxy + c2) / ((mx ** 2 + my ** 2 + c1) * (sxx + syy + c2)))


def test_ssim_matches_scipy_oracle(rng):
    x = rng.uniform(size=(20, 17, 3))
    y = np.clip(x + rng.normal(size=x.shape) * 0.1, 0, 1)
    assert ssim(x, y) == pytest.approx(ssim_oracle(x, y), abs=1e-12)


def test_identical_images_hit_caps(rng):
    x = rng.uniform(size=(16, 16, 3))
    assert psnr(x, x) == 99.0
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_psnr_value():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_kl_nonnegative_on_10k_pairs():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(10_000, 7)) * 3
    p = rng.dirichlet(np.full(7, 0.5), 10_000)
    p[::7] = np.eye(7)[rng.integers(0, 7, len(p[::7]))]  # one-hot rows with zeros
    vals = np.array([loss_kl(z[i:i + 1], p[i:i + 1]).item() for i in range(10_000)])
    assert vals.min() >= 0.0
    ref = rel_entr(p, softmax(z, axis=1)).sum(1)
    assert np.allclose(vals, ref, atol=1e-12)


def test_kl_zero_when_distributions_match(rng):
    z = rng.normal(size=(3, 7))
    assert loss_kl(z, softmax(z, axis=1)).item() == pytest.approx(0.0, abs=1e-14)


def test_kl_and_score_respect_mask(rng):
    z, p = rng.normal(size=(4, 7)), rng.dirichlet(np.ones(7), 4)
    m = np.array([1, 0, 1, 0], bool)
    assert loss_kl(z, p, m).item() == pytest.approx(loss_kl(z[m], p[m]).item(), abs=1e-14)
    assert loss_kl(z, p, np.zeros(4, bool)).item() == 0.0
    g, e = rng.uniform(size=(4, 1)), rng.uniform(size=4)
    assert loss_score(g, e, m).item() == pytest.approx(np.abs(g[m, 0] - e[m]).mean(), abs=1e-15)


def test_emotion_score_values():
    neutral = np.eye(7)[NEUTRAL]
    angry = np.eye(7)[0]
    uniform = np.full(7, 1 / 7)
    assert abs(emotion_score(neutral) - 0.0) <= 1e-12
    assert abs(emotion_score(angry) - 1.0) <= 1e-12
    assert abs(emotion_score(uniform) - 6 / 7) <= 1e-12
    with pytest.raises(ValidationError):
        emotion_score(np.full(7, 0.5))


def test_render_loss_definition(rng):
    x, y = rng.uniform(size=(12, 12, 3)), rng.uniform(size=(12, 12, 3))
    expect = np.abs(x - y).mean() + 0.2 * (1 - ssim_oracle(x, y))
    assert loss_render(x, y, 0.2).item() == pytest.approx(expect, abs=1e-12)


def test_geo_loss(rng):
    d, dgt = rng.uniform(1, 2, (5, 5)), rng.uniform(1, 2, (5, 5))
    n = rng.normal(size=(5, 5, 3))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    m = np.ones((5, 5), bool)
    val = loss_geo(d, n, dgt, n, m, 1e-2, 1e-3).item()
    assert val == pytest.approx(1e-2 * np.abs(d - dgt).mean(), abs=1e-15)
    with pytest.raises(ValidationError):
        loss_geo(d, n, dgt, n, np.zeros((5, 5), bool), 1e-2, 1e-3)


def test_phase_rule():
    parts = {"render": Tensor(1.0), "kl": Tensor(2.0), "score": Tensor(3.0), "geo": Tensor(100.0)}
    w = LossWeights(kl=0.5, score=2.0)
    assert total_loss(parts, "pretrain", w).item() == pytest.approx(1 + 1 + 6)
    assert total_loss(parts, "adapt", w).item() == pytest.approx(1 + 1 + 6 + 100)
    with pytest.raises(ValidationError):
        total_loss(parts, "finetune", w)
    with pytest.raises(NonFiniteError):
        total_loss({"render": np.array(np.nan)}, "pretrain")


def test_lmd():
    a = np.zeros((3, 2))
    b = np.array([[3.0, 4.0], [0, 0], [0, 0]])
    assert lmd(a, b) == pytest.approx(5 / 3)
    with pytest.raises(ValidationError):
        lmd(a, b[:2])


def test_ssim_gradient(rng):
    ref = rng.uniform(size=(9, 9, 3))
    err = ad.finite_diff_check(lambda t: loss_render(t, ref), rng.uniform(size=(9, 9, 3)), 1e-6,
                               indices=range(0, 243, 7))
    assert err < 1e-4
