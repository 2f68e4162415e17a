"""Training losses and image/landmark metrics."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NonFiniteError, ValidationError

EMOTIONS = ("angry", "disgust", "fear", "happy", "sad", "surprise", "neutral")
NEUTRAL = EMOTIONS.index("neutral")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 99.0


@dataclass(frozen=True)
class LossWeights:
    dssim: float = 0.2
    depth: float = 1e-2
    normal: float = 1e-3
    kl: float = 1.0
    score: float = 1.0

    def __post_init__(self):
        for name in ("dssim", "depth", "normal", "kl", "score"):
            if getattr(self, name) < 0:
                raise ValidationError(f"loss weight {name} must be nonnegative")


def emotion_score(p_emo) -> np.ndarray:
    """Emotion intensity: one minus the neutral probability (per row)."""
    p = np.asarray(p_emo, dtype=np.float64)
    if p.shape[-1] != len(EMOTIONS):
        raise ValidationError(f"expected {len(EMOTIONS)} emotion probabilities, got {p.shape[-1]}")
    if np.any(p < 0) or np.any(np.abs(p.sum(-1) - 1.0) > 1e-6):
        raise ValidationError("emotion distribution must be nonnegative and sum to 1")
    return 1.0 - p[..., NEUTRAL]


# -- SSIM -----------------------------------------------------------------------

@lru_cache(maxsize=16)
def _blur_matrix(n: int) -> np.ndarray:
    r = SSIM_WINDOW // 2
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / SSIM_SIGMA) ** 2)
    k /= k.sum()
    m = np.zeros((n, n))
    for i in range(n):
        for j in range(max(0, i - r), min(n, i + r + 1)):
            m[i, j] = k[j - i + r]
    m.setflags(write=False)
    return m


def _blur(x: Tensor) -> Tensor:
    """Separable Gaussian filter with zero padding over (C, H, W)."""
    _, h, w = x.shape
    gv = Tensor(_blur_matrix(h), check=False)
    gw = Tensor(_blur_matrix(w).T.copy(), check=False)
    return ad.matmul(ad.matmul(gv, x), gw)


def _channels_first(img: Tensor) -> Tensor:
    if img.ndim == 2:
        return img.reshape(1, *img.shape)
    return ad.transpose(img, (2, 0, 1))


def ssim_t(img, ref) -> Tensor:
    img, ref = ad.as_tensor(img), ad.as_tensor(ref)
    if img.shape != ref.shape:
        raise ValidationError(f"image shapes differ: {img.shape} vs {ref.shape}")
    x, y = _channels_first(img), _channels_first(ref)
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mx, my = _blur(x), _blur(y)
    sxx = _blur(x * x) - mx * mx
    syy = _blur(y * y) - my * my
    sxy = _blur(x * y) - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return ad.mean(num / den)


def ssim(img, ref) -> float:
    return ssim_t(Tensor(img), Tensor(ref)).item()


def psnr(img, ref) -> float:
    img, ref = np.asarray(img, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ValidationError(f"image shapes differ: {img.shape} vs {ref.shape}")
    mse = float(np.mean((img - ref) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def lmd(pred, gt) -> float:
    """Mean Euclidean distance between matched 2D landmarks (pixels)."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 2:
        raise ValidationError(f"landmark arrays must match and end in 2, got {pred.shape} vs {gt.shape}")
    return float(np.mean(np.linalg.norm(pred - gt, axis=-1)))


# -- losses ---------------------------------------------------------------------

def loss_render(img, ref, dssim_weight: float = 0.2) -> Tensor:
    img, ref = ad.as_tensor(img), ad.as_tensor(ref)
    if img.shape != ref.shape:
        raise ValidationError(f"image shapes differ: {img.shape} vs {ref.shape}")
    l1 = ad.mean(ad.abs_(img - ref))
    if dssim_weight == 0:
        return l1
    return l1 + (1.0 - ssim_t(img, ref)) * dssim_weight


def _frame_mask(n: int, mask) -> np.ndarray:
    m = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(n)
    return m


def loss_kl(z_e, p_emo, mask=None) -> Tensor:
    """Mean over supervised frames of KL(p_emo || softmax(z_e))."""
    z = ad.as_tensor(z_e)
    p = np.asarray(p_emo, dtype=np.float64).reshape(z.shape)
    m = _frame_mask(z.shape[0], mask)
    if not m.any():
        return Tensor(0.0)
    with np.errstate(divide="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    logq = ad.log_softmax(z, axis=-1)
    w = Tensor(p * m[:, None], check=False)
    cross = ad.sum_(w * logq)
    return (float(plogp[m].sum()) - cross) * (1.0 / m.sum())


def loss_score(g, e, mask=None) -> Tensor:
    """Mean absolute gate-vs-teacher intensity error over supervised frames."""
    g = ad.as_tensor(g)
    n = g.shape[0]
    g = g.reshape(n)
    e = np.asarray(e, dtype=np.float64).reshape(n)
    m = _frame_mask(n, mask)
    if not m.any():
        return Tensor(0.0)
    diff = ad.abs_(g - Tensor(np.where(m, e, 0.0), check=False)) * Tensor(m.astype(np.float64), check=False)
    return ad.sum_(diff) * (1.0 / m.sum())


def loss_geo(depth, normals, depth_gt, normals_gt, mask, depth_weight: float, normal_weight: float) -> Tensor:
    depth, normals = ad.as_tensor(depth), ad.as_tensor(normals)
    mask = np.asarray(mask, dtype=bool)
    if depth.shape != mask.shape or normals.shape != mask.shape + (3,):
        raise ValidationError("depth, normal and mask shapes disagree")
    n = int(mask.sum())
    if n == 0:
        raise ValidationError("geometric loss mask is empty")
    mf = Tensor(mask.astype(np.float64), check=False)
    dgt = Tensor(np.where(mask, depth_gt, 0.0), check=False)
    ngt = Tensor(np.where(mask[..., None], normals_gt, 0.0), check=False)
    l_d = ad.sum_(ad.abs_(depth * mf - dgt)) * (1.0 / n)
    cos = ad.sum_(normals * ngt, axis=-1)
    l_n = ad.sum_((1.0 - cos) * mf) * (1.0 / n)
    return l_d * depth_weight + l_n * normal_weight


PHASES = ("pretrain", "adapt")


def total_loss(parts: dict, phase: str, weights: LossWeights = LossWeights()) -> Tensor:
    """Sum of render, KL and score terms, plus the geometric term when adapting."""
    if phase not in PHASES:
        raise ValidationError(f"unknown phase {phase!r}")
    terms = [("render", 1.0), ("kl", weights.kl), ("score", weights.score)]
    if phase == "adapt":
        terms.append(("geo", 1.0))
    total = Tensor(0.0)
    for name, w in terms:
        part = parts.get(name)
        if part is None:
            continue
        raw = part.data if isinstance(part, Tensor) else np.asarray(part, dtype=np.float64)
        if not np.all(np.isfinite(raw)):
            raise NonFiniteError(f"loss term {name!r} is not finite")
        part = ad.as_tensor(part)
        total = total + part * w
    return total
