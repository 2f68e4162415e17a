"""Rotation helpers: Rodrigues' formula and quaternion conversions.

Quaternions are stored as (w, x, y, z).  Each helper has a plain numpy form
and, where the training path needs gradients, a :class:`Tensor` form.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# |r|^2 below which the Taylor series is used for the Rodrigues coefficients
_SERIES_CUTOFF = 1e-2


def _coeffs(s: np.ndarray):
    """A = sin(t)/t, B = (1-cos t)/t^2 and their derivatives w.r.t. s = t^2."""
    s = np.asarray(s, dtype=np.float64)
    small = s < _SERIES_CUTOFF
    t = np.sqrt(np.where(small, 1.0, s))
    sin, cos = np.sin(t), np.cos(t)
    a = np.where(small, 1 - s / 6 + s * s / 120 - s ** 3 / 5040 + s ** 4 / 362880, sin / t)
    b = np.where(small, 0.5 - s / 24 + s * s / 720 - s ** 3 / 40320 + s ** 4 / 3628800, (1 - cos) / np.where(small, 1.0, s))
    da = np.where(small, -1 / 6 + s / 60 - s * s / 1680 + s ** 3 / 90720,
                  (t * cos - sin) / (2 * t ** 3))
    db = np.where(small, -1 / 24 + s / 360 - s * s / 13440 + s ** 3 / 907200,
                  (t * sin - 2 * (1 - cos)) / (2 * t ** 4))
    return a, b, da, db


def skew(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    z = np.zeros(r.shape[:-1])
    x, y, w = r[..., 0], r[..., 1], r[..., 2]
    return np.stack([np.stack([z, -w, y], -1),
                     np.stack([w, z, -x], -1),
                     np.stack([-y, x, z], -1)], -2)


def rodrigues(axis_angle) -> np.ndarray:
    """Rotation matrix for an axis-angle vector (any leading batch shape)."""
    r = np.asarray(axis_angle, dtype=np.float64)
    k = skew(r)
    a, b, _, _ = _coeffs((r * r).sum(-1))
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def _skew_t(r: Tensor) -> Tensor:
    x, y, w = r[..., 0], r[..., 1], r[..., 2]
    z = Tensor(np.zeros(r.shape[:-1]))
    return ad.stack([ad.stack([z, -w, y], -1),
                     ad.stack([w, z, -x], -1),
                     ad.stack([-y, x, z], -1)], -2)


def _coeff_op(s: Tensor, which: int) -> Tensor:
    a, b, da, db = _coeffs(s.data)
    val, der = (a, da) if which == 0 else (b, db)
    return ad.custom(val, (s,), lambda g: (g * der,), "rodrigues_coeff")


def rodrigues_t(axis_angle: Tensor) -> Tensor:
    """Differentiable Rodrigues map, smooth through the zero rotation."""
    r = ad.as_tensor(axis_angle)
    k = _skew_t(r)
    s = ad.sum_(r * r, axis=-1)
    a = _coeff_op(s, 0).reshape(s.shape + (1, 1))
    b = _coeff_op(s, 1).reshape(s.shape + (1, 1))
    eye = Tensor(np.broadcast_to(np.eye(3), k.shape).copy())
    return eye + a * k + b * ad.matmul(k, k)


def quat_to_matrix(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def quat_to_matrix_t(q: Tensor) -> Tensor:
    """Differentiable (normalizing) quaternion to rotation matrix."""
    q = ad.normalize(q, axis=-1)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return ad.stack([
        ad.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        ad.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        ad.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def matrix_to_quat(m) -> np.ndarray:
    """Unit quaternion (w >= 0) for rotation matrices of shape (..., 3, 3)."""
    m = np.asarray(m, dtype=np.float64)
    flat = m.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for i, r in enumerate(flat):
        tr = r[0, 0] + r[1, 1] + r[2, 2]
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = (0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s)
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
            q = ((r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s)
        elif r[1, 1] > r[2, 2]:
            s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
            q = ((r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s)
        else:
            s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
            q = ((r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s)
        q = np.asarray(q)
        q /= np.linalg.norm(q)
        out[i] = q if q[0] >= 0 else -q
    return out.reshape(m.shape[:-2] + (4,))


def quat_mul(a, b) -> np.ndarray:
    """Hamilton product a ⊗ b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], -1)


def canonical_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0, -q, q)
