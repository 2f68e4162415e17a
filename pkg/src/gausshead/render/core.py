"""Differentiable splat rendering of world-space Gaussians."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..camera import Camera
from ..errors import NonFiniteError
from ..rig import GlobalGaussians
from . import backend

COV2D_BLUR = 0.3
FAR_DEPTH = 100.0
MIN_WEIGHT = 1e-6

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


@dataclass
class Projection:
    mean2d: Tensor      # (P, 2)
    cov2d: Tensor       # (P, 2, 2), blur included
    depth: Tensor       # (P,) camera z
    radius: np.ndarray  # (P,) pixels, 3 sigma
    visible: np.ndarray  # (P,) bool


@dataclass
class RenderOutput:
    color: Tensor        # (H, W, 3)
    alpha: Tensor        # (H, W)
    depth: Tensor        # (H, W), FAR_DEPTH on background
    count: np.ndarray    # (H, W) contributing Gaussians
    order: np.ndarray    # indices of rendered Gaussians, front first


def _check_finite(glob: GlobalGaussians) -> None:
    for name in ("mu", "rotmat", "scale", "alpha", "sh"):
        arr = getattr(glob, name).data.reshape(len(glob), -1)
        bad = np.flatnonzero(~np.isfinite(arr).all(axis=1))
        if bad.size:
            raise NonFiniteError(f"Gaussian {int(bad[0])} has a non-finite {name}")


def project_gaussians(glob: GlobalGaussians, cam: Camera) -> Projection:
    """Perspective projection of centers and covariances (EWA linearization)."""
    p = len(glob)
    Wc = Tensor(cam.rotation, check=False)
    pc = ad.matmul(glob.mu, ad.transpose(Wc)) + Tensor(cam.translation, check=False)
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    zd = z.data
    in_front = zd > cam.near
    # keep the algebra finite for culled points
    z_safe = z if in_front.all() else ad.custom(np.where(in_front, zd, 1.0), (z,),
                                                lambda g: (g * in_front,), "cull_z")
    inv_z = 1.0 / z_safe
    mean2d = ad.stack([x * inv_z * cam.fx + cam.cx, y * inv_z * cam.fy + cam.cy], axis=-1)

    zeros = Tensor(np.zeros(p), check=False)
    J = ad.stack([
        ad.stack([inv_z * cam.fx, zeros, -x * inv_z * inv_z * cam.fx], -1),
        ad.stack([zeros, inv_z * cam.fy, -y * inv_z * inv_z * cam.fy], -1),
    ], -2)
    M = glob.rotmat * glob.scale.reshape(p, 1, 3)
    V = ad.matmul(ad.matmul(J, Wc), M)
    cov2d = ad.matmul(V, ad.swapaxes(V, -1, -2)) + Tensor(np.eye(2) * COV2D_BLUR, check=False)

    c = cov2d.data
    a_, b_, c_ = c[:, 0, 0], c[:, 0, 1], c[:, 1, 1]
    det = a_ * c_ - b_ * b_
    mid = 0.5 * (a_ + c_)
    lam = mid + np.sqrt(np.maximum(0.1, mid * mid - det))
    radius = np.ceil(3.0 * np.sqrt(lam))
    m = mean2d.data
    on_screen = ((m[:, 0] + radius >= 0) & (m[:, 0] - radius <= cam.width - 1)
                 & (m[:, 1] + radius >= 0) & (m[:, 1] - radius <= cam.height - 1))
    visible = in_front & on_screen & (det > 0)
    return Projection(mean2d=mean2d, cov2d=cov2d, depth=z, radius=radius, visible=visible)


def project_gaussian(glob: GlobalGaussians, index: int, cam: Camera):
    """Projection of a single Gaussian: (mean2d, cov2d, camera_z) or ``None`` if culled."""
    proj = project_gaussians(glob, cam)
    if not proj.visible[index]:
        return None
    return proj.mean2d.data[index], proj.cov2d.data[index], float(proj.depth.data[index])


def eval_sh(sh: Tensor, dirs: Tensor) -> Tensor:
    """View-dependent RGB from SH coefficients (P, C, 3) along unit directions (P, 3)."""
    n = sh.shape[1]
    res = sh[:, 0, :] * SH_C0
    if n > 1:
        x, y, z = (dirs[:, i:i + 1] for i in range(3))
        res = res - sh[:, 1, :] * (SH_C1 * y) + sh[:, 2, :] * (SH_C1 * z) - sh[:, 3, :] * (SH_C1 * x)
        if n > 4:
            xx, yy, zz = x * x, y * y, z * z
            xy, yz, xz = x * y, y * z, x * z
            res = (res + sh[:, 4, :] * (SH_C2[0] * xy) + sh[:, 5, :] * (SH_C2[1] * yz)
                   + sh[:, 6, :] * (SH_C2[2] * (2.0 * zz - xx - yy))
                   + sh[:, 7, :] * (SH_C2[3] * xz) + sh[:, 8, :] * (SH_C2[4] * (xx - yy)))
            if n > 9:
                res = (res + sh[:, 9, :] * (SH_C3[0] * y * (3.0 * xx - yy))
                       + sh[:, 10, :] * (SH_C3[1] * xy * z)
                       + sh[:, 11, :] * (SH_C3[2] * y * (4.0 * zz - xx - yy))
                       + sh[:, 12, :] * (SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy))
                       + sh[:, 13, :] * (SH_C3[4] * x * (4.0 * zz - xx - yy))
                       + sh[:, 14, :] * (SH_C3[5] * z * (xx - yy))
                       + sh[:, 15, :] * (SH_C3[6] * x * (xx - 3.0 * yy)))
    return ad.clamp_min(res + 0.5, 0.0)


def _rasterize(mean2d: Tensor, conic: Tensor, opacity: Tensor, colors: Tensor, depth: Tensor,
               radius: np.ndarray, width: int, height: int):
    args = [np.ascontiguousarray(t.data, dtype=np.float64) for t in (mean2d, conic, opacity, colors, depth)]
    radius = np.ascontiguousarray(radius, dtype=np.float64)
    kernel = backend.kernel()
    color, trans, dnum, count = kernel.rasterize_forward(*args, radius, width, height)
    packed = np.concatenate([color, (1.0 - trans)[..., None], dnum[..., None]], axis=-1)

    def backward(g):
        grads = kernel.rasterize_backward(*args, radius, width, height, trans,
                                          np.ascontiguousarray(g[..., :3]),
                                          np.ascontiguousarray(g[..., 3]),
                                          np.ascontiguousarray(g[..., 4]))
        return grads

    out = ad.custom(packed, (mean2d, conic, opacity, colors, depth), backward, "rasterize")
    return out, np.asarray(count)


def render(glob: GlobalGaussians, cam: Camera) -> RenderOutput:
    """Depth-sorted front-to-back compositing of all Gaussians onto a black background."""
    h, w = cam.height, cam.width
    if len(glob) == 0:
        zero = Tensor(np.zeros((h, w)))
        return RenderOutput(color=Tensor(np.zeros((h, w, 3))), alpha=zero,
                            depth=Tensor(np.full((h, w), FAR_DEPTH)),
                            count=np.zeros((h, w), dtype=np.int32), order=np.zeros(0, dtype=np.int64))
    _check_finite(glob)
    proj = project_gaussians(glob, cam)
    vis = np.flatnonzero(proj.visible)
    # ties broken by original index for a deterministic order
    order = vis[np.lexsort((vis, proj.depth.data[vis]))]

    dirs = ad.normalize(glob.mu - Tensor(cam.center, check=False), axis=-1) if glob.sh.shape[1] > 1 else None
    colors = eval_sh(ad.take_rows(glob.sh, order), ad.take_rows(dirs, order) if dirs is not None else None)
    cov = ad.take_rows(proj.cov2d, order)
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    conic = ad.stack([c / det, -b / det, a / det], axis=-1)
    packed, count = _rasterize(ad.take_rows(proj.mean2d, order), conic, ad.take_rows(glob.alpha, order),
                               colors, ad.take_rows(proj.depth, order), proj.radius[order], w, h)
    color = packed[..., 0:3]
    alpha = packed[..., 3]
    dnum = packed[..., 4]
    fg = alpha.data >= MIN_WEIGHT
    safe_alpha = ad.custom(np.where(fg, alpha.data, 1.0), (alpha,), lambda g: (g * fg,), "fg_alpha")
    depth = dnum / safe_alpha * Tensor(fg.astype(np.float64), check=False) \
        + Tensor(np.where(fg, 0.0, FAR_DEPTH), check=False)
    return RenderOutput(color=color, alpha=alpha, depth=depth, count=count, order=order)


def depth_to_normals(depth, cam: Camera, alpha=None, alpha_threshold: float = 0.5) -> Tensor:
    """Camera-space unit normals from a depth map via central differences.

    Background and border pixels (or pixels with a background neighbor) get
    the zero vector.  Normals face the camera.
    """
    depth = ad.as_tensor(depth)
    h, w = depth.shape
    valid = depth.data < FAR_DEPTH
    if alpha is not None:
        valid &= np.asarray(ad.as_tensor(alpha).data) > alpha_threshold
    u = np.arange(w, dtype=np.float64)[None, :]
    v = np.arange(h, dtype=np.float64)[:, None]
    X = depth * Tensor((u - cam.cx) / cam.fx + np.zeros((h, 1)), check=False)
    Y = depth * Tensor((v - cam.cy) / cam.fy + np.zeros((1, w)), check=False)
    P = ad.stack([X, Y, depth], axis=-1)
    du = P[1:-1, 2:, :] - P[1:-1, :-2, :]
    dv = P[2:, 1:-1, :] - P[:-2, 1:-1, :]
    n = ad.cross(du, dv)

    interior = (valid[1:-1, 1:-1] & valid[1:-1, 2:] & valid[1:-1, :-2]
                & valid[2:, 1:-1] & valid[:-2, 1:-1])
    nd = n.data
    length = np.linalg.norm(nd, axis=-1)
    interior &= length > 1e-12
    # orient toward the camera at the origin
    facing = np.einsum("ijk,ijk->ij", nd, P.data[1:-1, 1:-1, :])
    sign = np.where(facing > 0, -1.0, 1.0) * interior
    safe_len = ad.custom(np.where(interior, length, 1.0), (ad.norm(n, axis=-1, keepdims=False),),
                         lambda g: (g * interior,), "normal_len")
    unit = n / safe_len.reshape(h - 2, w - 2, 1) * Tensor(sign[..., None], check=False)
    return ad.pad_axis(ad.pad_axis(unit, 0, 1, 1), 1, 1, 1)
