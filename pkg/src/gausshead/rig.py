"""Gaussians bound to mesh triangles.

Each Gaussian lives in the frame of its parent triangle: the frame origin is
the Gaussian's barycentric binding point, its axes and isotropic scale come
from the triangle.  Moving the mesh therefore carries the Gaussians along.
"""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .camera import Camera
from .errors import ValidationError
from .rotation import matrix_to_quat, quat_to_matrix, quat_to_matrix_t, rodrigues_t

log = logging.getLogger(__name__)

SH_C0 = 0.28209479177387814
MIN_SCALE = 1e-6


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


@dataclass(frozen=True)
class GaussianCloud:
    """Local (triangle-frame) Gaussian attributes plus their bindings."""

    mu: np.ndarray          # (P, 3)
    rot: np.ndarray         # (P, 4) unit quaternions (w, x, y, z)
    scale: np.ndarray       # (P, 3) positive
    alpha: np.ndarray       # (P,) in [0, 1]
    sh: np.ndarray          # (P, C, 3)
    parent_tri: np.ndarray  # (P,) int
    bary: np.ndarray        # (P, 3)
    mouth_mask: np.ndarray  # (P,) bool

    def __len__(self) -> int:
        return self.mu.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    def validate(self, n_faces: int | None = None) -> "GaussianCloud":
        p = len(self)
        shapes = {"rot": (p, 4), "scale": (p, 3), "alpha": (p,), "parent_tri": (p,),
                  "bary": (p, 3), "mouth_mask": (p,)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValidationError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.sh.ndim != 3 or self.sh.shape[0] != p or self.sh.shape[2] != 3:
            raise ValidationError(f"sh must be P x C x 3, got {self.sh.shape}")
        if np.any(self.bary < -1e-12) or np.any(np.abs(self.bary.sum(1) - 1) > 1e-9):
            raise ValidationError("barycentric weights must be nonnegative and sum to 1")
        if np.any(np.abs(np.linalg.norm(self.rot, axis=1) - 1) > 1e-9):
            raise ValidationError("rotations must be unit quaternions")
        if np.any(self.scale <= 0):
            raise ValidationError("scales must be positive")
        if np.any((self.alpha < 0) | (self.alpha > 1)):
            raise ValidationError("opacities must lie in [0, 1]")
        if n_faces is not None and np.any((self.parent_tri < 0) | (self.parent_tri >= n_faces)):
            raise ValidationError("parent triangle index out of range")
        return self


@dataclass(frozen=True)
class TriangleFrame:
    R: np.ndarray
    C: np.ndarray
    k: float


@dataclass
class GlobalGaussians:
    """World-space Gaussians; rotations carried as matrices for the render path."""

    mu: Tensor       # (P, 3)
    rotmat: Tensor   # (P, 3, 3)
    scale: Tensor    # (P, 3)
    alpha: Tensor    # (P,)
    sh: Tensor       # (P, C, 3)

    def __len__(self) -> int:
        return self.mu.shape[0]

    @property
    def rot(self) -> np.ndarray:
        """Unit quaternions (w >= 0)."""
        return matrix_to_quat(self.rotmat.data)


# -- binding -----------------------------------------------------------------

def sample_bindings(vertices, faces, total: int, seed: int, sh_degree: int = 0,
                    scale_factor: float = 1.0) -> GaussianCloud:
    """Equal Gaussian count per triangle, uniform barycentric positions."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces)
    n_tri = faces.shape[0]
    if total < n_tri:
        raise ValidationError(f"need at least one Gaussian per triangle ({total} < {n_tri})")
    per, extra = divmod(total, n_tri)
    counts = np.full(n_tri, per)
    counts[:extra] += 1
    parent = np.repeat(np.arange(n_tri), counts)
    rng = np.random.default_rng(seed)
    r1 = np.sqrt(rng.random(total))
    r2 = rng.random(total)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)

    points = np.einsum("pj,pjc->pc", bary, vertices[faces[parent]])
    tree = cKDTree(points)
    dist, _ = tree.query(points, k=2)
    spacing = float(np.mean(dist[:, 1]))
    _, _, k = triangle_frames(vertices, faces)
    scale = np.repeat((scale_factor * spacing / k[parent])[:, None], 3, axis=1)

    sh = np.zeros((total, sh_coeff_count(sh_degree), 3))  # DC 0 -> 0.5 gray
    return GaussianCloud(
        mu=np.zeros((total, 3)),
        rot=np.tile([1.0, 0.0, 0.0, 0.0], (total, 1)),
        scale=scale,
        alpha=np.full(total, 0.5),
        sh=sh,
        parent_tri=parent,
        bary=bary,
        mouth_mask=np.zeros(total, dtype=bool),
    )


def binding_points(vertices, cloud: GaussianCloud, faces) -> np.ndarray:
    v = np.asarray(vertices)[np.asarray(faces)[cloud.parent_tri]]
    return np.einsum("pj,pjc->pc", cloud.bary, v)


# -- triangle frames -----------------------------------------------------------

def triangle_frames_t(vertices: Tensor, faces) -> tuple[Tensor, Tensor, Tensor]:
    """Rotation (T,3,3), centroid (T,3) and isotropic scale (T,) of every triangle."""
    faces = np.asarray(faces)
    v1 = ad.take_rows(vertices, faces[:, 0])
    v2 = ad.take_rows(vertices, faces[:, 1])
    v3 = ad.take_rows(vertices, faces[:, 2])
    e1 = v2 - v1
    len1 = ad.norm(e1, axis=-1, keepdims=True)
    t = e1 / len1
    nvec = ad.cross(e1, v3 - v1)
    area2 = ad.norm(nvec, axis=-1, keepdims=True)
    n = nvec / area2
    b = ad.cross(n, t)
    R = ad.stack([t, b, n], axis=-1)
    C = (v1 + v2 + v3) * (1.0 / 3.0)
    height = area2 / len1
    k = ((len1 + height) * 0.5).reshape(faces.shape[0])
    return R, C, k


def triangle_frames(vertices, faces) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    R, C, k = triangle_frames_t(Tensor(vertices), faces)
    return R.data, C.data, k.data


def compute_triangle_frame(vertices, faces, tri: int) -> TriangleFrame:
    f = np.asarray(faces)[tri:tri + 1]
    v = np.asarray(vertices, dtype=np.float64)
    p = v[f[0]]
    area = 0.5 * np.linalg.norm(np.cross(p[1] - p[0], p[2] - p[0]))
    if area < 1e-12:
        raise ValidationError(f"triangle {tri} is degenerate (area {area:.3g})")
    R, C, k = triangle_frames(v, f)
    return TriangleFrame(R=R[0], C=C[0], k=float(k[0]))


# -- local -> global ----------------------------------------------------------

@dataclass
class LocalParams:
    """Trainable, unconstrained parameterization of a cloud's local attributes."""

    mu: Tensor          # (P, 3)
    quat: Tensor        # (P, 4) unnormalized
    log_scale: Tensor   # (P, 3)
    alpha_logit: Tensor  # (P,)
    sh: Tensor          # (P, C, 3)

    @classmethod
    def from_cloud(cls, cloud: GaussianCloud, requires_grad: bool = True) -> "LocalParams":
        a = np.clip(cloud.alpha, 1e-6, 1 - 1e-6)

        def mk(x):
            return Tensor(np.array(x, dtype=np.float64), requires_grad=requires_grad)

        return cls(mu=mk(cloud.mu), quat=mk(cloud.rot), log_scale=mk(np.log(cloud.scale)),
                   alpha_logit=mk(np.log(a) - np.log1p(-a)), sh=mk(cloud.sh))

    def as_dict(self) -> dict[str, Tensor]:
        return {"mu": self.mu, "quat": self.quat, "log_scale": self.log_scale,
                "alpha_logit": self.alpha_logit, "sh": self.sh}

    def to_cloud(self, template: GaussianCloud) -> GaussianCloud:
        q = self.quat.data / np.linalg.norm(self.quat.data, axis=1, keepdims=True)
        alpha = 1.0 / (1.0 + np.exp(-self.alpha_logit.data))
        return replace(template, mu=self.mu.data.copy(), rot=q, scale=np.exp(self.log_scale.data),
                       alpha=alpha, sh=self.sh.data.copy())


def rig_to_global_t(local: LocalParams, vertices: Tensor, faces, parent_tri, bary) -> GlobalGaussians:
    """Differentiable local-to-world mapping for all Gaussians of a cloud."""
    faces = np.asarray(faces)
    parent_tri = np.asarray(parent_tri)
    R, _, k = triangle_frames_t(vertices, faces)
    Rg = ad.take_rows(R, parent_tri)
    kg = ad.take_rows(k, parent_tri).reshape(len(parent_tri), 1)
    tri_v = faces[parent_tri]
    w = Tensor(bary, check=False)
    origin = (ad.take_rows(vertices, tri_v[:, 0]) * w[:, 0:1]
              + ad.take_rows(vertices, tri_v[:, 1]) * w[:, 1:2]
              + ad.take_rows(vertices, tri_v[:, 2]) * w[:, 2:3])
    mu_local = local.mu.reshape(len(parent_tri), 3, 1)
    mu = ad.matmul(Rg, mu_local).reshape(len(parent_tri), 3) * kg + origin
    rotmat = ad.matmul(Rg, quat_to_matrix_t(local.quat))
    scale = ad.exp(local.log_scale) * kg
    alpha = ad.sigmoid(local.alpha_logit)
    return GlobalGaussians(mu=mu, rotmat=rotmat, scale=scale, alpha=alpha, sh=local.sh)


def rig_to_global(cloud: GaussianCloud, vertices, faces) -> GlobalGaussians:
    """Non-differentiable wrapper taking stored local attributes directly."""
    faces = np.asarray(faces)
    vertices = np.asarray(vertices, dtype=np.float64)
    if np.any(cloud.parent_tri >= faces.shape[0]) or vertices.shape[0] <= faces.max():
        raise ValidationError("cloud bindings do not match the mesh topology")
    R, _, k = triangle_frames(vertices, faces)
    Rg, kg = R[cloud.parent_tri], k[cloud.parent_tri][:, None]
    origin = binding_points(vertices, cloud, faces)
    mu = np.einsum("pij,pj->pi", Rg, cloud.mu) * kg + origin
    rotmat = Rg @ quat_to_matrix(cloud.rot)
    return GlobalGaussians(mu=Tensor(mu), rotmat=Tensor(rotmat), scale=Tensor(cloud.scale * kg),
                           alpha=Tensor(cloud.alpha), sh=Tensor(cloud.sh))


def apply_mouth_residual_t(glob: GlobalGaussians, mouth_idx, residual: Tensor) -> tuple[GlobalGaussians, int]:
    """Add (dmu, drot axis-angle, dscale) residuals to the mouth Gaussians.

    Returns the updated Gaussians and how many scale entries hit the floor.
    """
    mouth_idx = np.asarray(mouth_idx, dtype=np.int64)
    residual = ad.as_tensor(residual)
    m = len(mouth_idx)
    if residual.shape != (m, 9):
        raise ValidationError(f"residual must be {m} x 9 for {m} mouth Gaussians, got {residual.shape}")
    if m == 0:
        return glob, 0
    p = len(glob)
    rest = np.setdiff1d(np.arange(p), mouth_idx)
    order = np.concatenate([rest, mouth_idx])
    inverse = np.argsort(order)

    def merge(t: Tensor, updated: Tensor) -> Tensor:
        return ad.take_rows(ad.concat([ad.take_rows(t, rest), updated], axis=0), inverse)

    mu = merge(glob.mu, ad.take_rows(glob.mu, mouth_idx) + residual[:, 0:3])
    drot = rodrigues_t(residual[:, 3:6])
    rotmat = merge(glob.rotmat, ad.matmul(drot, ad.take_rows(glob.rotmat, mouth_idx)))
    raw_scale = ad.take_rows(glob.scale, mouth_idx) + residual[:, 6:9]
    clamped = int(np.count_nonzero(raw_scale.data < MIN_SCALE))
    if clamped:
        log.warning("mouth residual drove %d scale entries below %.0e; clamped", clamped, MIN_SCALE)
    scale = merge(glob.scale, ad.clamp_min(raw_scale, MIN_SCALE))
    return GlobalGaussians(mu=mu, rotmat=rotmat, scale=scale, alpha=glob.alpha, sh=glob.sh), clamped


def apply_mouth_residual(glob: GlobalGaussians, mouth_mask, residual) -> tuple[GlobalGaussians, int]:
    idx = np.flatnonzero(np.asarray(mouth_mask, dtype=bool))
    residual = np.asarray(residual, dtype=np.float64)
    if residual.shape[0] != len(idx):
        raise ValidationError(f"{residual.shape[0]} residuals for {len(idx)} mouth Gaussians")
    return apply_mouth_residual_t(glob, idx, Tensor(residual))


# -- mouth region -------------------------------------------------------------

def _ray_triangles(origin, direction, tri_pts, eps=1e-12):
    """Möller–Trumbore against all triangles; returns (t, u, v, front-facing, hit)."""
    v0, v1, v2 = tri_pts[:, 0], tri_pts[:, 1], tri_pts[:, 2]
    e1 = v1 - v0
    e2 = v2 - v0
    pvec = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > eps
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origin - v0
    u = np.einsum("ij,ij->i", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = (qvec @ direction) * inv
    t = np.einsum("ij,ij->i", e2, qvec) * inv
    hit = ok & (u >= -1e-9) & (v >= -1e-9) & (u + v <= 1 + 1e-9) & (t > 0)
    normal = np.cross(e1, e2)
    front = normal @ direction < 0
    return t, u, v, front, hit


def anchor_landmarks(landmarks_2d, camera: Camera, vertices, faces) -> list[tuple[int, np.ndarray] | None]:
    """Lift pixel landmarks onto the mesh; ``None`` marks a landmark whose ray misses."""
    pts = np.asarray(vertices, dtype=np.float64)[np.asarray(faces)]
    out: list[tuple[int, np.ndarray] | None] = []
    for lm in np.asarray(landmarks_2d, dtype=np.float64).reshape(-1, 2):
        origin, direction = camera.ray(lm)
        t, u, v, front, hit = _ray_triangles(origin, direction, pts)
        cand = np.flatnonzero(hit & front)
        if cand.size == 0:
            out.append(None)
            continue
        best = cand[np.lexsort((cand, t[cand]))[0]]
        bary = np.array([1.0 - u[best] - v[best], u[best], v[best]])
        bary = np.clip(bary, 0.0, None)
        out.append((int(best), bary / bary.sum()))
    return out


def edge_adjacency(faces) -> list[list[int]]:
    faces = np.asarray(faces)
    owners: dict[tuple[int, int], list[int]] = {}
    for t, (a, b, c) in enumerate(faces):
        for e in ((a, b), (b, c), (c, a)):
            owners.setdefault((min(e), max(e)), []).append(t)
    adj: list[set[int]] = [set() for _ in range(len(faces))]
    for tris in owners.values():
        for t in tris:
            adj[t].update(x for x in tris if x != t)
    return [sorted(a) for a in adj]


def select_region_triangles(vertices, faces, seeds, radius: float) -> np.ndarray:
    """Triangles reached by growing from the seed triangles over shared edges.

    A neighbor is admitted when its centroid lies within ``radius`` of any seed
    point.  Returns sorted triangle indices.
    """
    seeds = [s for s in seeds if s is not None]
    if not seeds:
        raise ValidationError("region growing needs at least one seed")
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces)
    seed_tris = sorted({int(t) for t, _ in seeds})
    seed_pts = np.array([np.asarray(w) @ vertices[faces[t]] for t, w in
                         sorted(seeds, key=lambda s: (int(s[0]), tuple(np.asarray(s[1]))))])
    centroids = vertices[faces].mean(axis=1)
    dist = np.min(np.linalg.norm(centroids[:, None, :] - seed_pts[None, :, :], axis=2), axis=1)
    within = dist <= radius
    adj = edge_adjacency(faces)
    admitted = np.zeros(len(faces), dtype=bool)
    admitted[seed_tris] = True
    heap = list(seed_tris)
    heapq.heapify(heap)
    while heap:
        t = heapq.heappop(heap)
        for nb in adj[t]:
            if not admitted[nb] and within[nb]:
                admitted[nb] = True
                heapq.heappush(heap, nb)
    return np.flatnonzero(admitted)


def select_mouth_region(vertices, faces, seeds, radius: float, cloud: GaussianCloud) -> np.ndarray:
    """Boolean mask over ``cloud`` of Gaussians whose parent triangle is in the region."""
    tris = select_region_triangles(vertices, faces, seeds, radius)
    region = np.zeros(len(faces), dtype=bool)
    region[tris] = True
    mask = region[cloud.parent_tri]
    if not mask.any():
        raise ValidationError("mouth region holds no Gaussians; increase the radius")
    return mask


def apply_rigid_t(glob: GlobalGaussians, rotation, translation) -> GlobalGaussians:
    """Compose a rigid head pose ``x -> R x + t`` onto world-space Gaussians."""
    R = Tensor(np.asarray(rotation, dtype=np.float64).reshape(3, 3), check=False)
    t = Tensor(np.asarray(translation, dtype=np.float64).reshape(3), check=False)
    mu = ad.matmul(glob.mu, ad.transpose(R)) + t
    rotmat = ad.matmul(R, glob.rotmat)
    return GlobalGaussians(mu=mu, rotmat=rotmat, scale=glob.scale, alpha=glob.alpha, sh=glob.sh)


def global_to_local(glob: GlobalGaussians, vertices, faces, parent_tri, bary) -> dict[str, np.ndarray]:
    """Inverse of the rigged mapping: world attributes back to triangle frames.

    Returns ``mu``, ``rot`` (unit quaternions, w >= 0) and ``scale``.
    """
    parent_tri = np.asarray(parent_tri)
    R, _, k = triangle_frames(vertices, faces)
    Rg, kg = R[parent_tri], k[parent_tri][:, None]
    origin = np.einsum("pj,pjc->pc", np.asarray(bary), np.asarray(vertices)[np.asarray(faces)[parent_tri]])
    mu = np.einsum("pji,pj->pi", Rg, glob.mu.data - origin) / kg
    rot = matrix_to_quat(np.einsum("pji,pjk->pik", Rg, glob.rotmat.data))
    return {"mu": mu, "rot": rot, "scale": glob.scale.data / kg}
