"""Parametric head: template, linear expression blendshapes, one skinned jaw joint."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ValidationError
from .io import ASSET_MAGIC, read_bundle, write_bundle
from .rotation import rodrigues, rodrigues_t


@dataclass(frozen=True)
class HeadModelAssets:
    template: np.ndarray      # (N, 3), identity shape baked in
    expr_basis: np.ndarray    # (N, 3, K)
    skin_weights: np.ndarray  # (N, 2) over (head, jaw)
    jaw_pivot: np.ndarray     # (3,)
    faces: np.ndarray         # (T, 3) int

    @property
    def n_vertices(self) -> int:
        return self.template.shape[0]

    @property
    def n_expr(self) -> int:
        return self.expr_basis.shape[2]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def validate(self) -> "HeadModelAssets":
        n = self.template.shape[0]
        if self.template.shape != (n, 3):
            raise ValidationError(f"template must be N x 3, got {self.template.shape}")
        if self.expr_basis.ndim != 3 or self.expr_basis.shape[:2] != (n, 3):
            raise ValidationError(f"expr_basis must be N x 3 x K, got {self.expr_basis.shape}")
        if self.skin_weights.shape != (n, 2):
            raise ValidationError(f"skin_weights must be N x 2, got {self.skin_weights.shape}")
        if self.jaw_pivot.shape != (3,):
            raise ValidationError("jaw_pivot must be a 3-vector")
        for name in ("template", "expr_basis", "skin_weights", "jaw_pivot"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationError(f"{name} contains non-finite values")
        neg = np.argwhere(self.skin_weights < 0)
        if neg.size:
            raise ValidationError(f"negative skin weight in row {int(neg[0, 0])}")
        sums = self.skin_weights.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-9)
        if bad.size:
            i = int(bad[0])
            raise ValidationError(f"skin weights of row {i} sum to {sums[i]:.6g}, not 1")
        f = self.faces
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValidationError(f"faces must be T x 3, got {f.shape}")
        bad = np.flatnonzero((f < 0).any(1) | (f >= n).any(1))
        if bad.size:
            raise ValidationError(f"triangle {int(bad[0])} references a missing vertex")
        areas = triangle_areas(self.template, f)
        bad = np.flatnonzero(areas <= 1e-12)
        if bad.size:
            raise ValidationError(f"triangle {int(bad[0])} is degenerate (area {areas[bad[0]]:.3g})")
        return self


def triangle_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v = vertices[faces]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def _check_jaw(jaw) -> None:
    jaw = np.asarray(jaw, dtype=np.float64)
    if jaw.shape != (3,):
        raise ValidationError(f"jaw pose must be a 3-vector, got {jaw.shape}")
    if not np.all(np.isfinite(jaw)) or np.linalg.norm(jaw) >= np.pi:
        raise ValidationError("jaw axis-angle must be finite with norm < pi")


def deform_mesh_t(model: HeadModelAssets, psi, jaw) -> Tensor:
    """Differentiable mesh for one frame: (K,) expression and (3,) jaw axis-angle -> (N, 3)."""
    psi = ad.as_tensor(psi)
    jaw = ad.as_tensor(jaw)
    _check_jaw(jaw.data)
    if psi.shape != (model.n_expr,):
        raise ValidationError(f"expected {model.n_expr} expression coefficients, got {psi.shape}")
    n = model.n_vertices
    basis = Tensor(model.expr_basis.reshape(n * 3, model.n_expr), check=False)
    shaped = ad.matmul(basis, psi.reshape(model.n_expr, 1)).reshape(n, 3) + Tensor(model.template, check=False)
    rot = rodrigues_t(jaw)
    pivot = Tensor(model.jaw_pivot, check=False)
    rotated = ad.matmul(shaped - pivot, ad.transpose(rot)) + pivot
    w = model.skin_weights
    return shaped * Tensor(w[:, :1], check=False) + rotated * Tensor(w[:, 1:], check=False)


def deform_mesh(model: HeadModelAssets, psi, jaw) -> np.ndarray:
    """Numpy forward of :func:`deform_mesh_t`."""
    psi = np.asarray(psi, dtype=np.float64)
    if psi.shape != (model.n_expr,):
        raise ValidationError(f"expected {model.n_expr} expression coefficients, got {psi.shape}")
    _check_jaw(jaw)
    shaped = model.template + model.expr_basis @ psi
    rot = rodrigues(np.asarray(jaw, dtype=np.float64))
    rotated = (shaped - model.jaw_pivot) @ rot.T + model.jaw_pivot
    w = model.skin_weights
    return shaped * w[:, :1] + rotated * w[:, 1:]


def save_head_model(path, model: HeadModelAssets) -> None:
    tensors = {
        "template": (model.template, "f64"),
        "expr_basis": (model.expr_basis, "f64"),
        "skin_weights": (model.skin_weights, "f64"),
        "jaw_pivot": (model.jaw_pivot, "f64"),
        "faces": (model.faces.astype(np.float64), "f64"),
    }
    write_bundle(path, ASSET_MAGIC, {"kind": "head_model"}, tensors)


def load_head_model(path) -> HeadModelAssets:
    _, tensors = read_bundle(path, ASSET_MAGIC)
    missing = {"template", "expr_basis", "skin_weights", "jaw_pivot", "faces"} - set(tensors)
    if missing:
        raise ValidationError(f"head model file lacks sections: {sorted(missing)}")
    faces = tensors["faces"][0]
    if not np.all(faces == np.round(faces)):
        raise ValidationError("faces section holds non-integer indices")
    model = HeadModelAssets(
        template=tensors["template"][0],
        expr_basis=tensors["expr_basis"][0],
        skin_weights=tensors["skin_weights"][0],
        jaw_pivot=tensors["jaw_pivot"][0],
        faces=faces.astype(np.int64),
    )
    return model.validate()
