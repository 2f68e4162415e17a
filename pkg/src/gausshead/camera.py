"""Pinhole camera with world-to-camera extrinsics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = 0.01

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if not self.near > 0:
            raise ValidationError("near plane must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("image size must be positive")
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project(self, points) -> np.ndarray:
        """World points (..., 3) -> pixel coordinates (..., 2)."""
        pc = self.to_camera(points)
        return np.stack([self.fx * pc[..., 0] / pc[..., 2] + self.cx,
                         self.fy * pc[..., 1] / pc[..., 2] + self.cy], -1)

    def ray(self, pixel) -> tuple[np.ndarray, np.ndarray]:
        """World-space origin and unit direction through a pixel position."""
        u, v = float(pixel[0]), float(pixel[1])
        d_cam = np.array([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])
        d = self.rotation.T @ d_cam
        return self.center, d / np.linalg.norm(d)

    def to_array(self) -> np.ndarray:
        """Flat 19-vector: fx fy cx cy width height near R(9) t(3)."""
        return np.concatenate([[self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.near],
                               self.rotation.ravel(), self.translation])

    @classmethod
    def from_array(cls, arr) -> "Camera":
        a = np.asarray(arr, dtype=np.float64).ravel()
        if a.size != 19:
            raise ValidationError(f"camera record must have 19 values, got {a.size}")
        return cls(fx=float(a[0]), fy=float(a[1]), cx=float(a[2]), cy=float(a[3]),
                   width=int(a[4]), height=int(a[5]), near=float(a[6]),
                   rotation=a[7:16].reshape(3, 3), translation=a[16:19])
