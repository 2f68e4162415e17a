"""Finite-difference checks of every differentiable operation.

Each check builds a small fixture, reduces the operation's output to a scalar
with fixed random weights and compares backward() against central
differences.  Used by the ``gradcheck`` CLI command and the test suite.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import Camera
from .grmn import GRMNConfig, adain, grmn_forward, init_adain, init_grmn, to_tensors
from .head import deform_mesh_t
from .losses import loss_geo, loss_kl, loss_render, loss_score, ssim_t
from .render import backend, depth_to_normals, render
from .rig import GlobalGaussians, LocalParams, apply_mouth_residual_t, apply_rigid_t, rig_to_global_t
from .rotation import quat_to_matrix, quat_to_matrix_t, rodrigues, rodrigues_t

TOL = 1e-4
RENDER_TOL = 5e-3
H = 1e-5


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol


def _probe(f, x, rng, n=None, **kw) -> float:
    x = np.asarray(x, dtype=np.float64)
    idx = None
    if n is not None and x.size > n:
        idx = np.sort(rng.choice(x.size, n, replace=False))
    return ad.finite_diff_check(f, x, H, indices=idx, **kw)


def _head():
    from .synthetic import build_head
    return build_head(np.random.default_rng(3), 10)


def check_rotation(rng):
    W = rng.normal(size=(4, 3, 3))
    r = rng.normal(size=(4, 3)) * 0.7
    r[0] *= 1e-3  # series branch near the identity
    q = rng.normal(size=(4, 4))
    e1 = _probe(lambda x: ad.sum_(rodrigues_t(x) * W), r, rng)
    e2 = _probe(lambda x: ad.sum_(quat_to_matrix_t(x) * W), q, rng)
    return max(e1, e2)


def check_deform(rng):
    model = _head()
    W = rng.normal(size=(model.n_vertices, 3))
    psi = rng.normal(size=model.n_expr) * 0.3
    jaw = np.array([0.12, 0.02, -0.01])
    e1 = _probe(lambda x: ad.sum_(deform_mesh_t(model, x, jaw) * W), psi, rng)
    e2 = _probe(lambda x: ad.sum_(deform_mesh_t(model, psi, x) * W), jaw, rng)
    return max(e1, e2)


def _small_rig(rng, n=24):
    model = _head()
    faces = model.faces
    parent = rng.choice(len(faces), n, replace=False)
    bary = rng.dirichlet(np.ones(3), n)
    local = {
        "mu": rng.normal(size=(n, 3)) * 0.1,
        "quat": rng.normal(size=(n, 4)),
        "log_scale": rng.normal(size=(n, 3)) * 0.2 - 1.0,
        "alpha_logit": rng.normal(size=n),
        "sh": rng.normal(size=(n, 1, 3)) * 0.3,
    }
    return model, parent, bary, local


def _reduce_glob(glob: GlobalGaussians, W) -> Tensor:
    return (ad.sum_(glob.mu * W["mu"]) + ad.sum_(glob.rotmat * W["rot"]) + ad.sum_(glob.scale * W["scale"])
            + ad.sum_(glob.alpha * W["alpha"]))


def _glob_weights(rng, n):
    return {"mu": rng.normal(size=(n, 3)), "rot": rng.normal(size=(n, 3, 3)),
            "scale": rng.normal(size=(n, 3)), "alpha": rng.normal(size=n)}


def check_rig(rng):
    model, parent, bary, local = _small_rig(rng)
    W = _glob_weights(rng, len(parent))
    verts = model.template + rng.normal(size=model.template.shape) * 0.01
    used = np.unique(model.faces[parent])
    vidx = (used[:, None] * 3 + np.arange(3)).ravel()

    def run(vv, **over):
        loc = {k: Tensor(v) for k, v in local.items()}
        loc.update(over)
        return _reduce_glob(rig_to_global_t(LocalParams(**loc), vv, model.faces, parent, bary), W)

    worst = ad.finite_diff_check(run, verts, H, indices=vidx[:120])
    for key in ("mu", "quat", "log_scale", "alpha_logit"):
        worst = max(worst, _probe(lambda x, key=key: run(Tensor(verts), **{key: x}), local[key], rng, n=60))
    return worst


def check_mouth_residual(rng):
    n, m = 12, 5
    mu = rng.normal(size=(n, 3))
    rot = quat_to_matrix(rng.normal(size=(n, 4)))
    scale = np.exp(rng.normal(size=(n, 3)) * 0.2 - 1)
    idx = np.array([1, 4, 6, 9, 11])
    res = rng.normal(size=(m, 9)) * 0.05
    W = _glob_weights(rng, n)
    R, t = rodrigues([0.1, -0.2, 0.3]), np.array([0.1, 0.0, -0.2])

    def f(x):
        g = GlobalGaussians(mu=Tensor(mu), rotmat=Tensor(rot), scale=Tensor(scale), alpha=Tensor(np.full(n, 0.5)),
                            sh=Tensor(np.zeros((n, 1, 3))))
        g, _ = apply_mouth_residual_t(g, idx, x)
        return _reduce_glob(apply_rigid_t(g, R, t), W)

    return _probe(f, res, rng)


def check_grmn(rng):
    cfg = GRMNConfig(d_audio=6, d_au=5, d_identity=8, d_hidden=8, n_layers=1, n_heads=2, n_expr=3, n_mouth=2,
                     adain_hidden=6)
    w, a = init_grmn(cfg, 0), init_adain(cfg, 1)
    T = 4
    audio, aus, s = rng.normal(size=(T, 6)), np.abs(rng.normal(size=(T, 5))), rng.normal(size=8)
    Wf, Wm, Wz = rng.normal(size=(T, cfg.face_dim)), rng.normal(size=(2, 2, 9)), rng.normal(size=(T, 7))
    Wg = rng.normal(size=(T, 1))

    def loss(ww, aa):
        o = grmn_forward(audio, aus, s, ww, aa, cfg, mouth_frames=[1, 3])
        return ad.sum_(o.face * Wf) + ad.sum_(o.mouth * Wm) + ad.sum_(o.z_e * Wz) + ad.sum_(o.g * Wg)

    worst = 0.0
    for name in list(w) + list(a):
        src = w if name in w else a

        def f(x, name=name):
            ww, aa = to_tensors(w, False), to_tensors(a, False)
            (ww if name in w else aa)[name] = x
            return loss(ww, aa)

        worst = max(worst, _probe(f, src[name], rng, n=40))
    return worst


def check_adain(rng):
    cfg = GRMNConfig(d_identity=8, d_hidden=6, adain_hidden=5)
    a = init_adain(cfg, 2)
    a["adain.fc2.w"] = rng.normal(size=a["adain.fc2.w"].shape) * 0.3
    stream, s = rng.normal(size=(7, 6)), rng.normal(size=8)
    W = rng.normal(size=(7, 6))
    e1 = _probe(lambda x: ad.sum_(adain(x, s, to_tensors(a, False), cfg) * W), stream, rng)
    e2 = _probe(lambda x: ad.sum_(adain(stream, x, to_tensors(a, False), cfg, "au") * W), s, rng)
    return max(e1, e2)


def check_losses(rng):
    img, ref = rng.uniform(size=(12, 12, 3)), rng.uniform(size=(12, 12, 3))
    e = _probe(lambda x: loss_render(x, ref, 0.2), img, rng, n=60)
    e = max(e, _probe(lambda x: ssim_t(x, ref), img, rng, n=60))
    p = rng.dirichlet(np.ones(7), 5)
    e = max(e, _probe(lambda x: loss_kl(x, p, [1, 1, 0, 1, 1]), rng.normal(size=(5, 7)), rng))
    e = max(e, _probe(lambda x: loss_score(x, np.full(5, 0.6), None),
                      rng.uniform(0.05, 0.25, size=(5, 1)), rng))
    depth, dgt = rng.uniform(2, 3, (6, 6)), rng.uniform(2, 3, (6, 6))
    depth = np.where(np.abs(depth - dgt) < 1e-3, depth + 0.01, depth)
    nrm = rng.normal(size=(6, 6, 3))
    ngt = nrm / np.linalg.norm(nrm, axis=-1, keepdims=True)
    mask = rng.uniform(size=(6, 6)) > 0.3
    e = max(e, _probe(lambda x: loss_geo(x, nrm, dgt, ngt, mask, 1e-2, 1e-3), depth, rng))
    e = max(e, _probe(lambda x: loss_geo(depth, x, dgt, ngt, mask, 1e-2, 1e-3), nrm, rng))
    return e


def check_normals(rng):
    cam = Camera(fx=20, fy=20, cx=4, cy=4, width=9, height=9)
    u, v = np.meshgrid(np.arange(9.0), np.arange(9.0))
    depth = 3 + 0.05 * u + 0.03 * v + 0.02 * np.sin(u * v / 7)
    W = rng.normal(size=(9, 9, 3))
    return _probe(lambda x: ad.sum_(depth_to_normals(x, cam) * W), depth, rng, n=60)


def _render_fixture(rng, n=30, size=32):
    cam = Camera(fx=40, fy=40, cx=size / 2, cy=size / 2, width=size, height=size)
    base = {
        "mu": rng.normal(size=(n, 3)) * 0.5 + [0, 0, 4],
        "rot": quat_to_matrix(rng.normal(size=(n, 4))),
        "scale": np.exp(rng.normal(size=(n, 3)) * 0.3 - 2.0),
        "alpha": rng.uniform(0.2, 0.9, n),
        "sh": rng.normal(size=(n, 1, 3)) * 0.5,
    }
    return cam, base


def check_render(rng):
    cam, base = _render_fixture(rng)
    W = rng.normal(size=(cam.height, cam.width, 3))

    def build(name, x):
        d = dict(base)
        d[name] = x
        return GlobalGaussians(mu=ad.as_tensor(d["mu"]), rotmat=ad.as_tensor(d["rot"]), scale=ad.as_tensor(d["scale"]),
                               alpha=ad.as_tensor(d["alpha"]), sh=ad.as_tensor(d["sh"]))

    worst = 0.0
    for name in ("mu", "rot", "scale", "alpha", "sh"):
        def f(x, name=name):
            out = render(build(name, x), cam)
            fg = Tensor((out.alpha.data > 1e-6).astype(np.float64))
            return ad.sum_(out.color * W) + ad.sum_(out.alpha * W[..., 0]) + ad.sum_(out.depth * fg * W[..., 1]) * 0.1

        def key(x, name=name):
            o = render(build(name, x), cam)
            return o.order.tobytes(), o.count.tobytes()

        worst = max(worst, _probe(f, base[name], rng, n=45, kink_key=key))
    return worst


CHECKS = [
    ("rotation", check_rotation, TOL),
    ("deform_mesh", check_deform, TOL),
    ("rig_to_global", check_rig, TOL),
    ("mouth_residual+rigid", check_mouth_residual, TOL),
    ("adain", check_adain, TOL),
    ("grmn_heads", check_grmn, TOL),
    ("losses", check_losses, TOL),
    ("depth_to_normals", check_normals, TOL),
    ("render", check_render, RENDER_TOL),
]


def run_suite(seed: int = 0, backends=None) -> list[CheckResult]:
    """Run every check; the renderer check runs once per rasterizer backend."""
    results = []
    previous = backend.name()
    try:
        for name, fn, tol in CHECKS:
            kernels = (backends or backend.available()) if name == "render" else [None]
            for k in kernels:
                if k is not None:
                    backend.use(k)
                t0 = time.perf_counter()
                err = fn(np.random.default_rng(seed))
                label = name if k is None else f"{name}[{k}]"
                results.append(CheckResult(label, float(err), tol, time.perf_counter() - t0))
    finally:
        backend.use(previous)
    return results
