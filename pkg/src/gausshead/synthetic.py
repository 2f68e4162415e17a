"""Procedural multi-identity corpus standing in for tracked talking-head video.

Every identity gets a small grid face with a mouth slit and an intra-oral
cavity, a scripted expression/jaw trajectory with speech and emotion
episodes, feature tracks derived from that trajectory (the "audio" and "AU"
extractor outputs), teacher emotion distributions, and ground-truth frames
rendered from a textured Gaussian cloud bound to the same mesh.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import Camera
from .errors import ValidationError
from .head import HeadModelAssets, deform_mesh, save_head_model
from .io import ASSET_MAGIC, atomic_write, read_bundle, write_bundle, write_tensor
from .losses import EMOTIONS, NEUTRAL
from .render import depth_to_normals, render
from .rig import SH_C0, GaussianCloud, apply_rigid_t, rig_to_global, sample_bindings
from .rotation import rodrigues

log = logging.getLogger(__name__)

GRID = 21
LIP_UPPER_ROW = 14          # quads between rows 14 and 15 are left open ...
MOUTH_COLS = (7, 13)        # ... for columns 7..12 (vertex columns 7..13)
CAVITY_ROWS = 4
CAVITY_DEPTH = 0.22
CAMERA_DISTANCE = 3.2
GT_SEED_OFFSET = 7919       # ground-truth Gaussians use their own sampling seed
MANIFEST_NAME = "manifest.json"
CORPUS_VERSION = 1

# (center x, center y, radius, direction, mirrored) in canonical face units
_BUMPS = [
    ((0.0, 0.62), 0.22, (0.0, 0.05, 0.0), False),     # lower lip down
    ((0.30, 0.50), 0.18, (0.05, -0.04, 0.0), True),   # lip corners up and out
    ((0.25, 0.52), 0.18, (-0.05, 0.0, -0.04), True),  # pucker
    ((0.0, 0.40), 0.18, (0.0, -0.04, 0.0), False),    # upper lip raise
    ((0.35, -0.60), 0.25, (0.0, -0.06, 0.0), True),   # brow raise
    ((0.18, -0.55), 0.18, (-0.04, 0.04, 0.0), True),  # brow furrow
    ((0.50, 0.25), 0.22, (0.0, 0.0, -0.06), True),    # cheek puff
    ((0.35, -0.32), 0.15, (0.0, 0.04, 0.0), True),    # squint
    ((0.0, -0.05), 0.15, (0.0, -0.03, -0.02), False),  # nose wrinkle
    ((0.0, 0.90), 0.25, (0.0, -0.05, 0.0), False),    # chin raise
]
SPEECH_EXPR = (0, 2, 3, 9)
UPPER_EXPR = (4, 5, 7, 8)
# expression pattern per emotion class (indices follow EMOTIONS, neutral excluded)
_EMOTION_PATTERNS = [
    {5: 1.2, 7: 0.6, 8: 0.5, 3: 0.3},   # angry
    {8: 1.2, 3: 0.8, 5: 0.4},           # disgust
    {4: 1.0, 2: -0.6, 0: 0.4},          # fear
    {1: 1.3, 7: 0.6, 6: 0.4},           # happy
    {4: 0.5, 1: -0.8, 9: 0.6},          # sad
    {4: 1.4, 0: 0.5},                   # surprise
]
JAW_SCALE = 0.18
# emotion episodes: length range in frames and one episode per this many frames
EPISODE_FRAMES = (16, 22)
EPISODE_SPACING = 20


@dataclass(frozen=True)
class CorpusSpec:
    n_identities: int = 4
    n_frames: int = 125
    resolution: int = 64
    n_expr: int = 10
    n_gaussians: int = 2000
    fps: int = 25
    rest_frames: int = 5
    d_audio: int = 64
    d_au: int = 17
    d_identity: int = 512
    sh_degree: int = 0

    def __post_init__(self):
        if self.n_identities < 1 or self.n_frames < 1:
            raise ValidationError("need at least one identity and one frame")
        if self.rest_frames >= self.n_frames:
            raise ValidationError("rest frames must leave room for motion")
        if self.resolution < 8:
            raise ValidationError("resolution must be at least 8 pixels")

    @classmethod
    def from_config(cls, cfg) -> "CorpusSpec":
        return cls(n_identities=cfg.n_identities, n_frames=cfg.n_frames, resolution=cfg.resolution,
                   n_expr=cfg.n_expr, n_gaussians=cfg.n_gaussians, fps=cfg.fps, rest_frames=cfg.rest_frames,
                   d_audio=cfg.d_audio, d_au=cfg.d_au, d_identity=cfg.d_identity, sh_degree=cfg.sh_degree)


# -- head geometry --------------------------------------------------------------

def _grid_coords():
    x = np.linspace(-0.95, 0.95, GRID)
    y = np.linspace(-1.15, 1.15, GRID)
    return x, y


def _face_depth(x, y, nose: float, depth_scale: float):
    base = -0.6 * depth_scale * (1.0 - 0.35 * (x / 0.95) ** 2 - 0.2 * (y / 1.15) ** 2)
    return base - nose * np.exp(-(x ** 2) / 0.02 - (y + 0.1) ** 2 / 0.06)


def _smoothstep(e0, e1, x):
    t = np.clip((x - e0) / (e1 - e0), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def head_topology():
    """Faces, canonical (x, y) coordinates and a cavity flag per vertex."""
    gx, gy = _grid_coords()
    idx = np.arange(GRID * GRID).reshape(GRID, GRID)
    faces = []
    for i in range(GRID - 1):
        for j in range(GRID - 1):
            if i == LIP_UPPER_ROW and MOUTH_COLS[0] <= j < MOUTH_COLS[1]:
                continue
            a, b, c, d = idx[i, j], idx[i, j + 1], idx[i + 1, j], idx[i + 1, j + 1]
            faces.append((a, c, b))
            faces.append((b, c, d))
    cols = MOUTH_COLS[1] - MOUTH_COLS[0] + 1
    base = GRID * GRID
    cidx = base + np.arange(CAVITY_ROWS * cols).reshape(CAVITY_ROWS, cols)
    for i in range(CAVITY_ROWS - 1):
        for j in range(cols - 1):
            a, b, c, d = cidx[i, j], cidx[i, j + 1], cidx[i + 1, j], cidx[i + 1, j + 1]
            faces.append((a, c, b))
            faces.append((b, c, d))
    X, Y = np.meshgrid(gx, gy)
    canon = [np.stack([X.ravel(), Y.ravel()], 1)]
    cx = gx[MOUTH_COLS[0]:MOUTH_COLS[1] + 1]
    cy = np.linspace(gy[LIP_UPPER_ROW], gy[LIP_UPPER_ROW + 1], CAVITY_ROWS)
    CX, CY = np.meshgrid(cx, cy)
    canon.append(np.stack([CX.ravel(), CY.ravel()], 1))
    canon = np.concatenate(canon)
    cavity = np.zeros(len(canon), dtype=bool)
    cavity[base:] = True
    return np.asarray(faces, dtype=np.int64), canon, cavity


def _expression_basis(canon: np.ndarray, n_expr: int) -> np.ndarray:
    bumps = list(_BUMPS)
    extra = np.random.default_rng(1234)
    while len(bumps) < n_expr:
        c = (float(extra.uniform(-0.6, 0.6)), float(extra.uniform(-0.8, 0.8)))
        d = tuple(float(v) for v in extra.normal(0, 0.03, 3))
        bumps.append((c, 0.2, d, False))
    basis = np.zeros((len(canon), 3, n_expr))
    for k, (center, radius, direction, mirrored) in enumerate(bumps[:n_expr]):
        direction = np.asarray(direction)
        sides = [(1.0, direction)]
        if mirrored:
            sides.append((-1.0, direction * np.array([-1.0, 1.0, 1.0])))
        for sx, dvec in sides:
            r2 = (canon[:, 0] - sx * center[0]) ** 2 + (canon[:, 1] - center[1]) ** 2
            basis[:, :, k] += np.exp(-0.5 * r2 / radius ** 2)[:, None] * dvec
    return basis


def build_head(rng: np.random.Generator, n_expr: int = 10) -> HeadModelAssets:
    """One procedurally varied head sharing the common topology and basis."""
    faces, canon, cavity = head_topology()
    sx, sy = rng.uniform(0.92, 1.08, 2)
    depth_scale = rng.uniform(0.9, 1.1)
    nose = rng.uniform(0.12, 0.22)
    x, y = canon[:, 0], canon[:, 1]
    z = _face_depth(x, y, nose, depth_scale)
    # low-frequency identity jitter
    for _ in range(3):
        c = rng.uniform(-0.7, 0.7, 2)
        z += rng.normal(0, 0.03) * np.exp(-((x - c[0]) ** 2 + (y - c[1]) ** 2) / 0.15)
    gy = _grid_coords()[1]
    lip_mid = 0.5 * (gy[LIP_UPPER_ROW] + gy[LIP_UPPER_ROW + 1])
    half_width = 0.285 * 1.25
    bowl = 1.0 - 0.5 * ((x / half_width) ** 2 + ((y - lip_mid) / 0.09) ** 2)
    z = np.where(cavity, z + CAVITY_DEPTH * np.clip(bowl, 0.3, 1.0), z)
    template = np.stack([x * sx, y * sy, z], axis=1)

    # jaw skinning: everything below the mouth line, fading out toward the sides
    below = canon[:, 1] > lip_mid
    side = 1.0 - _smoothstep(0.35, 0.8, np.abs(x))
    w_jaw = np.where(below, side, 0.0)
    cav_rows = (y - gy[LIP_UPPER_ROW]) / (gy[LIP_UPPER_ROW + 1] - gy[LIP_UPPER_ROW])
    w_jaw = np.where(cavity, np.clip(cav_rows, 0.0, 1.0), w_jaw)
    skin = np.stack([1.0 - w_jaw, w_jaw], axis=1)

    model = HeadModelAssets(template=template, expr_basis=_expression_basis(canon, n_expr), skin_weights=skin,
                            jaw_pivot=np.array([0.0, 0.05 * sy, 0.35]), faces=faces)
    return model.validate()


def default_camera(resolution: int) -> Camera:
    f = 70.0 * resolution / 64.0
    c = resolution / 2.0
    return Camera(fx=f, fy=f, cx=c, cy=c, width=resolution, height=resolution,
                  translation=np.array([0.0, 0.0, CAMERA_DISTANCE]))


def lip_vertices() -> np.ndarray:
    """Vertex ids on the upper and lower lip rims."""
    cols = np.arange(MOUTH_COLS[0], MOUTH_COLS[1] + 1)
    return np.concatenate([LIP_UPPER_ROW * GRID + cols, (LIP_UPPER_ROW + 1) * GRID + cols])


def landmark_vertices() -> np.ndarray:
    """Vertex set used for the landmark distance metric."""
    extra = [19 * GRID + c for c in (6, 10, 14)]         # jaw line
    extra += [3 * GRID + c for c in (5, 7, 13, 15)]      # brows
    extra += [6 * GRID + c for c in (5, 15)]             # eye corners
    return np.concatenate([lip_vertices(), np.asarray(extra)])


def mouth_landmarks_2d(model: HeadModelAssets, cam: Camera) -> np.ndarray:
    """Rest-pose mouth contour as a detector would report it (pixels)."""
    t = model.template
    upper = t[LIP_UPPER_ROW * GRID + np.arange(MOUTH_COLS[0], MOUTH_COLS[1] + 1)]
    lower = t[(LIP_UPPER_ROW + 1) * GRID + np.arange(MOUTH_COLS[0], MOUTH_COLS[1] + 1)]
    pts = [upper + [0.0, -0.03, 0.0], lower + [0.0, 0.03, 0.0], 0.5 * (upper + lower)]
    # nudge off exact grid columns so rays do not graze shared edges
    pts = np.concatenate(pts) + np.array([0.013, 0.0, 0.0])
    return cam.project(pts)


# -- appearance -----------------------------------------------------------------

def _texture(canon_pts, cavity_pts, rows, palette) -> np.ndarray:
    x, y = canon_pts[:, 0], canon_pts[:, 1]

    def blob(cx, cy, rx, ry, sharp=0.04):
        r = np.sqrt(((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2)
        return 1.0 - _smoothstep(1.0 - sharp / min(rx, ry), 1.0 + sharp / min(rx, ry), r)

    col = palette["skin"][None, :] * (1.0 - 0.12 * (y / 1.15)[:, None]) \
        + 0.03 * np.sin(3.0 * x + 2.0 * y)[:, None]
    gy = _grid_coords()[1]
    lip_mid = 0.5 * (gy[LIP_UPPER_ROW] + gy[LIP_UPPER_ROW + 1])
    lips = blob(0.0, lip_mid, 0.36, 0.17)
    col = col * (1 - lips[:, None]) + palette["lips"][None, :] * lips[:, None]
    for s in (-1.0, 1.0):
        brow = blob(0.35 * s, -0.56, 0.2, 0.05)
        col = col * (1 - brow[:, None]) + palette["brow"][None, :] * brow[:, None]
        eye = blob(0.35 * s, -0.3, 0.14, 0.07)
        col = col * (1 - eye[:, None]) + np.array([0.92, 0.92, 0.9])[None, :] * eye[:, None]
        iris = blob(0.35 * s, -0.3, 0.05, 0.05)
        col = col * (1 - iris[:, None]) + palette["iris"][None, :] * iris[:, None]
    nose = blob(0.0, 0.08, 0.12, 0.05)
    col = col * (1 - 0.25 * nose[:, None])
    inner = np.where(rows[:, None] < 0.34, np.array([0.9, 0.88, 0.82])[None, :],
                     np.array([0.35, 0.08, 0.1])[None, :])
    col = np.where(cavity_pts[:, None], inner, col)
    return np.clip(col, 0.02, 0.97)


def make_palette(rng: np.random.Generator) -> dict:
    return {
        "skin": np.array([0.82, 0.62, 0.5]) * rng.uniform(0.85, 1.1) + rng.normal(0, 0.03, 3),
        "lips": np.array([0.72, 0.3, 0.32]) + rng.normal(0, 0.04, 3),
        "brow": np.array([0.3, 0.2, 0.12]) * rng.uniform(0.6, 1.3),
        "iris": np.array([0.2, 0.3, 0.45]) * rng.uniform(0.5, 1.5),
    }


def ground_truth_cloud(model: HeadModelAssets, n_gaussians: int, seed: int, palette: dict,
                       sh_degree: int = 0) -> GaussianCloud:
    faces, canon, cavity = head_topology()
    cloud = sample_bindings(model.template, faces, n_gaussians, seed, sh_degree=sh_degree, scale_factor=1.8)
    tri_canon = canon[faces[cloud.parent_tri]]
    pts = np.einsum("pj,pjc->pc", cloud.bary, tri_canon)
    on_cavity = cavity[faces[cloud.parent_tri]].all(axis=1)
    gy = _grid_coords()[1]
    rows = (pts[:, 1] - gy[LIP_UPPER_ROW]) / (gy[LIP_UPPER_ROW + 1] - gy[LIP_UPPER_ROW])
    color = _texture(pts, on_cavity, rows, palette)
    sh = cloud.sh.copy()
    sh[:, 0, :] = (color - 0.5) / SH_C0
    return GaussianCloud(mu=cloud.mu, rot=cloud.rot, scale=cloud.scale, alpha=np.full(len(cloud), 0.92), sh=sh,
                         parent_tri=cloud.parent_tri, bary=cloud.bary, mouth_mask=cloud.mouth_mask)


def save_cloud(path, cloud: GaussianCloud, meta: dict | None = None) -> None:
    tensors = {name: (np.asarray(getattr(cloud, name), dtype=np.float64), "f64")
               for name in ("mu", "rot", "scale", "alpha", "sh", "parent_tri", "bary", "mouth_mask")}
    write_bundle(path, ASSET_MAGIC, {"kind": "gaussian_cloud", **(meta or {})}, tensors)


def load_cloud(path) -> GaussianCloud:
    meta, tensors = read_bundle(path, ASSET_MAGIC)
    if meta.get("kind") != "gaussian_cloud":
        raise ValidationError(f"{path} is not a Gaussian cloud asset")
    t = {k: v[0] for k, v in tensors.items()}
    return GaussianCloud(mu=t["mu"], rot=t["rot"], scale=t["scale"], alpha=t["alpha"], sh=t["sh"],
                         parent_tri=t["parent_tri"].astype(np.int64), bary=t["bary"],
                         mouth_mask=t["mouth_mask"].astype(bool)).validate()


# -- trajectories -----------------------------------------------------------------

def _smooth_noise(rng, n: int, scale: float, width: float) -> np.ndarray:
    """Zero-mean smooth random signal with roughly unit peak amplitude times ``scale``."""
    raw = rng.normal(size=n + 40)
    k = np.exp(-0.5 * (np.arange(-20, 21) / width) ** 2)
    sm = np.convolve(raw, k / np.sqrt((k ** 2).sum()), mode="same")[20:20 + n]
    return scale * sm / 2.0


def _raised_cosine(t, start, length):
    u = np.clip((t - start) / length, 0.0, 1.0)
    return np.sin(np.pi * u) ** 2


@dataclass
class Trajectory:
    psi: np.ndarray        # (T, K)
    jaw: np.ndarray        # (T, 3)
    pose: np.ndarray       # (T, 6) axis-angle + translation
    emotion: np.ndarray    # (T,) class index or -1
    intensity: np.ndarray  # (T,) emotion score e
    speech: np.ndarray     # (T, S) unscaled speech latent


def script_trajectory(rng: np.random.Generator, n_frames: int, n_expr: int, rest: int, fps: int,
                      speech_gain: float = 1.0, emotion_gain: float = 1.0) -> Trajectory:
    t = np.arange(n_frames, dtype=np.float64)
    active = (t >= rest).astype(np.float64)
    ramp_in = _smoothstep(rest, rest + 4, t)

    # syllable-rate jaw opening with a slowly varying envelope
    rate = 4.0 + 0.8 * _smooth_noise(rng, n_frames, 1.0, 6.0)
    phase = np.cumsum(2 * np.pi * rate / fps) + rng.uniform(0, 2 * np.pi)
    env = np.clip(0.65 + _smooth_noise(rng, n_frames, 0.7, 8.0), 0.15, 1.0)
    open_ = (0.5 - 0.5 * np.cos(phase)) * env * ramp_in
    speech = np.stack([open_] + [_smooth_noise(rng, n_frames, 0.8, 3.0) * ramp_in for _ in SPEECH_EXPR[1:]], 1)

    psi = np.zeros((n_frames, n_expr))
    jaw = np.zeros((n_frames, 3))
    jaw[:, 0] = JAW_SCALE * speech_gain * open_
    lower = [k for k in SPEECH_EXPR if k < n_expr]
    if lower:
        psi[:, lower[0]] = 0.8 * speech_gain * open_ + 0.2 * speech_gain * speech[:, 1]
        for col, k in enumerate(lower[1:], start=1):
            psi[:, k] = speech_gain * speech[:, col]
    for k in UPPER_EXPR:
        if k < n_expr:
            psi[:, k] = _smooth_noise(rng, n_frames, 0.4, 5.0) * ramp_in

    # emotion episodes spread over the clip; the last one overlaps the tail
    emotion = np.full(n_frames, -1)
    intensity = np.zeros(n_frames)
    usable = n_frames - rest
    n_ep = max(1, int(round(usable / EPISODE_SPACING)))
    classes = rng.permutation(len(_EMOTION_PATTERNS))
    for e in range(n_ep):
        length = min(usable, rng.uniform(*EPISODE_FRAMES))
        lo = rest + e * usable / n_ep
        hi = rest + (e + 1) * usable / n_ep - length
        start = rng.uniform(lo, max(lo, hi)) if e < n_ep - 1 else max(lo, n_frames - length + 4)
        peak = rng.uniform(0.75, 1.0)
        curve = peak * _raised_cosine(t, start, length)
        c = int(classes[e % len(classes)])
        take = curve > intensity
        emotion = np.where(take & (curve > 0.0), c, emotion)
        intensity = np.maximum(intensity, curve)
    for c, pattern in enumerate(_EMOTION_PATTERNS):
        sel = emotion == c
        for k, v in pattern.items():
            if k < n_expr:
                psi[sel, k] += emotion_gain * v * intensity[sel]
    if 5 < len(_EMOTION_PATTERNS):  # surprise also drops the jaw a little
        jaw[:, 0] += 0.05 * intensity * (emotion == 5)

    pose = np.zeros((n_frames, 6))
    pose[:, 0] = _smooth_noise(rng, n_frames, 0.04, 10.0)
    pose[:, 1] = _smooth_noise(rng, n_frames, 0.05, 10.0)
    pose[:, 2] = _smooth_noise(rng, n_frames, 0.02, 10.0)
    pose[:, 3:5] = np.stack([_smooth_noise(rng, n_frames, 0.02, 10.0) for _ in range(2)], 1)
    pose *= ramp_in[:, None]
    psi *= active[:, None]
    jaw *= active[:, None]
    emotion = np.where(intensity > 1e-9, emotion, -1)
    return Trajectory(psi=psi, jaw=jaw, pose=pose, emotion=emotion, intensity=intensity, speech=speech)


def teacher_distribution(traj: Trajectory) -> np.ndarray:
    """Seven-way distribution whose neutral mass is ``1 - e``."""
    n = len(traj.intensity)
    p = np.zeros((n, len(EMOTIONS)))
    p[:, NEUTRAL] = 1.0 - traj.intensity
    others = [i for i in range(len(EMOTIONS)) if i != NEUTRAL]
    for t in range(n):
        e = traj.intensity[t]
        if e <= 0:
            continue
        c = others[traj.emotion[t]]
        p[t, others] = 0.15 * e / (len(others) - 1)
        p[t, c] = 0.85 * e
    return p


@dataclass(frozen=True)
class FeatureMixing:
    """Fixed maps from scripted latents to feature tracks, shared by all identities."""

    audio: np.ndarray  # (S + 6, D_a)
    au: np.ndarray     # (4 + 6, D_e)


def make_mixing(rng: np.random.Generator, d_audio: int, d_au: int) -> FeatureMixing:
    n_s = len(SPEECH_EXPR) + 6
    audio = rng.normal(size=(n_s, d_audio)) / np.sqrt(n_s) * 1.5
    au = np.abs(rng.normal(size=(len(UPPER_EXPR) + 6, d_au))) * (rng.random((len(UPPER_EXPR) + 6, d_au)) < 0.5)
    au[np.arange(len(UPPER_EXPR) + 6), rng.integers(0, d_au, len(UPPER_EXPR) + 6)] += 1.0
    return FeatureMixing(audio=audio, au=au)


def _emotion_onehot(traj: Trajectory) -> np.ndarray:
    out = np.zeros((len(traj.intensity), 6))
    on = traj.emotion >= 0
    out[on, traj.emotion[on]] = traj.intensity[on]
    return out


def audio_features(rng, traj: Trajectory, mix: FeatureMixing) -> np.ndarray:
    latent = np.concatenate([traj.speech, _emotion_onehot(traj)], axis=1)
    noise = rng.normal(0, 0.03, (len(latent), mix.audio.shape[1]))
    voice = rng.normal(0, 0.3, mix.audio.shape[1])
    return np.tanh(latent @ mix.audio + noise + voice)


def au_features(rng, traj: Trajectory, mix: FeatureMixing, n_expr: int) -> np.ndarray:
    upper = np.stack([traj.psi[:, k] if k < n_expr else np.zeros(len(traj.psi)) for k in UPPER_EXPR], 1)
    latent = np.concatenate([np.maximum(upper, 0.0), _emotion_onehot(traj)], axis=1)
    return latent @ mix.au + np.abs(rng.normal(0, 0.02, (len(latent), mix.au.shape[1])))


# -- rendering -------------------------------------------------------------------

def pose_matrix(pose) -> tuple[np.ndarray, np.ndarray]:
    pose = np.asarray(pose, dtype=np.float64).reshape(6)
    return rodrigues(pose[:3]), pose[3:]


def render_reference(model: HeadModelAssets, cloud: GaussianCloud, psi, jaw, pose, cam: Camera):
    """Ground-truth frame: deform, rig, compose head pose, render."""
    verts = deform_mesh(model, psi, jaw)
    glob = rig_to_global(cloud, verts, model.faces)
    R, t = pose_matrix(pose)
    glob = apply_rigid_t(glob, R, t)
    return render(glob, cam), verts


def project_landmarks(verts: np.ndarray, pose, cam: Camera, vertex_ids) -> np.ndarray:
    R, t = pose_matrix(pose)
    return cam.project(verts[np.asarray(vertex_ids)] @ R.T + t)


# -- corpus ----------------------------------------------------------------------

def generate_synthetic_corpus(out_dir, spec: CorpusSpec = CorpusSpec(), seed: int = 0) -> Path:
    """Write a complete corpus under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ValidationError(f"cannot write corpus to {out}: {exc}") from exc

    root = np.random.default_rng(seed)
    mix = make_mixing(np.random.default_rng(root.integers(2 ** 63)), spec.d_audio, spec.d_au)
    cam = default_camera(spec.resolution)
    lm_ids = landmark_vertices()
    entries = []
    for i in range(spec.n_identities):
        ident_seed = int(root.integers(2 ** 63))
        rng = np.random.default_rng(ident_seed)
        name = f"id{i:02d}"
        d = out / name
        model = build_head(rng, spec.n_expr)
        palette = make_palette(rng)
        gt = ground_truth_cloud(model, spec.n_gaussians, ident_seed % (2 ** 31) + GT_SEED_OFFSET, palette,
                                spec.sh_degree)
        traj = script_trajectory(rng, spec.n_frames, spec.n_expr, spec.rest_frames, spec.fps,
                                 speech_gain=rng.uniform(0.85, 1.15), emotion_gain=rng.uniform(0.85, 1.15))
        p_emo = teacher_distribution(traj)
        audio = audio_features(rng, traj, mix)
        aus = au_features(rng, traj, mix, spec.n_expr)
        s = rng.normal(size=spec.d_identity)
        s /= np.linalg.norm(s)

        save_head_model(d / "head.etga", model)
        save_cloud(d / "reference_cloud.etga", gt)
        write_tensor(d / "audio.etgt", audio)
        write_tensor(d / "au.etgt", aus)
        write_tensor(d / "identity.etgt", s)
        write_tensor(d / "teacher_p.etgt", p_emo)
        write_tensor(d / "teacher_e.etgt", (1.0 - p_emo[:, NEUTRAL])[:, None])
        write_tensor(d / "poses.etgt", traj.pose, "f64")
        write_tensor(d / "cameras.etgt", np.tile(cam.to_array(), (spec.n_frames, 1)), "f64")
        write_tensor(d / "mouth_landmarks.etgt", mouth_landmarks_2d(model, cam))
        params = np.concatenate([traj.psi, traj.jaw], axis=1)
        write_tensor(d / "reference_params.etgt", params, "f64")
        write_tensor(d / "reference_emotion.etgt", traj.emotion.astype(np.float64)[:, None])

        frames, depths, normals, lms = [], [], [], []
        for t in range(spec.n_frames):
            out_t, verts = render_reference(model, gt, traj.psi[t], traj.jaw[t], traj.pose[t], cam)
            nrm = depth_to_normals(out_t.depth, cam, alpha=out_t.alpha)
            write_tensor(d / "frames" / f"{t:04d}.etgt", out_t.color.data)
            write_tensor(d / "depth" / f"{t:04d}.etgt", out_t.depth.data)
            write_tensor(d / "normals" / f"{t:04d}.etgt", nrm.data)
            frames.append(f"{name}/frames/{t:04d}.etgt")
            depths.append(f"{name}/depth/{t:04d}.etgt")
            normals.append(f"{name}/normals/{t:04d}.etgt")
            lms.append(project_landmarks(verts, traj.pose[t], cam, lm_ids))
        write_tensor(d / "reference_landmarks.etgt", np.stack(lms), "f64")
        entries.append({
            "id": name,
            "head": f"{name}/head.etga",
            "audio": f"{name}/audio.etgt",
            "au": f"{name}/au.etgt",
            "identity": f"{name}/identity.etgt",
            "teacher_p": f"{name}/teacher_p.etgt",
            "teacher_e": f"{name}/teacher_e.etgt",
            "poses": f"{name}/poses.etgt",
            "cameras": f"{name}/cameras.etgt",
            "mouth_landmarks": f"{name}/mouth_landmarks.etgt",
            "frames": frames,
            "depth": depths,
            "normals": normals,
            "rest_frames": list(range(spec.rest_frames)),
            "n_frames": spec.n_frames,
            "reference": {
                "params": f"{name}/reference_params.etgt",
                "cloud": f"{name}/reference_cloud.etga",
                "landmarks": f"{name}/reference_landmarks.etgt",
                "emotion": f"{name}/reference_emotion.etgt",
            },
        })
        log.info("identity %s written", name)

    manifest = {
        "format": "gausshead-corpus",
        "version": CORPUS_VERSION,
        "seed": seed,
        "fps": spec.fps,
        "resolution": spec.resolution,
        "n_expr": spec.n_expr,
        "landmark_vertices": [int(v) for v in lm_ids],
        "identities": entries,
    }
    path = out / MANIFEST_NAME
    atomic_write(path, (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
    return path
