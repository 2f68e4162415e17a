"""Pretraining, few-shot adaptation and inference.

All trainable values live in one flat ``name -> float64 array`` table:

* ``grmn/<weight>``        shared motion network
* ``adain/<id>/<weight>``  per-identity modulation MLP
* ``gauss/<id>/<field>``   per-identity local Gaussian attributes
  (``mu``, ``quat``, ``log_scale``, ``alpha_logit``, ``sh``)

A checkpoint is that table plus bindings, head assets, optimizer moments,
the RNG state and the configuration text.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import Camera
from .config import FULL_SCALE_DEFAULTS, RunConfig, parse_config
from .errors import ValidationError
from .grmn import GRMNConfig, MotionOutput, grmn_forward, init_adain, init_grmn
from .head import HeadModelAssets, deform_mesh, deform_mesh_t
from .io import CHECKPOINT_MAGIC, atomic_write, decode_bundle, encode_bundle, read_tensor
from .losses import (NEUTRAL, lmd, loss_geo, loss_kl, loss_render, loss_score, psnr, ssim, total_loss)
from .optim import AdamWState, adamw_step
from .render import depth_to_normals, render
from .rig import (LocalParams, anchor_landmarks, apply_mouth_residual_t, apply_rigid_t, rig_to_global_t,
                  sample_bindings, select_region_triangles)
from .rotation import rodrigues

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PHASES = ("pretrain-stage1", "pretrain-stage2", "adapt")
GAUSS_FIELDS = ("mu", "quat", "log_scale", "alpha_logit", "sh")
HEAD_FIELDS = ("template", "expr_basis", "skin_weights", "jaw_pivot", "faces")


# -- data --------------------------------------------------------------------------

@dataclass
class Clip:
    """One identity's ingested files."""

    id: str
    model: HeadModelAssets
    audio: np.ndarray
    aus: np.ndarray
    identity: np.ndarray
    p_emo: np.ndarray | None     # (T, 7), rows of NaN mark missing teacher frames
    score: np.ndarray | None     # (T,)
    poses: np.ndarray            # (T, 6)
    cameras: list[Camera]
    frames: np.ndarray           # (T, H, W, 3)
    depth: np.ndarray | None
    normals: np.ndarray | None
    mouth_landmarks: np.ndarray | None
    rest_frames: list[int]
    reference: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return self.audio.shape[0]

    def teacher_mask(self) -> np.ndarray:
        if self.p_emo is None:
            return np.zeros(self.n_frames, dtype=bool)
        ok = np.all(np.isfinite(self.p_emo), axis=1)
        if self.score is not None:
            ok &= np.isfinite(self.score)
        return ok

    def teacher_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        mask = self.teacher_mask()
        p = np.where(mask[:, None], self.p_emo if self.p_emo is not None else 0.0, 1.0 / 7.0)
        e = 1.0 - p[:, NEUTRAL] if self.score is None else np.where(mask, self.score, 0.0)
        return p, e, mask


def _need(base: Path, rel, what: str) -> Path:
    if rel is None:
        raise ValidationError(f"manifest entry lacks {what}")
    path = base / rel
    if not path.is_file():
        raise ValidationError(f"{what} file not found: {path}")
    return path


def load_manifest(path, ids=None, need_geometry: bool = False) -> tuple[dict, list[Clip]]:
    """Read and validate a corpus manifest; ``ids`` limits which identities load."""
    from .head import load_head_model

    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read manifest {path}: {exc}") from exc
    base = path.parent
    entries = manifest.get("identities") or []
    if not entries:
        raise ValidationError("manifest lists no identities")
    known = [e.get("id") for e in entries]
    if len(set(known)) != len(known):
        raise ValidationError("duplicate identity ids in manifest")
    if ids is not None:
        missing = set(ids) - set(known)
        if missing:
            raise ValidationError(f"identities not in manifest: {sorted(missing)}")
        entries = [e for e in entries if e["id"] in ids]
    clips = []
    for e in entries:
        cid = e["id"]
        model = load_head_model(_need(base, e.get("head"), f"{cid} head model"))
        audio = read_tensor(_need(base, e.get("audio"), f"{cid} audio"))
        aus = read_tensor(_need(base, e.get("au"), f"{cid} AU"))
        s = read_tensor(_need(base, e.get("identity"), f"{cid} identity")).ravel()
        t = audio.shape[0]
        if aus.shape[0] != t:
            raise ValidationError(f"{cid}: audio has {t} frames but AUs have {aus.shape[0]}")
        if np.any(aus < 0):
            raise ValidationError(f"{cid}: AU intensities must be nonnegative")
        p_emo = score = None
        if e.get("teacher_p"):
            p_emo = read_tensor(_need(base, e["teacher_p"], f"{cid} teacher distribution"))
            if p_emo.shape != (t, 7):
                raise ValidationError(f"{cid}: teacher distribution must be {t} x 7, got {p_emo.shape}")
            ok = np.all(np.isfinite(p_emo), axis=1)
            if np.any(np.abs(p_emo[ok].sum(1) - 1) > 1e-5) or np.any(p_emo[ok] < 0):
                raise ValidationError(f"{cid}: teacher rows must be distributions")
        if e.get("teacher_e"):
            score = read_tensor(_need(base, e["teacher_e"], f"{cid} teacher score")).reshape(-1)
            if score.shape != (t,):
                raise ValidationError(f"{cid}: teacher score must have {t} rows")
        poses = read_tensor(_need(base, e.get("poses"), f"{cid} poses")) if e.get("poses") else np.zeros((t, 6))
        cams = read_tensor(_need(base, e.get("cameras"), f"{cid} cameras"))
        if cams.ndim == 1:
            cams = np.tile(cams, (t, 1))
        if poses.shape != (t, 6) or cams.shape != (t, 19):
            raise ValidationError(f"{cid}: pose/camera tables must have {t} rows")
        frame_paths = e.get("frames") or []
        if len(frame_paths) != t:
            raise ValidationError(f"{cid}: {len(frame_paths)} frames listed for {t} feature rows")
        frames = np.stack([read_tensor(_need(base, f, f"{cid} frame")) for f in frame_paths])
        cameras = [Camera.from_array(c) for c in cams]
        h, w = cameras[0].height, cameras[0].width
        if frames.shape[1:] != (h, w, 3):
            raise ValidationError(f"{cid}: frames are {frames.shape[1:]}, camera expects {(h, w, 3)}")
        depth = normals = None
        if e.get("depth") and e.get("normals"):
            depth = np.stack([read_tensor(_need(base, f, f"{cid} depth")) for f in e["depth"]])
            normals = np.stack([read_tensor(_need(base, f, f"{cid} normals")) for f in e["normals"]])
            if depth.shape != (t, h, w) or normals.shape != (t, h, w, 3):
                raise ValidationError(f"{cid}: pseudo ground-truth maps do not match the frames")
        elif need_geometry:
            raise ValidationError(f"{cid}: depth/normal pseudo ground truth required when their weights are > 0")
        lms = None
        if e.get("mouth_landmarks"):
            lms = read_tensor(_need(base, e["mouth_landmarks"], f"{cid} mouth landmarks")).reshape(-1, 2)
        rest = [int(r) for r in e.get("rest_frames", [0])]
        if not rest or min(rest) < 0 or max(rest) >= t:
            raise ValidationError(f"{cid}: rest frame indices out of range")
        ref = {k: str(base / v) for k, v in (e.get("reference") or {}).items()}
        clips.append(Clip(id=cid, model=model, audio=audio, aus=aus, identity=s, p_emo=p_emo, score=score,
                          poses=poses, cameras=cameras, frames=frames, depth=depth, normals=normals,
                          mouth_landmarks=lms, rest_frames=rest, reference=ref))
    return manifest, clips


# -- state -------------------------------------------------------------------------

@dataclass
class TrainState:
    cfg: RunConfig
    params: dict[str, np.ndarray]
    bindings: dict[str, tuple[np.ndarray, np.ndarray]]
    heads: dict[str, HeadModelAssets]
    identities: dict[str, np.ndarray]
    roles: dict[str, str]
    mouth_tris: np.ndarray
    rng: np.random.Generator
    opt: AdamWState | None = None
    iteration: int = 0
    phase: str = "pretrain-stage1"
    history: list[dict] = field(default_factory=list)

    def ids(self, role: str | None = None) -> list[str]:
        return sorted(i for i, r in self.roles.items() if role is None or r == role)

    def mouth_index(self, cid: str) -> np.ndarray:
        return np.flatnonzero(np.isin(self.bindings[cid][0], self.mouth_tris))

    @property
    def n_mouth(self) -> int:
        counts = {len(self.mouth_index(i)) for i in self.roles}
        if len(counts) != 1:
            raise ValidationError(f"identities disagree on the mouth Gaussian count: {sorted(counts)}")
        return counts.pop()

    def grmn_config(self) -> GRMNConfig:
        return self.cfg.grmn(self.n_mouth)

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        n = len(prefix)
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix)}


def set_trainable(state: TrainState, phase: str, target: str | None = None) -> dict[str, bool]:
    """Exhaustive parameter -> trainable map for a phase."""
    if phase not in PHASES:
        raise ValidationError(f"unknown phase {phase!r}; expected one of {PHASES}")
    mask = {}
    pre = set(state.ids("pretrain"))
    for name in state.params:
        kind, _, rest = name.partition("/")
        owner = rest.split("/", 1)[0] if kind in ("adain", "gauss") else None
        if phase == "pretrain-stage1":
            on = kind == "gauss" and owner in pre
        elif phase == "pretrain-stage2":
            on = kind == "grmn" or owner in pre
        else:
            on = owner == target and (kind == "adain" or (kind == "gauss" and state.cfg.adapt_appearance))
        mask[name] = on
    return mask


def _identity_seed(cfg: RunConfig, cid: str) -> int:
    return (cfg.seed * 1_000_003 + sum((i + 1) * ord(c) for i, c in enumerate(cid))) % (2 ** 31)


def _init_cloud_params(cfg: RunConfig, model: HeadModelAssets, cid: str):
    cloud = sample_bindings(model.template, model.faces, cfg.n_gaussians, _identity_seed(cfg, cid),
                            sh_degree=cfg.sh_degree, scale_factor=cfg.scale_factor)
    local = LocalParams.from_cloud(cloud, requires_grad=False)
    params = {f"gauss/{cid}/{k}": np.array(v.data) for k, v in local.as_dict().items()}
    return params, (cloud.parent_tri, cloud.bary)


def mouth_region(cfg: RunConfig, clip: Clip) -> np.ndarray:
    """Triangles of the intra-oral region grown from a clip's mouth landmarks."""
    if clip.mouth_landmarks is None:
        raise ValidationError(f"{clip.id}: mouth landmarks are required to build the mouth region")
    ref = clip.rest_frames[0]
    R, t = rodrigues(clip.poses[ref, :3]), clip.poses[ref, 3:]
    verts = clip.model.template @ R.T + t
    seeds = anchor_landmarks(clip.mouth_landmarks, clip.cameras[ref], verts, clip.model.faces)
    misses = sum(s is None for s in seeds)
    if misses:
        log.warning("%s: %d of %d mouth landmarks missed the mesh", clip.id, misses, len(seeds))
    hits = [s for s in seeds if s is not None]
    if not hits:
        raise ValidationError(f"{clip.id}: no mouth landmark hits the mesh")
    return select_region_triangles(verts, clip.model.faces, hits, cfg.mouth_radius)


def init_state(cfg: RunConfig, clips: list[Clip]) -> TrainState:
    if len(clips) < 2:
        raise ValidationError("pretraining needs at least two identities")
    params: dict[str, np.ndarray] = {}
    bindings, heads, idents, roles = {}, {}, {}, {}
    ref_faces = clips[0].model.faces
    for c in clips:
        if not np.array_equal(c.model.faces, ref_faces):
            raise ValidationError(f"{c.id}: mesh topology differs from {clips[0].id}")
        p, b = _init_cloud_params(cfg, c.model, c.id)
        params.update(p)
        bindings[c.id] = b
        heads[c.id] = c.model
        idents[c.id] = c.identity
        roles[c.id] = "pretrain"
    mouth_tris = mouth_region(cfg, clips[0])
    state = TrainState(cfg=cfg, params=params, bindings=bindings, heads=heads, identities=idents, roles=roles,
                       mouth_tris=mouth_tris, rng=np.random.default_rng(cfg.seed))
    gcfg = state.grmn_config()
    params.update({f"grmn/{k}": v for k, v in init_grmn(gcfg, cfg.seed).items()})
    for i, c in enumerate(clips):
        params.update({f"adain/{c.id}/{k}": v for k, v in init_adain(gcfg, cfg.seed + 1 + i).items()})
    _check_dims(cfg, clips)
    # sorted names and C layout, so a state restored from a checkpoint computes identically
    state.params = {k: np.ascontiguousarray(v) for k, v in sorted(params.items())}
    return state


def _check_dims(cfg: RunConfig, clips: list[Clip]) -> None:
    for c in clips:
        if c.audio.shape[1] != cfg.d_audio or c.aus.shape[1] != cfg.d_au or c.identity.shape[0] != cfg.d_identity:
            raise ValidationError(f"{c.id}: feature sizes ({c.audio.shape[1]}, {c.aus.shape[1]}, "
                                  f"{c.identity.shape[0]}) differ from the configuration "
                                  f"({cfg.d_audio}, {cfg.d_au}, {cfg.d_identity})")
        if c.model.n_expr != cfg.n_expr:
            raise ValidationError(f"{c.id}: head model has K={c.model.n_expr}, config expects {cfg.n_expr}")


def _make_optimizer(cfg: RunConfig, lr: float) -> AdamWState:
    return AdamWState(lr=lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, weight_decay=cfg.weight_decay)


# -- forward pieces ------------------------------------------------------------------

def _tensors(state: TrainState, mask: dict[str, bool]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=mask.get(k, False), check=False) for k, v in state.params.items()}


def _local(tensors: dict[str, Tensor], cid: str) -> LocalParams:
    return LocalParams(**{f: tensors[f"gauss/{cid}/{f}"] for f in GAUSS_FIELDS})


def _sub(tensors: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    n = len(prefix)
    return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix)}


def render_frame_t(state: TrainState, tensors, cid: str, face, mouth, pose, cam: Camera):
    """Deform -> rig -> mouth residual -> head pose -> render, all differentiable."""
    model = state.heads[cid]
    k = model.n_expr
    face = ad.as_tensor(face)
    verts = deform_mesh_t(model, face[0:k], face[k:k + 3])
    parent, bary = state.bindings[cid]
    glob = rig_to_global_t(_local(tensors, cid), verts, model.faces, parent, bary)
    if mouth is not None:
        glob, _ = apply_mouth_residual_t(glob, state.mouth_index(cid), mouth)
    pose = np.asarray(pose, dtype=np.float64)
    glob = apply_rigid_t(glob, rodrigues(pose[:3]), pose[3:])
    return render(glob, cam)


def motion(state: TrainState, tensors, cid: str, audio, aus, mouth_frames=None) -> MotionOutput:
    out = grmn_forward(audio, aus, state.identities[cid], _sub(tensors, "grmn/"),
                       _sub(tensors, f"adain/{cid}/"), state.grmn_config(), mouth_frames=mouth_frames)
    out.check(tol=1e-9)
    return out


def motion_windows(state: TrainState, tensors, cid: str, audio, aus) -> SimpleNamespace:
    """Inference-time motion over any length.

    With window context the network only ever saw ``cfg.window`` frames at a time,
    so long sequences are tiled into windows of that length (the last one aligned
    to the end) to keep positions and normalization statistics in range.
    """
    cfg = state.cfg
    n = len(audio)
    if cfg.context == "clip" or n <= cfg.window:
        o = motion(state, tensors, cid, audio, aus)
        return SimpleNamespace(face=o.face.data, mouth=o.mouth.data, z_e=o.z_e.data, g=o.g.data)
    w = cfg.window
    starts = list(range(0, n - w + 1, w))
    if starts[-1] + w < n:
        starts.append(n - w)
    parts = {}
    for s0 in starts:
        o = motion(state, tensors, cid, audio[s0:s0 + w], aus[s0:s0 + w])
        for k in ("face", "mouth", "z_e", "g"):
            arr = parts.setdefault(k, np.zeros((n,) + getattr(o, k).shape[1:]))
            arr[s0:s0 + w] = getattr(o, k).data
    return SimpleNamespace(**parts)


def _geo_term(cfg: RunConfig, clip: Clip, r: int, ro) -> Tensor:
    cam = clip.cameras[r]
    normals = depth_to_normals(ro.depth, cam, alpha=ro.alpha)
    n_gt = clip.normals[r]
    mask = (np.linalg.norm(n_gt, axis=-1) > 0.5) & (np.linalg.norm(normals.data, axis=-1) > 0.5)
    if not mask.any():
        return Tensor(0.0)
    return loss_geo(ro.depth, normals, clip.depth[r], n_gt, mask, cfg.depth_weight, cfg.normal_weight)


# -- training ------------------------------------------------------------------------

@dataclass
class StepResult:
    total: float
    parts: dict[str, float]
    sample: str


def _step(state: TrainState, clip: Clip, mask: dict[str, bool], *, appearance: bool, adapting: bool,
          holdout: int) -> StepResult:
    """One optimizer step.  ``appearance`` steps fit rest frames with a neutral mesh."""
    cfg, rng = state.cfg, state.rng
    tensors = _tensors(state, mask)
    weights = cfg.loss_weights()
    parts: dict[str, Tensor] = {}
    if appearance:
        r = int(clip.rest_frames[int(rng.integers(len(clip.rest_frames)))])
        zero = np.zeros(clip.model.n_expr + 3)
        ro = render_frame_t(state, tensors, clip.id, zero, None, clip.poses[r], clip.cameras[r])
        parts["render"] = loss_render(ro.color, clip.frames[r], cfg.dssim_weight)
        sample = f"{clip.id}:{r}"
    else:
        t_sup = clip.n_frames - holdout
        if t_sup < 1:
            raise ValidationError(f"{clip.id}: hold-out leaves no supervised frames")
        win_len = min(cfg.window, t_sup)
        start = int(rng.integers(0, t_sup - win_len + 1))
        window = np.arange(start, start + win_len)
        n_r = min(cfg.frames_per_iter, win_len)
        chosen = np.sort(rng.choice(window, size=n_r, replace=False))
        ctx = window if cfg.context == "window" else np.arange(t_sup)
        off = int(ctx[0])
        out = motion(state, tensors, clip.id, clip.audio[ctx], clip.aus[ctx], mouth_frames=chosen - off)
        p, e, tmask = clip.teacher_arrays()
        w_rows = window - off
        parts["kl"] = loss_kl(ad.take_rows(out.z_e, w_rows), p[window], tmask[window])
        parts["score"] = loss_score(ad.take_rows(out.g, w_rows), e[window], tmask[window])
        render_loss = Tensor(0.0)
        geo = Tensor(0.0)
        use_geo = adapting and (cfg.depth_weight > 0 or cfg.normal_weight > 0)
        for j, r in enumerate(chosen):
            ro = render_frame_t(state, tensors, clip.id, out.face[int(r) - off], out.mouth[j],
                                clip.poses[r], clip.cameras[r])
            render_loss = render_loss + loss_render(ro.color, clip.frames[r], cfg.dssim_weight)
            if use_geo:
                geo = geo + _geo_term(cfg, clip, int(r), ro)
        render_loss = render_loss * (1.0 / n_r)
        if cfg.rest_anchor_weight > 0 and any(mask.get(k) for k in tensors if k.startswith(f"gauss/{clip.id}/")):
            # while Gaussians and motion train together, a constant offset in the
            # predicted face parameters can be absorbed by the Gaussians' local
            # attributes; a rest frame rendered at the neutral mesh pins that gauge
            r = int(clip.rest_frames[int(rng.integers(len(clip.rest_frames)))])
            zero = np.zeros(clip.model.n_expr + 3)
            ro = render_frame_t(state, tensors, clip.id, zero, None, clip.poses[r], clip.cameras[r])
            render_loss = render_loss + loss_render(ro.color, clip.frames[r], cfg.dssim_weight) * cfg.rest_anchor_weight
        parts["render"] = render_loss
        if use_geo:
            parts["geo"] = geo * (1.0 / n_r)
        sample = f"{clip.id}:{','.join(str(int(r)) for r in chosen)}"
    total = total_loss(parts, "adapt" if adapting else "pretrain", weights)
    trainable = {k: t for k, t in tensors.items() if mask.get(k)}
    grads = ad.backward(total, trainable)
    adamw_step(state.opt, state.params, grads, frame_id=sample)
    return StepResult(total=total.item(), parts={k: v.item() for k, v in parts.items()}, sample=sample)


def _log_row(state: TrainState, res: StepResult, t0: float) -> None:
    row = {"iteration": state.iteration, "phase": state.phase, "sample": res.sample, "total": res.total,
           **res.parts, "wall": time.perf_counter() - t0}
    state.history.append(row)
    if state.cfg.log_every and state.iteration % state.cfg.log_every == 0:
        log.info("it %d %s total %.5f %s", state.iteration, state.phase, res.total,
                 " ".join(f"{k} {v:.5f}" for k, v in res.parts.items()))


def pretrain(clips: list[Clip], cfg: RunConfig, resume: TrainState | None = None,
             stop_at: int | None = None, checkpoint_every: int = 0, checkpoint_path=None) -> TrainState:
    """Two-stage pretraining over several identities.

    ``stop_at`` ends the run early at that iteration (used for resumable runs).
    """
    if resume is not None:
        if resume.cfg.hash() != cfg.hash():
            raise ValidationError("configuration hash differs from the checkpoint; refusing to resume")
        state = resume
        missing = set(state.ids("pretrain")) - {c.id for c in clips}
        if missing:
            raise ValidationError(f"manifest lacks pretrain identities {sorted(missing)}")
        clips = [c for c in clips if c.id in state.roles]
    else:
        state = init_state(cfg, clips)
        state.opt = _make_optimizer(cfg, cfg.lr_pretrain)
        state.opt.no_decay = {k for k in state.params if k.startswith("gauss/")}
    by_id = {c.id: c for c in clips}
    order = state.ids("pretrain")
    end = cfg.pretrain_iters if stop_at is None else min(stop_at, cfg.pretrain_iters)
    t0 = time.perf_counter()
    masks = {ph: set_trainable(state, ph) for ph in ("pretrain-stage1", "pretrain-stage2")}
    while state.iteration < end:
        phase = "pretrain-stage1" if state.iteration < cfg.stage1_iters else "pretrain-stage2"
        state.phase = phase
        cid = order[int(state.rng.integers(len(order)))]
        res = _step(state, by_id[cid], masks[phase], appearance=phase == "pretrain-stage1", adapting=False,
                    holdout=cfg.holdout_frames)
        state.iteration += 1
        _log_row(state, res, t0)
        if checkpoint_every and checkpoint_path and state.iteration % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, state)
    return state


def adapt(pretrained: TrainState, clip: Clip, cfg: RunConfig | None = None) -> TrainState:
    """Fit a new identity: AdaIN parameters only, optionally its Gaussian appearance."""
    cfg = cfg or pretrained.cfg
    if cfg.arch_hash() != pretrained.cfg.arch_hash():
        raise ValidationError("configuration changes the architecture of the pretrained checkpoint")
    if clip.id in pretrained.roles:
        raise ValidationError(f"identity {clip.id} is already present in the checkpoint")
    if (cfg.depth_weight > 0 or cfg.normal_weight > 0) and (clip.depth is None or clip.normals is None):
        raise ValidationError(f"{clip.id}: pseudo ground-truth depth/normals missing but their weights are > 0")
    ref_id = pretrained.ids("pretrain")[0]
    if not np.array_equal(clip.model.faces, pretrained.heads[ref_id].faces):
        raise ValidationError(f"{clip.id}: mesh topology differs from the pretrained identities")
    _check_dims(cfg, [clip])

    params = {k: v.copy() for k, v in pretrained.params.items()}
    state = TrainState(cfg=cfg, params=params, bindings=dict(pretrained.bindings), heads=dict(pretrained.heads),
                       identities=dict(pretrained.identities), roles=dict(pretrained.roles),
                       mouth_tris=pretrained.mouth_tris.copy(), rng=np.random.default_rng(cfg.seed + 7),
                       iteration=0, phase="adapt")
    p, b = _init_cloud_params(cfg, clip.model, clip.id)
    state.params.update(p)
    state.bindings[clip.id] = b
    state.heads[clip.id] = clip.model
    state.identities[clip.id] = clip.identity
    state.roles[clip.id] = "adapt"
    if len(state.mouth_index(clip.id)) != pretrained.n_mouth:
        raise ValidationError(f"{clip.id}: mouth Gaussian count differs from the pretrained network")
    # start from the average modulation of the pretrained identities
    pre = pretrained.ids("pretrain")
    for k in pretrained.subset(f"adain/{pre[0]}/"):
        state.params[f"adain/{clip.id}/{k}"] = np.mean([pretrained.params[f"adain/{i}/{k}"] for i in pre], axis=0)
    state.params = {k: np.ascontiguousarray(v) for k, v in sorted(state.params.items())}

    mask = set_trainable(state, "adapt", clip.id)
    state.opt = _make_optimizer(cfg, cfg.lr_adapt)
    gauss_names = {k for k in state.params if k.startswith(f"gauss/{clip.id}/")}
    state.opt.no_decay = gauss_names
    if cfg.lr_adapt > 0:
        state.opt.lr_scale = {k: cfg.lr_appearance / cfg.lr_adapt for k in gauss_names}
    frozen = {k: v.copy() for k, v in state.params.items() if not mask[k]}
    stage1 = cfg.adapt_stage1_iters if cfg.adapt_appearance else 0
    appearance_mask = {k: (k in gauss_names) for k in state.params}
    t0 = time.perf_counter()
    while state.iteration < cfg.adapt_iters:
        first = state.iteration < stage1
        state.phase = "adapt-stage1" if first else "adapt"
        res = _step(state, clip, appearance_mask if first else mask, appearance=first, adapting=True, holdout=0)
        state.iteration += 1
        _log_row(state, res, t0)
    state.phase = "adapt"
    changed = [k for k, v in frozen.items() if not np.array_equal(v, state.params[k])]
    if changed:
        raise RuntimeError(f"frozen parameters changed during adaptation: {changed[:3]}")
    return state


# -- inference and evaluation --------------------------------------------------------------

@dataclass
class InferenceResult:
    frames: np.ndarray       # (T, H, W, 3)
    alpha: np.ndarray        # (T, H, W)
    depth: np.ndarray        # (T, H, W)
    g: np.ndarray            # (T,)
    emotion: np.ndarray      # (T,) argmax of softmax(z_e)
    z_e: np.ndarray          # (T, 7)
    face: np.ndarray         # (T, K + 3)
    vertices: np.ndarray     # (T, N, 3) before head pose
    notes: list[str]


def _loop_to(arr: np.ndarray, n: int, what: str, notes: list[str]) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape[0] == n:
        return arr
    if arr.shape[0] == 0:
        raise ValidationError(f"{what} sequence is empty")
    notes.append(f"{what} sequence of {arr.shape[0]} frames looped to {n}")
    log.info(notes[-1])
    return arr[np.arange(n) % arr.shape[0]]


def infer(state: TrainState, cid: str, audio, aus, poses, camera) -> InferenceResult:
    """Drive identity ``cid`` with new audio plus auxiliary AU and head-pose tracks."""
    if cid not in state.roles:
        raise ValidationError(f"identity {cid!r} is not in the checkpoint")
    audio = np.asarray(audio, dtype=np.float64)
    cfg = state.cfg
    if audio.ndim != 2 or audio.shape[1] != cfg.d_audio:
        raise ValidationError(f"audio features must be T x {cfg.d_audio}, got {audio.shape}")
    aus = np.asarray(aus, dtype=np.float64)
    if aus.ndim != 2 or aus.shape[1] != cfg.d_au:
        raise ValidationError(f"AU features must be T x {cfg.d_au}, got {aus.shape}")
    n = audio.shape[0]
    notes: list[str] = []
    aus = _loop_to(aus, n, "AU", notes)
    poses = _loop_to(np.asarray(poses, dtype=np.float64).reshape(-1, 6), n, "pose", notes)
    cams = camera if isinstance(camera, (list, tuple)) else [camera] * n
    if len(cams) != n:
        cams = [cams[i % len(cams)] for i in range(n)]
    tensors = _tensors(state, {})
    out = motion_windows(state, tensors, cid, audio, aus)
    model = state.heads[cid]
    frames, alphas, depths, verts = [], [], [], []
    for t in range(n):
        face = out.face[t]
        ro = render_frame_t(state, tensors, cid, face, out.mouth[t], poses[t], cams[t])
        frames.append(ro.color.data)
        alphas.append(ro.alpha.data)
        depths.append(ro.depth.data)
        verts.append(deform_mesh(model, face[:model.n_expr], face[model.n_expr:]))
    z = out.z_e
    return InferenceResult(frames=np.stack(frames), alpha=np.stack(alphas), depth=np.stack(depths),
                           g=out.g[:, 0].copy(), emotion=np.argmax(z, axis=1), z_e=z.copy(),
                           face=out.face.copy(), vertices=np.stack(verts), notes=notes)


def landmarks_2d(vertices: np.ndarray, poses: np.ndarray, cams: list[Camera], ids) -> np.ndarray:
    ids = np.asarray(ids)
    out = []
    for v, p, c in zip(vertices, poses, cams):
        R = rodrigues(p[:3])
        out.append(c.project(v[ids] @ R.T + p[3:]))
    return np.stack(out)


def evaluate_clip(state: TrainState, clip: Clip, landmark_ids=None, frames=None) -> dict:
    """Reconstruction and gate metrics for one identity's clip under predicted motion."""
    res = infer(state, clip.id, clip.audio, clip.aus, clip.poses, clip.cameras)
    sel = np.arange(clip.n_frames) if frames is None else np.asarray(frames)
    report = {
        "psnr": [psnr(res.frames[t], clip.frames[t]) for t in sel],
        "ssim": [ssim(res.frames[t], clip.frames[t]) for t in sel],
    }
    ref_lm = clip.reference.get("landmarks")
    if landmark_ids is not None and ref_lm and Path(ref_lm).is_file():
        gt = read_tensor(ref_lm)
        pred = landmarks_2d(res.vertices, clip.poses, clip.cameras, landmark_ids)
        report["lmd"] = [lmd(pred[t], gt[t]) for t in sel]
    p, e, mask = clip.teacher_arrays()
    m = mask[sel]
    report["gate_mae"] = float(np.mean(np.abs(res.g[sel][m] - e[sel][m]))) if m.any() else float("nan")
    strong = m & (e[sel] > 0.5)
    if strong.any():
        report["argmax_acc"] = float(np.mean(res.emotion[sel][strong] == np.argmax(p[sel][strong], axis=1)))
        report["n_strong"] = int(strong.sum())
    report["g"] = res.g[sel]
    report["e"] = e[sel]
    return report


# -- checkpoints ----------------------------------------------------------------------------

def _opt_meta(opt: AdamWState | None):
    if opt is None:
        return None
    return {"lr": opt.lr, "betas": list(opt.betas), "eps": opt.eps, "weight_decay": opt.weight_decay,
            "step": opt.step, "param_steps": dict(sorted(opt.param_steps.items())),
            "lr_scale": dict(sorted(opt.lr_scale.items())), "no_decay": sorted(opt.no_decay)}


def checkpoint_bytes(state: TrainState) -> bytes:
    cfg = state.cfg
    tensors = {f"param/{k}": (v, "f64") for k, v in state.params.items()}
    for cid, (parent, bary) in state.bindings.items():
        tensors[f"bind/{cid}/parent_tri"] = (parent.astype(np.float64), "f64")
        tensors[f"bind/{cid}/bary"] = (bary, "f64")
    for cid, head in state.heads.items():
        for f in HEAD_FIELDS:
            tensors[f"head/{cid}/{f}"] = (np.asarray(getattr(head, f), dtype=np.float64), "f64")
    for cid, s in state.identities.items():
        tensors[f"ident/{cid}"] = (s, "f64")
    tensors["mouth_tris"] = (state.mouth_tris.astype(np.float64), "f64")
    if state.opt is not None:
        for k, v in state.opt.exp_avg.items():
            tensors[f"opt_m/{k}"] = (v, "f64")
        for k, v in state.opt.exp_avg_sq.items():
            tensors[f"opt_v/{k}"] = (v, "f64")
    meta = {
        "kind": "checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": cfg.dumps(),
        "config_hash": cfg.hash(),
        "arch_hash": cfg.arch_hash(),
        "seed": cfg.seed,
        "iteration": state.iteration,
        "phase": state.phase,
        "roles": dict(sorted(state.roles.items())),
        "rng": state.rng.bit_generator.state,
        "optimizer": _opt_meta(state.opt),
        "n_mouth": state.n_mouth,
    }
    return encode_bundle(CHECKPOINT_MAGIC, meta, tensors)


def save_checkpoint(path, state: TrainState) -> None:
    atomic_write(path, checkpoint_bytes(state))


def state_from_bytes(buf: bytes) -> TrainState:
    meta, tensors = decode_bundle(buf, CHECKPOINT_MAGIC)
    if meta.get("kind") != "checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
        raise ValidationError("not a supported checkpoint")
    cfg = parse_config(meta["config"])
    if cfg.hash() != meta["config_hash"]:
        raise ValidationError("checkpoint configuration text does not match its hash")
    t = {k: v[0] for k, v in tensors.items()}
    params = {k[6:]: v for k, v in t.items() if k.startswith("param/")}
    roles = dict(meta["roles"])
    bindings, heads, idents = {}, {}, {}
    for cid in roles:
        try:
            bindings[cid] = (t[f"bind/{cid}/parent_tri"].astype(np.int64), t[f"bind/{cid}/bary"])
            h = {f: t[f"head/{cid}/{f}"] for f in HEAD_FIELDS}
            idents[cid] = t[f"ident/{cid}"]
        except KeyError as exc:
            raise ValidationError(f"checkpoint lacks section {exc.args[0]}") from exc
        h["faces"] = h["faces"].astype(np.int64)
        heads[cid] = HeadModelAssets(**h).validate()
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    opt = None
    om = meta.get("optimizer")
    if om is not None:
        opt = AdamWState(lr=om["lr"], betas=tuple(om["betas"]), eps=om["eps"], weight_decay=om["weight_decay"],
                         step=om["step"], param_steps=dict(om["param_steps"]), lr_scale=dict(om["lr_scale"]),
                         no_decay=set(om["no_decay"]))
        opt.exp_avg = {k[6:]: v for k, v in t.items() if k.startswith("opt_m/")}
        opt.exp_avg_sq = {k[6:]: v for k, v in t.items() if k.startswith("opt_v/")}
    state = TrainState(cfg=cfg, params=params, bindings=bindings, heads=heads, identities=idents, roles=roles,
                       mouth_tris=t["mouth_tris"].astype(np.int64), rng=rng, opt=opt,
                       iteration=int(meta["iteration"]), phase=meta["phase"])
    if state.n_mouth != meta["n_mouth"]:
        raise ValidationError("checkpoint mouth region disagrees with its metadata")
    return state


def load_checkpoint(path) -> TrainState:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ValidationError(f"cannot read checkpoint {path}: {exc}") from exc
    return state_from_bytes(buf)


def checkpoint_meta(path) -> dict:
    meta, tensors = decode_bundle(Path(path).read_bytes(), CHECKPOINT_MAGIC)
    meta = dict(meta)
    meta["n_tensors"] = len(tensors)
    meta["n_parameters"] = int(sum(v[0].size for k, v in tensors.items() if k.startswith("param/")))
    return meta


# -- run report ------------------------------------------------------------------------------

def write_report(path, state: TrainState, extra: dict | None = None, window: int = 100) -> None:
    """Structured text: configuration, full-scale defaults vs configured values, loss log."""
    cfg = state.cfg
    lines = ["# run report", f"config_hash = {cfg.hash()}", f"iterations = {state.iteration}", "", "[config]"]
    lines += cfg.dumps().splitlines()
    lines += ["", "[full_scale_defaults]"]
    for k, v in FULL_SCALE_DEFAULTS.items():
        lines.append(f"{k} = {v} ; configured = {getattr(cfg, k)}")
    if extra:
        lines += ["", "[results]"]
        lines += [f"{k} = {v}" for k, v in extra.items()]
    lines += ["", "[log]", "iteration\tphase\ttotal\trender\tkl\tscore\tgeo\twall_s"]
    for row in state.history:
        if row["iteration"] % max(1, cfg.log_every) and row is not state.history[-1]:
            continue
        lines.append("\t".join([str(row["iteration"]), row["phase"], f"{row['total']:.6g}"]
                               + [f"{row[k]:.6g}" if k in row else "-" for k in ("render", "kl", "score", "geo")]
                               + [f"{row['wall']:.2f}"]))
    atomic_write(path, ("\n".join(lines) + "\n").encode())


def parse_report(path) -> dict:
    """Read back the ``[full_scale_defaults]`` section of a run report."""
    section = None
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.startswith("["):
            section = line.strip("[]")
            continue
        if section == "full_scale_defaults" and "=" in line:
            key, rest = line.split("=", 1)
            full, _, configured = rest.partition("; configured =")
            out[key.strip()] = (float(full), float(configured))
    return out
