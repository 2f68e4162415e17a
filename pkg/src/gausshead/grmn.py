"""Gated residual motion network.

Audio and action-unit streams are encoded, modulated per identity with
adaptive instance normalization, then decoded by three branches: a base
branch (audio only), a residual branch built around a 7-way emotion latent,
and a scalar gate that blends them as ``base + g * residual``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ValidationError

N_EMOTIONS = 7
ADAIN_EPS = 1e-5
OUTPUT_HEAD_SCALE = 1e-2
# mouth residuals are world-space offsets of small Gaussians; a fixed output
# multiplier keeps one optimizer step from moving them by a whole splat
MOUTH_OUTPUT_SCALE = 1e-2


@dataclass(frozen=True)
class GRMNConfig:
    d_audio: int = 64
    d_au: int = 17
    d_identity: int = 512
    d_hidden: int = 64
    n_layers: int = 2
    n_heads: int = 4
    n_expr: int = 10
    n_mouth: int = 0
    adain_hidden: int = 64

    @property
    def face_dim(self) -> int:
        return self.n_expr + 3

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MotionOutput:
    face_base: Tensor      # (T, K+3)
    face_residual: Tensor  # (T, K+3)
    mouth_base: Tensor     # (T', M, 9)
    mouth_residual: Tensor
    z_e: Tensor            # (T, 7)
    g: Tensor              # (T, 1)
    face: Tensor           # fused
    mouth: Tensor          # fused
    mouth_frames: np.ndarray  # frames the mouth blocks were evaluated for

    def check(self, tol: float = 1e-12) -> None:
        g = self.g.data
        if np.any((g < 0) | (g > 1)):
            raise ValidationError("gate left [0, 1]")
        if np.max(np.abs(self.face.data - (self.face_base.data + g * self.face_residual.data)), initial=0) > tol:
            raise ValidationError("fused face motion differs from base + g * residual")
        gm = g[self.mouth_frames][:, :, None]
        if np.max(np.abs(self.mouth.data - (self.mouth_base.data + gm * self.mouth_residual.data)),
                  initial=0) > tol:
            raise ValidationError("fused mouth motion differs from base + g * residual")


# -- initialization -------------------------------------------------------------

def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float = 1.0) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    w = q if n_in >= n_out else q.T
    return np.ascontiguousarray(gain * w.reshape(n_in, n_out))


def init_grmn(cfg: GRMNConfig, seed: int) -> dict[str, np.ndarray]:
    """Shared GRMN weights (everything except the per-identity modulation MLPs)."""
    rng = np.random.default_rng(seed)
    d, h = cfg.d_hidden, cfg.d_hidden
    p: dict[str, np.ndarray] = {}

    def linear(name, n_in, n_out, gain=1.0, bias=True):
        p[f"{name}.w"] = _orthogonal(rng, n_in, n_out, gain)
        if bias:
            p[f"{name}.b"] = np.zeros(n_out)

    linear("audio.conv", 3 * cfg.d_audio, d)
    linear("audio.proj1", d, d)
    linear("audio.proj2", d, d)
    for i in range(cfg.n_layers):
        pre = f"audio.layer{i}"
        for nm in ("q", "k", "v", "o"):
            # a key bias cannot change the attention weights
            linear(f"{pre}.{nm}", d, d, bias=nm != "k")
        linear(f"{pre}.ff1", d, 2 * d)
        # the last layer's output bias is a per-channel constant that the
        # instance norm removes, so it is left out
        linear(f"{pre}.ff2", 2 * d, d, bias=i < cfg.n_layers - 1)
        for ln in ("ln1", "ln2"):
            p[f"{pre}.{ln}.g"] = np.ones(d)
            p[f"{pre}.{ln}.b"] = np.zeros(d)

    linear("au.fc1", cfg.d_au, h)
    # the instance norm that follows removes any constant offset
    linear("au.fc2", h, d, bias=False)

    linear("base.fc1", d, h)
    linear("base.face", h, cfg.face_dim, OUTPUT_HEAD_SCALE)
    if cfg.n_mouth:
        linear("base.mouth", h, cfg.n_mouth * 9)

    linear("emo_enc.fc1", 2 * d, h)
    linear("emo_enc.fc2", h, N_EMOTIONS)
    linear("emo_dec.fc1", N_EMOTIONS, h)
    linear("emo_dec.face", h, cfg.face_dim, OUTPUT_HEAD_SCALE)
    if cfg.n_mouth:
        linear("emo_dec.mouth", h, cfg.n_mouth * 9)

    linear("gate.fc1", N_EMOTIONS + d, h)
    linear("gate.fc2", h, 1)
    return p


def init_adain(cfg: GRMNConfig, seed: int) -> dict[str, np.ndarray]:
    """Per-identity MLP mapping the identity vector to (gain, shift) for both streams."""
    rng = np.random.default_rng(seed)
    d = cfg.d_hidden
    out = np.zeros(4 * d)
    out[0:d] = 1.0          # audio gain
    out[2 * d:3 * d] = 1.0  # AU gain
    return {
        "adain.fc1.w": _orthogonal(rng, cfg.d_identity, cfg.adain_hidden),
        "adain.fc1.b": np.zeros(cfg.adain_hidden),
        "adain.fc2.w": _orthogonal(rng, cfg.adain_hidden, 4 * d, OUTPUT_HEAD_SCALE),
        "adain.fc2.b": out,
    }


def to_tensors(params: dict[str, np.ndarray], requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(np.array(v, dtype=np.float64), requires_grad=requires_grad) for k, v in params.items()}


# -- building blocks ------------------------------------------------------------

def linear(x: Tensor, p: dict[str, Tensor], name: str) -> Tensor:
    y = ad.matmul(x, p[f"{name}.w"])
    b = p.get(f"{name}.b")
    return y if b is None else y + b


def layer_norm(x: Tensor, g: Tensor, b: Tensor, eps: float = 1e-5) -> Tensor:
    mu = ad.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = ad.mean(xc * xc, axis=-1, keepdims=True)
    return xc / ad.sqrt(var + eps) * g + b


def positional_encoding(t: int, d: int) -> np.ndarray:
    pos = np.arange(t)[:, None]
    i = np.arange(d // 2)[None, :]
    ang = pos / np.power(10000.0, 2 * i / d)
    pe = np.zeros((t, d))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang)
    return pe


def attention(x: Tensor, p: dict[str, Tensor], pre: str, n_heads: int) -> Tensor:
    t, d = x.shape
    dh = d // n_heads

    def heads(z: Tensor) -> Tensor:
        return ad.transpose(z.reshape(t, n_heads, dh), (1, 0, 2))

    q = heads(linear(x, p, f"{pre}.q"))
    k = heads(linear(x, p, f"{pre}.k"))
    v = heads(linear(x, p, f"{pre}.v"))
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    att = ad.softmax(scores, axis=-1)
    out = ad.transpose(ad.matmul(att, v), (1, 0, 2)).reshape(t, d)
    return linear(out, p, f"{pre}.o")


def transformer_layer(x: Tensor, p: dict[str, Tensor], pre: str, n_heads: int) -> Tensor:
    x = x + attention(layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"]), p, pre, n_heads)
    hdn = ad.gelu(linear(layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"]), p, f"{pre}.ff1"))
    return x + linear(hdn, p, f"{pre}.ff2")


# -- encoder --------------------------------------------------------------------

def encode_audio(audio, p: dict[str, Tensor], cfg: GRMNConfig) -> Tensor:
    """Temporal conv (k=3, same padding) -> MLP -> transformer encoder; (T, D_a) -> (T, D_h)."""
    a = ad.as_tensor(audio)
    if a.ndim != 2 or a.shape[1] != cfg.d_audio or a.shape[0] < 1:
        raise ValidationError(f"audio features must be T x {cfg.d_audio}, got {a.shape}")
    t = a.shape[0]
    padded = ad.pad_axis(a, 0, 1, 1)
    window = ad.concat([padded[0:t], padded[1:t + 1], padded[2:t + 2]], axis=1)
    x = ad.gelu(linear(window, p, "audio.conv"))
    x = linear(ad.gelu(linear(x, p, "audio.proj1")), p, "audio.proj2")
    x = x + Tensor(positional_encoding(t, cfg.d_hidden), check=False)
    for i in range(cfg.n_layers):
        x = transformer_layer(x, p, f"audio.layer{i}", cfg.n_heads)
    return x


def encode_au(aus, p: dict[str, Tensor], cfg: GRMNConfig) -> Tensor:
    """Per-frame MLP over action-unit intensities; (T, D_e) -> (T, D_h)."""
    e = ad.as_tensor(aus)
    if e.ndim != 2 or e.shape[1] != cfg.d_au:
        raise ValidationError(f"AU features must be T x {cfg.d_au}, got {e.shape}")
    return linear(ad.gelu(linear(e, p, "au.fc1")), p, "au.fc2")


def adain_modulation(identity, ap: dict[str, Tensor], cfg: GRMNConfig) -> Tensor:
    """(gain_audio, shift_audio, gain_au, shift_au) stacked as a (4 * D_h,) vector."""
    s = ad.as_tensor(identity)
    if s.shape != (cfg.d_identity,):
        raise ValidationError(f"identity embedding must have {cfg.d_identity} entries, got {s.shape}")
    hdn = ad.gelu(linear(s.reshape(1, -1), ap, "adain.fc1"))
    return linear(hdn, ap, "adain.fc2").reshape(4 * cfg.d_hidden)


def instance_norm(stream: Tensor, eps: float = ADAIN_EPS) -> Tensor:
    mu = ad.mean(stream, axis=0, keepdims=True)
    xc = stream - mu
    var = ad.mean(xc * xc, axis=0, keepdims=True)
    return xc / ad.sqrt(var + eps)


def adain(stream, identity, ap: dict[str, Tensor], cfg: GRMNConfig, which: str = "audio") -> Tensor:
    """Normalize each channel over time, then apply the identity's gain and shift."""
    stream = ad.as_tensor(stream)
    d = cfg.d_hidden
    if stream.ndim != 2 or stream.shape[1] != d:
        raise ValidationError(f"stream must be T x {d}, got {stream.shape}")
    mod = adain_modulation(identity, ap, cfg)
    off = 0 if which == "audio" else 2 * d
    gain = mod[off:off + d]
    shift = mod[off + d:off + 2 * d]
    return instance_norm(stream) * gain + shift


# -- decoder --------------------------------------------------------------------

def decode_base(mod_audio: Tensor, p: dict[str, Tensor], cfg: GRMNConfig, mouth_frames=None):
    hdn = ad.gelu(linear(mod_audio, p, "base.fc1"))
    face = linear(hdn, p, "base.face")
    return face, _mouth_head(hdn, p, "base.mouth", cfg, mouth_frames)


def _mouth_head(hdn: Tensor, p, name: str, cfg: GRMNConfig, mouth_frames) -> Tensor:
    if mouth_frames is not None:
        hdn = ad.take_rows(hdn, mouth_frames)
    if cfg.n_mouth == 0:
        return Tensor(np.zeros((hdn.shape[0], 0, 9)))
    out = linear(hdn, p, name) * MOUTH_OUTPUT_SCALE
    return out.reshape(hdn.shape[0], cfg.n_mouth, 9)


def decode_residual(mod_audio: Tensor, mod_au: Tensor, p: dict[str, Tensor], cfg: GRMNConfig,
                    mouth_frames=None):
    if mod_audio.shape[0] != mod_au.shape[0]:
        raise ValidationError(f"stream lengths differ: {mod_audio.shape[0]} vs {mod_au.shape[0]}")
    joint = ad.concat([mod_audio, mod_au], axis=1)
    z_e = linear(ad.gelu(linear(joint, p, "emo_enc.fc1")), p, "emo_enc.fc2")
    hdn = ad.gelu(linear(z_e, p, "emo_dec.fc1"))
    face = linear(hdn, p, "emo_dec.face")
    return z_e, face, _mouth_head(hdn, p, "emo_dec.mouth", cfg, mouth_frames)


def decode_gate(z_e: Tensor, mod_audio: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Per-frame gate in (0, 1), shape (T, 1)."""
    if z_e.shape[0] != mod_audio.shape[0]:
        raise ValidationError("gate inputs differ in length")
    x = ad.concat([z_e, mod_audio], axis=1)
    return ad.sigmoid(linear(ad.gelu(linear(x, p, "gate.fc1")), p, "gate.fc2"))


def fuse(base, residual, g):
    """base + g * residual; ``g`` broadcasts over trailing axes."""
    base, residual, g = ad.as_tensor(base), ad.as_tensor(residual), ad.as_tensor(g)
    if base.shape != residual.shape:
        raise ValidationError(f"base {base.shape} and residual {residual.shape} differ")
    while g.ndim < base.ndim:
        g = g.reshape(g.shape + (1,))
    return base + g * residual


def grmn_forward(audio, aus, identity, weights: dict[str, Tensor], adain_params: dict[str, Tensor],
                 cfg: GRMNConfig, mouth_frames=None) -> MotionOutput:
    """Full motion prediction for one clip.

    ``mouth_frames`` limits the (large) mouth heads to a subset of frames.
    """
    a = ad.as_tensor(audio)
    e = ad.as_tensor(aus)
    if a.shape[0] != e.shape[0]:
        raise ValidationError(f"audio has {a.shape[0]} frames but AUs have {e.shape[0]}")
    hid_a = encode_audio(a, weights, cfg)
    hid_e = encode_au(e, weights, cfg)
    mod = adain_modulation(identity, adain_params, cfg)
    d = cfg.d_hidden
    norm_a = instance_norm(hid_a)
    norm_e = instance_norm(hid_e)
    mod_a = norm_a * mod[0:d] + mod[d:2 * d]
    mod_e = norm_e * mod[2 * d:3 * d] + mod[3 * d:4 * d]

    frames = np.arange(a.shape[0]) if mouth_frames is None else np.asarray(mouth_frames, dtype=np.int64)
    face_b, mouth_b = decode_base(mod_a, weights, cfg, frames)
    z_e, face_r, mouth_r = decode_residual(mod_a, mod_e, weights, cfg, frames)
    g = decode_gate(z_e, mod_a, weights)
    face = fuse(face_b, face_r, g)
    mouth = fuse(mouth_b, mouth_r, ad.take_rows(g, frames))
    return MotionOutput(face_base=face_b, face_residual=face_r, mouth_base=mouth_b, mouth_residual=mouth_r,
                        z_e=z_e, g=g, face=face, mouth=mouth, mouth_frames=frames)
