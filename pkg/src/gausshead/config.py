"""Run configuration: a flat ``key = value`` text file.

Unknown keys are rejected.  Values are parsed by the type of the field's
default.  Lines starting with ``#`` are comments.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ValidationError
from .grmn import GRMNConfig
from .losses import LossWeights

# full-scale defaults recorded in run reports
FULL_SCALE_DEFAULTS = {
    "lr_pretrain": 5e-3,
    "lr_adapt": 5e-4,
    "stage1_iters": 1000,
    "pretrain_iters": 250_000,
    "adapt_iters": 20_000,
    "dssim_weight": 0.2,
    "depth_weight": 1e-2,
    "normal_weight": 1e-3,
    "n_gaussians": 60_000,
}

# keys that change the shape or meaning of stored weights
ARCH_KEYS = ("n_expr", "n_gaussians", "sh_degree", "d_audio", "d_au", "d_identity", "d_hidden",
             "n_layers", "n_heads", "adain_hidden")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # corpus
    n_identities: int = 4
    n_frames: int = 125
    resolution: int = 64
    fps: int = 25
    rest_frames: int = 5
    # head / Gaussians
    n_expr: int = 10
    n_gaussians: int = 2000
    sh_degree: int = 0
    scale_factor: float = 1.0
    mouth_radius: float = 0.45
    # network
    d_audio: int = 64
    d_au: int = 17
    d_identity: int = 512
    d_hidden: int = 64
    n_layers: int = 2
    n_heads: int = 4
    adain_hidden: int = 64
    # schedule
    pretrain_iters: int = 6000
    stage1_iters: int = 1000
    adapt_iters: int = 1500
    adapt_stage1_iters: int = 300
    window: int = 50
    frames_per_iter: int = 1
    holdout_frames: int = 25
    context: str = "window"
    # optimizer
    lr_pretrain: float = 5e-3
    lr_adapt: float = 5e-4
    lr_appearance: float = 5e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # losses
    dssim_weight: float = 0.2
    depth_weight: float = 1e-2
    normal_weight: float = 1e-3
    kl_weight: float = 1.0
    score_weight: float = 1.0
    rest_anchor_weight: float = 1.0   # neutral-mesh rest-frame term while Gaussians train with motion
    adapt_appearance: bool = False
    log_every: int = 100

    def __post_init__(self):
        if self.context not in ("clip", "window"):
            raise ValidationError(f"context must be 'clip' or 'window', got {self.context!r}")
        for name in ("lr_pretrain", "lr_adapt", "lr_appearance"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")
        if self.window < 1 or self.frames_per_iter < 1:
            raise ValidationError("window and frames_per_iter must be positive")
        if self.d_hidden % self.n_heads:
            raise ValidationError("d_hidden must be divisible by n_heads")

    def grmn(self, n_mouth: int) -> GRMNConfig:
        return GRMNConfig(d_audio=self.d_audio, d_au=self.d_au, d_identity=self.d_identity,
                          d_hidden=self.d_hidden, n_layers=self.n_layers, n_heads=self.n_heads,
                          n_expr=self.n_expr, n_mouth=n_mouth, adain_hidden=self.adain_hidden)

    def loss_weights(self) -> LossWeights:
        return LossWeights(dssim=self.dssim_weight, depth=self.depth_weight, normal=self.normal_weight,
                           kl=self.kl_weight, score=self.score_weight)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    def arch_hash(self) -> str:
        text = "\n".join(f"{k} = {getattr(self, k)}" for k in ARCH_KEYS)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)


def _parse_value(raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    known = {f.name: getattr(base, f.name) for f in fields(base)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValidationError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(raw, known[key])
        except ValueError as exc:
            raise ValidationError(f"config line {lineno}: bad value for {key}: {exc}") from exc
    return replace(base, **values)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())
