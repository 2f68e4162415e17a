"""AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, ValidationError


@dataclass
class AdamWState:
    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step: int = 0
    # per-parameter step counts for bias correction; parameters that join
    # training late (after the appearance-only stage) start their own count
    param_steps: dict[str, int] = field(default_factory=dict)
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)
    # per-parameter learning-rate multipliers / weight-decay overrides
    lr_scale: dict[str, float] = field(default_factory=dict)
    no_decay: set[str] = field(default_factory=set)


def adamw_step(state: AdamWState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               frame_id=None) -> None:
    """Update ``params`` in place and advance ``state``.

    Only names present in ``grads`` are touched.  A non-finite gradient aborts
    the whole step before any parameter changes.
    """
    if state.lr < 0:
        raise ValidationError("learning rate must be non-negative")
    for name, g in grads.items():
        if name not in params:
            raise ValidationError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValidationError(f"shape mismatch for {name!r}: {g.shape} vs {params[name].shape}")
        if not np.all(np.isfinite(g)):
            where = "" if frame_id is None else f" (sample {frame_id})"
            raise NonFiniteError(f"non-finite gradient for {name!r}{where}")

    state.step += 1
    b1, b2 = state.betas
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        n = state.param_steps[name] = state.param_steps.get(name, 0) + 1
        bc1 = 1.0 - b1 ** n
        bc2 = 1.0 - b2 ** n
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = np.zeros_like(p)
            state.exp_avg_sq[name] = np.zeros_like(p)
        v = state.exp_avg_sq[name]
        lr = state.lr * state.lr_scale.get(name, 1.0)
        wd = 0.0 if name in state.no_decay else state.weight_decay
        if wd:
            p *= 1.0 - lr * wd
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        denom = np.sqrt(v) / np.sqrt(bc2) + state.eps
        p -= (lr / bc1) * m / denom
