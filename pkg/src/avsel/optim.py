"""Adam, global-norm clipping and the three-stage learning-rate schedule."""
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NumericError


@dataclass(frozen=True)
class LrSchedule:
    """Linear warm-up, constant plateau, exponential decay, then flat."""

    peak_lr: float = 1e-3
    warmup_steps: int = 500
    constant_until: int = 1000
    end_steps: int = 10000
    final_fraction: float = 0.01

    def __post_init__(self):
        if not 0 < self.warmup_steps <= self.constant_until <= self.end_steps:
            raise ValueError("need 0 < warmup_steps <= constant_until <= end_steps")
        if not 0 < self.final_fraction <= 1:
            raise ValueError("final_fraction must be in (0, 1]")

    @classmethod
    def full_scale(cls):
        return cls(1e-3, 32_000, 64_000, 200_000)


def lr_at(schedule, step):
    s = schedule
    if step < 0:
        raise ValueError("step must be non-negative")
    if step <= s.warmup_steps:
        return s.peak_lr * step / s.warmup_steps
    if step <= s.constant_until:
        return s.peak_lr
    if s.end_steps == s.constant_until:
        return s.peak_lr * s.final_fraction
    frac = min(step, s.end_steps) - s.constant_until
    return s.peak_lr * s.final_fraction ** (frac / (s.end_steps - s.constant_until))


def global_norm(grads):
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    return math.sqrt(total)


def clip_global_norm(grads, max_norm):
    """Scale every gradient by max_norm/norm when the joint L2 norm exceeds max_norm.

    Returns ``(clipped, norm_before)``.  ``grads`` maps parameter name to array.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype, copy=False) for k, g in grads.items()}, norm


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    clip_norm: float = 0.4
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr, lr_scale=None):
    """In-place Adam update with bias correction; ``params`` maps names to arrays.

    Parameters without a gradient entry are left untouched.  ``lr_scale``
    optionally maps a name prefix to a learning-rate multiplier.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step_lr = lr
        for prefix, f in (lr_scale or {}).items():
            if name.startswith(prefix):
                step_lr = lr * f
        p -= (step_lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params, state
