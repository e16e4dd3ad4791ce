"""Noise schedules, the forward noising process, and the epsilon-prediction loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .._validation import check_vector_pair


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Cumulative signal retention ``alpha_bar[t - 1]`` for ``t = 1..T``.

    ``at(0)`` returns 1 so that the last DDIM step can target clean data.
    """

    alpha_bar: np.ndarray
    kind: str = "custom"
    params: tuple = ()

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size == 0:
            raise ValueError("alpha_bar must be a non-empty 1-D array")
        if not np.all((ab > 0) & (ab < 1)):
            raise ValueError("alpha_bar values must lie in (0, 1)")
        if np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T(self):
        return self.alpha_bar.size

    def at(self, t):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise IndexError(f"timestep outside [0, {self.T}]")
        full = np.concatenate([[1.0], self.alpha_bar])
        out = full[t]
        return float(out) if out.ndim == 0 else out

    def to_dict(self):
        return {"kind": self.kind, "T": self.T, "params": list(self.params)}


def make_schedule(kind="linear", T=1000, beta_lo=1e-4, beta_hi=0.02, cosine_offset=0.008):
    """Build a schedule.

    ``linear``: betas evenly spaced in ``[beta_lo, beta_hi]`` and
    ``alpha_bar_t = prod_{s <= t} (1 - beta_s)``.
    ``cosine``: squared-cosine ``alpha_bar`` with offset ``cosine_offset``,
    per-step betas capped at 0.999.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if kind == "linear":
        if not 0 < beta_lo <= beta_hi < 1:
            raise ValueError(f"need 0 < beta_lo <= beta_hi < 1, got {beta_lo}, {beta_hi}")
        betas = np.linspace(beta_lo, beta_hi, T)
        return DiffusionSchedule(np.cumprod(1.0 - betas), "linear", (beta_lo, beta_hi))
    if kind == "cosine":
        s = cosine_offset
        steps = np.arange(T + 1) / T
        f = np.cos((steps + s) / (1 + s) * np.pi / 2) ** 2
        betas = np.minimum(1.0 - f[1:] / f[:-1], 0.999)
        return DiffusionSchedule(np.cumprod(1.0 - betas), "cosine", (s,))
    raise ValueError(f"unknown schedule kind {kind!r}")


@dataclass
class NoisySample:
    x_t: np.ndarray
    t: object
    epsilon: Optional[np.ndarray] = None


def noise_with(x0, eps, alpha_bar):
    """``sqrt(ab) * x0 + sqrt(1 - ab) * eps`` for explicit ``alpha_bar``."""
    ab = np.asarray(alpha_bar, dtype=np.float64)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def _per_sample(ab, x):
    ab = np.asarray(ab, dtype=np.float64)
    if ab.ndim == 1 and x.ndim > 1:
        return ab.reshape((-1,) + (1,) * (x.ndim - 1))
    return ab


def forward_noise(x0, t, eps, sched):
    """Noise clean data to step ``t`` (scalar, or one step per leading row)."""
    x0, eps = check_vector_pair(x0, eps, names=("x0", "eps"))
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > sched.T):
        raise ValueError(f"t must lie in [1, {sched.T}]")
    ab = _per_sample(sched.at(t_arr), x0)
    return NoisySample(noise_with(x0, eps, ab), t, eps)


def diffusion_loss(denoiser, x0, t, eps, cond, sched):
    """Mean over the batch of the squared error ``||eps - eps_hat(x_t, t, cond)||^2``."""
    x0, eps = check_vector_pair(x0, eps, names=("x0", "eps"))
    if x0.ndim != 2 or x0.shape[0] == 0:
        raise ValueError("expected a non-empty (batch, dim) array")
    x_t = forward_noise(x0, t, eps, sched).x_t
    pred = np.asarray(denoiser.predict(x_t, t, cond), dtype=np.float64)
    if pred.shape != eps.shape:
        raise ValueError(f"denoiser returned shape {pred.shape}, expected {eps.shape}")
    return float(np.mean(np.sum((eps - pred) ** 2, axis=1)))
