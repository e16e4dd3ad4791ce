"""Deterministic DDIM sampling with two-signal classifier-free guidance."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .._validation import check_rng
from .guidance import GuidanceSchedule, cfg_multi, guidance_at_step
from .schedule import DiffusionSchedule, make_schedule

SPACINGS = ("uniform", "angle")


@dataclass(frozen=True)
class SamplerConfig:
    """DDIM settings.

    ``spacing="uniform"`` spreads the timesteps evenly in ``t``.
    ``spacing="angle"`` spreads them evenly in
    ``arctan(sigma_t / sigma_data)`` with ``sigma_t^2 = (1 - ab_t) / ab_t``,
    which keeps per-step discretization error roughly constant.
    """

    num_steps: int = 30
    eta: float = 0.0
    schedule: DiffusionSchedule = field(default_factory=make_schedule)
    guidance: GuidanceSchedule = field(default_factory=GuidanceSchedule)
    spacing: str = "uniform"
    sigma_data: float = 0.5

    def __post_init__(self):
        if not 1 <= self.num_steps <= self.schedule.T:
            raise ValueError(f"num_steps must be in [1, {self.schedule.T}], got {self.num_steps}")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if self.spacing not in SPACINGS:
            raise ValueError(f"spacing must be one of {SPACINGS}")

    def timesteps(self):
        return ddim_timesteps(self.schedule, self.num_steps, self.spacing, self.sigma_data)

    def to_dict(self):
        return {
            "num_steps": self.num_steps,
            "eta": self.eta,
            "schedule": self.schedule.to_dict(),
            "guidance": self.guidance.to_dict(),
            "spacing": self.spacing,
            "sigma_data": self.sigma_data,
        }


def ddim_timesteps(sched, num_steps, spacing="uniform", sigma_data=0.5):
    """Strictly decreasing timesteps ``[T, ..., 0]`` of length ``num_steps + 1``."""
    T = sched.T
    if spacing == "uniform":
        ts = np.floor(np.linspace(T, 0, num_steps + 1) + 0.5).astype(np.int64)
    elif spacing == "angle":
        ab = sched.alpha_bar
        theta = np.arctan(np.sqrt((1.0 - ab) / ab) / sigma_data)  # increasing in t
        targets = np.linspace(theta[-1], 0.0, num_steps + 1)[1:-1]
        inner = np.searchsorted(theta, targets)
        inner = np.clip(inner, 1, T - 1)
        # choose the closer neighbour, then index -> timestep (t = index + 1)
        left = theta[inner - 1]
        right = theta[inner]
        inner = np.where(np.abs(targets - left) <= np.abs(right - targets), inner - 1, inner) + 1
        ts = np.concatenate([[T], inner, [0]]).astype(np.int64)
    else:
        raise ValueError(f"unknown spacing {spacing!r}")
    # enforce strict decrease when rounding collides; endpoints stay pinned
    for i in range(1, len(ts) - 1):
        ts[i] = min(ts[i], ts[i - 1] - 1)
    for i in range(len(ts) - 2, 0, -1):
        ts[i] = max(ts[i], ts[i + 1] + 1)
    if ts[0] != T or ts[-1] != 0:
        raise ValueError(f"cannot fit {num_steps} distinct steps into T={T}")
    return ts


def ddim_step(x_t, eps_hat, t, t_prev, sched, eta=0.0, rng=None):
    """One DDIM update from step ``t`` to ``t_prev`` (``t_prev = 0`` is clean data)."""
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got {t}, {t_prev}")
    a = sched.at(t)
    a_prev = sched.at(t_prev)
    x0_hat = (x_t - np.sqrt(1.0 - a) * eps_hat) / np.sqrt(a)
    sigma = eta * np.sqrt((1.0 - a_prev) / (1.0 - a)) * np.sqrt(1.0 - a / a_prev)
    out = np.sqrt(a_prev) * x0_hat + np.sqrt(max(1.0 - a_prev - sigma * sigma, 0.0)) * eps_hat
    if sigma > 0:
        out = out + sigma * check_rng(rng).standard_normal(np.shape(x_t))
    return out


@dataclass
class SamplingResult:
    trajectory: np.ndarray   # (num_steps + 1, n, d), trajectory[0] is x_T
    timesteps: np.ndarray    # (num_steps + 1,)
    gammas: list             # (gamma_b, gamma_t) per step

    @property
    def samples(self):
        return self.trajectory[-1]

    @property
    def x_T(self):
        return self.trajectory[0]


def sample(cond_model, uncond_model, cond, cfg=None, rng=None, n_samples=1, dim=None):
    """Run guided DDIM from standard normal noise.

    Each step asks the base model for its image-only prediction and the
    conditioned model for boxes-only and boxes-plus-crash predictions, then
    mixes them with :func:`cfg_multi` at that step's guidance strengths.
    """
    cfg = cfg or SamplerConfig()
    rng = check_rng(rng)
    if dim is None:
        dim = getattr(cond_model, "dim", None)
    if dim is None:
        raise ValueError("data dimension unknown; pass dim=")
    for m in (cond_model, uncond_model):
        if getattr(m, "dim", dim) != dim:
            raise ValueError("models disagree on data dimension")

    base_cond = cond.without_boxes().without_crash()
    box_cond = cond.without_crash()
    ts = cfg.timesteps()
    x = rng.standard_normal((n_samples, dim))
    traj = [x]
    gammas = []
    for i in range(cfg.num_steps):
        t, t_prev = int(ts[i]), int(ts[i + 1])
        gb, gt = guidance_at_step(cfg.guidance, i, cfg.num_steps)
        eps = cfg_multi(
            uncond_model.predict(x, t, base_cond),
            cond_model.predict(x, t, box_cond),
            cond_model.predict(x, t, cond),
            gb, gt,
        )
        x = ddim_step(x, eps, t, t_prev, cfg.schedule, cfg.eta, rng)
        traj.append(x)
        gammas.append((gb, gt))
    return SamplingResult(np.stack(traj), ts, gammas)


def run_manifest(cfg, seed, result, **extra):
    """JSON-serializable record of a sampling run."""
    out = {
        "seed": seed,
        "sampler": cfg.to_dict(),
        "timesteps": [int(t) for t in result.timesteps],
        "gammas": [{"step": i, "gamma_b": gb, "gamma_t": gt} for i, (gb, gt) in enumerate(result.gammas)],
        "n_samples": int(result.trajectory.shape[1]),
        "dim": int(result.trajectory.shape[2]),
    }
    out.update(extra)
    return out


def trajectory_csv(result):
    """CSV with one row per (step, sample): ``step,sample,x0,x1,...``."""
    traj = result.trajectory
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "sample"] + [f"x{j}" for j in range(traj.shape[2])])
    for s in range(traj.shape[0]):
        for n in range(traj.shape[1]):
            w.writerow([s, n] + [repr(float(v)) for v in traj[s, n]])
    return buf.getvalue()
