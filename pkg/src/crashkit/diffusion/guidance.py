"""Classifier-free guidance combinations and the per-step guidance ramp."""
from __future__ import annotations

from dataclasses import dataclass

from .._validation import check_vector_pair


def cfg_single(eps_uncond, eps_cond, gamma):
    """``eps_uncond + gamma * (eps_cond - eps_uncond)``.

    Evaluated as ``(1 - gamma) * u + gamma * c`` so that ``gamma`` of 0 and 1
    return the inputs bit for bit.
    """
    u, c = check_vector_pair(eps_uncond, eps_cond, names=("eps_uncond", "eps_cond"))
    return (1.0 - gamma) * u + gamma * c


def cfg_multi(eps_base, eps_boxes, eps_boxes_crash, gamma_b, gamma_t):
    """Two-signal guidance with a separate base model.

    ``eps_base`` is the base model's prediction given only the initial image;
    ``eps_boxes`` and ``eps_boxes_crash`` come from the conditioned model with
    boxes, and with boxes plus crash type::

        eps_base + gamma_b * (eps_boxes - eps_base)
                 + gamma_t * (eps_boxes_crash - eps_boxes)

    Evaluated in the regrouped form
    ``(1 - gamma_b) * base + (gamma_b - gamma_t) * boxes + gamma_t * boxes_crash``,
    which makes both ``gamma_b = gamma_t = 1`` (gives ``eps_boxes_crash``)
    and ``gamma_b = gamma_t = 0`` (gives ``eps_base``) exact in floating point.
    """
    a, b, c = check_vector_pair(eps_base, eps_boxes, eps_boxes_crash,
                                names=("eps_base", "eps_boxes", "eps_boxes_crash"))
    return (1.0 - gamma_b) * a + (gamma_b - gamma_t) * b + gamma_t * c


@dataclass(frozen=True)
class GuidanceSchedule:
    gamma_b_range: tuple = (1.0, 3.0)
    gamma_t_range: tuple = (6.0, 12.0)

    def __post_init__(self):
        for name in ("gamma_b_range", "gamma_t_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must satisfy lo <= hi, got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))

    @classmethod
    def constant(cls, gamma_b, gamma_t):
        return cls((gamma_b, gamma_b), (gamma_t, gamma_t))

    def to_dict(self):
        return {"gamma_b_range": list(self.gamma_b_range), "gamma_t_range": list(self.gamma_t_range)}


def guidance_at_step(g, step, total_steps):
    """Linearly ramped ``(gamma_b, gamma_t)`` at sampler step ``step``.

    Step 0 gives the lower ends, step ``total_steps - 1`` the upper ends. With
    fewer than two steps the lower ends are used throughout.
    """
    if total_steps < 2:
        return g.gamma_b_range[0], g.gamma_t_range[0]
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    frac = step / (total_steps - 1)
    (blo, bhi), (tlo, thi) = g.gamma_b_range, g.gamma_t_range
    gb = bhi if step == total_steps - 1 else blo + (bhi - blo) * frac
    gt = thi if step == total_steps - 1 else tlo + (thi - tlo) * frac
    return gb, gt
