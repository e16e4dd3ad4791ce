"""Noise schedules, guidance, DDIM sampling and desk-scale denoisers."""
from .guidance import GuidanceSchedule, cfg_multi, cfg_single, guidance_at_step
from .mlp import MLPDenoiser, train_toy_denoiser
from .sampler import SamplerConfig, SamplingResult, ddim_step, ddim_timesteps, sample
from .schedule import DiffusionSchedule, diffusion_loss, forward_noise, make_schedule
from .toy import GaussianMixtureDenoiser

__all__ = [
    "DiffusionSchedule", "GaussianMixtureDenoiser", "GuidanceSchedule", "MLPDenoiser",
    "SamplerConfig", "SamplingResult", "cfg_multi", "cfg_single", "ddim_step",
    "ddim_timesteps", "diffusion_loss", "forward_noise", "guidance_at_step",
    "make_schedule", "sample", "train_toy_denoiser",
]
