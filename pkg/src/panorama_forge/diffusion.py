"""Variance-preserving noise schedule, forward noising, appearance noise
prior, and the deterministic (eta = 0) DDIM sampler.

Latent videos are torch tensors laid out ``(T, C, H, V*W)``: frames lead so
they act as a batch axis, and views sit side by side along width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .rng import SeededRng

TRAIN_STEPS = 1000
DDIM_STEPS = 25
LAMBDA_TRAIN = 0.05
LAMBDA_INFER = 0.07


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    alpha: np.ndarray  # (steps,) signal scale
    sigma: np.ndarray  # (steps,) noise scale

    def __post_init__(self):
        a, s = np.asarray(self.alpha, np.float64), np.asarray(self.sigma, np.float64)
        if a.shape != s.shape or a.ndim != 1 or len(a) < 1:
            raise ScheduleError("alpha and sigma must be equal-length 1-D arrays")
        if np.any(a <= 0) or np.any(a > 1) or np.any(s < 0) or np.any(s >= 1):
            raise ScheduleError("alpha must lie in (0, 1] and sigma in [0, 1)")
        if len(a) > 1 and (np.any(np.diff(a) >= 0) or np.any(np.diff(s) <= 0)):
            raise ScheduleError("alpha must strictly decrease and sigma strictly increase")
        if np.max(np.abs(a * a + s * s - 1.0)) > 1e-9:
            raise ScheduleError("schedule is not variance preserving (alpha^2 + sigma^2 != 1)")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "sigma", s)

    @property
    def steps(self) -> int:
        return len(self.alpha)

    @classmethod
    def cosine(cls, steps: int = TRAIN_STEPS, offset: float = 0.008) -> "NoiseSchedule":
        """Cosine signal curve; exact (1, 0) at t = 0."""
        if steps < 1:
            raise ScheduleError("steps must be >= 1")
        t = np.arange(steps, dtype=np.float64) / steps
        f = np.cos((t + offset) / (1 + offset) * math.pi / 2)
        alpha = f / f[0]
        sigma = np.sqrt(np.clip(1.0 - alpha * alpha, 0.0, None))
        return cls(alpha, sigma)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha.tolist(), "sigma": self.sigma.tolist()}


def _check_step(sched: NoiseSchedule, t: int, name="t") -> int:
    t = int(t)
    if not 0 <= t < sched.steps:
        raise IndexError(f"{name}={t} outside [0, {sched.steps})")
    return t


def forward_diffuse(x: torch.Tensor, t: int, sched: NoiseSchedule, eps: torch.Tensor) -> torch.Tensor:
    if x.shape != eps.shape:
        raise ValueError(f"shape mismatch: x {tuple(x.shape)} vs eps {tuple(eps.shape)}")
    t = _check_step(sched, t)
    return float(sched.alpha[t]) * x + float(sched.sigma[t]) * eps


def apply_noise_prior(z1: torch.Tensor, eps_frames: Sequence[torch.Tensor], lam: float) -> list:
    """Blend ``lam`` times the first-frame multi-view latent into each noise."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    out = []
    for i, eps in enumerate(eps_frames):
        if eps.shape != z1.shape:
            raise ValueError(f"noise {i} has shape {tuple(eps.shape)}, first-frame latent {tuple(z1.shape)}")
        out.append(eps if lam == 0 else lam * z1 + eps)
    return out


def ddim_step(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int, sched: NoiseSchedule,
              clip_x0: Optional[float] = None) -> torch.Tensor:
    """Deterministic DDIM update from ``t`` to ``t_prev``.

    With ``clip_x0`` the clean estimate is clamped to ``[-clip_x0, clip_x0]``
    and the noise estimate re-derived from it, so one bad prediction at a
    low-signal step cannot blow up the rest of the trajectory.
    """
    t = _check_step(sched, t)
    t_prev = _check_step(sched, t_prev, "t_prev")
    if t_prev > t:
        raise ValueError(f"t_prev={t_prev} must not exceed t={t}")
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: x_t {tuple(x_t.shape)} vs eps_hat {tuple(eps_hat.shape)}")
    if t_prev == t:
        return x_t
    a_t = float(sched.alpha[t])
    if a_t < 1e-12:
        raise ArithmeticError(f"alpha[{t}]={a_t} too small to invert")
    s_t = float(sched.sigma[t])
    x0 = (x_t - s_t * eps_hat) / a_t
    if clip_x0 is not None:
        if not clip_x0 > 0:
            raise ValueError("clip_x0 must be positive")
        x0 = x0.clamp(-clip_x0, clip_x0)
        if s_t > 0:
            eps_hat = (x_t - a_t * x0) / s_t
    return float(sched.alpha[t_prev]) * x0 + float(sched.sigma[t_prev]) * eps_hat


def timestep_schedule(num_steps: int, train_steps: int) -> list:
    """Descending evaluation steps with uniform stride over [0, train_steps)."""
    if not 1 <= num_steps <= train_steps:
        raise ValueError(f"num_steps must lie in [1, {train_steps}], got {num_steps}")
    grid = train_steps * (1.0 - np.arange(num_steps) / num_steps) - 1.0
    return [int(x) for x in np.round(grid)]


def initial_noise(shape, rng: SeededRng, views: int = 1, dtype=torch.float64) -> torch.Tensor:
    """Standard normal latent noise drawn per (frame, view) substream."""
    T, C, H, VW = shape
    if VW % views:
        raise ValueError(f"panoramic width {VW} not divisible by {views} views")
    w = VW // views
    out = torch.empty(tuple(shape), dtype=dtype)
    for t in range(T):
        for v in range(views):
            out[t, :, :, v * w:(v + 1) * w] = rng.split("noise", t, v).normal((C, H, w), dtype=dtype)
    return out


@dataclass(frozen=True)
class NoisePrior:
    """First-frame latent and blend weight; frame 0 is the conditioned frame."""

    z1: torch.Tensor  # (1, C, H, V*W)
    lam: float = LAMBDA_INFER


def sample(
    denoiser: Callable[[torch.Tensor, int], torch.Tensor],
    sched: NoiseSchedule,
    shape,
    rng: SeededRng,
    num_steps: int = DDIM_STEPS,
    prior: Optional[NoisePrior] = None,
    views: int = 1,
    dtype=torch.float64,
    callback: Optional[Callable[[int, torch.Tensor], None]] = None,
    clip_x0: Optional[float] = None,
) -> torch.Tensor:
    """Run DDIM from pure (optionally prior-mixed) noise down to an x0 estimate.

    The starting state is ``sigma_T * noise``: the noise term of the forward
    process with the data term at its zero mean, so a denoiser that returns
    the exact starting noise drives the result to the zero latent.
    """
    steps = timestep_schedule(num_steps, sched.steps)
    noise = initial_noise(shape, rng, views=views, dtype=dtype)
    if prior is not None and shape[0] > 1:
        frames = apply_noise_prior(prior.z1[0].to(dtype), list(noise[1:]), prior.lam)
        noise = torch.cat([noise[:1], torch.stack(frames)], dim=0)
    x = float(sched.sigma[steps[0]]) * noise
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        eps_hat = denoiser(x, t)
        if eps_hat.shape != x.shape:
            raise ValueError(f"denoiser returned {tuple(eps_hat.shape)}, expected {tuple(x.shape)}")
        x = ddim_step(x, eps_hat, t, t_prev, sched, clip_x0)
        if callback is not None:
            callback(t, x)
    return x
