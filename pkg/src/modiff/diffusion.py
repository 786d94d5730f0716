"""Noise schedule, forward diffusion, and ancestral / masked reverse samplers.

Timesteps are zero-indexed: ``t = 0..T-1``. Step operations accept numpy
arrays or torch tensors; ``t`` may be an int or a per-sample integer array, in
which case coefficients broadcast over the trailing two axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .motion import DimensionError


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return self.beta.shape[0]

    def alpha_bar_prev(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def posterior_variance(self, t: int) -> float:
        """beta~_t = beta_t (1 - abar_{t-1}) / (1 - abar_t); zero at t = 0."""
        if t == 0:
            return 0.0
        return float(self.beta[t] * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]))

    @classmethod
    def from_betas(cls, beta) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or beta.shape[0] < 2:
            raise ScheduleError("need at least two betas")
        if not np.all((beta > 0) & (beta < 1)):
            raise ScheduleError("betas must lie in (0, 1)")
        alpha = 1.0 - beta
        return cls(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ScheduleError(f"T must be >= 2, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    t = np.arange(T, dtype=np.float64)
    beta = beta_start + (t / (T - 1)) * (beta_end - beta_start)
    return NoiseSchedule.from_betas(beta)


def _check_t(t, sched: NoiseSchedule):
    t_arr = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)
    if np.any(t_arr < 0) or np.any(t_arr >= sched.T):
        raise IndexError(f"timestep out of range [0, {sched.T})")


def _coef(values: np.ndarray, t, like):
    """Gather per-step coefficients; scalar for int t, (B, 1, 1) for batched t."""
    if isinstance(t, (int, np.integer)):
        return float(values[int(t)])
    idx = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t, dtype=np.int64)
    c = values[idx].reshape(-1, *([1] * (like.ndim - 1)))
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(c, dtype=like.dtype, device=like.device)
    return c


def _same_shape(a, b, what: str):
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionError(f"{what}: shape {tuple(a.shape)} != {tuple(b.shape)}")


def q_sample(m0, t, eps, sched: NoiseSchedule):
    """Closed-form forward diffusion: sqrt(abar_t) m0 + sqrt(1 - abar_t) eps."""
    _same_shape(m0, eps, "q_sample")
    _check_t(t, sched)
    a = _coef(sched.alpha_bar, t, m0)
    return a**0.5 * m0 + (1 - a) ** 0.5 * eps


def estimate_m0(mt, t, eps_hat, sched: NoiseSchedule):
    """Clean-motion estimate from a noisy state and predicted noise."""
    _same_shape(mt, eps_hat, "estimate_m0")
    _check_t(t, sched)
    a = _coef(sched.alpha_bar, t, mt)
    return mt / a**0.5 - (1.0 / a - 1.0) ** 0.5 * eps_hat


def reverse_step(mt, t: int, eps_hat, sched: NoiseSchedule, noise=None):
    """One ancestral step M^(t) -> M^(t-1) with posterior variance beta~_t."""
    _same_shape(mt, eps_hat, "reverse_step")
    _check_t(t, sched)
    t = int(t)
    beta = float(sched.beta[t])
    mean = (mt - (beta / (1.0 - float(sched.alpha_bar[t])) ** 0.5) * eps_hat) / float(sched.alpha[t]) ** 0.5
    if t == 0:
        return mean
    if noise is None:
        raise ValueError("noise is required for t > 0")
    _same_shape(mt, noise, "reverse_step noise")
    return mean + sched.posterior_variance(t) ** 0.5 * noise


def _model_dtype(model) -> torch.dtype:
    try:
        return next(model.parameters()).dtype
    except (AttributeError, StopIteration):
        return torch.float32


def _eps(model, x: torch.Tensor, t: int, context) -> torch.Tensor:
    dtype = _model_dtype(model)
    tt = torch.full((x.shape[0],), t, dtype=torch.long)
    return model(x.to(dtype), tt, context).to(torch.float64)


def _to_state(model, x):
    return model.normalize(x) if hasattr(model, "normalize") else x


def _from_state(model, x):
    return model.denormalize(x) if hasattr(model, "denormalize") else x


def _batched(shape) -> tuple[tuple[int, ...], bool]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 2:
        return (1, *shape), True
    if len(shape) == 3:
        return shape, False
    raise DimensionError(f"sample shape must be (N, C) or (B, N, C), got {shape}")


class _NoiseSource:
    """Standard-normal draws from one generator, or one generator per batch row."""

    def __init__(self, seeds, shape):
        if isinstance(seeds, (int, np.integer)):
            self.full, self.squeeze = _batched(shape)
            self.gens = [torch.Generator().manual_seed(int(seeds))]
        else:
            seeds = [int(s) for s in seeds]
            if len(shape) != 2 or not seeds:
                raise DimensionError("per-sample seeds need a (N, C) shape and at least one seed")
            self.full, self.squeeze = (len(seeds), *(int(s) for s in shape)), False
            self.gens = [torch.Generator().manual_seed(s) for s in seeds]

    def draw(self) -> torch.Tensor:
        if len(self.gens) == 1:
            return torch.randn(self.full, generator=self.gens[0], dtype=torch.float64)
        return torch.stack([torch.randn(self.full[1:], generator=g, dtype=torch.float64) for g in self.gens])


@torch.no_grad()
def sample(model, context, shape, sched: NoiseSchedule, rng_seed) -> np.ndarray:
    """Ancestral sampling from pure noise; deterministic given ``rng_seed``.

    ``shape`` is ``(N, 3J)`` or ``(B, N, 3J)`` and the result has that shape.
    Models exposing ``normalize`` / ``denormalize`` diffuse in their own
    standardised space; the result is always mapped back to motion units.
    A sequence of seeds with an ``(N, 3J)`` shape gives one independent
    noise stream per sample and a ``(len(seeds), N, 3J)`` result.
    """
    src = _NoiseSource(rng_seed, shape)
    in_ch = getattr(model, "in_channels", None)
    if in_ch is not None and src.full[-1] != in_ch:
        raise DimensionError(f"model expects {in_ch} channels, got {src.full[-1]}")
    x = src.draw()
    for t in range(sched.T - 1, -1, -1):
        eps_hat = _eps(model, x, t, context)
        noise = src.draw() if t > 0 else None
        x = reverse_step(x, t, eps_hat, sched, noise)
    out = _from_state(model, x).numpy()
    return out[0] if src.squeeze else out


@dataclass(frozen=True)
class FrameMask:
    """Frames to keep: ``(N,)`` shared by the batch, or ``(B, N)`` per sequence."""

    keep: np.ndarray

    def __post_init__(self):
        keep = np.asarray(self.keep, dtype=bool)
        if keep.ndim not in (1, 2):
            keep = keep.reshape(-1)
        object.__setattr__(self, "keep", keep)

    @classmethod
    def stack(cls, masks) -> "FrameMask":
        return cls(np.stack([m.keep for m in masks]))

    @classmethod
    def prefix(cls, n_frames: int, seed_frames: int) -> "FrameMask":
        keep = np.zeros(n_frames, dtype=bool)
        keep[:seed_frames] = True
        return cls(keep)

    @classmethod
    def keyframes(cls, n_frames: int, frames) -> "FrameMask":
        keep = np.zeros(n_frames, dtype=bool)
        keep[list(frames)] = True
        return cls(keep)


def default_seed_frames(fps: float, seconds: float = 2.0) -> int:
    return int(round(fps * seconds))


@torch.no_grad()
def masked_sample(model, context, seed_motion, mask: FrameMask, sched: NoiseSchedule, rng_seed: int) -> np.ndarray:
    """Reverse diffusion with observed frames pinned to a diffused copy of the seed.

    At every step the kept frames are overwritten with the seed forward-diffused
    to that step using fresh noise; after the final step they equal the seed.
    ``seed_motion`` is ``(N, 3J)`` or ``(B, N, 3J)``; unkept rows are ignored.
    """
    seed = np.asarray(getattr(seed_motion, "frames", seed_motion), dtype=np.float64)
    full, squeeze = _batched(seed.shape)
    if mask.keep.shape[-1] != full[1]:
        raise DimensionError(f"mask length {mask.keep.shape[-1]} != {full[1]} frames")
    if mask.keep.ndim == 2 and mask.keep.shape[0] != full[0]:
        raise DimensionError(f"{mask.keep.shape[0]} masks for a batch of {full[0]}")
    seed_t = torch.from_numpy(seed.reshape(full).copy())
    seed_state = _to_state(model, seed_t)
    keep = torch.from_numpy(mask.keep).expand(full[:2])
    gen = torch.Generator().manual_seed(int(rng_seed))
    x = torch.randn(full, generator=gen, dtype=torch.float64)
    for t in range(sched.T - 1, -1, -1):
        seed_noise = torch.randn(full, generator=gen, dtype=torch.float64)
        x[keep] = q_sample(seed_state, t, seed_noise, sched)[keep]
        eps_hat = _eps(model, x, t, context)
        noise = torch.randn(full, generator=gen, dtype=torch.float64) if t > 0 else None
        x = reverse_step(x, t, eps_hat, sched, noise)
    x = _from_state(model, x)
    x[keep] = seed_t[keep]
    out = x.numpy()
    return out[0] if squeeze else out
