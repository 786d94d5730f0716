"""Training objectives: noise regression plus time-weighted kinematic terms.

All functions take torch tensors shaped ``(N, 3J)`` or ``(B, N, 3J)`` and stay
differentiable. Kinematic terms see root-relative bone geometry only, so the
root-translation channels affect the data and reconstruction terms alone.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import NoiseSchedule
from .motion import DimensionError, InsufficientFramesError, Skeleton


@dataclass
class LossWeights:
    lambda_a: float = 1.0
    lambda_m: float = 1.0
    use_s: bool = True
    use_a: bool = True
    use_m: bool = True

    def __post_init__(self):
        for v in (self.lambda_a, self.lambda_m):
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"loss weights must be finite and >= 0, got {v}")

    @classmethod
    def data_only(cls) -> "LossWeights":
        return cls(use_s=False, use_a=False, use_m=False)

    @property
    def any_kinematic(self) -> bool:
        return self.use_s or self.use_a or self.use_m


def _safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    # zero gradient at 0 instead of inf * 0 = nan
    pos = x > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, x, torch.ones_like(x))), torch.zeros_like(x))


def _batch(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.ndim == 2 else x


def bone_lengths_t(motion: torch.Tensor, skel: Skeleton) -> torch.Tensor:
    """Differentiable bone lengths, ``(..., N, 3J) -> (..., N, J-1)``."""
    J = skel.joint_count
    if motion.shape[-1] != 3 * J:
        raise DimensionError(f"expected {3 * J} channels, got {motion.shape[-1]}")
    pos = motion.reshape(*motion.shape[:-1], J, 3)
    # root joint sits at the origin for bone geometry
    pos = torch.cat([torch.zeros_like(pos[..., :1, :]), pos[..., 1:, :]], dim=-2)
    child = torch.arange(1, J)
    parent = torch.tensor(skel.parents[1:])
    diff = pos[..., child, :] - pos[..., parent, :]
    return _safe_sqrt((diff**2).sum(-1))


def loss_data(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    if eps.shape != eps_hat.shape:
        raise DimensionError(f"loss_data: {tuple(eps.shape)} != {tuple(eps_hat.shape)}")
    return ((eps - eps_hat) ** 2).mean()


def skeleton_per_sample(motion: torch.Tensor, skel: Skeleton) -> torch.Tensor:
    motion = _batch(motion)
    if motion.shape[-2] < 2:
        raise InsufficientFramesError("skeleton consistency needs at least 2 frames")
    return bone_lengths_t(motion, skel).var(dim=-2, unbiased=True).mean(dim=-1)


def loss_skeleton(motion: torch.Tensor, skel: Skeleton) -> torch.Tensor:
    """Unbiased temporal variance of each bone's length, averaged over bones."""
    return skeleton_per_sample(motion, skel).mean()


def symmetry_per_sample(motion: torch.Tensor, skel: Skeleton) -> torch.Tensor:
    motion = _batch(motion)
    pairs = skel.symmetric_bone_pairs()
    if not pairs:
        warnings.warn("skeleton has no mirrored bone pairs; symmetry loss is 0", stacklevel=3)
        return motion.new_zeros(motion.shape[0])
    bl = bone_lengths_t(motion, skel)
    left = torch.tensor([a for a, _ in pairs])
    right = torch.tensor([b for _, b in pairs])
    diff = bl[..., left] - bl[..., right]
    return _safe_sqrt((diff**2).mean(dim=(-1, -2)))


def loss_symmetry(motion: torch.Tensor, skel: Skeleton) -> torch.Tensor:
    """RMS left/right bone-length mismatch over frames and mirrored pairs."""
    return symmetry_per_sample(motion, skel).mean()


def motion_per_sample(m0_hat: torch.Tensor, m0: torch.Tensor) -> torch.Tensor:
    if m0_hat.shape != m0.shape:
        raise DimensionError(f"loss_motion: {tuple(m0_hat.shape)} != {tuple(m0.shape)}")
    return ((_batch(m0_hat) - _batch(m0)) ** 2).mean(dim=(-1, -2))


def loss_motion(m0_hat: torch.Tensor, m0: torch.Tensor) -> torch.Tensor:
    return motion_per_sample(m0_hat, m0).mean()


def total_loss(eps, eps_hat, m0, m0_hat, skel: Skeleton, t, sched: NoiseSchedule, weights: LossWeights,
               to_metres=None):
    """L_da + abar_t * (L_s + lambda_a L_a + lambda_m L_m), per-sample t.

    ``t`` is an int or one step per batch element. ``m0`` / ``m0_hat`` live in
    the diffusion state; ``to_metres`` maps them to joint positions for the
    bone-length terms (identity when omitted). Returns the scalar loss and a
    breakdown of unweighted batch-mean terms plus the applied weights.
    """
    l_da = loss_data(eps, eps_hat)
    t_arr = np.atleast_1d(np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t, dtype=np.int64))
    if np.any(t_arr < 0) or np.any(t_arr >= sched.T):
        raise IndexError(f"timestep out of range [0, {sched.T})")
    abar = torch.as_tensor(sched.alpha_bar[t_arr], dtype=l_da.dtype)
    zero = l_da.new_zeros(_batch(m0).shape[0])
    body = m0_hat if to_metres is None or not (weights.use_s or weights.use_a) else to_metres(m0_hat)
    l_s = skeleton_per_sample(body, skel) if weights.use_s else zero
    l_a = symmetry_per_sample(body, skel) if weights.use_a else zero
    l_m = motion_per_sample(m0_hat, m0) if weights.use_m else zero
    if weights.any_kinematic:
        kin = l_s + weights.lambda_a * l_a + weights.lambda_m * l_m
        total = l_da + (abar * kin).mean()
    else:
        total = l_da
    breakdown = {
        "total": float(total.detach()),
        "L_da": float(l_da.detach()),
        "L_s": float(l_s.detach().mean()),
        "L_a": float(l_a.detach().mean()),
        "L_m": float(l_m.detach().mean()),
        "lambda_k": float(abar.mean()),
        "lambda_a": weights.lambda_a,
        "lambda_m": weights.lambda_m,
    }
    return total, breakdown
