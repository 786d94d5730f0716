"""Motion diffusion with kinematic regularisers, audio/text conditioning and masked editing."""

__version__ = "0.1.0"

from .diffusion import FrameMask, NoiseSchedule, estimate_m0, linear_schedule, masked_sample, q_sample, sample
from .losses import LossWeights, total_loss
from .model import MotionDiffusionModel, build_model, load_checkpoint, save_checkpoint
from .motion import MotionSequence, Skeleton, load_motion, save_motion, smpl_like_skeleton, toy_skeleton

__all__ = [
    "FrameMask", "LossWeights", "MotionDiffusionModel", "MotionSequence", "NoiseSchedule", "Skeleton",
    "build_model", "estimate_m0", "linear_schedule", "load_checkpoint", "load_motion", "masked_sample",
    "q_sample", "sample", "save_checkpoint", "save_motion", "smpl_like_skeleton", "toy_skeleton", "total_loss",
]
