"""Evaluation metrics: beat alignment, kinetic features, FID, diversity, multimodality."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from .motion import InsufficientFramesError, kinematic_beats, kinetic_velocity


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class BeatSet:
    beats: tuple[int, ...]
    fps: float

    def __post_init__(self):
        beats = tuple(int(b) for b in self.beats)
        if any(b < 0 for b in beats) or any(b >= c for b, c in zip(beats, beats[1:])):
            raise ValueError("beats must be nonnegative and strictly increasing")
        object.__setattr__(self, "beats", beats)

    def __len__(self):
        return len(self.beats)


def onset_envelope(log_mel: np.ndarray) -> np.ndarray:
    """Per-frame sum of positive first differences over bands; frame 0 is 0."""
    flux = np.maximum(np.diff(log_mel, axis=0), 0.0).sum(axis=1)
    return np.concatenate([[0.0], flux])


def music_beats(mel, motion_fps: float, n_std: float = 1.0, min_strength: float = 1.0) -> BeatSet:
    """Onset peaks of a log-mel spectrogram, mapped to motion frame indices.

    A peak is a strict local maximum of the onset envelope above
    ``mean + n_std * std`` and above ``min_strength`` (nats summed over bands).
    """
    frames = mel.frames
    if frames.shape[0] < 3:
        raise InsufficientFramesError("music beat extraction needs at least 3 spectrogram frames")
    env = onset_envelope(frames)
    thresh = max(env.mean() + n_std * env.std(), min_strength)
    mid = env[1:-1]
    peaks = np.nonzero((mid > env[:-2]) & (mid > env[2:]) & (mid > thresh))[0] + 1
    seconds = peaks * mel.hop / mel.sample_rate
    beats = sorted(set(int(b) for b in np.round(seconds * motion_fps)))
    return BeatSet(tuple(beats), motion_fps)


def beat_alignment_score(music: BeatSet, kinematic: BeatSet, sigma: float = 3.0) -> float:
    """Mean over music beats of exp(-d^2 / 2 sigma^2), d = distance to the nearest kinematic beat.

    Distances are in motion frames. No kinematic beats scores 0.
    """
    if len(music) == 0:
        raise UndefinedMetricError("beat alignment is undefined without music beats")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if len(kinematic) == 0:
        return 0.0
    bm = np.asarray(music.beats, dtype=np.float64)[:, None]
    bd = np.asarray(kinematic.beats, dtype=np.float64)[None, :]
    d2 = ((bm - bd) ** 2).min(axis=1)
    return float(np.mean(np.exp(-d2 / (2.0 * sigma**2))))


def motion_beat_set(frames: np.ndarray, fps: float) -> BeatSet:
    return BeatSet(tuple(kinematic_beats(kinetic_velocity(frames, fps))), fps)


def kinetic_features(frames, fps: float | None = None) -> np.ndarray:
    """Per joint mean squared velocity then per joint mean squared acceleration (2J)."""
    if hasattr(frames, "frames"):
        fps = frames.fps if fps is None else fps
        frames = frames.frames
    if fps is None:
        raise ValueError("fps is required for raw frame arrays")
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[0] < 3:
        raise InsufficientFramesError("kinetic features need at least 3 frames")
    pos = frames.reshape(frames.shape[0], -1, 3)
    vel = np.diff(pos, axis=0) * fps
    acc = np.diff(pos, n=2, axis=0) * fps**2
    return np.concatenate([(vel**2).sum(-1).mean(0), (acc**2).sum(-1).mean(0)])


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(set_a, set_b, eps: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two feature sets (rows = samples)."""
    a = np.atleast_2d(np.asarray(set_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(set_b, dtype=np.float64))
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise UndefinedMetricError("each feature set needs at least 2 samples")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    eye = eps * np.eye(a.shape[1])
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.cov(a, rowvar=False).reshape(a.shape[1], a.shape[1]) + eye
    cov_b = np.cov(b, rowvar=False).reshape(b.shape[1], b.shape[1]) + eye
    # tr sqrt(A B) = tr sqrt(A^1/2 B A^1/2), which is symmetric PSD
    root_a = _sqrtm_psd(cov_a)
    w = np.linalg.eigvalsh(root_a @ cov_b @ root_a)
    tr_cross = np.sqrt(np.clip(w, 0.0, None)).sum()
    d = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_cross)
    return max(d, 0.0)


def diversity(features) -> float:
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if f.shape[0] < 2:
        raise UndefinedMetricError("diversity needs at least 2 feature vectors")
    return float(pdist(f).mean())


def multi_modality(model, context, sched, seeds, n_frames: int, fps: float, K: int = 50) -> float:
    """Diversity of K samples drawn for the same context with distinct seeds."""
    from .diffusion import sample

    seeds = list(seeds)[:K]
    if len(seeds) < 2:
        raise UndefinedMetricError("multimodality needs K >= 2 seeds")
    if len(set(seeds)) < len(seeds):
        warnings.warn("multimodality seeds are not distinct", stacklevel=2)
    motions = sample(model, context, (n_frames, model.in_channels), sched, seeds)
    return diversity([kinetic_features(m, fps) for m in motions])
