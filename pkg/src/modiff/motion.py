"""Skeleton and motion-sequence data model plus kinematic primitives.

A motion is stored as an ``N x 3J`` array. Joint 0's three channels hold the
global root translation; joints ``1..J-1`` hold positions relative to the root.
For bone geometry the root is treated as the origin.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DimensionError(ValueError):
    pass


class InsufficientFramesError(ValueError):
    pass


@dataclass(frozen=True)
class Skeleton:
    joint_names: tuple[str, ...]
    parents: tuple[int, ...]
    symmetry: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "parents", tuple(int(p) for p in self.parents))
        object.__setattr__(self, "symmetry", tuple(int(s) for s in self.symmetry))
        J = len(self.joint_names)
        if J < 1:
            raise ValueError("skeleton needs at least one joint")
        if len(self.parents) != J or len(self.symmetry) != J:
            raise ValueError("parents and symmetry must have one entry per joint")
        roots = [j for j, p in enumerate(self.parents) if p < 0]
        if roots != [0]:
            raise ValueError(f"joint 0 must be the single root, got roots {roots}")
        for j in range(1, J):
            seen = {j}
            p = self.parents[j]
            while p >= 0:
                if p >= J or p in seen:
                    raise ValueError(f"parent chain of joint {j} is not a rooted tree")
                seen.add(p)
                p = self.parents[p]
        for j, s in enumerate(self.symmetry):
            if not 0 <= s < J or self.symmetry[s] != j:
                raise ValueError(f"symmetry map is not an involution at joint {j}")
        if self.symmetry[0] != 0:
            raise ValueError("the root must be its own mirror image")
        for j in range(1, J):
            if self.parents[self.symmetry[j]] != self.symmetry[self.parents[j]]:
                raise ValueError(f"symmetry map does not preserve the parent of joint {j}")

    @property
    def joint_count(self) -> int:
        return len(self.joint_names)

    @property
    def bone_list(self) -> list[tuple[int, int]]:
        """(child, parent) pairs, one per non-root joint, in joint order."""
        return [(j, self.parents[j]) for j in range(1, self.joint_count)]

    def mirror_bone(self, b: int) -> int:
        """Index of the bone whose endpoints are the mirror images of bone ``b``'s."""
        child, _ = self.bone_list[b]
        # bone b is identified by its child joint (child = b + 1)
        return self.symmetry[child] - 1

    def symmetric_bone_pairs(self) -> list[tuple[int, int]]:
        """Unordered pairs (b, b') of distinct mirrored bones, each listed once."""
        pairs = []
        for b in range(self.joint_count - 1):
            m = self.mirror_bone(b)
            if m > b:
                pairs.append((b, m))
        return pairs


def toy_skeleton() -> Skeleton:
    """8-joint symmetric biped-like tree: pelvis, chest, two arms, two legs."""
    names = ("pelvis", "chest", "l_elbow", "l_hand", "r_elbow", "r_hand", "l_foot", "r_foot")
    parents = (-1, 0, 1, 2, 1, 4, 0, 0)
    symmetry = (0, 1, 4, 5, 2, 3, 7, 6)
    return Skeleton(names, parents, symmetry)


def smpl_like_skeleton() -> Skeleton:
    """24-joint preset with the SMPL kinematic tree."""
    names = (
        "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2",
        "l_ankle", "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar",
        "r_collar", "head", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
        "l_wrist", "r_wrist", "l_hand", "r_hand",
    )
    parents = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)
    symmetry = (0, 2, 1, 3, 5, 4, 6, 8, 7, 9, 11, 10, 12, 14, 13, 15, 17, 16, 19, 18, 21, 20, 23, 22)
    return Skeleton(names, parents, symmetry)


SKELETON_PRESETS = {"toy8": toy_skeleton, "smpl24": smpl_like_skeleton}


@dataclass
class MotionSequence:
    frames: np.ndarray
    fps: float
    skeleton: Skeleton = field(default_factory=toy_skeleton)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise DimensionError(f"frames must be N x 3J with N >= 1, got {self.frames.shape}")
        if self.frames.shape[1] != 3 * self.skeleton.joint_count:
            raise DimensionError(
                f"frames have {self.frames.shape[1]} channels, skeleton needs "
                f"{3 * self.skeleton.joint_count}"
            )
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("motion frames contain non-finite values")
        if not self.fps > 0:
            raise ValueError(f"fps must be positive, got {self.fps}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def joints(self) -> np.ndarray:
        """Frames reshaped to (N, J, 3)."""
        return self.frames.reshape(self.n_frames, -1, 3)


def _as_frames(motion) -> np.ndarray:
    if isinstance(motion, MotionSequence):
        return motion.frames
    return np.asarray(motion, dtype=np.float64)


def bone_lengths(motion, skel: Skeleton) -> np.ndarray:
    """Per-frame Euclidean length of every bone, shape (N, J-1)."""
    frames = _as_frames(motion)
    J = skel.joint_count
    if frames.ndim != 2 or frames.shape[1] != 3 * J:
        raise DimensionError(f"expected N x {3 * J} frames, got {frames.shape}")
    pos = frames.reshape(frames.shape[0], J, 3).copy()
    pos[:, 0] = 0.0
    child = np.arange(1, J)
    parent = np.asarray(skel.parents[1:])
    return np.linalg.norm(pos[:, child] - pos[:, parent], axis=-1)


def kinetic_velocity(motion, fps: float | None = None) -> np.ndarray:
    """Mean joint speed per frame (m/s); entry 0 repeats entry 1."""
    if isinstance(motion, MotionSequence):
        frames, fps = motion.frames, motion.fps if fps is None else fps
    else:
        frames = np.asarray(motion, dtype=np.float64)
        if fps is None:
            raise ValueError("fps is required for raw frame arrays")
    if frames.shape[0] < 2:
        raise InsufficientFramesError("kinetic velocity needs at least 2 frames")
    pos = frames.reshape(frames.shape[0], -1, 3)
    speed = np.linalg.norm(np.diff(pos, axis=0), axis=-1).mean(axis=1) * fps
    return np.concatenate([speed[:1], speed])


def kinematic_beats(velocity) -> list[int]:
    """Frame indices of strict interior local minima of a velocity profile."""
    v = np.asarray(velocity, dtype=np.float64)
    if v.shape[0] < 3:
        return []
    mid = v[1:-1]
    idx = np.nonzero((mid < v[:-2]) & (mid < v[2:]))[0] + 1
    return idx.tolist()


def motion_beats(motion: MotionSequence) -> list[int]:
    return kinematic_beats(kinetic_velocity(motion))


def _fmt(x: float) -> str:
    return f"{x:.16e}"


def save_motion(motion: MotionSequence, path) -> None:
    skel = motion.skeleton
    header = {
        "fps": float(motion.fps),
        "joint_count": skel.joint_count,
        "joint_names": list(skel.joint_names),
        "parents": list(skel.parents),
        "symmetry": list(skel.symmetry),
    }
    head = json.dumps(header)[:-1]
    rows = ",\n".join("[" + ", ".join(_fmt(v) for v in row) + "]" for row in motion.frames)
    text = f'{head}, "frames": [\n{rows}\n]}}\n'
    Path(path).write_text(text, encoding="utf-8")


def load_motion(path) -> MotionSequence:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    skel = Skeleton(data["joint_names"], data["parents"], data["symmetry"])
    if data["joint_count"] != skel.joint_count:
        raise DimensionError("joint_count disagrees with joint_names")
    frames = np.array(data["frames"], dtype=np.float64).reshape(-1, 3 * skel.joint_count)
    return MotionSequence(frames, float(data["fps"]), skel)
