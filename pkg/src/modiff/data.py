"""Synthetic beat-synced motion/audio/caption datasets.

Every generated motion is a rigid forward-kinematics animation whose joints
all come to rest at the same instants. Those instants sit half a frame before
each click of the accompanying audio, so the backward-difference speed has a
strict minimum exactly on the click's frame.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .conditioning import Waveform, mel_spectrogram, read_wav, write_wav
from .motion import SKELETON_PRESETS, MotionSequence, Skeleton, load_motion, save_motion

FAMILIES = ("waves", "steps", "bends")
SIDES = ("left", "right")

# rest offsets from parent, metres; y up, +x to the figure's left
_REST = {
    "toy8": [
        (0.0, 0.95, 0.0), (0.0, 0.5, 0.0), (0.3, 0.0, 0.0), (0.25, 0.0, 0.0),
        (-0.3, 0.0, 0.0), (-0.25, 0.0, 0.0), (0.15, -0.85, 0.0), (-0.15, -0.85, 0.0),
    ],
    "smpl24": [
        (0.0, 0.95, 0.0), (0.09, -0.08, 0.0), (-0.09, -0.08, 0.0), (0.0, 0.1, 0.0),
        (0.0, -0.4, 0.0), (0.0, -0.4, 0.0), (0.0, 0.14, 0.0), (0.0, -0.42, 0.0),
        (0.0, -0.42, 0.0), (0.0, 0.06, 0.0), (0.0, -0.05, 0.12), (0.0, -0.05, 0.12),
        (0.0, 0.21, 0.0), (0.07, 0.12, 0.0), (-0.07, 0.12, 0.0), (0.0, 0.09, 0.0),
        (0.11, 0.02, 0.0), (-0.11, 0.02, 0.0), (0.26, 0.0, 0.0), (-0.26, 0.0, 0.0),
        (0.25, 0.0, 0.0), (-0.25, 0.0, 0.0), (0.08, 0.0, 0.0), (-0.08, 0.0, 0.0),
    ],
}

# family -> (left joint, right joint or None, rotation axis); angle attaches to the bone ending at the joint
_DRIVERS = {
    "toy8": {"waves": ("l_elbow", "r_elbow", 2), "steps": ("l_foot", "r_foot", 0), "bends": ("chest", None, 2)},
    "smpl24": {"waves": ("l_elbow", "r_elbow", 2), "steps": ("l_knee", "r_knee", 0), "bends": ("spine2", None, 2)},
}


@dataclass
class SyntheticSpec:
    n_sequences: int = 8
    seconds: float = 4.0
    fps: float = 20.0
    beat_hz: float = 2.0
    skeleton: str = "toy8"
    sample_rate: int = 16000
    phase_jitter: bool = False
    captions: bool = True

    def __post_init__(self):
        if self.skeleton not in SKELETON_PRESETS:
            raise ValueError(f"unknown skeleton preset {self.skeleton!r}")
        period = self.fps / self.beat_hz
        if abs(period - round(period)) > 1e-9 or round(period) < 2:
            raise ValueError(f"beat period {period} frames must be an integer >= 2")
        n = self.fps * self.seconds
        if abs(n - round(n)) > 1e-9:
            raise ValueError(f"fps * seconds = {n} must be integral")

    @property
    def period(self) -> int:
        return int(round(self.fps / self.beat_hz))

    @property
    def n_frames(self) -> int:
        return int(round(self.fps * self.seconds))


def _rot(axis: int, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    i, j = [(1, 2), (2, 0), (0, 1)][axis]
    r = np.eye(3)
    r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
    return r


def forward_kinematics(skel: Skeleton, offsets: np.ndarray, angles: np.ndarray, axes: np.ndarray,
                       root: np.ndarray) -> np.ndarray:
    """Frames (N, 3J): root translation in joint 0, root-relative positions elsewhere.

    ``angles[n, j]`` rotates the bone ending at joint ``j`` about ``axes[j]``.
    """
    N, J = angles.shape
    pos = np.zeros((N, J, 3))
    for n in range(N):
        rot = [np.eye(3)] * J
        for j in range(1, J):
            p = skel.parents[j]
            rot[j] = rot[p] @ _rot(int(axes[j]), angles[n, j])
            pos[n, j] = (pos[n, p] if p > 0 else 0.0) + rot[j] @ offsets[j]
    pos[:, 0] = root
    return pos.reshape(N, 3 * J)


def beat_frames(spec: SyntheticSpec, phase: int) -> list[int]:
    # velocity[0] copies velocity[1], so frame 1 can never be a strict minimum
    return [n for n in range(phase, spec.n_frames - 1, spec.period) if n >= 2]


def make_motion(spec: SyntheticSpec, family: str, side: str, phase: int, amp: float, bob: float) -> MotionSequence:
    skel = SKELETON_PRESETS[spec.skeleton]()
    names = list(skel.joint_names)
    offsets = np.asarray(_REST[spec.skeleton], dtype=np.float64)
    tau = np.arange(spec.n_frames) / spec.fps
    # rests half a frame before each beat frame: speed over [n-1, n] is minimal at n
    stop = (phase - 0.5) / spec.fps
    g = np.cos(np.pi * spec.beat_hz * (tau - stop))
    angles = np.zeros((spec.n_frames, skel.joint_count))
    axes = np.zeros(skel.joint_count, dtype=int)
    left, right, axis = _DRIVERS[spec.skeleton][family]
    if right is None:
        lead, follow = left, None
        amp = amp if side == "left" else -amp
    else:
        lead, follow = (left, right) if side == "left" else (right, left)
    angles[:, names.index(lead)] = amp * g
    axes[names.index(lead)] = axis
    if follow is not None:
        angles[:, names.index(follow)] = -0.3 * amp * g
        axes[names.index(follow)] = axis
    root = np.zeros((spec.n_frames, 3))
    root += offsets[0]
    root[:, 1] += bob * g
    frames = forward_kinematics(skel, offsets, angles, axes, root)
    return MotionSequence(frames, spec.fps, skel)


def click_track(spec: SyntheticSpec, beats: list[int], rng: np.random.Generator) -> Waveform:
    n = int(round(spec.seconds * spec.sample_rate))
    x = np.zeros(n)
    length = int(0.03 * spec.sample_rate)
    env = np.exp(-np.arange(length) / (0.006 * spec.sample_rate))
    for b in beats:
        start = int(round(b / spec.fps * spec.sample_rate))
        burst = 0.8 * env * rng.uniform(-1.0, 1.0, length)
        end = min(n, start + length)
        x[start:end] += burst[: end - start]
    return Waveform(x, spec.sample_rate)


def caption_for(family: str, side: str) -> str:
    # fixed template; the family word is what ties a caption to its motion
    return f"a figure {family} {side} arm"


def gen_data(spec: SyntheticSpec, out_dir, seed: int = 0) -> Path:
    """Write paired motion JSON / click-track WAV / caption files plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    items = []
    for i in range(spec.n_sequences):
        family = FAMILIES[rng.integers(len(FAMILIES))]
        side = SIDES[rng.integers(len(SIDES))]
        phase = int(rng.integers(2, spec.period + 2)) if spec.phase_jitter else spec.period // 2
        amp = float(rng.uniform(0.4, 0.9))
        bob = float(rng.uniform(0.02, 0.06))
        motion = make_motion(spec, family, side, phase, amp, bob)
        beats = beat_frames(spec, phase)
        name = f"seq_{i:03d}"
        save_motion(motion, out / f"{name}.json")
        write_wav(out / f"{name}.wav", click_track(spec, beats, rng))
        item = {"name": name, "motion": f"{name}.json", "audio": f"{name}.wav", "family": family,
                "side": side, "phase": phase, "beats": beats}
        if spec.captions:
            caption = caption_for(family, side)
            (out / f"{name}.txt").write_text(caption + "\n", encoding="utf-8")
            item["caption"] = f"{name}.txt"
        items.append(item)
    manifest = {"spec": asdict(spec), "seed": seed, "items": items}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return out


@dataclass
class Example:
    name: str
    motion: MotionSequence
    mel: np.ndarray | None
    caption: str | None
    music_beats: tuple[int, ...] = ()


def load_dataset(data_dir, with_audio: bool = True) -> tuple[list[Example], dict]:
    from .metrics import music_beats

    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {root}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    examples = []
    for item in manifest["items"]:
        motion = load_motion(root / item["motion"])
        mel, beats = None, ()
        if with_audio and item.get("audio"):
            spec = mel_spectrogram(_to_16k(read_wav(root / item["audio"])))
            mel = spec.frames
            beats = music_beats(spec, motion.fps).beats
        caption = None
        if item.get("caption"):
            caption = (root / item["caption"]).read_text(encoding="utf-8").strip()
        examples.append(Example(item["name"], motion, mel, caption, beats))
    return examples, manifest


def _to_16k(w: Waveform) -> Waveform:
    from .conditioning import resample

    return w if w.sample_rate == 16000 else resample(w, 16000)
