"""Trainable bundle (denoiser + conditioning front end) and its checkpoint format.

Checkpoint layout, little-endian::

    b"MODIFFCK"            8-byte magic
    uint32                 format version
    uint64                 header length in bytes
    header                 UTF-8 JSON: hyperparameters, schedule, skeleton,
                           vocabulary, training state, tensor table
    payload                row-major float32 tensors, back to back

The tensor table lists ``name``, ``shape`` and element ``offset`` for every
tensor in the payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .conditioning import AudioProjector, TextEncoder, Vocabulary, pad_tokens
from .denoiser import ConditioningContext, Denoiser, DenoiserConfig
from .diffusion import NoiseSchedule, linear_schedule
from .motion import Skeleton

MAGIC = b"MODIFFCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    denoiser: DenoiserConfig
    modality: str = "audio"  # audio | text | none
    n_mels: int = 80
    text_dim: int = 64
    text_heads: int = 4
    vocab_size: int = 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["denoiser"] = self.denoiser.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["denoiser"] = DenoiserConfig(**d["denoiser"])
        return cls(**d)


class MotionDiffusionModel(nn.Module):
    """Noise predictor plus whichever context encoder its modality needs."""

    def __init__(self, cfg: ModelConfig, skeleton: Skeleton, fps: float, vocab: Vocabulary | None = None):
        super().__init__()
        if cfg.modality not in ("audio", "text", "none"):
            raise ValueError(f"unknown modality {cfg.modality!r}")
        self.cfg = cfg
        self.skeleton = skeleton
        self.fps = float(fps)
        self.vocab = vocab
        self.denoiser = Denoiser(cfg.denoiser)
        ctx_dim = cfg.denoiser.context_dim
        self.audio = AudioProjector(cfg.n_mels, ctx_dim) if cfg.modality == "audio" else None
        self.text = (
            TextEncoder(cfg.vocab_size, cfg.text_dim, ctx_dim, heads=cfg.text_heads)
            if cfg.modality == "text" else None
        )
        # per-channel standardisation of the diffusion state; identity until fitted
        C = cfg.denoiser.in_channels
        self.register_buffer("data_mean", torch.zeros(C))
        self.register_buffer("data_std", torch.ones(C))

    def fit_normalization(self, motions, floor: float = 1e-3) -> None:
        """Per-channel mean / std over all frames of ``(n, N, 3J)`` motions."""
        m = torch.as_tensor(motions, dtype=torch.float64).reshape(-1, self.in_channels)
        self.data_mean.copy_(m.mean(0))
        self.data_std.copy_(m.std(0, unbiased=False).clamp_min(floor))

    def normalize(self, motion):
        """Metres -> diffusion state. Works on numpy arrays and tensors of any float dtype."""
        mean, std = self._stats(motion)
        return (motion - mean) / std

    def denormalize(self, state):
        mean, std = self._stats(state)
        return state * std + mean

    def _stats(self, like):
        if torch.is_tensor(like):
            return self.data_mean.to(like.dtype), self.data_std.to(like.dtype)
        return self.data_mean.double().numpy(), self.data_std.double().numpy()

    @property
    def in_channels(self) -> int:
        return self.denoiser.in_channels

    def forward(self, x, t, context=None):
        return self.denoiser(x, t, context)

    def encode(self, cond) -> ConditioningContext:
        """Mel frames ``(m, k)`` / ``(B, m, k)``, token ids, a caption string, or None."""
        if cond is None or self.cfg.modality == "none":
            return ConditioningContext(None, "none")
        if self.cfg.modality == "audio":
            dtype = next(self.parameters()).dtype
            return self.audio(torch.as_tensor(np.asarray(cond) if not torch.is_tensor(cond) else cond, dtype=dtype))
        if isinstance(cond, str):
            cond = self.vocab.encode(cond)
        elif isinstance(cond, (list, tuple)) and cond and isinstance(cond[0], str):
            cond = pad_tokens([self.vocab.encode(c) for c in cond])
        return self.text(cond)


def build_model(skeleton: Skeleton, fps: float, modality: str = "audio", vocab: Vocabulary | None = None,
                **denoiser_kw) -> MotionDiffusionModel:
    den = DenoiserConfig(in_channels=3 * skeleton.joint_count, **denoiser_kw)
    cfg = ModelConfig(den, modality=modality, vocab_size=len(vocab) if vocab is not None else 2)
    return MotionDiffusionModel(cfg, skeleton, fps, vocab)


def _schedule_header(sched: NoiseSchedule) -> dict:
    return {"kind": "linear", "T": sched.T, "beta_start": float(sched.beta[0]), "beta_end": float(sched.beta[-1])}


def schedule_from_header(h: dict) -> NoiseSchedule:
    if h.get("kind") != "linear":
        raise CheckpointError(f"unsupported schedule kind {h.get('kind')!r}")
    return linear_schedule(int(h["T"]), float(h["beta_start"]), float(h["beta_end"]))


def save_checkpoint(path, model: MotionDiffusionModel, sched: NoiseSchedule, tensors: dict | None = None,
                    extra: dict | None = None) -> Path:
    """Write model parameters (and any extra named tensors) as float32."""
    all_tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    all_tensors.update(tensors or {})
    table, chunks, offset = [], [], 0
    for name, value in all_tensors.items():
        arr = np.ascontiguousarray(value.detach().cpu().numpy() if torch.is_tensor(value) else value, dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = {
        "model": model.cfg.to_dict(),
        "schedule": _schedule_header(sched),
        "skeleton": {"joint_names": list(model.skeleton.joint_names), "parents": list(model.skeleton.parents),
                     "symmetry": list(model.skeleton.symmetry)},
        "fps": model.fps,
        "vocab": model.vocab.to_list() if model.vocab is not None else None,
        "extra": extra or {},
        "tensors": table,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(blob)))
        f.write(blob)
        for chunk in chunks:
            f.write(chunk)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Header dict and every stored tensor (float32)."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    payload = np.frombuffer(data, dtype="<f4", offset=start + hlen)
    tensors = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = payload[entry["offset"]:entry["offset"] + n].reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
    return header, tensors


def load_checkpoint(path) -> tuple[MotionDiffusionModel, NoiseSchedule, dict, dict[str, torch.Tensor]]:
    header, tensors = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["model"])
    sk = header["skeleton"]
    skel = Skeleton(sk["joint_names"], sk["parents"], sk["symmetry"])
    vocab = Vocabulary.from_list(header["vocab"]) if header.get("vocab") else None
    model = MotionDiffusionModel(cfg, skel, header["fps"], vocab)
    state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    model.load_state_dict(state)
    model.eval()
    rest = {k: v for k, v in tensors.items() if not k.startswith("model/")}
    return model, schedule_from_header(header["schedule"]), header, rest
