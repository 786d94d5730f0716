"""Training loop: per-sample timestep draws, loss assembly, AdamW with warm-up.

All randomness is a pure function of ``(rng_seed, step)``: the batch order
comes from per-epoch seeded permutations and the timestep / noise draws from a
generator seeded per step. Resuming from a checkpoint therefore replays the
uninterrupted run exactly.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .conditioning import Vocabulary, pad_tokens
from .denoiser import NumericalError
from .diffusion import NoiseSchedule, estimate_m0, linear_schedule, q_sample
from .losses import LossWeights, total_loss
from .model import MotionDiffusionModel, build_model, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

TASK_DEFAULTS = {
    "dance": {"learning_rate": 5e-4, "batch_size": 32, "warmup_steps": 0},
    "text": {"learning_rate": 2e-4, "batch_size": 128, "warmup_steps": 500},
}


@dataclass
class TrainConfig:
    task: str = "dance"
    learning_rate: float = 5e-4
    batch_size: int = 32
    weight_decay: float = 0.01
    warmup_steps: int = 0
    max_steps: int = 2000
    rng_seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_a: float = 1.0
    lambda_m: float = 1.0
    loss_s: bool = True
    loss_a: bool = True
    loss_m: bool = True
    ckpt_every: int = 500
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 4)
    heads: int = 4
    attn_dim: int = 64
    context_dim: int = 64
    conditioned: bool = True

    def __post_init__(self):
        if self.task not in TASK_DEFAULTS:
            raise ValueError(f"task must be one of {sorted(TASK_DEFAULTS)}, got {self.task!r}")
        self.channel_mults = tuple(int(m) for m in self.channel_mults)
        for name in ("learning_rate", "batch_size", "max_steps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.warmup_steps < 0:
            raise ValueError("weight_decay and warmup_steps must be >= 0")
        if self.warmup_steps > self.max_steps:
            raise ValueError("warmup_steps cannot exceed max_steps")

    @classmethod
    def for_task(cls, task: str, **overrides) -> "TrainConfig":
        return cls(task=task, **{**TASK_DEFAULTS[task], **overrides})

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_a, self.lambda_m, self.loss_s, self.loss_a, self.loss_m)

    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self.diffusion_steps, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        return d

    def with_updates(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def _parse_value(raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("true", "1", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    return raw.strip()


def load_config(path, **overrides) -> TrainConfig:
    """Read an INI file whose ``[train]`` section sets TrainConfig fields by name.

    ``task`` selects the per-task defaults before other keys apply.
    """
    parser = configparser.ConfigParser()
    if not parser.read(path, encoding="utf-8"):
        raise FileNotFoundError(f"config file not found: {path}")
    section = parser["train"] if parser.has_section("train") else {}
    task = overrides.get("task") or section.get("task", "dance")
    base = TrainConfig.for_task(task)
    values = {}
    fields = {f.name: getattr(base, f.name) for f in dataclasses.fields(TrainConfig)}
    for key, raw in section.items():
        if key not in fields:
            raise ValueError(f"unknown config key {key!r} in {path}")
        values[key] = _parse_value(raw, fields[key])
    values.update({k: v for k, v in overrides.items() if v is not None})
    return base.with_updates(**values)


def write_config(cfg: TrainConfig, path) -> None:
    parser = configparser.ConfigParser()
    values = {}
    for k, v in cfg.to_dict().items():
        if isinstance(v, bool):
            values[k] = str(v).lower()
        elif isinstance(v, (list, tuple)):
            values[k] = " ".join(str(x) for x in v)
        else:
            values[k] = repr(v) if isinstance(v, float) else str(v)
    parser["train"] = values
    with open(path, "w", encoding="utf-8") as f:
        parser.write(f)


@dataclass
class TrainingData:
    """Stacked tensors for one dataset: motions plus the matching conditioning."""

    motions: torch.Tensor  # (n, N, 3J)
    mels: torch.Tensor | None = None  # (n, m, k)
    tokens: torch.Tensor | None = None  # (n, L)

    def __len__(self):
        return self.motions.shape[0]

    @classmethod
    def from_examples(cls, examples, vocab: Vocabulary | None = None) -> "TrainingData":
        if not examples:
            raise ValueError("dataset is empty")
        motions = torch.tensor(np.stack([e.motion.frames for e in examples]), dtype=torch.float32)
        mels = None
        if all(e.mel is not None for e in examples):
            mels = torch.tensor(np.stack([e.mel for e in examples]), dtype=torch.float32)
        tokens = None
        if vocab is not None and all(e.caption for e in examples):
            tokens = pad_tokens([vocab.encode(e.caption) for e in examples])
        return cls(motions, mels, tokens)

    def conditioning(self, idx: np.ndarray, modality: str):
        if modality == "audio":
            return self.mels[idx]
        if modality == "text":
            return self.tokens[idx]
        return None


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices for 1-based ``step`` from back-to-back seeded epoch permutations."""
    start = (step - 1) * batch_size
    out = []
    pos = start
    while len(out) < batch_size:
        epoch, offset = divmod(pos, n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        take = min(n - offset, batch_size - len(out))
        out.extend(perm[offset:offset + take].tolist())
        pos += take
    return np.asarray(out)


def step_generator(seed: int, step: int) -> torch.Generator:
    s = np.random.SeedSequence([seed, step]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(s) & 0x7FFF_FFFF_FFFF_FFFF)


def make_optimizer(model, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2),
                             eps=cfg.adam_eps, weight_decay=cfg.weight_decay)


def warmup_factor(step: int, warmup_steps: int) -> float:
    return 1.0 if warmup_steps <= 0 else min(1.0, step / warmup_steps)


def compute_loss(model: MotionDiffusionModel, m0, cond, sched: NoiseSchedule, weights: LossWeights,
                 gen: torch.Generator):
    """Loss for clean motions ``m0`` in metres; diffusion runs in the model's normalised space."""
    B = m0.shape[0]
    t = torch.randint(0, sched.T, (B,), generator=gen)
    x0 = model.normalize(m0)
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    xt = q_sample(x0, t, eps, sched)
    ctx = model.encode(cond)
    eps_hat = model(xt, t, ctx)
    x0_hat = estimate_m0(xt, t, eps_hat, sched) if weights.any_kinematic else x0
    loss, parts = total_loss(eps, eps_hat, x0, x0_hat, model.skeleton, t, sched, weights,
                             to_metres=model.denormalize)
    parts["t"] = t.tolist()
    return loss, parts


def train_step(model: MotionDiffusionModel, optimizer, data: TrainingData, sched: NoiseSchedule,
               cfg: TrainConfig, step: int) -> dict:
    """One AdamW update for 1-based ``step``; returns the loss breakdown."""
    model.train()
    idx = batch_indices(len(data), cfg.batch_size, cfg.rng_seed, step)
    m0 = data.motions[idx]
    cond = data.conditioning(idx, model.cfg.modality) if cfg.conditioned else None
    loss, parts = compute_loss(model, m0, cond, sched, cfg.weights, step_generator(cfg.rng_seed, step))
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss at step {step}: {parts}")
    lr = cfg.learning_rate * warmup_factor(step, cfg.warmup_steps)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=False)
    loss.backward()
    optimizer.step()
    parts.update(step=step, lr=lr)
    return parts


def _optimizer_tensors(optimizer, model) -> dict:
    out = {}
    names = {id(p): n for n, p in model.named_parameters()}
    for p, st in optimizer.state.items():
        name = names[id(p)]
        out[f"optim/{name}/exp_avg"] = st["exp_avg"]
        out[f"optim/{name}/exp_avg_sq"] = st["exp_avg_sq"]
    return out


def _restore_optimizer(optimizer, model, tensors: dict, opt_step: int):
    for name, p in model.named_parameters():
        key = f"optim/{name}/exp_avg"
        if key in tensors:
            optimizer.state[p] = {
                "step": torch.tensor(float(opt_step)),
                "exp_avg": tensors[key].clone(),
                "exp_avg_sq": tensors[f"optim/{name}/exp_avg_sq"].clone(),
            }


def save_training_checkpoint(path, model, optimizer, sched, cfg: TrainConfig, step: int):
    extra = {"step": step, "train_config": cfg.to_dict()}
    return save_checkpoint(path, model, sched, _optimizer_tensors(optimizer, model), extra)


@dataclass
class TrainResult:
    model: MotionDiffusionModel
    curve: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def train(data: TrainingData, model: MotionDiffusionModel, sched: NoiseSchedule, cfg: TrainConfig,
          ckpt_dir=None, resume=None, log_path=None, stop_at: int | None = None) -> TrainResult:
    """Run ``cfg.max_steps`` updates (or until ``stop_at``), checkpointing periodically.

    With ``resume`` the model, optimizer moments and step counter come from
    that checkpoint and training continues at the next step.
    """
    if len(data) == 0:
        raise ValueError("dataset is empty")
    optimizer = make_optimizer(model, cfg)
    start = 1
    if resume is not None:
        loaded, _, header, tensors = load_checkpoint(resume)
        model.load_state_dict(loaded.state_dict())
        done = int(header["extra"]["step"])
        _restore_optimizer(optimizer, model, tensors, done)
        start = done + 1
    else:
        model.fit_normalization(data.motions)
    ckpt_dir = Path(ckpt_dir) if ckpt_dir is not None else None
    log_file = open(log_path, "a", encoding="utf-8") if log_path is not None else None
    result = TrainResult(model)
    last = min(cfg.max_steps, stop_at) if stop_at is not None else cfg.max_steps
    try:
        for step in range(start, last + 1):
            parts = train_step(model, optimizer, data, sched, cfg, step)
            result.curve.append(parts)
            if log_file is not None:
                log_file.write(json.dumps(parts, sort_keys=True) + "\n")
            if ckpt_dir is not None and (step % cfg.ckpt_every == 0 or step == last):
                path = save_training_checkpoint(ckpt_dir / f"step_{step:06d}.ckpt", model, optimizer, sched, cfg, step)
                save_training_checkpoint(ckpt_dir / "last.ckpt", model, optimizer, sched, cfg, step)
                result.checkpoint = path
            if step % 100 == 0:
                log.info("step %d  L_da %.4f  total %.4f", step, parts["L_da"], parts["total"])
    finally:
        if log_file is not None:
            log_file.close()
    model.eval()
    return result


def new_model_for(cfg: TrainConfig, skeleton, fps: float, modality: str, vocab: Vocabulary | None = None,
                  seed: int | None = None) -> MotionDiffusionModel:
    torch.manual_seed(cfg.rng_seed if seed is None else seed)
    return build_model(skeleton, fps, modality, vocab, base_channels=cfg.base_channels,
                       channel_mults=cfg.channel_mults, heads=cfg.heads, attn_dim=cfg.attn_dim,
                       context_dim=cfg.context_dim)


def moving_average(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.shape[0] < window:
        return np.array([v.mean()])
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window


# loss configurations compared in the kinematic-loss ablation
ABLATIONS = {
    "L_da": {"loss_m": False, "loss_s": False, "loss_a": False},
    "L_da+L_m": {"loss_m": True, "loss_s": False, "loss_a": False},
    "L_da+L_m+L_s+L_a": {"loss_m": True, "loss_s": True, "loss_a": True},
}


def run_ablation(data: TrainingData, cfg: TrainConfig, skeleton, fps: float, modality: str = "audio",
                 labels=None, vocab: Vocabulary | None = None) -> dict[str, TrainResult]:
    """Train one model per loss configuration from the same initial weights and data order."""
    results = {}
    for label in labels or ABLATIONS:
        run_cfg = cfg.with_updates(**ABLATIONS[label])
        model = new_model_for(run_cfg, skeleton, fps, modality, vocab)
        results[label] = train(data, model, run_cfg.schedule(), run_cfg)
    return results
