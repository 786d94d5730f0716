"""1D U-Net noise predictor with cross-modal attention and a gradient helper.

The network maps a noisy motion ``(B, N, 3J)``, integer steps ``(B,)`` and an
optional context ``(B, m, d)`` to a noise estimate of the motion's shape. The
temporal axis is halved three times (N -> N/8) and restored on the way up.

Choices the architecture leaves open, fixed here:
  * GroupNorm in residual blocks, LayerNorm before attention / feed-forward.
  * SiLU activations everywhere.
  * Stride-2 convolution to downsample; nearest-neighbour upsample + conv.
  * The time embedding is added to features after each block's first conv.
  * Each attention block owns its own context projection (no sharing).
  * A 1x1 convolution carries the input straight to the output, next to the
    normalised head; both start at zero so an untrained model predicts 0.
    The skip's output is multiplied by a fixed gain so that it can reach the
    identity within a few hundred optimiser steps.
  * Lengths not divisible by 8 are right-padded by edge replication and the
    output is cropped back.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .motion import DimensionError

MODALITIES = ("audio", "text", "none")


@dataclass
class ConditioningContext:
    """Context rows ``(m, d)`` or ``(B, m, d)`` plus the modality they came from."""

    rows: torch.Tensor | None
    modality: str = "none"

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.modality != "none":
            if self.rows is None or self.rows.shape[-2] < 1:
                raise ValueError("conditioned context needs at least one row")
            if not torch.isfinite(self.rows).all():
                raise ValueError("context rows contain non-finite values")

    @property
    def is_empty(self) -> bool:
        return self.modality == "none"


@dataclass
class DenoiserConfig:
    in_channels: int
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    heads: int = 4
    attn_dim: int = 64
    context_dim: int = 64
    ff_mult: int = 2
    max_groups: int = 8
    zero_init_output: bool = True
    pad_policy: str = "edge"
    skip_gain: float = 8.0

    def __post_init__(self):
        self.channel_mults = tuple(int(m) for m in self.channel_mults)
        if len(self.channel_mults) != 3:
            raise ValueError("the U-Net has exactly three downsampling levels")
        if self.attn_dim % self.heads:
            raise ValueError(f"attention dim {self.attn_dim} not divisible by {self.heads} heads")
        if self.base_channels % 2:
            raise ValueError("base_channels must be even (sinusoidal embedding width)")
        if self.pad_policy not in ("edge", "error"):
            raise ValueError(f"unknown pad policy {self.pad_policy!r}")

    @property
    def time_dim(self) -> int:
        return 4 * self.base_channels

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """``(B,)`` steps -> ``(B, dim)``: sines then cosines at 10000^(-2i/dim)."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    i = torch.arange(half, dtype=torch.float64)
    freqs = 10000.0 ** (-2.0 * i / dim)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def time_embedding(t: int, dim: int) -> np.ndarray:
    return sinusoidal_embedding(torch.tensor([t]), dim)[0].numpy()


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Row-stochastic scaled dot-product weights softmax(q k^T / sqrt(d_head))."""
    return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)


def cross_attention(x, c, w_q, w_k, w_v, w_o=None, heads: int = 1):
    """Multi-head attention with queries from ``x`` and keys/values from ``c``.

    ``x`` is ``(..., n, dx)`` and ``c`` is ``(..., m, dc)``; projection weights
    are ``(dx, d)``, ``(dc, d)``, ``(dc, d)`` applied as ``x @ w``. With
    ``c = x`` this is self-attention. ``w_o`` of ``(d, d_out)`` maps the
    concatenated heads back; ``None`` skips the output projection.
    """
    if x.shape[-1] != w_q.shape[0] or c.shape[-1] != w_k.shape[0] or c.shape[-1] != w_v.shape[0]:
        raise DimensionError("attention projection sizes do not match the inputs")
    d = w_q.shape[1]
    if d % heads or w_k.shape[1] != d or w_v.shape[1] != d:
        raise DimensionError(f"attention dim {d} inconsistent across projections / {heads} heads")
    dh = d // heads

    def split(z):
        return z.reshape(*z.shape[:-1], heads, dh).transpose(-2, -3)

    q, k, v = split(x @ w_q), split(c @ w_k), split(c @ w_v)
    out = attention_weights(q, k) @ v
    out = out.transpose(-2, -3).reshape(*x.shape[:-1], d)
    return out if w_o is None else out @ w_o


def _groups(ch: int, max_groups: int) -> int:
    for g in range(min(max_groups, ch), 0, -1):
        if ch % g == 0:
            return g
    return 1


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, max_groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch, max_groups), in_ch)
        self.conv1 = nn.Conv1d(in_ch, out_ch, 3, padding=1)
        self.time = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch, max_groups), out_ch)
        self.conv2 = nn.Conv1d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv1d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(F.silu(temb))[:, :, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossModalBlock(nn.Module):
    """Attention (cross when context is given, self otherwise) plus feed-forward."""

    def __init__(self, ch: int, cfg: DenoiserConfig):
        super().__init__()
        self.heads = cfg.heads
        self.norm = nn.LayerNorm(ch)
        self.context_proj = nn.Linear(cfg.context_dim, ch)
        d = cfg.attn_dim
        self.w_q = nn.Parameter(torch.empty(ch, d))
        self.w_k = nn.Parameter(torch.empty(ch, d))
        self.w_v = nn.Parameter(torch.empty(ch, d))
        self.w_o = nn.Parameter(torch.empty(d, ch))
        for w in (self.w_q, self.w_k, self.w_v, self.w_o):
            bound = 1.0 / math.sqrt(w.shape[0])
            nn.init.uniform_(w, -bound, bound)
        self.ff_norm = nn.LayerNorm(ch)
        self.ff = nn.Sequential(nn.Linear(ch, cfg.ff_mult * ch), nn.SiLU(), nn.Linear(cfg.ff_mult * ch, ch))

    def forward(self, x, context=None):
        h = x.transpose(1, 2)
        q_in = self.norm(h)
        src = q_in if context is None else self.context_proj(context)
        h = h + cross_attention(q_in, src, self.w_q, self.w_k, self.w_v, self.w_o, self.heads)
        h = h + self.ff(self.ff_norm(h))
        return h.transpose(1, 2)


class Denoiser(nn.Module):
    """Noise predictor f(M_t, t, c)."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.in_channels = cfg.in_channels
        base, tdim = cfg.base_channels, cfg.time_dim
        chans = [base * m for m in cfg.channel_mults]
        self.time_mlp = nn.Sequential(nn.Linear(base, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.inp = nn.Conv1d(cfg.in_channels, base, 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = base
        for ch in chans:
            self.down_res.append(ResidualBlock(prev, ch, tdim, cfg.max_groups))
            self.down_attn.append(CrossModalBlock(ch, cfg))
            self.downsample.append(nn.Conv1d(ch, ch, 3, stride=2, padding=1))
            prev = ch

        self.mid_res = ResidualBlock(prev, prev, tdim, cfg.max_groups)
        self.mid_attn = CrossModalBlock(prev, cfg)

        self.upsample = nn.ModuleList()
        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        for ch in reversed(chans):
            self.upsample.append(nn.Conv1d(prev, prev, 3, padding=1))
            self.up_res.append(ResidualBlock(prev + ch, ch, tdim, cfg.max_groups))
            self.up_attn.append(CrossModalBlock(ch, cfg))
            prev = ch

        self.out_norm = nn.GroupNorm(_groups(prev, cfg.max_groups), prev)
        self.out = nn.Conv1d(prev, cfg.in_channels, 3, padding=1)
        # linear path from input to output: at high noise the target is ~ the input itself
        self.out_skip = nn.Conv1d(cfg.in_channels, cfg.in_channels, 1, bias=False)
        if cfg.zero_init_output:
            for w in (self.out.weight, self.out.bias, self.out_skip.weight):
                nn.init.zeros_(w)

    def _context(self, context, batch: int):
        if context is None:
            return None
        if isinstance(context, ConditioningContext):
            if context.is_empty:
                return None
            context = context.rows
        context = context.to(self.inp.weight.dtype)
        if context.ndim == 2:
            context = context.unsqueeze(0)
        if context.shape[0] == 1 and batch > 1:
            context = context.expand(batch, -1, -1)
        if context.shape[-1] != self.cfg.context_dim:
            raise DimensionError(f"context dim {context.shape[-1]} != {self.cfg.context_dim}")
        return context

    def forward(self, x: torch.Tensor, t: torch.Tensor, context=None) -> torch.Tensor:
        if x.ndim == 2:
            return self.forward(x.unsqueeze(0), t, context)[0]
        if x.ndim != 3 or x.shape[-1] != self.in_channels:
            raise DimensionError(f"expected (B, N, {self.in_channels}) input, got {tuple(x.shape)}")
        B, N, _ = x.shape
        pad = (-N) % 8
        if pad:
            if self.cfg.pad_policy == "error":
                raise DimensionError(f"sequence length {N} is not divisible by 8")
            x = torch.cat([x, x[:, -1:].expand(B, pad, -1)], dim=1)
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() == 1:
            t = t.expand(B)
        ctx = self._context(context, B)

        temb = self.time_mlp(sinusoidal_embedding(t, self.cfg.base_channels).to(x.dtype))
        h = self.inp(x.transpose(1, 2))
        skips = []
        for res, attn, down in zip(self.down_res, self.down_attn, self.downsample):
            h = attn(res(h, temb), ctx)
            skips.append(h)
            h = down(h)
        h = self.mid_attn(self.mid_res(h, temb), ctx)
        for up, res, attn in zip(self.upsample, self.up_res, self.up_attn):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = attn(res(torch.cat([h, skips.pop()], dim=1), temb), ctx)
        out = self.out(F.silu(self.out_norm(h))) + self.cfg.skip_gain * self.out_skip(x.transpose(1, 2))
        return out.transpose(1, 2)[:, :N]


class NumericalError(FloatingPointError):
    pass


def gradients(model: nn.Module, loss_closure: Callable[[], torch.Tensor]) -> dict[str, torch.Tensor]:
    """d(loss)/d(theta) for every named parameter of ``model``.

    Parameters the loss does not touch get an exact zero gradient.
    """
    params = dict(model.named_parameters())
    for name, p in params.items():
        if not torch.isfinite(p).all():
            raise NumericalError(f"parameter {name} holds non-finite values")
    loss = loss_closure()
    if not torch.isfinite(loss).all():
        raise NumericalError(f"loss is non-finite ({loss.item()})")
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    out = {}
    for name, g in zip(names, grads):
        if g is None:
            g = torch.zeros_like(params[name])
        if not torch.isfinite(g).all():
            raise NumericalError(f"gradient of {name} is non-finite")
        out[name] = g.detach()
    return out


def finite_difference_check(model: nn.Module, loss_closure, h: float = 1e-5, floor: float = 1e-8):
    """Compare analytic gradients with central differences, one scalar at a time.

    Returns the array of relative errors ``|a - n| / max(|a|, |n|, floor)``.
    """
    analytic = gradients(model, loss_closure)
    errs = []
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            g = analytic[name].reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_closure().item()
                flat[i] = orig - h
                down = loss_closure().item()
                flat[i] = orig
                num = (up - down) / (2 * h)
                a = g[i].item()
                errs.append(abs(a - num) / max(abs(a), abs(num), floor))
    return np.asarray(errs)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
