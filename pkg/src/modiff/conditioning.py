"""Audio and text front ends that produce context rows for the denoiser."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from scipy.io import wavfile
from scipy.signal import resample_poly

from .denoiser import ConditioningContext, cross_attention
from .motion import DimensionError

LOG_FLOOR = 1e-10


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform has non-finite samples")
        if not self.sample_rate > 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")

    @property
    def seconds(self) -> float:
        return self.samples.shape[0] / self.sample_rate


def read_wav(path) -> Waveform:
    """PCM16 or float32 RIFF; stereo is averaged to mono."""
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        data = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported WAV sample type {data.dtype}")
    if data.ndim == 2:
        data = data.mean(axis=1)
    return Waveform(data, float(rate))


def write_wav(path, w: Waveform, pcm16: bool = True) -> None:
    x = np.clip(w.samples, -1.0, 1.0)
    data = np.round(x * 32767.0).astype(np.int16) if pcm16 else x.astype(np.float32)
    wavfile.write(str(path), int(round(w.sample_rate)), data)


def resample(w: Waveform, target_rate: float) -> Waveform:
    """Polyphase windowed-sinc resampling; length round(len * target / source)."""
    if w.samples.size == 0:
        raise ValueError("cannot resample an empty waveform")
    if not target_rate > 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    ratio = Fraction(target_rate).limit_denominator(10000) / Fraction(w.sample_rate).limit_denominator(10000)
    y = resample_poly(w.samples, ratio.numerator, ratio.denominator)
    n_out = int(round(w.samples.shape[0] * target_rate / w.sample_rate))
    if y.shape[0] >= n_out:
        y = y[:n_out]
    else:
        y = np.pad(y, (0, n_out - y.shape[0]))
    return Waveform(y, float(target_rate))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: float, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular filters with unit peaks, equally spaced on the mel scale; ``(k, n_fft//2+1)``."""
    bins = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lo) / (mid - lo)
    falling = (hi - bins[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_band_centers(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (m, k) natural-log power
    hop: int
    sample_rate: float
    fmin: float
    fmax: float

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop


def mel_spectrogram(
    w: Waveform,
    n_mels: int = 80,
    hop: int = 512,
    window: int = 1024,
    fmin: float = 0.0,
    fmax: float = 8000.0,
) -> MelSpectrogram:
    """Centered (zero-padded) STFT power, periodic Hann, through a mel filterbank, then log.

    Frame count is ``1 + len // hop``.
    """
    if fmax > w.sample_rate / 2:
        raise ValueError(f"fmax {fmax} Hz exceeds Nyquist {w.sample_rate / 2} Hz")
    if window < hop:
        raise ValueError("window must be at least the hop length")
    # zero padding: reflecting a tone at the edges adds a kink that smears the last frame
    x = np.pad(w.samples, window // 2)
    n_frames = 1 + (x.shape[0] - window) // hop
    idx = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None]
    win = np.hanning(window + 1)[:-1]
    power = np.abs(np.fft.rfft(x[idx] * win, axis=-1)) ** 2
    fb = mel_filterbank(w.sample_rate, window, n_mels, fmin, fmax)
    return MelSpectrogram(np.log(np.maximum(power @ fb.T, LOG_FLOOR)), hop, w.sample_rate, fmin, fmax)


def project_audio(mel, weight: torch.Tensor, bias: torch.Tensor) -> ConditioningContext:
    """Linear map of log-mel frames onto context rows: ``mel @ weight + bias``."""
    frames = mel.frames if isinstance(mel, MelSpectrogram) else mel
    frames = torch.as_tensor(frames, dtype=weight.dtype)
    if frames.shape[-1] != weight.shape[0]:
        raise DimensionError(f"mel has {frames.shape[-1]} bands, projection expects {weight.shape[0]}")
    return ConditioningContext(frames @ weight + bias, "audio")


class AudioProjector(nn.Module):
    def __init__(self, n_mels: int, context_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_mels, context_dim))
        self.bias = nn.Parameter(torch.zeros(context_dim))
        bound = 1.0 / math.sqrt(n_mels)
        nn.init.uniform_(self.weight, -bound, bound)

    def forward(self, mel) -> ConditioningContext:
        return project_audio(mel, self.weight, self.bias)


PAD, UNK = "<pad>", "<unk>"


def tokenize(text: str) -> list[str]:
    return re.findall(r"[a-z0-9']+", text.lower())


class Vocabulary:
    """Token <-> id map with ``<pad>`` = 0 and ``<unk>`` = 1."""

    def __init__(self, tokens=()):
        self.itos = [PAD, UNK]
        self.stoi = {PAD: 0, UNK: 1}
        for tok in tokens:
            self.add(tok)

    def add(self, tok: str) -> int:
        if tok not in self.stoi:
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)
        return self.stoi[tok]

    def __len__(self):
        return len(self.itos)

    @classmethod
    def build(cls, corpus) -> "Vocabulary":
        tokens = sorted({tok for line in corpus for tok in tokenize(line)})
        return cls(tokens)

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(tok, 1) for tok in tokenize(text)]

    def save(self, path) -> None:
        lines = [f"{i}\t{tok}" for i, tok in enumerate(self.itos)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        vocab = cls()
        entries = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line:
                i, tok = line.split("\t", 1)
                entries.append((int(i), tok))
        entries.sort()
        if [i for i, _ in entries] != list(range(len(entries))) or entries[:2] != [(0, PAD), (1, UNK)]:
            raise ValueError(f"{path}: malformed vocabulary file")
        for _, tok in entries[2:]:
            vocab.add(tok)
        return vocab

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos) -> "Vocabulary":
        if list(itos[:2]) != [PAD, UNK]:
            raise ValueError("vocabulary must start with <pad>, <unk>")
        return cls(itos[2:])


def positional_encoding(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    freqs = 10000.0 ** (-torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    pe = torch.zeros(n, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freqs)
    pe[:, 1::2] = torch.cos(pos * freqs)[:, : dim // 2]
    return pe


class _EncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.w_q = nn.Parameter(torch.empty(dim, dim))
        self.w_k = nn.Parameter(torch.empty(dim, dim))
        self.w_v = nn.Parameter(torch.empty(dim, dim))
        self.w_o = nn.Parameter(torch.empty(dim, dim))
        for w in (self.w_q, self.w_k, self.w_v, self.w_o):
            nn.init.uniform_(w, -1 / math.sqrt(dim), 1 / math.sqrt(dim))
        self.ff_norm = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.SiLU(), nn.Linear(2 * dim, dim))

    def forward(self, x):
        h = self.norm(x)
        x = x + cross_attention(h, h, self.w_q, self.w_k, self.w_v, self.w_o, self.heads)
        return x + self.ff(self.ff_norm(x))


class TextEncoder(nn.Module):
    """Learned token embeddings + positions -> 2 self-attention layers -> MLP."""

    def __init__(self, vocab_size: int, dim: int, context_dim: int, heads: int = 4, layers: int = 2):
        super().__init__()
        if dim % heads:
            raise ValueError(f"text dim {dim} not divisible by {heads} heads")
        self.dim = dim
        # pad is an ordinary learned token: padded rows stay visible to attention, so it must train
        self.embed = nn.Embedding(vocab_size, dim)
        self.layers = nn.ModuleList(_EncoderLayer(dim, heads) for _ in range(layers))
        self.proj = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, context_dim))

    def forward(self, tokens) -> ConditioningContext:
        ids = torch.as_tensor(tokens, dtype=torch.long)
        if ids.numel() == 0:
            raise ValueError("cannot encode an empty token sequence")
        # ids outside the vocabulary fall back to <unk>
        ids = torch.where((ids >= 0) & (ids < self.embed.num_embeddings), ids, torch.ones_like(ids))
        h = self.embed(ids)
        h = h + positional_encoding(ids.shape[-1], self.dim).to(h.dtype)
        for layer in self.layers:
            h = layer(h)
        return ConditioningContext(self.proj(h), "text")


def encode_text(tokens, encoder: TextEncoder) -> ConditioningContext:
    return encoder(tokens)


def pad_tokens(seqs: list[list[int]]) -> torch.Tensor:
    n = max(len(s) for s in seqs)
    return torch.tensor([s + [0] * (n - len(s)) for s in seqs], dtype=torch.long)
