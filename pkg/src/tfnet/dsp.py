"""Streaming STFT analysis/synthesis, power-law compression and WAV I/O.

Spectra are real tensors of shape ``[..., T, F, 2]`` (real/imag planes).
Frames are left-aligned with no center padding: frame ``t`` covers samples
``[t*hop, t*hop + window_len)``.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

SAMPLE_RATE = 16000


class InsufficientSamplesError(ValueError):
    pass


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 320
    hop_len: int = 80
    window: str = "sqrt_hann"

    def __post_init__(self):
        if self.window_len != 4 * self.hop_len:
            raise ValueError("window_len must be 4 * hop_len (75% overlap)")
        if self.window != "sqrt_hann":
            raise ValueError(f"unsupported window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.window_len // 2 + 1

    @property
    def cola_gain(self) -> float:
        # squared taper (periodic Hann) at 75% overlap sums to window_len / (2 * hop_len)
        return self.window_len / (2 * self.hop_len)

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.window_len) // self.hop_len

    def n_samples(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop_len + self.window_len


DEFAULT_STFT = StftConfig()


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"only {SAMPLE_RATE} Hz audio is supported")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def tensor(self, dtype=torch.float32) -> Tensor:
        return torch.as_tensor(self.samples, dtype=dtype)


def window(cfg: StftConfig = DEFAULT_STFT, dtype=torch.float32) -> Tensor:
    """Square-root periodic Hann taper, used for both analysis and synthesis."""
    return torch.hann_window(cfg.window_len, periodic=True, dtype=torch.float64).sqrt().to(dtype)


def cola_sum(cfg: StftConfig = DEFAULT_STFT, n_frames: int = 16) -> np.ndarray:
    """Overlap-added squared taper over ``n_frames`` frames."""
    w2 = window(cfg, torch.float64).numpy() ** 2
    out = np.zeros(cfg.n_samples(n_frames))
    for t in range(n_frames):
        out[t * cfg.hop_len:t * cfg.hop_len + cfg.window_len] += w2
    return out


def _frames(x: Tensor, cfg: StftConfig) -> Tensor:
    return x.unfold(-1, cfg.window_len, cfg.hop_len)


def stft(x: Tensor, cfg: StftConfig = DEFAULT_STFT) -> Tensor:
    """``[..., L]`` waveform to ``[..., T, F, 2]`` spectrum."""
    if x.shape[-1] < cfg.window_len:
        raise InsufficientSamplesError(
            f"insufficient samples: need at least {cfg.window_len}, got {x.shape[-1]}")
    frames = _frames(x, cfg) * window(cfg, x.dtype)
    return torch.view_as_real(torch.fft.rfft(frames, dim=-1))


def frame_spectrum(frames: Tensor, cfg: StftConfig = DEFAULT_STFT) -> Tensor:
    """Spectrum of already-cut ``[..., T, window_len]`` frames."""
    return torch.view_as_real(torch.fft.rfft(frames * window(cfg, frames.dtype), dim=-1))


def synthesis_frames(s: Tensor, cfg: StftConfig = DEFAULT_STFT) -> Tensor:
    """Inverse DFT of each frame, multiplied by the synthesis taper."""
    if s.shape[-1] != 2 or s.shape[-2] != cfg.n_bins:
        raise ValueError(f"expected [..., T, {cfg.n_bins}, 2] spectrum, got {tuple(s.shape)}")
    frames = torch.fft.irfft(torch.view_as_complex(s.contiguous()), n=cfg.window_len, dim=-1)
    return frames * window(cfg, frames.dtype)


def overlap_add(frames: Tensor, cfg: StftConfig = DEFAULT_STFT) -> Tensor:
    """Overlap-add ``[..., T, window_len]`` frames.

    Each hop-sized block accumulates its contributions oldest frame first,
    which is the same order a streaming decoder sees them in.
    """
    hop, n_seg = cfg.hop_len, cfg.window_len // cfg.hop_len
    T = frames.shape[-2]
    segs = frames.reshape(*frames.shape[:-1], n_seg, hop)
    n_blocks = T + n_seg - 1
    out = frames.new_zeros(*frames.shape[:-2], n_blocks, hop)
    for k in reversed(range(n_seg)):
        out = out + torch.nn.functional.pad(segs[..., k, :], (0, 0, k, n_seg - 1 - k))
    return out.reshape(*frames.shape[:-2], n_blocks * hop)


def inverse_envelope(n_frames: int, cfg: StftConfig = DEFAULT_STFT, dtype=torch.float32) -> Tensor:
    """Reciprocal of the overlap-added squared taper; zero where the taper vanishes.

    Equals ``1 / cola_gain`` away from the signal edges.
    """
    w2 = window(cfg, dtype) * window(cfg, dtype)
    env = overlap_add(w2.expand(n_frames, cfg.window_len), cfg)
    safe = env > 1e-6
    return torch.where(safe, 1.0 / torch.where(safe, env, torch.ones_like(env)), torch.zeros_like(env))


def istft(s: Tensor, cfg: StftConfig = DEFAULT_STFT) -> Tensor:
    """``[..., T, F, 2]`` spectrum to ``[..., (T-1)*hop + window_len]`` waveform.

    Least-squares overlap-add: ``istft(stft(x)) == x`` up to rounding, except
    where the taper is zero (the very first sample).
    """
    out = overlap_add(synthesis_frames(s, cfg), cfg)
    return out * inverse_envelope(s.shape[-3], cfg, out.dtype)


def _magnitude_factor(s: Tensor, exponent: float, eps: float) -> Tensor:
    # |z|^(exponent-1) via exp/log: torch.pow is not bit-stable across tensor shapes
    mag2 = s[..., 0] * s[..., 0] + s[..., 1] * s[..., 1]
    if eps:
        mag2 = mag2 + eps
    mag2 = mag2.clamp_min(torch.finfo(s.dtype).tiny)
    return torch.exp((0.5 * (exponent - 1.0)) * torch.log(mag2)).unsqueeze(-1)


def power_law_compress(s: Tensor, p: float = 0.3, eps: float = 0.0) -> Tensor:
    """Map each complex entry ``z`` to ``|z|**p * z/|z|``; zero stays zero.

    ``eps`` is added to ``|z|**2`` and only matters for gradients near zero.
    """
    if not p > 0:
        raise ValueError(f"power-law exponent must be positive, got {p}")
    if p > 1:
        raise ValueError(f"power-law exponent must be <= 1, got {p}")
    return s * _magnitude_factor(s, p, eps)


def power_law_expand(s: Tensor, p: float = 0.3) -> Tensor:
    """Inverse of :func:`power_law_compress`."""
    if not p > 0:
        raise ValueError(f"power-law exponent must be positive, got {p}")
    if p > 1:
        raise ValueError(f"power-law exponent must be <= 1, got {p}")
    return s * _magnitude_factor(s, 1.0 / p, 0.0)


def drop_nyquist(s: Tensor) -> Tensor:
    return s[..., :-1, :]


def restore_nyquist(s: Tensor) -> Tensor:
    return torch.cat([s, s.new_zeros(*s.shape[:-2], 1, 2)], dim=-2)


def read_wav(path: str | Path) -> Waveform:
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        rate = f.getframerate()
        data = f.readframes(f.getnframes())
    samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path: str | Path, w: Waveform):
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())
