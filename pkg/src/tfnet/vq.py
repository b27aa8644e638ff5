"""Group vector quantization with EMA codebooks."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .nn import Conv1x1, grouped_contract


@dataclass(frozen=True)
class VqConfig:
    latent: int = 120          # C', channels entering the quantizer
    n_groups: int = 3          # N
    codebook_size: int = 1024  # S
    decay: float = 0.99
    eps: float = 1e-5
    bypass: bool = False       # identity quantizer, for rate-distortion comparisons

    def __post_init__(self):
        if self.latent % self.n_groups:
            raise ValueError(f"latent width {self.latent} not divisible by {self.n_groups} groups")
        bits_per_index(self.codebook_size)

    @property
    def dim(self) -> int:
        return self.latent // self.n_groups

    @property
    def bits_per_frame(self) -> int:
        return self.n_groups * bits_per_index(self.codebook_size)


def bits_per_index(codebook_size: int) -> int:
    if codebook_size < 2 or codebook_size & (codebook_size - 1):
        raise ValueError(f"codebook size must be a power of two >= 2, got {codebook_size}")
    return codebook_size.bit_length() - 1


def bitrate_kbps(n_groups: int, codebook_size: int, hop_ms: float = 5.0) -> float:
    """Fixed-length coding rate: one index per group per hop."""
    return n_groups * bits_per_index(codebook_size) / hop_ms


def project_down(channels: int, latent: int, check: bool = True) -> Conv1x1:
    if check and latent >= channels:
        raise ValueError(f"quantizer width {latent} must be smaller than latent width {channels}")
    return Conv1x1(channels, latent)


def project_up(latent: int, channels: int, extra_inputs: int = 0, check: bool = True) -> Conv1x1:
    if check and latent >= channels:
        raise ValueError(f"quantizer width {latent} must be smaller than latent width {channels}")
    return Conv1x1(latent + extra_inputs, channels)


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, q):
        return q.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def straight_through(x: Tensor, q: Tensor) -> Tensor:
    """Forward value is exactly ``q``; the gradient goes to ``x`` unchanged."""
    return _StraightThrough.apply(x, q.detach())


def commitment_loss(x: Tensor, quantized: Tensor) -> Tensor:
    return ((x - quantized.detach()) ** 2).mean()


def nearest(x: Tensor, codebook: Tensor) -> Tensor:
    """Index of the nearest codeword per group; ties go to the lowest index.

    x: ``[..., N, K]``, codebook: ``[N, S, K]``. The ``|x|^2`` term is the same
    for every codeword and is left out.
    """
    x64, cb = x.detach().double(), codebook.detach().double()
    cross = grouped_contract(x64, cb.transpose(1, 2))
    return ((cb * cb).sum(-1) - 2.0 * cross).argmin(dim=-1)


class GroupVQ(nn.Module):
    def __init__(self, cfg: VqConfig):
        super().__init__()
        self.cfg = cfg
        N, S, K = cfg.n_groups, cfg.codebook_size, cfg.dim
        self.register_buffer("codebook", torch.randn(N, S, K))
        self.register_buffer("ema_count", torch.ones(N, S))
        self.register_buffer("ema_sum", self.codebook.clone())
        self.register_buffer("initialized", torch.zeros(()))

    def split(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.cfg.latent:
            raise ValueError(f"expected {self.cfg.latent} channels, got {x.shape[-1]}")
        return x.reshape(*x.shape[:-1], self.cfg.n_groups, self.cfg.dim)

    def dequantize(self, indices: Tensor) -> Tensor:
        """``[..., N]`` integer indices to ``[..., C']`` codewords."""
        g = torch.arange(self.cfg.n_groups)
        q = self.codebook[g, indices]
        return q.reshape(*indices.shape[:-1], self.cfg.latent)

    def quantize(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (quantized with straight-through gradient, indices ``[..., N]``)."""
        if self.cfg.bypass:
            return x, torch.zeros(*x.shape[:-1], self.cfg.n_groups, dtype=torch.long)
        idx = nearest(self.split(x), self.codebook)
        q = self.dequantize(idx).to(x.dtype)
        return straight_through(x, q), idx

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if self.training and not self.cfg.bypass and not self.initialized:
            self.init_from(x)
        return self.quantize(x)

    @torch.no_grad()
    def init_from(self, x: Tensor, seed: int = 0):
        """Seed every codebook with group vectors drawn from ``x``."""
        vecs = self.split(x.detach()).reshape(-1, self.cfg.n_groups, self.cfg.dim)
        gen = torch.Generator().manual_seed(seed)
        M, S = vecs.shape[0], self.cfg.codebook_size
        for g in range(self.cfg.n_groups):
            pick = torch.randperm(M, generator=gen)[:S] if M >= S else torch.randint(M, (S,), generator=gen)
            self.codebook[g] = vecs[pick, g].to(self.codebook.dtype)
        self.ema_sum.copy_(self.codebook)
        self.ema_count.fill_(1.0)
        self.initialized.fill_(1.0)

    @torch.no_grad()
    def ema_update(self, x: Tensor, indices: Tensor):
        """Move cluster counts and sums toward the batch statistics, then renormalize."""
        cfg = self.cfg
        vecs = self.split(x.detach()).reshape(-1, cfg.n_groups, cfg.dim).to(self.codebook.dtype)
        idx = indices.reshape(-1, cfg.n_groups)
        onehot = torch.nn.functional.one_hot(idx, cfg.codebook_size).to(vecs.dtype)  # [M, N, S]
        counts = onehot.sum(0)
        sums = torch.einsum("mns,mnk->nsk", onehot, vecs)
        g = cfg.decay
        self.ema_count.mul_(g).add_((1 - g) * counts)
        self.ema_sum.mul_(g).add_((1 - g) * sums)
        n = self.ema_count.sum(-1, keepdim=True)
        smoothed = (self.ema_count + cfg.eps) / (n + cfg.codebook_size * cfg.eps) * n
        self.codebook.copy_(self.ema_sum / smoothed.unsqueeze(-1))

    def dead_codes(self, threshold: float = 1e-3) -> int:
        return int((self.ema_count < threshold).sum())


def usage_entropy(indices: Tensor, codebook_size: int) -> float:
    """Mean per-group entropy (bits) of the empirical index distribution."""
    idx = indices.reshape(-1, indices.shape[-1])
    total = 0.0
    for g in range(idx.shape[1]):
        p = torch.bincount(idx[:, g], minlength=codebook_size).double()
        p = p[p > 0] / p.sum()
        total += float(-(p * p.log2()).sum())
    return total / idx.shape[1]


def kbps_label(cfg: VqConfig, hop_ms: float = 5.0) -> str:
    return f"{bitrate_kbps(cfg.n_groups, cfg.codebook_size, hop_ms):g} kbps"

