"""Temporal filtering blocks: dilated TCM groups, group-wise GRU, and stacks of them.

All blocks map ``[B, T, C] -> [B, T, C]`` and take/return an explicit stream
state so that a sequence can be processed in chunks.
"""

from __future__ import annotations

from typing import Sequence

import torch
from torch import Tensor, nn

from .nn import BatchNorm, Conv1x1, DepthwiseConv1d, GroupGRU, PReLU

DEFAULT_DILATIONS = (1, 2, 4, 8)


class TcmBlock(nn.Module):
    """1x1 conv -> PReLU -> BN -> dilated depthwise conv -> PReLU -> BN -> 1x1 conv, plus residual."""

    def __init__(self, channels: int, hidden: int | None = None, kernel: int = 3, dilation: int = 1):
        super().__init__()
        hidden = hidden or channels
        self.conv_in = Conv1x1(channels, hidden)
        self.act_in = PReLU(hidden)
        self.norm_in = BatchNorm(hidden)
        self.depthwise = DepthwiseConv1d(hidden, kernel, dilation)
        self.act_dw = PReLU(hidden)
        self.norm_dw = BatchNorm(hidden)
        self.conv_out = Conv1x1(hidden, channels)

    def receptive_field(self) -> int:
        return 1 + self.depthwise.history_len

    def forward(self, x: Tensor, state: Tensor | None = None) -> tuple[Tensor, Tensor]:
        h = self.norm_in(self.act_in(self.conv_in(x)))
        h, state = self.depthwise(h, state)
        h = self.conv_out(self.norm_dw(self.act_dw(h)))
        return x + h, state


class TcmGroup(nn.Module):
    def __init__(self, channels: int, hidden: int | None = None, kernel: int = 3,
                 dilations: Sequence[int] = DEFAULT_DILATIONS):
        super().__init__()
        self.blocks = nn.ModuleList(TcmBlock(channels, hidden, kernel, d) for d in dilations)

    def receptive_field(self) -> int:
        return 1 + sum(b.receptive_field() - 1 for b in self.blocks)

    def forward(self, x: Tensor, state: list | None = None) -> tuple[Tensor, list]:
        state = state or [None] * len(self.blocks)
        new_state = []
        for block, s in zip(self.blocks, state):
            x, s = block(x, s)
            new_state.append(s)
        return x, new_state


class GGruBlock(nn.Module):
    """Channels split into contiguous groups, one GRU per group, residual around the block.

    A ``hidden`` width other than ``channels`` adds a 1x1 projection back to
    ``channels`` (used to size ablation arms).
    """

    def __init__(self, channels: int, n_groups: int = 4, hidden: int | None = None):
        super().__init__()
        if channels % n_groups:
            raise ValueError(f"channels ({channels}) must be divisible by n_groups ({n_groups})")
        hidden = hidden or channels
        if hidden % n_groups:
            raise ValueError(f"hidden ({hidden}) must be divisible by n_groups ({n_groups})")
        self.gru = GroupGRU(channels, n_groups, hidden)
        self.proj = Conv1x1(hidden, channels) if hidden != channels else None

    def forward(self, x: Tensor, state: Tensor | None = None) -> tuple[Tensor, Tensor]:
        y, h = self.gru(x, state)
        if self.proj is not None:
            y = self.proj(y)
        return x + y, h


def make_block(kind: str, channels: int, n_groups: int = 4, tcm_hidden: int | None = None,
               dilations: Sequence[int] = DEFAULT_DILATIONS, gru_hidden: int | None = None) -> nn.Module:
    if kind == "tcm":
        return TcmGroup(channels, tcm_hidden, dilations=dilations)
    if kind == "ggru":
        return GGruBlock(channels, n_groups, gru_hidden)
    if kind == "gru":
        return GGruBlock(channels, 1, gru_hidden)
    raise ValueError(f"unknown temporal block {kind!r}")


class TemporalStack(nn.Module):
    """Blocks applied in order.

    With ``mask_input`` each block input is concatenated with the per-frame
    loss mask and passed through a 1x1 adapter (identity on the features,
    zero on the mask channel at init).
    """

    def __init__(self, kinds: Sequence[str], channels: int, n_groups: int = 4,
                 tcm_hidden: int | None = None, mask_input: bool = False,
                 dilations: Sequence[int] = DEFAULT_DILATIONS, gru_hidden: int | None = None):
        super().__init__()
        self.kinds = list(kinds)
        self.blocks = nn.ModuleList(make_block(k, channels, n_groups, tcm_hidden, dilations, gru_hidden) for k in kinds)
        self.adapters = None
        if mask_input:
            self.adapters = nn.ModuleList(Conv1x1(channels + 1, channels) for _ in kinds)
            with torch.no_grad():
                for a in self.adapters:
                    a.weight.zero_()
                    a.weight[:channels].copy_(torch.eye(channels))

    def __len__(self):
        return len(self.blocks)

    def forward(self, x: Tensor, state: list | None = None,
                mask: Tensor | None = None) -> tuple[Tensor, list]:
        if state is None:
            state = [None] * len(self.blocks)
        elif len(state) != len(self.blocks):
            raise ValueError(f"stream state has {len(state)} entries for {len(self.blocks)} blocks")
        if self.adapters is not None and mask is None:
            raise ValueError("this stack expects a loss mask")
        new_state = []
        for i, (block, s) in enumerate(zip(self.blocks, state)):
            if self.adapters is not None:
                x = self.adapters[i](torch.cat([x, mask.unsqueeze(-1).to(x.dtype)], dim=-1))
            x, s = block(x, s)
            new_state.append(s)
        return x, new_state


def interleaved_stack(n_pairs: int, channels: int, **kwargs) -> TemporalStack:
    """TCM-first alternation of TCM groups and G-GRU blocks."""
    return TemporalStack(["tcm", "ggru"] * n_pairs, channels, **kwargs)


def is_interleaved(kinds: Sequence[str]) -> bool:
    return all(a != b for a, b in zip(kinds, kinds[1:]))
