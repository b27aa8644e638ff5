"""Causal layer primitives on channels-last tensors.

Activations are ``[batch, T, F, C]`` for the 2-D layers and ``[batch, T, C]``
for the temporal ones. Gradients come from torch autograd, except the grouped
GRU recurrence, which has a hand-written backward through time.

Every contraction goes through :func:`contract`. Under :func:`exact_kernels`
it accumulates in a fixed order with plain elementwise ops, so a frame's
output is bit-identical whether it is computed alone or inside a long
sequence (BLAS picks different kernels for different shapes).
"""

from __future__ import annotations

import contextlib
import json
import math
import struct
import threading
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

_mode = threading.local()


def exact_enabled() -> bool:
    return getattr(_mode, "exact", False)


@contextlib.contextmanager
def exact_kernels(enabled: bool = True):
    prev = exact_enabled()
    _mode.exact = enabled
    try:
        yield
    finally:
        _mode.exact = prev


def contract(x: Tensor, w: Tensor) -> Tensor:
    """``x[..., K] @ w[K, N]``, shape-independent under :func:`exact_kernels`."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"contraction mismatch: {tuple(x.shape)} @ {tuple(w.shape)}")
    if not exact_enabled():
        return x @ w
    acc = x[..., 0:1] * w[0]
    for k in range(1, w.shape[0]):
        acc = acc + x[..., k:k + 1] * w[k]
    return acc


def grouped_contract(x: Tensor, w: Tensor) -> Tensor:
    """``x[..., G, K]`` times per-group ``w[G, K, N]`` -> ``[..., G, N]``."""
    if not exact_enabled():
        return torch.einsum("...gk,gkn->...gn", x, w)
    acc = x[..., 0:1] * w[:, 0]
    for k in range(1, w.shape[1]):
        acc = acc + x[..., k:k + 1] * w[:, k]
    return acc


def sigmoid(x: Tensor) -> Tensor:
    # torch.sigmoid differs by an ulp between its vector and scalar paths
    return 0.5 * (1.0 + torch.tanh(0.5 * x))


def _check_4d(x: Tensor, cin: int):
    if x.dim() != 4 or x.shape[-1] != cin:
        raise ValueError(f"expected [batch, T, F, {cin}] input, got {tuple(x.shape)}")


def _time_history(x: Tensor, n: int, history: Tensor | None) -> Tensor:
    if n == 0:
        return x
    if history is None:
        pad = [0, 0] * (x.dim() - 2) + [n, 0]
        return F.pad(x, pad)
    if history.shape[1] != n or history.shape[2:] != x.shape[2:]:
        raise ValueError(f"history shape {tuple(history.shape)} does not match input {tuple(x.shape)}")
    return torch.cat([history, x], dim=1)


def freq_out_size(f_in: int, stride: int) -> int:
    return -(-f_in // stride)


def causal_conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None, stride_f: int = 1,
                  dilation_t: int = 1, history: Tensor | None = None) -> Tensor:
    """Causal in T (left padded), strided in F with ``F_out = ceil(F_in / stride_f)``.

    ``k`` is ``[kt, kf, cin, cout]``; tap ``kt-1`` sees the current frame.
    ``history`` replaces the zero padding with the previous ``(kt-1)*dilation_t``
    input frames.
    """
    kt, kf, cin, cout = k.shape
    _check_4d(x, cin)
    span = (kt - 1) * dilation_t
    xp = _time_history(x, span, history)
    f_in = x.shape[2]
    f_out = freq_out_size(f_in, stride_f)
    pad_f = max((f_out - 1) * stride_f + kf - f_in, 0)
    xp = F.pad(xp, (0, 0, 0, pad_f))
    if not exact_enabled():
        y = F.conv2d(xp.permute(0, 3, 1, 2), k.permute(3, 2, 0, 1), stride=(1, stride_f),
                     dilation=(dilation_t, 1))
        y = y.permute(0, 2, 3, 1)[:, :, :f_out]
        return y if bias is None else y + bias
    # [B, T, F', C, kt] -> [B, T, Fo, C, kt, kf]
    cols = xp.unfold(1, span + 1, 1)[..., ::dilation_t]
    cols = cols.unfold(2, kf, stride_f)[:, :, :f_out]
    cols = cols.permute(0, 1, 2, 4, 5, 3).reshape(*cols.shape[:3], kt * kf * cin)
    y = contract(cols, k.reshape(kt * kf * cin, cout))
    return y if bias is None else y + bias


def causal_deconv2d(x: Tensor, k: Tensor, bias: Tensor | None = None, stride_f: int = 1,
                    history: Tensor | None = None) -> Tensor:
    """Transposed convolution along F (``F_out = F_in * stride_f``), causal conv along T.

    Input bin ``f`` with kernel tap ``j`` lands on output bin ``f*stride_f + j``;
    contributions past the last output bin are cropped. ``history`` holds the
    previous ``kt-1`` input frames.
    """
    kt, kf, cin, cout = k.shape
    _check_4d(x, cin)
    B, T, f_in, _ = x.shape
    if not exact_enabled():
        xp = _time_history(x, kt - 1, history)
        y = F.conv_transpose2d(xp.permute(0, 3, 1, 2), k.flip(0).permute(2, 3, 0, 1), stride=(1, stride_f))
        y = y.permute(0, 2, 3, 1)[:, kt - 1:kt - 1 + T, :f_in * stride_f]
        return y if bias is None else y + bias
    x = _stuff(x, stride_f)
    xp = _time_history(x, kt - 1, _stuff(history, stride_f))
    xp = F.pad(xp, (0, 0, kf - 1, 0))
    cols = xp.unfold(1, kt, 1).unfold(2, kf, 1)
    cols = cols.permute(0, 1, 2, 4, 5, 3).reshape(B, T, f_in * stride_f, kt * kf * cin)
    y = contract(cols, k.flip(1).reshape(kt * kf * cin, cout))
    return y if bias is None else y + bias


def _stuff(x: Tensor | None, stride: int) -> Tensor | None:
    """Insert ``stride-1`` zero bins after every frequency bin."""
    if x is None or stride == 1:
        return x
    B, T, f_in, C = x.shape
    zeros = x.new_zeros(B, T, f_in, stride - 1, C)
    return torch.cat([x.unsqueeze(3), zeros], dim=3).reshape(B, T, f_in * stride, C)


def depthwise_dilated_conv1d(x: Tensor, k: Tensor, bias: Tensor | None = None, dilation: int = 1,
                             history: Tensor | None = None) -> Tensor:
    """Per-channel causal conv over ``[batch, T, C]`` with kernel ``[kt, C]``."""
    kt, C = k.shape
    if x.dim() != 3 or x.shape[-1] != C:
        raise ValueError(f"expected [batch, T, {C}] input, got {tuple(x.shape)}")
    T = x.shape[1]
    xp = _time_history(x, (kt - 1) * dilation, history)
    y = xp[:, 0:T] * k[0]
    for tap in range(1, kt):
        y = y + xp[:, tap * dilation:tap * dilation + T] * k[tap]
    return y if bias is None else y + bias


def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = contract(x, w)
    return y if b is None else y + b


def prelu(x: Tensor, slopes: Tensor) -> Tensor:
    return torch.where(x >= 0, x, slopes * x)


def batch_norm(x: Tensor, weight: Tensor, bias: Tensor, running_mean: Tensor, running_var: Tensor,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel (last dim) normalization over every other axis."""
    if training:
        dims = tuple(range(x.dim() - 1))
        mean = x.mean(dim=dims)
        var = x.var(dim=dims, unbiased=False)
        with torch.no_grad():
            n = x.numel() // x.shape[-1]
            running_mean.mul_(1 - momentum).add_(momentum * mean.detach())
            running_var.mul_(1 - momentum).add_(momentum * var.detach() * n / max(n - 1, 1))
        return (x - mean) / torch.sqrt(var + eps) * weight + bias
    scale = weight / torch.sqrt(running_var + eps)
    shift = bias - running_mean * scale
    return x * scale + shift


def gru_cell(x_t: Tensor, h_prev: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor) -> Tensor:
    """One GRU step; gate order (reset, update, candidate) along the last axis.

    ``w_ih`` is ``[Cin, 3H]``, ``w_hh`` is ``[H, 3H]``, ``b`` is ``[3H]``.
    """
    H = h_prev.shape[-1]
    gi = contract(x_t, w_ih) + b
    gh = contract(h_prev, w_hh)
    r = sigmoid(gi[..., :H] + gh[..., :H])
    z = sigmoid(gi[..., H:2 * H] + gh[..., H:2 * H])
    n = torch.tanh(gi[..., 2 * H:] + r * gh[..., 2 * H:])
    return (1 - z) * n + z * h_prev


class _GroupGruRecurrence(torch.autograd.Function):
    """Recurrent part of a grouped GRU with hand-written backprop through time.

    Autograd would record a dozen small ops per step; a 600-frame clip with
    several recurrent blocks then spends most of its backward pass in graph
    bookkeeping.
    """

    @staticmethod
    def forward(ctx, gi, h0, w_hh):
        B, T, G, H3 = gi.shape
        H = H3 // 3
        gi_t = gi.permute(1, 2, 0, 3)              # [T, G, B, 3H]
        h = h0.permute(1, 0, 2).contiguous()       # [G, B, H]
        hs = gi.new_empty(T + 1, G, B, H)
        gates = gi.new_empty(T, G, B, 4 * H)       # r, z, n, U_n h
        hs[0] = h
        for t in range(T):
            gh = torch.bmm(h, w_hh)
            a = gi_t[t]
            rz = torch.sigmoid(a[..., :2 * H] + gh[..., :2 * H])
            r, z = rz[..., :H], rz[..., H:]
            ghn = gh[..., 2 * H:]
            n = torch.tanh(a[..., 2 * H:] + r * ghn)
            h = n + z * (h - n)
            hs[t + 1] = h
            gates[t, ..., :2 * H] = rz
            gates[t, ..., 2 * H:3 * H] = n
            gates[t, ..., 3 * H:] = ghn
        ctx.save_for_backward(hs, gates, w_hh)
        return hs[1:].permute(2, 0, 1, 3)

    @staticmethod
    def backward(ctx, dy):
        hs, gates, w_hh = ctx.saved_tensors
        T, G, B, H4 = gates.shape
        H = H4 // 4
        dy = dy.permute(1, 2, 0, 3)                # [T, G, B, H]
        w_t = w_hh.transpose(1, 2)
        dgh = gates.new_empty(T, G, B, 3 * H)
        dgi = gates.new_empty(T, G, B, 3 * H)
        dh = torch.zeros_like(hs[0])
        for t in range(T - 1, -1, -1):
            dh = dh + dy[t]
            g = gates[t]
            r, z, n, ghn = g[..., :H], g[..., H:2 * H], g[..., 2 * H:3 * H], g[..., 3 * H:]
            h_prev = hs[t]
            dn = dh * (1 - z) * (1 - n * n)
            dr = dn * ghn * r * (1 - r)
            dz = dh * (h_prev - n) * z * (1 - z)
            dgi[t, ..., :H] = dr
            dgi[t, ..., H:2 * H] = dz
            dgi[t, ..., 2 * H:] = dn
            dgh[t, ..., :2 * H] = dgi[t, ..., :2 * H]
            dgh[t, ..., 2 * H:] = dn * r
            dh = dh * z + torch.bmm(dgh[t], w_t)
        dw = torch.einsum("tgbh,tgbk->ghk", hs[:-1], dgh)
        return dgi.permute(2, 0, 1, 3), dh.permute(1, 0, 2), dw


def grouped_gru(x: Tensor, h0: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Independent GRUs over channel groups.

    x: ``[B, T, G, Cg]``, h0: ``[B, G, Hg]``, w_ih: ``[G, Cg, 3Hg]``,
    w_hh: ``[G, Hg, 3Hg]``, b: ``[G, 3Hg]``. Returns ``([B, T, G, Hg], h_T)``.
    """
    G, Hg = w_hh.shape[0], w_hh.shape[1]
    if not exact_enabled():
        gi = torch.einsum("btgk,gkn->btgn", x, w_ih) + b
        y = _GroupGruRecurrence.apply(gi, h0, w_hh)
        return y, y[:, -1]
    gi = grouped_contract(x, w_ih) + b
    h = h0
    outs = []
    for t in range(x.shape[1]):
        gh = grouped_contract(h, w_hh)
        g_t = gi[:, t]
        r = sigmoid(g_t[..., :Hg] + gh[..., :Hg])
        z = sigmoid(g_t[..., Hg:2 * Hg] + gh[..., Hg:2 * Hg])
        n = torch.tanh(g_t[..., 2 * Hg:] + r * gh[..., 2 * Hg:])
        h = (1 - z) * n + z * h
        outs.append(h)
    return torch.stack(outs, dim=1), h


def gru_param_count(c_in: int, hidden: int) -> int:
    return 3 * (c_in * hidden + hidden * hidden + hidden)


# ---------------------------------------------------------------------------
# Modules


def _uniform(shape: Sequence[int], fan_in: int) -> nn.Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    return nn.Parameter(torch.empty(*shape).uniform_(-bound, bound))


class Conv1x1(nn.Module):
    def __init__(self, c_in: int, c_out: int, bias: bool = True):
        super().__init__()
        self.weight = _uniform((c_in, c_out), c_in)
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv1x1(x, self.weight, self.bias)


class PReLU(nn.Module):
    def __init__(self, channels: int, init: float = 0.25):
        super().__init__()
        self.weight = nn.Parameter(torch.full((channels,), init))

    def forward(self, x: Tensor) -> Tensor:
        return prelu(x, self.weight)


class BatchNorm(nn.Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                          self.training, self.momentum, self.eps)


class CausalConv2d(nn.Module):
    """Stateful wrapper of :func:`causal_conv2d`; ``forward`` returns ``(y, state)``."""

    def __init__(self, c_in: int, c_out: int, kt: int = 2, kf: int = 3, stride_f: int = 1,
                 dilation_t: int = 1, bias: bool = True):
        super().__init__()
        self.stride_f, self.dilation_t = stride_f, dilation_t
        self.weight = _uniform((kt, kf, c_in, c_out), kt * kf * c_in)
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None

    @property
    def history_len(self) -> int:
        return (self.weight.shape[0] - 1) * self.dilation_t

    def forward(self, x: Tensor, state: Tensor | None = None) -> tuple[Tensor, Tensor]:
        y = causal_conv2d(x, self.weight, self.bias, self.stride_f, self.dilation_t, state)
        return y, _next_history(x, state, self.history_len)


class CausalDeconv2d(nn.Module):
    def __init__(self, c_in: int, c_out: int, kt: int = 2, kf: int = 3, stride_f: int = 1,
                 bias: bool = True):
        super().__init__()
        self.stride_f = stride_f
        self.weight = _uniform((kt, kf, c_in, c_out), kt * kf * c_in)
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None

    @property
    def history_len(self) -> int:
        return self.weight.shape[0] - 1

    def forward(self, x: Tensor, state: Tensor | None = None) -> tuple[Tensor, Tensor]:
        y = causal_deconv2d(x, self.weight, self.bias, self.stride_f, state)
        return y, _next_history(x, state, self.history_len)


def _next_history(x: Tensor, state: Tensor | None, n: int) -> Tensor:
    if n == 0:
        return x[:, :0]
    full = x if state is None else torch.cat([state, x], dim=1)
    if full.shape[1] < n:
        full = _time_history(full, n - full.shape[1], None)
    return full[:, full.shape[1] - n:]


class DepthwiseConv1d(nn.Module):
    def __init__(self, channels: int, kt: int = 3, dilation: int = 1):
        super().__init__()
        self.dilation = dilation
        self.weight = _uniform((kt, channels), kt)
        self.bias = nn.Parameter(torch.zeros(channels))

    @property
    def history_len(self) -> int:
        return (self.weight.shape[0] - 1) * self.dilation

    def forward(self, x: Tensor, state: Tensor | None = None) -> tuple[Tensor, Tensor]:
        y = depthwise_dilated_conv1d(x, self.weight, self.bias, self.dilation, state)
        return y, _next_history(x, state, self.history_len)


class GroupGRU(nn.Module):
    """``n_groups`` independent GRUs over contiguous channel groups of ``[B, T, C]``."""

    def __init__(self, channels: int, n_groups: int = 1, hidden: int | None = None):
        super().__init__()
        if channels % n_groups:
            raise ValueError(f"channels ({channels}) not divisible by n_groups ({n_groups})")
        self.n_groups = n_groups
        cg = channels // n_groups
        hg = cg if hidden is None else hidden // n_groups
        self.hidden = hg * n_groups
        self.w_ih = _uniform((n_groups, cg, 3 * hg), hg)
        self.w_hh = _uniform((n_groups, hg, 3 * hg), hg)
        self.bias = nn.Parameter(torch.zeros(n_groups, 3 * hg))

    def init_state(self, batch: int) -> Tensor:
        return self.w_hh.new_zeros(batch, self.n_groups, self.w_hh.shape[1])

    def forward(self, x: Tensor, state: Tensor | None = None) -> tuple[Tensor, Tensor]:
        B, T, C = x.shape
        h0 = self.init_state(B) if state is None else state
        y, h = grouped_gru(x.reshape(B, T, self.n_groups, C // self.n_groups), h0,
                           self.w_ih, self.w_hh, self.bias)
        return y.reshape(B, T, self.hidden), h


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# Finite-difference gradient check


def _rel_err(a: Tensor, n: Tensor, floor: float = 0.0) -> float:
    denom = max(a.norm().item(), n.norm().item(), floor)
    if denom == 0.0:
        return 0.0
    return (a - n).norm().item() / denom


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-4,
               seed: int = 0, module: nn.Module | None = None, max_per_tensor: int | None = None,
               kink_tol: float = 1e-6, rel_floor: float = 1e-3) -> float:
    """Worst relative error between autograd and central differences.

    ``fn(*inputs)`` is reduced to a scalar with a fixed random projection.
    Inputs and ``module`` parameters are checked in float64; the module is
    converted in place. Errors are norm-wise per tensor; ``max_per_tensor``
    subsamples coordinates for large tensors.

    Each coordinate is also differenced with ``step / 10``. In smooth regions
    the two estimates agree to O(step^2) and are Richardson-combined to cancel
    that term; a kink (PReLU at 0) inside the wider stencil makes them differ,
    and the coordinate is then re-measured with ``step / 100``.

    A tensor whose gradient is exactly zero (a bias feeding a batch norm)
    would compare two roundoff residues, so the per-tensor denominator is
    at least ``rel_floor`` times the largest gradient norm in the check.
    """
    # offset so the projection never equals an input drawn with the same seed
    gen = torch.Generator().manual_seed(seed + 0x5EED)
    xs = [x.detach().double().clone().requires_grad_(True) for x in inputs]
    params: list[Tensor] = []
    if module is not None:
        module.double()
        params = [p for p in module.parameters() if p.requires_grad]
    targets = xs + params

    with torch.no_grad():
        proj = torch.randn(fn(*xs).shape, generator=gen, dtype=torch.float64)

    def scalar() -> Tensor:
        return (fn(*xs) * proj).sum()

    grads = torch.autograd.grad(scalar(), targets, allow_unused=True)

    def central(flat: Tensor, i: int, h: float) -> float:
        orig = flat[i].item()
        flat[i] = orig + h
        up = scalar().item()
        flat[i] = orig - h
        down = scalar().item()
        flat[i] = orig
        return (up - down) / (2 * h)

    pairs = []
    for t, g in zip(targets, grads):
        g = torch.zeros_like(t) if g is None else g
        flat = t.data.view(-1)
        idx = torch.arange(flat.numel())
        if max_per_tensor is not None and flat.numel() > max_per_tensor:
            idx = torch.randperm(flat.numel(), generator=gen)[:max_per_tensor]
        numeric = torch.zeros(len(idx), dtype=torch.float64)
        with torch.no_grad():
            for j, i in enumerate(idx.tolist()):
                wide, narrow = central(flat, i, step), central(flat, i, step / 10)
                if abs(wide - narrow) > kink_tol * max(abs(wide), abs(narrow), 1.0):
                    numeric[j] = central(flat, i, step / 100)
                else:
                    numeric[j] = (100 * narrow - wide) / 99
        pairs.append((g.reshape(-1)[idx], numeric))
    scale = max(a.norm().item() for a, _ in pairs)
    return max(_rel_err(a, n, rel_floor * scale) for a, n in pairs)


# ---------------------------------------------------------------------------
# Checkpoint files: magic, u32 manifest length, JSON manifest, little-endian f32 blobs

CHECKPOINT_MAGIC = b"TFCK"


def save_checkpoint(path: str | Path, tensors: dict[str, Tensor], meta: dict | None = None):
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        for b in blobs:
            f.write(b)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", raw[4:8])
    manifest = json.loads(raw[8:8 + n])
    data = raw[8 + n:]
    out = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    return out, manifest["meta"]


def module_tensors(module: nn.Module, prefix: str = "") -> dict[str, Tensor]:
    return {prefix + k: v for k, v in module.state_dict().items()}


def load_module_tensors(module: nn.Module, tensors: dict[str, Tensor], prefix: str = ""):
    state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    module.load_state_dict(state, strict=True)


def iter_chunks(x: Tensor, sizes: Iterable[int]):
    start = 0
    for s in sizes:
        yield x[:, start:start + s]
        start += s
