"""TFNet codec: causal conv encoder, temporal stacks, group VQ, masked decoder.

Training works on batched tensors with the fast kernels. Inference entry
points (:meth:`TFNet.encode_wave`, :meth:`TFNet.decode_indices` and the
stream classes) run under :func:`tfnet.nn.exact_kernels`, so chunked
streaming reproduces the batch output bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from . import dsp
from .nn import BatchNorm, CausalConv2d, CausalDeconv2d, PReLU, exact_kernels
from .temporal import TemporalStack
from .vq import GroupVQ, VqConfig, commitment_loss, project_down, project_up

NETWORK_BINS = 160


@dataclass(frozen=True)
class CodecConfig:
    channels: int = 192                          # C
    conv_channels: tuple[int, ...] = (16, 32, 48)
    freq_strides: tuple[int, ...] = (2, 2, 4)
    freq_kernel: int = 5
    time_kernel: int = 2
    encode_stack: tuple[str, ...] = ("tcm", "ggru")
    decode_stack: tuple[str, ...] = ("tcm", "ggru", "tcm", "ggru")
    n_groups: int = 4
    tcm_hidden: int | None = None
    gru_hidden: int | None = None
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    power: float = 0.3
    vq: VqConfig = field(default_factory=VqConfig)
    aux_decoder: bool = False
    stft: dsp.StftConfig = field(default_factory=dsp.StftConfig)

    def __post_init__(self):
        if len(self.conv_channels) != len(self.freq_strides):
            raise ValueError("conv_channels and freq_strides must have equal length")
        if self.stft.n_bins - 1 != NETWORK_BINS:
            raise ValueError(f"network expects {NETWORK_BINS} bins after dropping Nyquist")
        if self.fold <= 0 or self.fold * int(np.prod(self.freq_strides)) != NETWORK_BINS:
            raise ValueError(f"frequency strides {self.freq_strides} do not divide {NETWORK_BINS} bins")
        if len(self.decode_stack) <= len(self.encode_stack):
            raise ValueError("decoding needs more temporal blocks than encoding")
        if self.vq.latent >= self.channels:
            raise ValueError(f"quantizer width {self.vq.latent} must be below latent width {self.channels}")

    @property
    def fold(self) -> int:
        return NETWORK_BINS // int(np.prod(self.freq_strides))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        d = dict(d)
        d["vq"] = VqConfig(**d.get("vq", {}))
        d["stft"] = dsp.StftConfig(**d.get("stft", {}))
        for k in ("conv_channels", "freq_strides", "encode_stack", "decode_stack", "dilations"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def describe(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class Encoder(nn.Module):
    """``[B, T, 160, 2] -> [B, T, C]``; every conv is followed by BN and PReLU."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        chans = (2,) + tuple(cfg.conv_channels) + (cfg.channels,)
        strides = tuple(cfg.freq_strides) + (cfg.fold,)
        kernels = (cfg.freq_kernel,) * len(cfg.freq_strides) + (cfg.fold,)
        self.convs = nn.ModuleList(
            CausalConv2d(chans[i], chans[i + 1], cfg.time_kernel, kernels[i], strides[i])
            for i in range(len(strides)))
        self.norms = nn.ModuleList(BatchNorm(c) for c in chans[1:])
        self.acts = nn.ModuleList(PReLU(c) for c in chans[1:])

    def forward(self, x: Tensor, state: list | None = None) -> tuple[Tensor, list]:
        if x.shape[-2:] != (NETWORK_BINS, 2):
            raise ValueError(f"encoder expects [..., T, {NETWORK_BINS}, 2], got {tuple(x.shape)}")
        state = state or [None] * len(self.convs)
        new_state = []
        for conv, norm, act, s in zip(self.convs, self.norms, self.acts, state):
            x, s = conv(x, s)
            x = act(norm(x))
            new_state.append(s)
        return x.squeeze(2), new_state


class Decoder(nn.Module):
    """Mirror of the encoder with transposed convs: ``[B, T, C] -> [B, T, 160, 2]``.

    The last layer is linear.
    """

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        chans = (cfg.channels,) + tuple(reversed(cfg.conv_channels)) + (2,)
        strides = (cfg.fold,) + tuple(reversed(cfg.freq_strides))
        kernels = (cfg.fold,) + (cfg.freq_kernel,) * len(cfg.freq_strides)
        self.deconvs = nn.ModuleList(
            CausalDeconv2d(chans[i], chans[i + 1], cfg.time_kernel, kernels[i], strides[i])
            for i in range(len(strides)))
        self.norms = nn.ModuleList(BatchNorm(c) for c in chans[1:-1])
        self.acts = nn.ModuleList(PReLU(c) for c in chans[1:-1])

    def forward(self, x: Tensor, state: list | None = None) -> tuple[Tensor, list]:
        x = x.unsqueeze(2)
        state = state or [None] * len(self.deconvs)
        new_state = []
        for i, (deconv, s) in enumerate(zip(self.deconvs, state)):
            x, s = deconv(x, s)
            if i < len(self.norms):
                x = self.acts[i](self.norms[i](x))
            new_state.append(s)
        return x, new_state


def loss_mask(received: Tensor | np.ndarray | list, frames_per_packet: int) -> Tensor:
    """Per-packet receive flags to a per-frame float mask (1 = received)."""
    r = torch.as_tensor(np.asarray(received, dtype=np.float32))
    return r.repeat_interleave(frames_per_packet, dim=-1)


class TFNet(nn.Module):
    def __init__(self, cfg: CodecConfig | None = None):
        super().__init__()
        cfg = cfg or CodecConfig()
        self.cfg = cfg
        C = cfg.channels
        kw = dict(n_groups=cfg.n_groups, tcm_hidden=cfg.tcm_hidden, dilations=cfg.dilations,
                  gru_hidden=cfg.gru_hidden)
        self.encoder = Encoder(cfg)
        self.encode_stack = TemporalStack(cfg.encode_stack, C, **kw)
        self.down = project_down(C, cfg.vq.latent)
        self.vq = GroupVQ(cfg.vq)
        self.up = project_up(cfg.vq.latent, C, extra_inputs=1)
        with torch.no_grad():
            self.up.weight[cfg.vq.latent:].zero_()
        self.decode_stack = TemporalStack(cfg.decode_stack, C, mask_input=True, **kw)
        self.decoder = Decoder(cfg)
        self.aux_decoder = Decoder(cfg) if cfg.aux_decoder else None

    # -- pieces -----------------------------------------------------------

    def analyze(self, wave: Tensor) -> Tensor:
        """Waveform ``[B, L]`` to the compressed network input ``[B, T, 160, 2]``."""
        return dsp.power_law_compress(dsp.drop_nyquist(dsp.stft(wave, self.cfg.stft)), self.cfg.power)

    def synthesize(self, spec_c: Tensor) -> Tensor:
        """Compressed network output ``[B, T, 160, 2]`` to a waveform."""
        return dsp.istft(self.to_linear(spec_c), self.cfg.stft)

    def to_linear(self, spec_c: Tensor) -> Tensor:
        return dsp.restore_nyquist(dsp.power_law_expand(spec_c, self.cfg.power))

    def encode(self, x: Tensor, state: list | None = None) -> tuple[Tensor, list]:
        """Compressed spectrum to encoder features X^E ``[B, T, C]``."""
        return self.encoder(x, state)

    def encode_stack_apply(self, f: Tensor, state: list | None = None) -> tuple[Tensor, list]:
        return self.encode_stack(f, state)

    def latent(self, x: Tensor, state: dict | None = None) -> tuple[Tensor, Tensor, dict]:
        """Compressed spectrum to (X^S, pre-quantizer X^Q, state)."""
        state = state or {}
        e, s_enc = self.encode(x, state.get("encoder"))
        f, s_stack = self.encode_stack_apply(e, state.get("stack"))
        return f, self.down(f), {"encoder": s_enc, "stack": s_stack}

    def decode(self, q: Tensor, mask: Tensor, state: dict | None = None) -> tuple[Tensor, dict]:
        """Quantized features ``[B, T, C']`` (lost frames already zero) to a compressed spectrum."""
        if mask.shape != q.shape[:-1]:
            raise ValueError(f"mask shape {tuple(mask.shape)} does not match {tuple(q.shape[:-1])} frames")
        state = state or {}
        m = mask.to(q.dtype)
        h = self.up(torch.cat([q, m.unsqueeze(-1)], dim=-1))
        h, s_stack = self.decode_stack(h, state.get("stack"), mask=m)
        y, s_dec = self.decoder(h, state.get("decoder"))
        return y, {"stack": s_stack, "decoder": s_dec}

    def aux_clean_decode(self, f: Tensor) -> Tensor:
        if self.aux_decoder is None:
            raise RuntimeError("model was built without an auxiliary decoder")
        if not self.training:
            raise RuntimeError("the auxiliary clean decoder is only used in training")
        return self.aux_decoder(f)[0]

    # -- training forward ---------------------------------------------------

    def forward(self, x: Tensor, mask: Tensor | None = None) -> dict[str, Tensor]:
        """Full pass on a compressed spectrum ``[B, T, 160, 2]``.

        Lost frames (``mask == 0``) have their quantized features zeroed
        before decoding.
        """
        f, xq, _ = self.latent(x)
        q, idx = self.vq(xq)
        if mask is None:
            mask = torch.ones(q.shape[:-1], dtype=q.dtype)
        mask = mask.to(q.dtype)
        y, _ = self.decode(q * mask.unsqueeze(-1), mask)
        out = {"decoded": y, "features": f, "latent": xq, "quantized": q, "indices": idx,
               "commit": commitment_loss(xq, q) if not self.cfg.vq.bypass else xq.new_zeros(())}
        if self.aux_decoder is not None and self.training:
            out["aux"] = self.aux_clean_decode(f)
        return out

    def inference_parameters(self) -> int:
        """Parameters reachable at inference (the auxiliary decoder excluded)."""
        aux = 0 if self.aux_decoder is None else sum(p.numel() for p in self.aux_decoder.parameters())
        return sum(p.numel() for p in self.parameters()) - aux

    def inference_state_dict(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.state_dict().items() if not k.startswith("aux_decoder.")}

    # -- batch inference ------------------------------------------------------

    @torch.no_grad()
    def encode_wave(self, wave: Tensor) -> Tensor:
        """Waveform ``[L]`` to codebook indices ``[T, N]``."""
        self._check_eval()
        with exact_kernels():
            _, xq, _ = self.latent(self.analyze(wave.unsqueeze(0)))
            return self.vq.quantize(xq)[1][0]

    @torch.no_grad()
    def decode_indices(self, indices: Tensor, mask: Tensor | None = None, tail: bool = True) -> Tensor:
        """Indices ``[T, N]`` plus optional per-frame mask to a waveform.

        Lost frames decode from zeroed features. Without ``tail`` the output
        stops at ``T * hop`` samples, which is what a stream has emitted
        after its last frame.
        """
        self._check_eval()
        T = indices.shape[0]
        m = torch.ones(T) if mask is None else mask.to(torch.float32)
        with exact_kernels():
            q = self.vq.dequantize(indices.long()).unsqueeze(0) * m[None, :, None]
            y, _ = self.decode(q, m.unsqueeze(0))
            wave = self.synthesize(y)[0]
        return wave if tail else wave[:T * self.cfg.stft.hop_len]

    def _check_eval(self):
        if self.training:
            raise RuntimeError("inference requires eval mode (call model.eval())")


# ---------------------------------------------------------------------------
# Streaming


class StreamEncoder:
    """Consumes samples in hops; emits one index frame per complete window."""

    def __init__(self, model: TFNet):
        model._check_eval()
        self.model = model
        self.cfg = model.cfg.stft
        self.buffer = torch.zeros(0)
        self.state: dict = {}

    def push(self, samples: Tensor | np.ndarray) -> Tensor:
        """Append samples; returns indices ``[n_new_frames, N]``."""
        samples = torch.as_tensor(np.asarray(samples), dtype=torch.float32)
        self.buffer = torch.cat([self.buffer, samples])
        n = 0 if len(self.buffer) < self.cfg.window_len else self.cfg.n_frames(len(self.buffer))
        if n == 0:
            return torch.zeros(0, self.model.cfg.vq.n_groups, dtype=torch.long)
        used = self.cfg.n_samples(n)
        chunk = self.buffer[:used]
        self.buffer = self.buffer[n * self.cfg.hop_len:]
        m = self.model
        with torch.no_grad(), exact_kernels():
            _, xq, self.state = m.latent(m.analyze(chunk.unsqueeze(0)), self.state)
            return m.vq.quantize(xq)[1][0]


def stream_encode_frame(samples: Tensor | np.ndarray, encoder: StreamEncoder) -> Tensor | None:
    """One hop of new samples in; the frame's indices out once a full window is buffered."""
    if len(samples) != encoder.cfg.hop_len:
        raise ValueError(f"expected {encoder.cfg.hop_len} samples, got {len(samples)}")
    out = encoder.push(samples)
    return out[0] if len(out) else None


class StreamDecoder:
    """Consumes index frames (or ``None`` for a lost frame); emits one hop per frame."""

    def __init__(self, model: TFNet):
        model._check_eval()
        self.model = model
        self.cfg = model.cfg.stft
        self.state: dict = {}
        n_seg = self.cfg.window_len // self.cfg.hop_len
        self.pending = torch.zeros(n_seg - 1, self.cfg.hop_len)
        self.n_frames = 0
        # blocks 0..n_seg-1 of a long signal; every later block matches the last one
        self._inv_env = dsp.inverse_envelope(n_seg, self.cfg)[:n_seg * self.cfg.hop_len].reshape(n_seg, -1)

    def push(self, frames: list[Tensor | None]) -> Tensor:
        if not frames:
            return torch.zeros(0)
        m = self.model
        N = m.cfg.vq.n_groups
        idx = torch.stack([torch.zeros(N, dtype=torch.long) if f is None else torch.as_tensor(f).long()
                           for f in frames])
        if idx.shape[1] != N:
            raise ValueError(f"decoder state expects {N} indices per frame, got {idx.shape[1]}")
        mask = torch.tensor([0.0 if f is None else 1.0 for f in frames])
        with torch.no_grad(), exact_kernels():
            q = m.vq.dequantize(idx).unsqueeze(0) * mask[None, :, None]
            y, self.state = m.decode(q, mask.unsqueeze(0), self.state)
            frames_td = dsp.synthesis_frames(m.to_linear(y), self.cfg)[0]
        return self._overlap_add(frames_td)

    def _overlap_add(self, frames: Tensor) -> Tensor:
        hop = self.cfg.hop_len
        n_seg = self.cfg.window_len // hop
        out = []
        for fr in frames:
            segs = fr.reshape(n_seg, hop)
            # pending[j] holds the partial sum for the block j+1 hops ahead of the current one
            block = self.pending[0] + segs[0] if n_seg > 1 else segs[0]
            # oldest contributions were added first; keep that order for the new frame's tail
            acc = torch.zeros(n_seg - 1, hop)
            for j in range(1, n_seg):
                base = self.pending[j] if j < n_seg - 1 else torch.zeros(hop)
                acc[j - 1] = base + segs[j]
            self.pending = acc
            out.append(block * self._inv_env[min(self.n_frames, n_seg - 1)])
            self.n_frames += 1
        return torch.cat(out)

    def flush(self) -> Tensor:
        """The overlap tail left after the last frame."""
        hop = self.cfg.hop_len
        inv = dsp.inverse_envelope(max(self.n_frames, 1), self.cfg)[self.n_frames * hop:]
        tail = self.pending.reshape(-1) * inv
        self.pending = torch.zeros_like(self.pending)
        return tail


def stream_decode_frame(frame: Tensor | None, decoder: StreamDecoder) -> Tensor:
    """One index frame (``None`` = lost) in, one hop of samples out."""
    return decoder.push([frame])
