"""Fixed-length packing of codebook indices into packets and ``.tfn`` files.

Bits are written MSB first: group-major within a frame, frame-major within
a packet. The last byte of a payload is zero-padded.

File layout (big-endian)::

    magic "TFN1" | sample_rate u32 | window_len u16 | hop_len u16 | N u16 | S u32
    | frames_per_packet u16 | n_samples u64
    then per packet: seq u32 | payload
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .vq import bits_per_index

MAGIC = b"TFN1"
_HEADER = struct.Struct(">4sIHHHIHQ")
_SEQ = struct.Struct(">I")


class MalformedPacket(ValueError):
    pass


@dataclass(frozen=True)
class StreamHeader:
    sample_rate: int = 16000
    window_len: int = 320
    hop_len: int = 80
    n_groups: int = 3
    codebook_size: int = 1024
    frames_per_packet: int = 4
    n_samples: int = 0

    def __post_init__(self):
        bits_per_index(self.codebook_size)
        if self.frames_per_packet < 1 or self.n_groups < 1:
            raise ValueError("frames_per_packet and n_groups must be positive")

    @property
    def bits(self) -> int:
        return bits_per_index(self.codebook_size)

    @property
    def payload_bits(self) -> int:
        return self.frames_per_packet * self.n_groups * self.bits

    @property
    def payload_bytes(self) -> int:
        return -(-self.payload_bits // 8)

    def to_bytes(self) -> bytes:
        return _HEADER.pack(MAGIC, self.sample_rate, self.window_len, self.hop_len, self.n_groups,
                            self.codebook_size, self.frames_per_packet, self.n_samples)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "StreamHeader":
        if len(raw) < _HEADER.size:
            raise MalformedPacket("truncated stream header")
        magic, *fields = _HEADER.unpack(raw[:_HEADER.size])
        if magic != MAGIC:
            raise MalformedPacket(f"bad magic {magic!r}")
        return cls(*fields)


@dataclass(frozen=True)
class Packet:
    seq: int
    payload: bytes


def pack(frames: Sequence[Sequence[int]], header: StreamHeader, seq: int = 0) -> Packet:
    """``frames_per_packet`` frames of ``N`` indices into one packet."""
    if len(frames) != header.frames_per_packet:
        raise ValueError(f"expected {header.frames_per_packet} frames, got {len(frames)}")
    acc, S, b = 0, header.codebook_size, header.bits
    for frame in frames:
        if len(frame) != header.n_groups:
            raise ValueError(f"expected {header.n_groups} indices per frame, got {len(frame)}")
        for idx in frame:
            idx = int(idx)
            if not 0 <= idx < S:
                raise ValueError(f"index {idx} outside [0, {S})")
            acc = (acc << b) | idx
    pad = header.payload_bytes * 8 - header.payload_bits
    return Packet(seq, (acc << pad).to_bytes(header.payload_bytes, "big"))


def unpack(packet: Packet, header: StreamHeader) -> list[list[int]]:
    if len(packet.payload) != header.payload_bytes:
        raise MalformedPacket(
            f"malformed packet: payload is {len(packet.payload)} bytes, expected {header.payload_bytes}")
    acc = int.from_bytes(packet.payload, "big")
    pad = header.payload_bytes * 8 - header.payload_bits
    if acc & ((1 << pad) - 1):
        raise MalformedPacket("malformed packet: nonzero padding bits")
    acc >>= pad
    mask, b = header.codebook_size - 1, header.bits
    flat = [(acc >> (b * i)) & mask for i in reversed(range(header.n_groups * header.frames_per_packet))]
    N = header.n_groups
    return [flat[i:i + N] for i in range(0, len(flat), N)]


def packetize(indices: np.ndarray | torch.Tensor, header: StreamHeader) -> list[Packet]:
    """``[T, N]`` indices into packets; ``T`` must be a whole number of packets."""
    idx = np.asarray(indices)
    fpp = header.frames_per_packet
    if len(idx) % fpp:
        raise ValueError(f"{len(idx)} frames is not a multiple of {fpp} frames per packet")
    return [pack(idx[i:i + fpp].tolist(), header, seq=i // fpp) for i in range(0, len(idx), fpp)]


def depacketize(packets: Sequence[Packet], header: StreamHeader) -> np.ndarray:
    frames = [f for p in packets for f in unpack(p, header)]
    return np.asarray(frames, dtype=np.int64).reshape(-1, header.n_groups)


def trace_mask(received, frames_per_packet: int) -> np.ndarray:
    """Per-packet receive flags repeated to per-frame mask."""
    return np.repeat(np.asarray(received, dtype=bool), frames_per_packet)


def apply_trace(packets: Sequence[Packet], received, header: StreamHeader,
                dequantize: Callable[[torch.Tensor], torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    """Dequantized features with lost packets zeroed, and the per-frame mask.

    Returns (features ``[T, C']``, mask ``[T]`` float with 1 = received).
    Lost packets are never unpacked.
    """
    received = np.asarray(received, dtype=bool)
    if len(received) != len(packets):
        raise ValueError(f"trace has {len(received)} packets, stream has {len(packets)}")
    fpp, N = header.frames_per_packet, header.n_groups
    idx = np.zeros((len(packets) * fpp, N), dtype=np.int64)
    for i, (p, ok) in enumerate(zip(packets, received)):
        if ok:
            idx[i * fpp:(i + 1) * fpp] = unpack(p, header)
    mask = torch.as_tensor(trace_mask(received, fpp), dtype=torch.float32)
    feats = dequantize(torch.as_tensor(idx)) * mask[:, None]
    return feats, mask


def write_stream(path: str | Path, header: StreamHeader, packets: Sequence[Packet]):
    with open(path, "wb") as f:
        f.write(header.to_bytes())
        for p in packets:
            if len(p.payload) != header.payload_bytes:
                raise ValueError("packet payload does not match header")
            f.write(_SEQ.pack(p.seq))
            f.write(p.payload)


def read_stream(path: str | Path) -> tuple[StreamHeader, list[Packet]]:
    raw = Path(path).read_bytes()
    header = StreamHeader.from_bytes(raw)
    body = raw[_HEADER.size:]
    rec = _SEQ.size + header.payload_bytes
    if len(body) % rec:
        raise MalformedPacket(f"stream body of {len(body)} bytes is not a whole number of packets")
    packets = []
    for off in range(0, len(body), rec):
        (seq,) = _SEQ.unpack(body[off:off + _SEQ.size])
        packets.append(Packet(seq, body[off + _SEQ.size:off + rec]))
    return header, packets


def header_size() -> int:
    return _HEADER.size


def payload_bitrate_kbps(header: StreamHeader, n_packets: int) -> float:
    """Payload bits per second of audio covered by ``n_packets`` whole packets."""
    seconds = n_packets * header.frames_per_packet * header.hop_len / header.sample_rate
    return n_packets * header.payload_bits / seconds / 1000.0
