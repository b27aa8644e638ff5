import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_array_equal

from tfnet import bitstream as bs


def reference_bits(frames, bits):
    """Payload as a '0'/'1' string, built independently of the packer."""
    s = "".join(format(i, f"0{bits}b") for f in frames for i in f)
    return s + "0" * (-len(s) % 8)


class TestHeader:
    def test_round_trip(self):
        h = bs.StreamHeader(codebook_size=32, n_samples=12345)
        assert bs.StreamHeader.from_bytes(h.to_bytes()) == h
        assert len(h.to_bytes()) == bs.header_size() == 28

    def test_bad_magic(self):
        raw = bytearray(bs.StreamHeader().to_bytes())
        raw[0] ^= 1
        with pytest.raises(bs.MalformedPacket):
            bs.StreamHeader.from_bytes(bytes(raw))

    def test_truncated(self):
        with pytest.raises(bs.MalformedPacket):
            bs.StreamHeader.from_bytes(b"TFN1\x00")

    def test_payload_sizes(self):
        assert bs.StreamHeader().payload_bits == 120
        assert bs.StreamHeader().payload_bytes == 15
        h = bs.StreamHeader(codebook_size=32, frames_per_packet=1)
        assert (h.payload_bits, h.payload_bytes) == (15, 2)


class TestPacking:
    @pytest.mark.parametrize("size", [2, 32, 1024])
    def test_exhaustive_boundaries(self, size):
        h = bs.StreamHeader(codebook_size=size, frames_per_packet=2)
        edges = sorted({0, 1, size // 2 - 1, size // 2, size - 2, size - 1})
        for combo in itertools.product(edges, repeat=3):
            frames = [list(combo), list(reversed(combo))]
            p = bs.pack(frames, h)
            assert bs.unpack(p, h) == frames
            bits = "".join(format(b, "08b") for b in p.payload)
            assert bits == reference_bits(frames, h.bits)

    def test_every_index_small_codebook(self):
        h = bs.StreamHeader(n_groups=1, codebook_size=32, frames_per_packet=1)
        for i in range(32):
            assert bs.unpack(bs.pack([[i]], h), h) == [[i]]

    @pytest.mark.parametrize("bad", [-1, 1024])
    def test_out_of_range(self, bad):
        with pytest.raises(ValueError):
            bs.pack([[0, 0, bad]] + [[0, 0, 0]] * 3, bs.StreamHeader())

    def test_wrong_frame_count(self):
        with pytest.raises(ValueError):
            bs.pack([[0, 0, 0]], bs.StreamHeader())

    def test_packetize_round_trip(self):
        h = bs.StreamHeader()
        idx = np.random.default_rng(0).integers(0, 1024, (40, 3))
        packets = bs.packetize(idx, h)
        assert [p.seq for p in packets] == list(range(10))
        assert_array_equal(bs.depacketize(packets, h), idx)
        with pytest.raises(ValueError):
            bs.packetize(idx[:39], h)

    @settings(max_examples=300, deadline=None)
    @given(st.binary(min_size=0, max_size=40))
    def test_fuzz_never_crashes(self, payload):
        h = bs.StreamHeader(codebook_size=32)
        try:
            frames = bs.unpack(bs.Packet(0, payload), h)
        except bs.MalformedPacket:
            return
        assert len(frames) == 4 and all(0 <= i < 32 for f in frames for i in f)
        assert bs.pack(frames, h).payload == payload

    def test_nonzero_padding_rejected(self):
        h = bs.StreamHeader(codebook_size=32, frames_per_packet=1)
        with pytest.raises(bs.MalformedPacket, match="padding"):
            bs.unpack(bs.Packet(0, b"\x00\x01"), h)


class TestTrace:
    def test_mask_repetition_law(self):
        # packets [1, 0] at 4 frames per packet -> frames 11110000
        assert_array_equal(bs.trace_mask([1, 0], 4), [1, 1, 1, 1, 0, 0, 0, 0])

    def test_apply_trace(self):
        h = bs.StreamHeader(n_groups=1, codebook_size=8)
        idx = np.arange(1, 9).reshape(8, 1) % 8
        packets = bs.packetize(idx, h)
        book = torch.arange(8, dtype=torch.float32).reshape(8, 1) + 10
        feats, mask = bs.apply_trace(packets, [1, 0], h, lambda i: book[i[:, 0]])
        assert_array_equal(mask.numpy(), [1, 1, 1, 1, 0, 0, 0, 0])
        assert_array_equal(feats[:4, 0].numpy(), [11, 12, 13, 14])
        assert_array_equal(feats[4:].numpy(), 0.0)

    def test_lost_packets_are_not_parsed(self):
        h = bs.StreamHeader(n_groups=1, codebook_size=8, frames_per_packet=1)
        packets = [bs.pack([[3]], h), bs.Packet(1, b"garbage")]
        feats, _ = bs.apply_trace(packets, [1, 0], h, lambda i: i.float())
        assert_array_equal(feats[:, 0].numpy(), [3, 0])

    def test_trace_length_mismatch(self):
        h = bs.StreamHeader()
        with pytest.raises(ValueError):
            bs.apply_trace([], [1], h, lambda i: i)


class TestFiles:
    def test_write_read(self, tmp_path):
        h = bs.StreamHeader(n_samples=640)
        packets = bs.packetize(np.zeros((8, 3), dtype=int) + 7, h)
        bs.write_stream(tmp_path / "a.tfn", h, packets)
        h2, p2 = bs.read_stream(tmp_path / "a.tfn")
        assert h2 == h and p2 == packets

    def test_truncated_body(self, tmp_path):
        h = bs.StreamHeader()
        bs.write_stream(tmp_path / "a.tfn", h, bs.packetize(np.zeros((4, 3), dtype=int), h))
        raw = (tmp_path / "a.tfn").read_bytes()
        (tmp_path / "b.tfn").write_bytes(raw[:-1])
        with pytest.raises(bs.MalformedPacket):
            bs.read_stream(tmp_path / "b.tfn")

    @pytest.mark.parametrize("size,kbps", [(1024, 6.0), (32, 3.0)])
    def test_payload_bitrate(self, size, kbps):
        h = bs.StreamHeader(codebook_size=size)
        assert bs.payload_bitrate_kbps(h, 500) == kbps
