"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the training and
ablation criteria take roughly 25 minutes together on one CPU core.
"""

import contextlib
import io
import itertools
import math
import time

import numpy as np
import pytest
import torch

from tfnet import bitstream as bs
from tfnet import channel as ch
from tfnet import cli, dsp, train, vq
from tfnet import nn as tn
from tfnet import temporal as tp
from tfnet.codec import CodecConfig, Decoder, Encoder, StreamDecoder, StreamEncoder, TFNet

WIN = 320


@pytest.fixture
def verdict(capsys):
    def emit(n: int, name: str, ok: bool, detail: str, seconds: float | None = None):
        took = "" if seconds is None else f" [{seconds:.0f} s]"
        with capsys.disabled():
            print(f"\ncriterion {n} {name}: {'PASS' if ok else 'FAIL'} ({detail}){took}")
        assert ok, detail
    return emit


def randomize(module, seed=0):
    """Non-trivial BN statistics and PReLU slopes, so eval mode is not an identity."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, buf in module.named_buffers():
            if name.endswith("running_mean"):
                buf.copy_(torch.randn(buf.shape, generator=g) * 0.1)
            elif name.endswith("running_var"):
                buf.copy_(torch.rand(buf.shape, generator=g) + 0.5)
        for name, p in module.named_parameters():
            if ".act" in name or name.startswith("act"):
                p.copy_(torch.rand(p.shape, generator=g) * 0.5)
    return module


def codec_model(seed=0):
    torch.manual_seed(seed)
    m = randomize(TFNet(), seed).eval()
    clip = torch.from_numpy(train.synthetic_speech(1.0, seed + 3)).float()
    with torch.no_grad():
        _, xq, _ = m.latent(m.analyze(clip.unsqueeze(0)))
        m.vq.init_from(xq)
    return m


def rand(*shape, seed=0, dtype=torch.float32):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


# ---------------------------------------------------------------------------


def test_1_bitrate(verdict, tmp_path):
    t0 = time.monotonic()
    wav = tmp_path / "a.wav"
    dsp.write_wav(wav, dsp.Waveform(train.synthetic_speech(2.0, 0)))
    rates = {}
    for size in (1024, 32):
        out = tmp_path / f"{size}.tfn"
        with contextlib.redirect_stdout(io.StringIO()):
            assert cli.main(["encode", str(wav), "-o", str(out), "--set", f"vq.codebook_size={size}"]) == 0
        header, packets = bs.read_stream(out)
        n_frames = len(packets) * header.frames_per_packet
        seconds = n_frames * header.hop_len / header.sample_rate
        payload_bits = len(packets) * header.frames_per_packet * header.n_groups * header.bits
        assert out.stat().st_size == bs.header_size() + len(packets) * (4 + header.payload_bytes)
        rates[size] = payload_bits / seconds / 1000
    ok = rates[1024] == 6.0 and rates[32] == 3.0
    verdict(1, "bitrate", ok, f"S=1024 -> {rates[1024]:.3f} kbps, S=32 -> {rates[32]:.3f} kbps",
            time.monotonic() - t0)


def _prefix_unchanged(fn, x, t):
    """Perturb time step ``t`` of ``x`` (axis 1) and check outputs before ``t`` are bit-identical."""
    x2 = x.clone()
    x2[:, t] += 1.0
    with torch.no_grad(), tn.exact_kernels():
        a, b = fn(x), fn(x2)
    return torch.equal(a[:, :t], b[:, :t]) and not torch.equal(a[:, t:], b[:, t:])


def test_2_latency_and_causality(verdict):
    t0 = time.monotonic()
    torch.manual_seed(0)
    small = CodecConfig(channels=32, conv_channels=(4, 8, 8), vq=vq.VqConfig(latent=12, codebook_size=16))
    k = rand(2, 5, 3, 4)
    layers = {
        "causal_conv2d": (lambda x: tn.causal_conv2d(x, k, stride_f=2), rand(1, 12, 8, 3)),
        "causal_deconv2d": (lambda x: tn.causal_deconv2d(x, k, stride_f=2), rand(1, 12, 4, 3)),
        "depthwise_conv": (lambda x: tn.depthwise_dilated_conv1d(x, rand(3, 6), dilation=4), rand(1, 20, 6)),
        "conv1x1": (lambda x: tn.conv1x1(x, rand(6, 5)), rand(1, 12, 6)),
        "tcm_block": (lambda x, m=randomize(tp.TcmBlock(6, 8, dilation=2)).eval(): m(x)[0], rand(1, 16, 6)),
        "tcm_group": (lambda x, m=randomize(tp.TcmGroup(6, 8)).eval(): m(x)[0], rand(1, 40, 6)),
        "ggru_block": (lambda x, m=tp.GGruBlock(8, 4).eval(): m(x)[0], rand(1, 16, 8)),
        "gru_block": (lambda x, m=tp.GGruBlock(8, 1).eval(): m(x)[0], rand(1, 16, 8)),
        "interleaved_stack": (lambda x, m=randomize(tp.interleaved_stack(2, 8, n_groups=2)).eval(): m(x)[0],
                              rand(1, 40, 8)),
        "encoder": (lambda x, m=randomize(Encoder(small)).eval(): m(x)[0], rand(1, 12, 160, 2)),
        "decoder": (lambda x, m=randomize(Decoder(small)).eval(): m(x)[0], rand(1, 12, 32)),
    }
    failed = [name for name, (fn, x) in layers.items()
              if not all(_prefix_unchanged(fn, x, t) for t in (1, x.shape[1] // 2, x.shape[1] - 1))]

    model = codec_model()
    spec = rand(1, 30, 160, 2)
    if not _prefix_unchanged(lambda x: model(x)["decoded"], spec, 17):
        failed.append("codec")

    clip = torch.from_numpy(train.synthetic_speech(0.5, 11)).float()
    full = model.decode_indices(model.encode_wave(clip))
    worst_lookahead = 0
    for cut in range(WIN, len(clip) + 1, 97):
        part = model.decode_indices(model.encode_wave(clip[:cut]), tail=False)
        if not torch.equal(part, full[:len(part)]):
            failed.append(f"truncation@{cut}")
        # last emitted sample index len(part)-1 was computed from samples < cut
        worst_lookahead = max(worst_lookahead, cut - len(part))
    ok = not failed and worst_lookahead < WIN
    detail = (f"{len(layers) + 1} perturbation checks, truncation look-ahead {worst_lookahead} samples "
              f"(< {WIN} = 20 ms)" + (f"; failed: {failed}" if failed else ""))
    verdict(2, "latency/causality", ok, detail, time.monotonic() - t0)


def test_3_streaming(verdict):
    t0 = time.monotonic()
    model = codec_model(1)
    clip = torch.from_numpy(train.synthetic_speech(0.75, 12)).float()
    idx = model.encode_wave(clip)
    ref = model.decode_indices(idx)
    rng = np.random.default_rng(2024)
    bad = 0
    n_splits = 12
    for _ in range(n_splits):
        enc = StreamEncoder(model)
        cuts = np.sort(rng.choice(np.arange(1, len(clip)), size=int(rng.integers(1, 15)), replace=False))
        got = torch.cat([enc.push(c) for c in np.split(clip.numpy(), cuts)])
        dec = StreamDecoder(model)
        fcuts = np.sort(rng.choice(np.arange(1, len(idx)), size=int(rng.integers(1, 15)), replace=False))
        wave = torch.cat([dec.push(list(c)) for c in np.split(idx.numpy(), fcuts)] + [dec.flush()])
        bad += not (torch.equal(got, idx) and torch.equal(wave, ref))
    verdict(3, "streaming", bad == 0, f"{n_splits - bad}/{n_splits} random splits bit-identical",
            time.monotonic() - t0)


def test_4_gradients(verdict):
    t0 = time.monotonic()
    f64 = dict(dtype=torch.float64)
    torch.manual_seed(0)
    small = CodecConfig(channels=16, conv_channels=(2, 4, 4), n_groups=2, tcm_hidden=6,
                        encode_stack=("tcm", "ggru"), decode_stack=("tcm", "ggru", "tcm"),
                        dilations=(1, 2), vq=vq.VqConfig(latent=6, n_groups=2, codebook_size=4, bypass=True))
    codec = TFNet(small).train()
    enc, dec = Encoder(small).train(), Decoder(small).train()
    proj = vq.project_down(8, 6)
    mask = torch.ones(2, 4, dtype=torch.float64)
    target = rand(dsp.DEFAULT_STFT.n_samples(5), seed=9, **f64)
    checks = {
        "causal_conv2d": lambda: tn.grad_check(lambda x, k, b: tn.causal_conv2d(x, k, b, stride_f=2, dilation_t=2),
                                               [rand(2, 5, 8, 3, **f64), rand(2, 5, 3, 4, seed=1), rand(4, seed=2)]),
        "causal_deconv2d": lambda: tn.grad_check(lambda x, k, b: tn.causal_deconv2d(x, k, b, stride_f=2),
                                                 [rand(2, 5, 4, 3, **f64), rand(2, 5, 3, 4, seed=1), rand(4, seed=2)]),
        "depthwise_conv": lambda: tn.grad_check(lambda x, k: tn.depthwise_dilated_conv1d(x, k, dilation=2),
                                                [rand(2, 9, 4), rand(3, 4, seed=1)]),
        "conv1x1": lambda: tn.grad_check(tn.conv1x1, [rand(3, 5, 4), rand(4, 6, seed=1), rand(6, seed=2)]),
        "prelu": lambda: tn.grad_check(tn.prelu, [rand(4, 6) + 0.05, rand(6, seed=1)]),
        "batch_norm": lambda: tn.grad_check(
            lambda x, w, b: tn.batch_norm(x, w, b, torch.zeros(5, **f64), torch.ones(5, **f64), True),
            [rand(4, 6, 5), rand(5, seed=1), rand(5, seed=2)]),
        "sigmoid": lambda: tn.grad_check(tn.sigmoid, [rand(20) * 4]),
        "gru_cell": lambda: tn.grad_check(tn.gru_cell, [rand(3, 4), rand(3, 5, seed=1), rand(4, 15, seed=2),
                                                        rand(5, 15, seed=3), rand(15, seed=4)]),
        "grouped_gru": lambda: tn.grad_check(lambda *a: tn.grouped_gru(*a)[0],
                                             [rand(2, 6, 2, 3), rand(2, 2, 4, seed=1), rand(2, 3, 12, seed=2),
                                              rand(2, 4, 12, seed=3), rand(2, 12, seed=4)]),
        "tcm_block": lambda m=tp.TcmBlock(5, 7, dilation=2): tn.grad_check(
            lambda x: m(x)[0], [rand(4, 10, 5)], module=m),
        "tcm_group": lambda m=tp.TcmGroup(4, 6, dilations=(1, 2)): tn.grad_check(
            lambda x: m(x)[0], [rand(4, 12, 4)], module=m),
        "ggru_block": lambda m=tp.GGruBlock(8, 2): tn.grad_check(lambda x: m(x)[0], [rand(2, 7, 8)], module=m),
        "stack": lambda m=tp.interleaved_stack(1, 4, n_groups=2, tcm_hidden=5): tn.grad_check(
            lambda x: m(x)[0], [rand(4, 12, 4)], module=m),
        "encoder": lambda: tn.grad_check(lambda x: enc(x)[0], [rand(3, 4, 160, 2)], module=enc,
                                         max_per_tensor=40),
        "decoder": lambda: tn.grad_check(lambda x: dec(x)[0], [rand(3, 4, 16)], module=dec, max_per_tensor=40),
        "stft": lambda: tn.grad_check(dsp.stft, [rand(800)], max_per_tensor=100),
        "istft": lambda: tn.grad_check(dsp.istft, [rand(6, 161, 2)], max_per_tensor=100),
        "power_law": lambda: tn.grad_check(lambda s: dsp.power_law_compress(s, 0.3, 1e-8), [rand(20, 2)]),
        "power_law_expand": lambda: tn.grad_check(lambda s: dsp.power_law_expand(s, 0.3), [rand(20, 2)]),
        "recon_loss": lambda: tn.grad_check(lambda d: train.recon_loss(d, target), [rand(5, 161, 2, seed=3)],
                                            max_per_tensor=150),
        "commitment": lambda: tn.grad_check(lambda x: vq.commitment_loss(proj(x), rand(5, 6, seed=4, **f64)),
                                            [rand(5, 8)], module=proj),
        "codec_bypass_vq": lambda: tn.grad_check(lambda x: codec.decode(codec.latent(x)[1], mask)[0],
                                                 [rand(2, 4, 160, 2)], module=codec, max_per_tensor=15),
    }
    errors = {name: fn() for name, fn in checks.items()}
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-5
    verdict(4, "gradients", ok, f"{len(errors)} checks, worst {worst} {errors[worst]:.2e} (< 1e-5)",
            time.monotonic() - t0)


def test_5_vq(verdict):
    t0 = time.monotonic()
    g = torch.Generator().manual_seed(0)
    x = torch.randn(10_000, 3, 40, generator=g)
    cb = torch.randn(3, 1024, 40, generator=g)
    got = vq.nearest(x, cb)
    xd, cbd = x.double().numpy(), cb.double().numpy()
    brute = np.stack([((xd[:, i, None] - cbd[i][None]) ** 2).sum(-1).argmin(1) for i in range(3)], 1)
    nn_ok = np.array_equal(got.numpy(), brute)

    xs = torch.randn(6, 9, dtype=torch.float64, requires_grad=True)
    q = torch.randn(6, 9, dtype=torch.float64)
    w = torch.randn(6, 9, dtype=torch.float64)
    y = vq.straight_through(xs, q)
    (y * w).sum().backward()
    st_ok = torch.equal(y, q) and torch.equal(xs.grad, w)

    k, dim, sigma, batch, steps, decay = 4, 2, 0.3, 512, 400, 0.95
    means = torch.tensor([[4.0, 0.0], [-4.0, 0.0], [0.0, 4.0], [0.0, -4.0]], dtype=torch.float64)
    quant = vq.GroupVQ(vq.VqConfig(latent=dim, n_groups=1, codebook_size=k, decay=decay)).double()
    gen = torch.Generator().manual_seed(5)
    with torch.no_grad():
        quant.codebook[0] = means + torch.randn(k, dim, generator=gen, dtype=torch.float64)
        quant.ema_sum.copy_(quant.codebook)
    counts = torch.zeros(k, dtype=torch.float64)
    for _ in range(steps):
        labels = torch.randint(k, (batch,), generator=gen)
        pts = means[labels] + sigma * torch.randn(batch, dim, generator=gen, dtype=torch.float64)
        _, idx = quant.quantize(pts)
        quant.ema_update(pts, idx)
        counts += torch.bincount(idx[:, 0], minlength=k)
    n_eff = counts / steps * (1 + decay) / (1 - decay)
    ratio = float(((quant.codebook[0] - means).abs() / (3 * sigma / n_eff.sqrt())[:, None]).max())

    big = vq.GroupVQ(vq.VqConfig())
    qq, ii = big.quantize(torch.randn(500, 120))
    qq2, ii2 = big.quantize(qq.detach())
    idem_ok = torch.equal(ii, ii2) and torch.equal(qq, qq2)

    ok = nn_ok and st_ok and ratio < 1 and idem_ok
    verdict(5, "vq", ok, f"nearest=brute on 1e4: {nn_ok}, straight-through: {st_ok}, "
            f"EMA error {ratio:.2f} of 3 sigma/sqrt(n), idempotent: {idem_ok}", time.monotonic() - t0)


def test_6_dsp(verdict):
    t0 = time.monotonic()
    cola = dsp.cola_sum(n_frames=40)[WIN:-WIN]
    cola_dev = float(np.abs(cola - dsp.DEFAULT_STFT.cola_gain).max())
    x = np.random.default_rng(1).standard_normal(16000)
    y = dsp.istft(dsp.stft(torch.from_numpy(x))).numpy()
    inner = slice(WIN, -WIN)
    rt_db = 10 * np.log10(np.sum((x[inner] - y[inner]) ** 2) / np.sum(x[inner] ** 2))
    z = torch.randn(5000, 2, dtype=torch.float64) * torch.logspace(-4, 3, 5000, dtype=torch.float64)[:, None]
    back = dsp.power_law_expand(dsp.power_law_compress(z, 0.3), 0.3)
    pl_rel = float(((back - z).norm(dim=-1) / z.norm(dim=-1)).max())
    ok = cola_dev < 1e-10 and rt_db < -120 and pl_rel < 1e-6
    verdict(6, "dsp", ok, f"COLA deviation {cola_dev:.1e}, round trip {rt_db:.1f} dB, "
            f"power law {pl_rel:.1e} relative", time.monotonic() - t0)


def test_7_channel(verdict):
    t0 = time.monotonic()
    model = ch.ThreeStateModel()
    received, states = ch.simulate(model, 1_000_000, seed=42, return_states=True)
    analytic = ch.stationary_loss_rate(model)
    empirical = 1.0 - received.mean()
    pvals = [ch.chi_square_pvalue(ch.dwell_times(states, s), ch.geometric_pmf(model.matrix[s, s], 200))
             for s in (ch.GOOD, ch.LOSSY, ch.BURST)]
    again = ch.simulate(model, 1_000_000, seed=42, return_states=True)
    det = np.array_equal(received, again[0]) and np.array_equal(states, again[1])
    ok = abs(empirical - analytic) < 0.01 and min(pvals) > 0.01 and det
    verdict(7, "channel", ok, f"loss rate {empirical:.4f} vs analytic {analytic:.4f}, "
            f"dwell chi-square min p {min(pvals):.3f}, deterministic: {det}", time.monotonic() - t0)


def test_8_bitstream(verdict):
    t0 = time.monotonic()
    cases = 0
    for size in (2, 32, 1024):
        h = bs.StreamHeader(codebook_size=size)
        edges = sorted({0, 1, size // 2 - 1, size // 2, size - 2, size - 1})
        for combo in itertools.product(edges, repeat=3):
            frames = [list(combo), list(reversed(combo)), [combo[0]] * 3, [combo[-1]] * 3]
            assert bs.unpack(bs.pack(frames, h), h) == frames
            cases += 1
    rng = np.random.default_rng(0)
    h = bs.StreamHeader()
    crashes = 0
    for _ in range(20_000):
        payload = rng.bytes(int(rng.integers(0, 30)))
        try:
            frames = bs.unpack(bs.Packet(0, payload), h)
            assert bs.pack(frames, h).payload == payload
        except bs.MalformedPacket:
            pass
        except Exception:
            crashes += 1
    law = np.array_equal(bs.trace_mask([1, 0] * 3, 4), [1, 1, 1, 1, 0, 0, 0, 0] * 3)
    ok = crashes == 0 and law
    verdict(8, "bitstream", ok, f"{cases} boundary round trips exact, 20000 fuzzed packets, "
            f"{crashes} crashes, 11110000 law: {law}", time.monotonic() - t0)


def test_9_training_smoke(verdict):
    t0 = time.monotonic()
    torch.manual_seed(0)
    clip = train.synthetic_speech(3.0, 7)
    model = TFNet(CodecConfig())
    run = train.overfit_smoke(model, clip, max_steps=3000, target_snr=10.0, eval_every=50, time_limit_s=1800)
    best = max(s for _, s in run["snrs"])
    rises = int((np.diff(train.smooth(run["losses"])) > 0).sum())
    overfit_ok = best > 10.0 and run["seconds"] < 1800 and rises == 0

    torch.manual_seed(0)
    cfg = train.TrainConfig(mode="all_in_one", batch=1, segment_s=1.0, steps_per_epoch=500)
    aio = TFNet(CodecConfig(aux_decoder=True))
    trainer = train.Trainer(aio, cfg)
    corpus = train.Corpus.synthetic(n_clean=4, n_noise=2, seconds=3.0)
    finite = True
    try:
        totals = [trainer.train_step(train.make_batch(corpus, cfg, s, noisy=True))["total"] for s in range(500)]
        finite = all(math.isfinite(v) for v in totals)
    except train.NumericalError:
        finite = False

    aio.eval()
    for p in aio.parameters():
        p.grad = None
    out = aio(aio.analyze(torch.from_numpy(clip[:8000]).float().unsqueeze(0)))
    out["decoded"].sum().backward()
    aux_free = ("aux" not in out and all(p.grad is None for p in aio.aux_decoder.parameters())
                and not any(k.startswith("aux_decoder") for k in aio.inference_state_dict()))
    ok = overfit_ok and finite and aux_free
    verdict(9, "training smoke", ok,
            f"overfit SNR {best:.2f} dB after {run['steps']} steps in {run['seconds']:.0f} s, "
            f"smoothed-loss rises {rises}; all-in-one 500 steps finite: {finite}; "
            f"aux absent at inference: {aux_free}", time.monotonic() - t0)


def test_10_ablation(verdict):
    t0 = time.monotonic()
    arms = cli.match_arms(CodecConfig())
    counts = {a: TFNet(c).inference_parameters() for a, c in arms.items()}
    spread = (max(counts.values()) - min(counts.values())) / min(counts.values())
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        rc = cli.main(["ablate", "--steps", "500"])
    lines = buf.getvalue().strip().splitlines()
    reported = [l for l in lines if l.startswith("arm ")]
    order = next((l for l in lines if l.startswith("ordering")), "ordering: missing")
    ok = rc == 0 and spread <= 0.05 and len(reported) == 3
    verdict(10, "ablation", ok, f"params {counts} (spread {spread:.2%}), 500 steps per arm, "
            f"{order}", time.monotonic() - t0)
