"""Command-line entry point: ``tfnet <subcommand> ...``.

Configuration comes from compiled defaults, then an optional key=value file
(``--config``), then ``--set key=value`` flags and the dedicated flags of each
subcommand. Keys are dotted: ``codec.channels``, ``vq.codebook_size``,
``train.lr``, ``loss.alpha``, ``mixture.snr_db``, ``channel.p_lossy``.
Tuples are comma separated; ``channel.transitions`` takes nine values, row
by row.

Exit codes: 0 success, 1 usage, 2 data or format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import bitstream, channel, dsp, train
from .codec import CodecConfig, TFNet
from .nn import exact_kernels, grad_check
from .vq import VqConfig

log = logging.getLogger("tfnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# Configuration


def read_config_file(path: str | Path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _parse_value(raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        sample = default[0] if default else ""
        if isinstance(sample, tuple):
            vals = [float(s) for s in items]
            width = len(sample)
            return tuple(tuple(vals[i:i + width]) for i in range(0, len(vals), width))
        return tuple(type(sample)(s) if not isinstance(sample, str) else s for s in items)
    if default is None:
        return None if raw.lower() == "none" else int(raw)
    return type(default)(raw)


_SECTIONS = ("codec", "vq", "train", "loss", "mixture", "channel")


def build_configs(overrides: dict[str, str]) -> tuple[CodecConfig, train.TrainConfig]:
    """Compiled defaults with dotted-key overrides applied."""
    codec, vq = CodecConfig(), VqConfig()
    tcfg = train.TrainConfig()
    objs = {"codec": codec, "vq": vq, "train": tcfg, "loss": tcfg.loss,
            "mixture": tcfg.mixture, "channel": tcfg.channel}
    changes: dict[str, dict] = {s: {} for s in _SECTIONS}
    for key, raw in overrides.items():
        section, _, name = key.partition(".")
        if section not in objs or not name:
            raise UsageError(f"unknown config key {key!r} (sections: {', '.join(_SECTIONS)})")
        fields = {f.name for f in dataclasses.fields(objs[section])}
        if name not in fields or name in ("vq", "stft", "loss", "mixture", "channel"):
            raise UsageError(f"unknown config key {key!r}")
        try:
            changes[section][name] = _parse_value(raw, getattr(objs[section], name))
        except ValueError as e:
            raise UsageError(f"bad value for {key}: {e}") from None
    try:
        vq = dataclasses.replace(vq, **changes["vq"])
        codec = dataclasses.replace(codec, vq=vq, **changes["codec"])
        tcfg = dataclasses.replace(
            tcfg,
            loss=dataclasses.replace(tcfg.loss, **changes["loss"]),
            mixture=dataclasses.replace(tcfg.mixture, **changes["mixture"]),
            channel=dataclasses.replace(tcfg.channel, **changes["channel"]),
            **changes["train"])
    except (ValueError, TypeError) as e:
        raise UsageError(f"invalid configuration: {e}") from None
    return codec, tcfg


def _overrides(args) -> dict[str, str]:
    out = read_config_file(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if getattr(args, "seed", None) is not None:
        out["train.seed"] = str(args.seed)
    return out


def _configs(args) -> tuple[CodecConfig, train.TrainConfig]:
    return build_configs(_overrides(args))


def _load_or_build(args, codec_cfg: CodecConfig, seed: int) -> TFNet:
    if args.ckpt:
        try:
            return train.load_model(args.ckpt)
        except (OSError, ValueError, KeyError) as e:
            raise DataError(f"cannot load checkpoint {args.ckpt}: {e}") from None
    log.warning("no --ckpt given: using an untrained model (seed %d)", seed)
    torch.manual_seed(seed)
    model = TFNet(codec_cfg)
    model.eval()
    return model


def _read_wave(path) -> dsp.Waveform:
    try:
        return dsp.read_wav(path)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read {path}: {e}") from None


def _report(**items):
    for k, v in items.items():
        print(f"{k}: {v:.4f}" if isinstance(v, float) else f"{k}: {v}")


def stream_header(model: TFNet, n_samples: int) -> bitstream.StreamHeader:
    c = model.cfg
    return bitstream.StreamHeader(dsp.SAMPLE_RATE, c.stft.window_len, c.stft.hop_len,
                                  c.vq.n_groups, c.vq.codebook_size, 4, n_samples)


def encode_samples(model: TFNet, samples: np.ndarray, frames_per_packet: int = 4) -> np.ndarray:
    """Indices ``[T, N]`` for a whole number of packets.

    ``window - hop`` zeros are appended so the last hop of input is covered by
    a frame, then frames are padded up to a packet boundary.
    """
    cfg = model.cfg.stft
    n = len(samples)
    if n == 0:
        raise DataError("input has no samples")
    n_frames = -(-n // cfg.hop_len)
    n_frames = -(-n_frames // frames_per_packet) * frames_per_packet
    padded = np.zeros(cfg.n_samples(n_frames), dtype=np.float32)
    padded[:n] = samples
    return model.encode_wave(torch.from_numpy(padded)).numpy()


def decode_stream(model: TFNet, header: bitstream.StreamHeader, packets, received=None) -> np.ndarray:
    if received is None:
        received = np.ones(len(packets), dtype=bool)
    feats, mask = bitstream.apply_trace(packets, received, header, model.vq.dequantize)
    with torch.no_grad(), exact_kernels():
        y, _ = model.decode(feats.unsqueeze(0), mask.unsqueeze(0))
        wave = model.synthesize(y)[0].numpy()
    return wave[:header.n_samples] if header.n_samples else wave


def check_header(model: TFNet, header: bitstream.StreamHeader):
    expect = stream_header(model, header.n_samples)
    keys = ("sample_rate", "window_len", "hop_len", "n_groups", "codebook_size")
    if any(getattr(expect, k) != getattr(header, k) for k in keys):
        raise DataError("stream header does not match checkpoint\n"
                        f"  stream:     {json.dumps({k: getattr(header, k) for k in keys})}\n"
                        f"  checkpoint: {json.dumps({k: getattr(expect, k) for k in keys})}")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_encode(args) -> int:
    codec_cfg, tcfg = _configs(args)
    model = _load_or_build(args, codec_cfg, tcfg.seed)
    wave = _read_wave(args.input)
    header = stream_header(model, len(wave))
    idx = encode_samples(model, wave.samples.astype(np.float32), header.frames_per_packet)
    packets = bitstream.packetize(idx, header)
    bitstream.write_stream(args.output, header, packets)
    _report(frames=len(idx), packets=len(packets), payload_bits=len(packets) * header.payload_bits,
            header_bytes=bitstream.header_size(),
            kbps=bitstream.payload_bitrate_kbps(header, len(packets)))
    return EXIT_OK


def cmd_decode(args) -> int:
    codec_cfg, tcfg = _configs(args)
    model = _load_or_build(args, codec_cfg, tcfg.seed)
    try:
        header, packets = bitstream.read_stream(args.input)
    except (OSError, bitstream.MalformedPacket) as e:
        raise DataError(f"cannot read stream {args.input}: {e}") from None
    check_header(model, header)
    received = None
    if args.trace:
        try:
            received = channel.read_trace(args.trace)
        except (OSError, ValueError) as e:
            raise DataError(str(e)) from None
        if len(received) < len(packets):
            raise DataError(f"trace covers {len(received)} packets, stream has {len(packets)}")
        received = received[:len(packets)]
    try:
        wave = decode_stream(model, header, packets, received)
    except bitstream.MalformedPacket as e:
        raise DataError(str(e)) from None
    if not np.all(np.isfinite(wave)):
        raise FloatingPointError("decoded audio is not finite")
    dsp.write_wav(args.output, dsp.Waveform(wave.astype(np.float64)))
    lost = 0 if received is None else int((~received).sum())
    items = dict(packets=len(packets), lost_packets=lost,
                 kbps=bitstream.payload_bitrate_kbps(header, len(packets)))
    if args.ref:
        ref = _read_wave(args.ref).samples
        n = min(len(ref), len(wave))
        items["snr_db"] = train.snr_db(ref[1:n], wave[1:n])
        items["spectral_distance"] = train.spectral_distance(ref[:n], wave[:n])
    _report(**items)
    return EXIT_OK


def _corpus(args) -> train.Corpus:
    if getattr(args, "manifest", None):
        try:
            return train.Corpus.from_manifest(args.manifest)
        except (OSError, ValueError) as e:
            raise DataError(f"cannot load manifest {args.manifest}: {e}") from None
    return train.Corpus.synthetic()


def cmd_train(args) -> int:
    overrides = _overrides(args)
    codec_cfg, tcfg = build_configs(overrides)
    if args.mode:
        tcfg = dataclasses.replace(tcfg, mode=args.mode)
    if tcfg.mode == "all_in_one" and not codec_cfg.aux_decoder:
        codec_cfg = dataclasses.replace(codec_cfg, aux_decoder=True)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        try:
            trainer = train.Trainer.load(args.resume)
        except (OSError, ValueError, KeyError) as e:
            raise DataError(f"cannot resume from {args.resume}: {e}") from None
        # the run continues under its saved config; only the epoch budget may grow
        if "train.epochs" in overrides:
            trainer.cfg = dataclasses.replace(trainer.cfg, epochs=tcfg.epochs)
    else:
        torch.manual_seed(tcfg.seed)
        trainer = train.Trainer(TFNet(codec_cfg), tcfg)
    with open(out / "metrics.jsonl", "a") as metrics:
        history = trainer.fit(_corpus(args), out, metrics)
    train.save_model(out / "model.ckpt", trainer.model)
    last = history[-1] if history else {}
    _report(step=trainer.step, parameters=trainer.model.inference_parameters(),
            **{k: float(v) for k, v in last.items() if k in ("total", "recon", "commit", "aux")})
    return EXIT_OK


ABLATION_ARMS = ("tcm", "gru", "interleaved")


def _arm_config(base: CodecConfig, arm: str, width: int | None) -> CodecConfig:
    kinds = {"tcm": ("tcm",) * 4, "gru": ("gru",) * 4, "interleaved": ("tcm", "ggru") * 2}[arm]
    extra = {"tcm": {"tcm_hidden": width}, "gru": {"gru_hidden": width}, "interleaved": {}}[arm]
    return dataclasses.replace(base, encode_stack=(), decode_stack=kinds, aux_decoder=False, **extra)


def _arm_params(cfg: CodecConfig) -> int:
    return TFNet(cfg).inference_parameters()


def match_arms(base: CodecConfig, tolerance: float = 0.05) -> dict[str, CodecConfig]:
    """Decode-only arm configs with widths chosen so parameter counts match the interleaved arm.

    Raises :class:`DataError` when some arm cannot be brought within ``tolerance``.
    """
    target_cfg = _arm_config(base, "interleaved", None)
    target = _arm_params(target_cfg)
    arms = {"interleaved": target_cfg}
    for arm in ("tcm", "gru"):
        lo, hi = 1, 8 * base.channels
        while lo < hi:                      # smallest width reaching the target
            mid = (lo + hi) // 2
            if _arm_params(_arm_config(base, arm, mid)) < target:
                lo = mid + 1
            else:
                hi = mid
        best = min((w for w in (lo - 1, lo) if w >= 1),
                   key=lambda w: abs(_arm_params(_arm_config(base, arm, w)) - target))
        arms[arm] = _arm_config(base, arm, best)
    counts = {a: _arm_params(c) for a, c in arms.items()}
    spread = (max(counts.values()) - min(counts.values())) / min(counts.values())
    if spread > tolerance:
        raise DataError(f"arm parameter counts differ by {spread:.1%} (> {tolerance:.0%}): {counts}")
    return {a: arms[a] for a in ABLATION_ARMS}


def validation_distance(model: TFNet, clips) -> float:
    model.eval()
    dists = []
    with torch.no_grad():
        for clip in clips:
            wave = torch.as_tensor(clip, dtype=torch.float32).unsqueeze(0)
            out = model(model.analyze(wave))
            rec = model.synthesize(out["decoded"])[0].numpy()
            dists.append(train.spectral_distance(clip[:len(rec)], rec))
    return float(np.mean(dists))


def cmd_ablate(args) -> int:
    codec_cfg, tcfg = _configs(args)
    tcfg = dataclasses.replace(tcfg, steps_per_epoch=args.steps, epochs=1,
                               batch=args.batch, segment_s=args.segment)
    arms = match_arms(codec_cfg, args.tolerance)
    corpus = _corpus(args)
    val = [train.synthetic_speech(args.segment, 10_000 + i) for i in range(2)]
    results = {}
    for arm, cfg in arms.items():
        torch.manual_seed(tcfg.seed)
        trainer = train.Trainer(TFNet(cfg), tcfg)
        t0 = time.monotonic()
        trainer.fit(corpus)
        results[arm] = (trainer.model.inference_parameters(), validation_distance(trainer.model, val))
        log.info("arm %s done in %.0f s", arm, time.monotonic() - t0)
    for arm, (n, d) in results.items():
        print(f"arm {arm}: parameters {n} spectral_distance {d:.5f}")
    order = sorted(results, key=lambda a: results[a][1])
    print("ordering (best first): " + " < ".join(order))
    return EXIT_OK


def cmd_simulate(args) -> int:
    _, tcfg = _configs(args)
    model = tcfg.channel
    received = channel.simulate(model, args.n, tcfg.seed)
    channel.write_trace(args.output, received)
    _report(packets=args.n, empirical_loss_rate=float(1.0 - received.mean()),
            analytic_loss_rate=channel.long_run_loss_rate(model))
    return EXIT_OK


def _gradcheck_scopes() -> dict:
    from . import dsp as d, nn as n, temporal as t
    g = torch.Generator().manual_seed(0)

    def rand(*shape):
        return torch.randn(*shape, generator=g, dtype=torch.float64)

    def tcm():
        m = t.TcmBlock(6, 8, dilation=2)
        return grad_check(lambda x: m(x)[0], [rand(2, 9, 6)], module=m)

    def ggru():
        m = t.GGruBlock(8, 2)
        return grad_check(lambda x: m(x)[0], [rand(2, 7, 8)], module=m)

    def conv():
        return grad_check(lambda x, k: n.causal_conv2d(x, k, stride_f=2), [rand(2, 5, 8, 3), rand(2, 5, 3, 4)])

    def deconv():
        return grad_check(lambda x, k: n.causal_deconv2d(x, k, stride_f=2), [rand(2, 5, 4, 3), rand(2, 5, 3, 4)])

    def stft():
        return grad_check(lambda x: d.power_law_compress(d.stft(d.istft(d.stft(x))), 0.3, 1e-8), [rand(1, 960)])

    def vq():
        from .vq import commitment_loss, project_down
        m = project_down(8, 6)
        q = rand(5, 6)
        return grad_check(lambda x: commitment_loss(m(x), q), [rand(5, 8)], module=m)

    return {"tcm": tcm, "ggru": ggru, "conv": conv, "deconv": deconv, "stft": stft, "vq": vq}


def cmd_gradcheck(args) -> int:
    scopes = _gradcheck_scopes()
    names = list(scopes) if args.scope == "all" else [args.scope]
    unknown = [s for s in names if s not in scopes]
    if unknown:
        raise UsageError(f"unknown scope {unknown[0]!r}; valid scopes: all, {', '.join(scopes)}")
    worst = 0.0
    for s in names:
        err = scopes[s]()
        worst = max(worst, err)
        print(f"{s}: max relative error {err:.3e}")
    print(f"worst: {worst:.3e}")
    return EXIT_OK if worst < 1e-5 else EXIT_NUMERIC


def cmd_eval(args) -> int:
    codec_cfg, tcfg = _configs(args)
    model = _load_or_build(args, codec_cfg, tcfg.seed)
    samples = _read_wave(args.input).samples if args.input else train.synthetic_speech(3.0, tcfg.seed)
    header = stream_header(model, len(samples))
    idx = encode_samples(model, samples.astype(np.float32))
    packets = bitstream.packetize(idx, header)
    wave = decode_stream(model, header, packets)
    _report(kbps=bitstream.payload_bitrate_kbps(header, len(packets)),
            snr_db=train.snr_db(samples[1:], wave[1:]),
            spectral_distance=train.spectral_distance(samples, wave))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tfnet", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, ckpt=False):
        sp.add_argument("--config", help="key=value configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int)
        if ckpt:
            sp.add_argument("--ckpt", help="model checkpoint (default: untrained model from config)")

    sp = sub.add_parser("encode", help="WAV to .tfn bitstream")
    common(sp, ckpt=True)
    sp.add_argument("input")
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("decode", help=".tfn bitstream to WAV")
    common(sp, ckpt=True)
    sp.add_argument("input")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--trace", help="packet trace (1 = lost) applied before decoding")
    sp.add_argument("--ref", help="reference WAV for SNR and spectral distance")
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("train", help="train a codec")
    common(sp)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--mode", choices=("plain", "all_in_one"))
    sp.add_argument("--manifest", help="dataset manifest (lines of: clean|noise <wav path>)")
    sp.add_argument("--resume", help="training checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("ablate", help="compare TCM, GRU and interleaved decoder stacks")
    common(sp)
    sp.add_argument("--steps", type=int, default=500)
    sp.add_argument("--batch", type=int, default=2)
    sp.add_argument("--segment", type=float, default=1.0, help="segment length in seconds")
    sp.add_argument("--tolerance", type=float, default=0.05)
    sp.add_argument("--manifest")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("simulate", help="write a packet-loss trace")
    common(sp)
    sp.add_argument("-n", type=int, required=True, help="number of packets")
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    sp.add_argument("scope", nargs="?", default="all")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("eval", help="round-trip a WAV (or a synthetic clip) and report quality")
    common(sp, ckpt=True)
    sp.add_argument("input", nargs="?")
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, dsp.InsufficientSamplesError, bitstream.MalformedPacket, channel.ChainError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (train.NumericalError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
