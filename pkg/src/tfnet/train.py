"""Losses, noisy-mixture synthesis and the training loop."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import signal
from torch import Tensor

from . import channel, dsp
from .codec import CodecConfig, TFNet, loss_mask
from .nn import load_checkpoint, save_checkpoint
from .vq import usage_entropy

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.25       # commitment weight
    power: float = 0.3
    aux_weight: float = 1.0   # clean-decoder weight, all-in-one mode only
    eps: float = 1e-8         # added to |z|^2 before compression, for gradients near zero

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.aux_weight < 0:
            raise ValueError("aux_weight must be non-negative")


@dataclass(frozen=True)
class MixtureSpec:
    snr_db: tuple[float, float] = (-5.0, 20.0)
    level_db: tuple[float, float] = (-40.0, -10.0)
    segment_s: float = 3.0
    reverb: bool = False


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 4e-4
    epochs: int = 1
    steps_per_epoch: int = 100
    batch: int = 8
    segment_s: float = 3.0
    mode: str = "plain"            # plain | all_in_one
    seed: int = 0
    frames_per_packet: int = 4
    loss: LossConfig = field(default_factory=LossConfig)
    mixture: MixtureSpec = field(default_factory=MixtureSpec)
    channel: channel.ThreeStateModel = field(default_factory=channel.ThreeStateModel)

    def __post_init__(self):
        if self.mode not in ("plain", "all_in_one"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if min(self.lr, self.epochs, self.steps_per_epoch, self.batch, self.segment_s) <= 0:
            raise ValueError("training sizes and learning rate must be positive")


# ---------------------------------------------------------------------------
# Losses


def compressed_spectrum(wave: Tensor, p: float, cfg: dsp.StftConfig = dsp.DEFAULT_STFT, eps: float = 0.0) -> Tensor:
    return dsp.power_law_compress(dsp.stft(wave, cfg), p, eps)


def recon_loss(decoded: Tensor, target_wave: Tensor, p: float = 0.3,
               cfg: dsp.StftConfig = dsp.DEFAULT_STFT, eps: float = 1e-8) -> Tensor:
    """MSE between compressed ``stft(istft(decoded))`` and compressed ``stft(target)``.

    ``decoded`` is a linear spectrum ``[..., T, 161, 2]``; the target is cut
    to the ``T`` frames it covers.
    """
    T = decoded.shape[-3]
    target = target_wave[..., :cfg.n_samples(T)]
    est = compressed_spectrum(dsp.istft(decoded, cfg), p, cfg, eps)
    ref = compressed_spectrum(target, p, cfg, eps)
    return ((est - ref) ** 2).mean()


def total_loss(out: dict[str, Tensor], model: TFNet, target_wave: Tensor, cfg: LossConfig,
               clean_wave: Tensor | None = None) -> tuple[Tensor, dict[str, float]]:
    """``recon + alpha * commit`` plus ``aux_weight * aux_recon`` when an aux output is present."""
    stft_cfg = model.cfg.stft
    recon = recon_loss(model.to_linear(out["decoded"]), target_wave, cfg.power, stft_cfg, cfg.eps)
    total = recon + cfg.alpha * out["commit"]
    terms = {"recon": recon.item(), "commit": out["commit"].item()}
    if "aux" in out:
        clean = target_wave if clean_wave is None else clean_wave
        aux = recon_loss(model.to_linear(out["aux"]), clean, cfg.power, stft_cfg, cfg.eps)
        total = total + cfg.aux_weight * aux
        terms["aux"] = aux.item()
    terms["total"] = total.item()
    return total, terms


def snr_db(ref: np.ndarray | Tensor, est: np.ndarray | Tensor) -> float:
    ref, est = np.asarray(ref, dtype=np.float64), np.asarray(est, dtype=np.float64)
    n = min(len(ref), len(est))
    err = np.sum((ref[:n] - est[:n]) ** 2)
    if err == 0:
        return float("inf")
    sig = np.sum(ref[:n] ** 2)
    return float("-inf") if sig == 0 else float(10 * np.log10(sig / err))


def spectral_distance(ref: np.ndarray | Tensor, est: np.ndarray | Tensor, p: float = 0.3) -> float:
    """Mean squared distance between power-law compressed spectra."""
    ref = torch.as_tensor(np.asarray(ref), dtype=torch.float64)
    est = torch.as_tensor(np.asarray(est), dtype=torch.float64)
    n = min(len(ref), len(est))
    pad = max(0, dsp.DEFAULT_STFT.window_len - n)   # clips shorter than one window
    ref, est = torch.nn.functional.pad(ref[:n], (0, pad)), torch.nn.functional.pad(est[:n], (0, pad))
    return float(((compressed_spectrum(ref, p) - compressed_spectrum(est, p)) ** 2).mean())


# ---------------------------------------------------------------------------
# Data


def rms_db(x: np.ndarray) -> float:
    return float(10 * np.log10(np.mean(np.square(x)) + 1e-30))


def synthetic_speech(seconds: float, seed: int, sr: int = dsp.SAMPLE_RATE) -> np.ndarray:
    """Speech-like test signal: voiced syllables with moving pitch and formants, fricatives, pauses."""
    rng = np.random.default_rng(seed)
    n = int(round(seconds * sr))
    out = np.zeros(n)
    pos = int(rng.integers(0, sr // 20))
    base_f0 = rng.uniform(90, 220)
    while pos < n:
        dur = int(rng.uniform(0.12, 0.32) * sr)
        seg = min(dur, n - pos)
        t = np.arange(seg) / sr
        env = np.sin(np.pi * np.arange(seg) / max(dur, 1)) ** 0.6
        if rng.random() < 0.8:
            f0 = base_f0 * np.exp(rng.uniform(-0.2, 0.2) + rng.uniform(-0.4, 0.4) * t)
            phase = 2 * np.pi * np.cumsum(f0) / sr + rng.uniform(0, 2 * np.pi)
            src = np.zeros(seg)
            for k in range(1, int(7800 / f0.max()) + 1):
                src += np.sin(k * phase) / k
            for fc, bw in zip(rng.uniform([300, 900, 2200], [900, 2300, 3400]), (80, 120, 180)):
                r = np.exp(-np.pi * bw / sr)
                src = signal.lfilter([1 - r], [1, -2 * r * np.cos(2 * np.pi * fc / sr), r * r], src)
        else:
            b, a = signal.butter(2, rng.uniform(2500, 5000) / (sr / 2), "high")
            src = signal.lfilter(b, a, rng.standard_normal(seg)) * 0.3
        src /= np.sqrt(np.mean(src ** 2)) + 1e-12
        out[pos:pos + seg] += src * env * rng.uniform(0.5, 1.0)
        pos += seg + (int(rng.uniform(0.05, 0.3) * sr) if rng.random() < 0.3 else int(0.01 * sr))
    return out / (np.abs(out).max() + 1e-12) * 0.5


def synthetic_noise(seconds: float, seed: int, sr: int = dsp.SAMPLE_RATE) -> np.ndarray:
    """Colored noise with occasional hum, as a stand-in for recorded noise."""
    rng = np.random.default_rng(seed)
    n = int(round(seconds * sr))
    white = rng.standard_normal(n)
    pole = rng.uniform(0.0, 0.98)
    x = signal.lfilter([1.0], [1.0, -pole], white)
    if rng.random() < 0.5:
        f = rng.uniform(50, 400)
        x = x / (np.std(x) + 1e-12) + 0.5 * np.sin(2 * np.pi * f * np.arange(n) / sr)
    return x / (np.std(x) + 1e-12) * 0.1


def _crop(x: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if len(x) < n:
        raise ValueError(f"source has {len(x)} samples, need at least {n}")
    start = int(rng.integers(0, len(x) - n + 1))
    return x[start:start + n]


def synthesize_mixture(clean: dsp.Waveform | np.ndarray, noise: dsp.Waveform | np.ndarray,
                       spec: MixtureSpec, seed: int, max_tries: int = 20) -> tuple[np.ndarray, np.ndarray, dict]:
    """Crop, level and mix one training example.

    Returns (noisy, clean_target, info). The clean crop is scaled to a level
    drawn from ``spec.level_db`` (dBFS RMS) and the noise so that the
    segment SNR equals a draw from ``spec.snr_db``.
    """
    if spec.reverb:
        raise NotImplementedError("reverberant mixtures need room impulse responses")
    clean = clean.samples if isinstance(clean, dsp.Waveform) else np.asarray(clean, dtype=np.float64)
    noise = noise.samples if isinstance(noise, dsp.Waveform) else np.asarray(noise, dtype=np.float64)
    rng = np.random.default_rng(seed)
    n = int(round(spec.segment_s * dsp.SAMPLE_RATE))
    for _ in range(max_tries):
        c = _crop(clean, n, rng)
        if np.sum(c ** 2) > 1e-10:
            break
    else:
        raise ValueError("could not find a non-silent clean segment")
    level = rng.uniform(*spec.level_db)
    snr = rng.uniform(*spec.snr_db)
    c = c * 10 ** ((level - rms_db(c)) / 20)
    nz = _crop(noise, n, rng)
    p_noise = np.mean(nz ** 2)
    if p_noise > 0:
        nz = nz * np.sqrt(np.mean(c ** 2) / (p_noise * 10 ** (snr / 10)))
    else:
        nz = np.zeros(n)
    return c + nz, c, {"snr_db": snr, "level_db": level}


def read_manifest(path: str | Path) -> tuple[list[Path], list[Path]]:
    """Manifest lines: ``<clean|noise> <wav path>``; ``#`` starts a comment."""
    clean, noise = [], []
    base = Path(path).parent
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        role, p = line.split(None, 1)
        target = {"clean": clean, "noise": noise}.get(role)
        if target is None:
            raise ValueError(f"unknown role {role!r} in {path}")
        target.append((base / p) if not Path(p).is_absolute() else Path(p))
    return clean, noise


class Corpus:
    """Clean and noise sources; synthetic when no manifest is given."""

    def __init__(self, clean: Sequence[np.ndarray], noise: Sequence[np.ndarray]):
        if not clean or not noise:
            raise ValueError("corpus needs at least one clean and one noise source")
        self.clean, self.noise = list(clean), list(noise)

    @classmethod
    def synthetic(cls, n_clean: int = 8, n_noise: int = 4, seconds: float = 6.0, seed: int = 1234):
        return cls([synthetic_speech(seconds, seed + i) for i in range(n_clean)],
                   [synthetic_noise(seconds, seed + 1000 + i) for i in range(n_noise)])

    @classmethod
    def from_manifest(cls, path: str | Path):
        clean, noise = read_manifest(path)
        return cls([dsp.read_wav(p).samples for p in clean], [dsp.read_wav(p).samples for p in noise])


# ---------------------------------------------------------------------------
# Training loop


def example_seed(seed: int, step: int, item: int) -> int:
    return int(np.random.SeedSequence([seed, step, item]).generate_state(1)[0])


def make_batch(corpus: Corpus, cfg: TrainConfig, step: int, noisy: bool) -> dict[str, Tensor]:
    """Batch for ``step``; a pure function of (corpus, cfg, step)."""
    spec = dataclasses.replace(cfg.mixture, segment_s=cfg.segment_s)
    inputs, targets, masks = [], [], []
    n_frames = dsp.DEFAULT_STFT.n_frames(int(round(cfg.segment_s * dsp.SAMPLE_RATE)))
    n_packets = -(-n_frames // cfg.frames_per_packet)
    for b in range(cfg.batch):
        s = example_seed(cfg.seed, step, b)
        rng = np.random.default_rng(s)
        clean = corpus.clean[int(rng.integers(len(corpus.clean)))]
        noise = corpus.noise[int(rng.integers(len(corpus.noise)))]
        x, c, _ = synthesize_mixture(clean, noise, spec, s)
        inputs.append(x if noisy else c)
        targets.append(c)
        if cfg.mode == "all_in_one":
            received = channel.simulate(cfg.channel, n_packets, s)
        else:
            received = np.ones(n_packets, dtype=bool)
        masks.append(loss_mask(received, cfg.frames_per_packet)[:n_frames])
    return {"input": torch.tensor(np.stack(inputs), dtype=torch.float32),
            "target": torch.tensor(np.stack(targets), dtype=torch.float32),
            "mask": torch.stack(masks)}


class Trainer:
    """Adam on a :class:`TFNet`, with EMA codebook updates and resumable checkpoints."""

    def __init__(self, model: TFNet, cfg: TrainConfig):
        self.model, self.cfg = model, cfg
        self.opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
        self.step = 0

    def train_step(self, batch: dict[str, Tensor]) -> dict[str, float]:
        model, cfg = self.model, self.cfg
        model.train()
        x = model.analyze(batch["input"])
        out = model(x, batch["mask"])
        loss, terms = total_loss(out, model, batch["target"], cfg.loss)
        if not math.isfinite(loss.item()) or any(v < 0 for v in terms.values()):
            raise NumericalError(json.dumps({"step": self.step, "terms": terms}))
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        if not model.cfg.vq.bypass:
            model.vq.ema_update(out["latent"], out["indices"])
            terms["usage_entropy"] = usage_entropy(out["indices"], model.cfg.vq.codebook_size)
            terms["dead_codes"] = model.vq.dead_codes()
        self.step += 1
        terms["step"] = self.step
        return terms

    def train_epoch(self, corpus: Corpus, metrics_out=None) -> dict[str, float]:
        totals: dict[str, float] = {}
        for _ in range(self.cfg.steps_per_epoch):
            terms = self.train_step(make_batch(corpus, self.cfg, self.step,
                                               noisy=self.cfg.mode == "all_in_one"))
            if metrics_out is not None:
                metrics_out.write(json.dumps(terms) + "\n")
            for k, v in terms.items():
                totals[k] = totals.get(k, 0.0) + v
        return {k: v / self.cfg.steps_per_epoch for k, v in totals.items() if k != "step"}

    def fit(self, corpus: Corpus, checkpoint_dir: str | Path | None = None, metrics_out=None) -> list[dict]:
        history = []
        start_epoch = self.step // self.cfg.steps_per_epoch
        for epoch in range(start_epoch, self.cfg.epochs):
            summary = self.train_epoch(corpus, metrics_out)
            summary["epoch"] = epoch + 1
            history.append(summary)
            log.info("epoch %d: %s", epoch + 1, summary)
            if checkpoint_dir is not None:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                self.save(Path(checkpoint_dir) / f"epoch{epoch + 1:03d}.ckpt")
        return history

    # -- checkpoints --------------------------------------------------------

    def save(self, path: str | Path):
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        names = {id(p): n for n, p in self.model.named_parameters()}
        adam_steps = {}
        for group in self.opt.param_groups:
            for p in group["params"]:
                st = self.opt.state.get(p)
                if st:
                    n = names[id(p)]
                    tensors[f"adam.{n}.exp_avg"] = st["exp_avg"]
                    tensors[f"adam.{n}.exp_avg_sq"] = st["exp_avg_sq"]
                    adam_steps[n] = float(st["step"])
        meta = {"codec": self.model.cfg.to_dict(), "train": _train_cfg_dict(self.cfg),
                "step": self.step, "adam_steps": adam_steps}
        save_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path: str | Path, cfg: TrainConfig | None = None) -> "Trainer":
        tensors, meta = load_checkpoint(path)
        model = TFNet(CodecConfig.from_dict(meta["codec"]))
        model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
        trainer = cls(model, cfg or train_cfg_from_dict(meta["train"]))
        trainer.step = meta["step"]
        params = dict(model.named_parameters())
        for n, step in meta["adam_steps"].items():
            trainer.opt.state[params[n]] = {
                "step": torch.tensor(step),
                "exp_avg": tensors[f"adam.{n}.exp_avg"].clone(),
                "exp_avg_sq": tensors[f"adam.{n}.exp_avg_sq"].clone(),
            }
        return trainer


def _train_cfg_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def train_cfg_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["loss"] = LossConfig(**d["loss"])
    mix = dict(d["mixture"])
    d["mixture"] = MixtureSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in mix.items()})
    ch = dict(d["channel"])
    ch["transitions"] = tuple(tuple(r) for r in ch["transitions"])
    d["channel"] = channel.ThreeStateModel(**ch)
    return TrainConfig(**d)


def save_model(path: str | Path, model: TFNet):
    """Inference checkpoint: parameters and buffers, auxiliary decoder dropped."""
    tensors = {f"model.{k}": v for k, v in model.inference_state_dict().items()}
    cfg = dataclasses.replace(model.cfg, aux_decoder=False)
    save_checkpoint(path, tensors, {"codec": cfg.to_dict()})


def load_model(path: str | Path) -> TFNet:
    tensors, meta = load_checkpoint(path)
    cfg = dataclasses.replace(CodecConfig.from_dict(meta["codec"]), aux_decoder=False)
    model = TFNet(cfg)
    state = {k[6:]: v for k, v in tensors.items()
             if k.startswith("model.") and not k.startswith("model.aux_decoder.")}
    model.load_state_dict(state)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Overfit smoke


def reconstruction_snr(model: TFNet, clip: np.ndarray, exact: bool = False) -> float:
    """SNR of the quantized round trip of ``clip`` with the model in eval mode."""
    was_training = model.training
    model.eval()
    wave = torch.as_tensor(clip, dtype=torch.float32)
    try:
        if exact:
            rec = model.decode_indices(model.encode_wave(wave))
        else:
            with torch.no_grad():
                out = model(model.analyze(wave.unsqueeze(0)))
                rec = model.synthesize(out["decoded"])[0]
    finally:
        model.train(was_training)
    return snr_db(clip[1:len(rec)], rec[1:].numpy())


def smooth(values: Sequence[float], window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v
    return np.convolve(v, np.ones(window) / window, mode="valid")


def overfit_smoke(model: TFNet, clip: np.ndarray, max_steps: int = 3000, target_snr: float = 10.0,
                  lr: float = 4e-4, eval_every: int = 100, loss_cfg: LossConfig | None = None,
                  time_limit_s: float | None = None) -> dict:
    """Train on one clip until the eval-mode round-trip SNR passes ``target_snr``.

    Returns the loss history, the SNR checkpoints and the final loss.
    """
    import time

    loss_cfg = loss_cfg or LossConfig()
    cfg = TrainConfig(lr=lr, batch=1, loss=loss_cfg)
    trainer = Trainer(model, cfg)
    wave = torch.as_tensor(clip, dtype=torch.float32).unsqueeze(0)
    batch = {"input": wave, "target": wave,
             "mask": torch.ones(1, dsp.DEFAULT_STFT.n_frames(wave.shape[-1]))}
    losses, snrs = [], []
    t0 = time.monotonic()
    for step in range(1, max_steps + 1):
        terms = trainer.train_step(batch)
        losses.append(terms["total"])
        if step % eval_every == 0 or step == max_steps:
            snr = reconstruction_snr(model, clip)
            snrs.append((step, snr))
            log.info("step %d loss %.5f snr %.2f dB", step, terms["total"], snr)
            if snr > target_snr:
                break
        if time_limit_s is not None and time.monotonic() - t0 > time_limit_s:
            break
    return {"losses": losses, "snrs": snrs, "final_loss": losses[-1],
            "seconds": time.monotonic() - t0, "steps": len(losses)}
