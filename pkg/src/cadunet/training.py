"""Supervised training: weighted time/magnitude l1 loss, ADAM, augmentation.

The loss compares both estimated sources against ground truth twice: l1 on
the time-domain signals (weighted by alpha) and l1 on spectral magnitudes.
alpha is calibrated once on the first batch so the weighted time term starts
at twice the magnitude term, then frozen.

Gradients are accumulated item by item (one graph alive at a time) and
averaged over the batch. All randomness flows through a single generator
whose state is checkpointed, so interrupted runs resume bit-exactly.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import complexops as cx
from .checkpoint import save_checkpoint
from .datasynth import MixtureSample
from .evaluation import posterior_snr_select, si_sdr
from .network import (enhance, estimate_sources, segment_samples,
                      unet_forward)
from .stft import istft_tensor, stft

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    alpha: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class AugmentSpec:
    gain_db_range: tuple = (-20.0, 0.0)
    segment: int = 19200

    def __post_init__(self):
        lo, hi = self.gain_db_range
        if not (lo <= hi <= 0.0):
            raise ValueError(f"gain range must satisfy lo <= hi <= 0, got {lo}, {hi}")
        if self.segment < 1:
            raise ValueError("segment length must be positive")


@dataclass
class AdamState:
    step: int
    m: dict
    v: dict
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(step=0,
                   m={p.name: np.zeros_like(p.data) for p in params},
                   v={p.name: np.zeros_like(p.data) for p in params},
                   lr=lr, beta1=beta1, beta2=beta2, eps=eps)


@dataclass
class TrainState:
    adam: AdamState
    alpha: float
    rng: np.random.Generator


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    alpha: float = 0.0          # 0 = calibrate on the first batch
    gain_db_range: tuple = (-20.0, 0.0)
    log_every: int = 10
    val_every: int = 0          # 0 = never
    checkpoint_every: int = 0   # 0 = final only


# ------------------------------------------------------------------- loss

def _mean_l1(a, b_const):
    return ad.reduce_mean(ad.absolute(ad.sub(a, ad.Tensor(b_const))))


def spectral_magnitude(spec):
    """Bin magnitudes F x T x C of a Spectrogram, as a plain array."""
    data = np.asarray(spec.stacked.tensor.data)
    c = data.shape[-1] // 2
    # hypot, matching cmag's forward bit for bit on identical inputs
    return np.hypot(data[..., :c], data[..., c:])


def loss_parts(s, s_hat, n, n_hat, S, S_hat, N, N_hat):
    """Time-domain and magnitude l1 terms, both summed over the two sources.

    Ground truths (s, n, S, N) are arrays/Spectrograms treated as constants;
    estimates are autodiff Tensors / tensor-backed Spectrograms.
    """
    s = np.asarray(s)
    n = np.asarray(n)
    if s_hat.data.shape != s.shape or n_hat.data.shape != n.shape:
        raise ValueError(
            f"signal shape mismatch: estimates {s_hat.data.shape}/{n_hat.data.shape}, "
            f"truth {s.shape}/{n.shape}")
    s_mag = spectral_magnitude(S)
    n_mag = spectral_magnitude(N)
    s_hat_mag = cx.cmag(S_hat.stacked.tensor)
    n_hat_mag = cx.cmag(N_hat.stacked.tensor)
    if s_hat_mag.data.shape != s_mag.shape:
        raise ValueError(
            f"spectrogram shape mismatch: {s_hat_mag.data.shape} vs {s_mag.shape}")
    time_term = ad.add(_mean_l1(s_hat, s), _mean_l1(n_hat, n))
    mag_term = ad.add(_mean_l1(s_hat_mag, s_mag), _mean_l1(n_hat_mag, n_mag))
    return time_term, mag_term


def loss(s, s_hat, n, n_hat, S, S_hat, N, N_hat, cfg):
    time_term, mag_term = loss_parts(s, s_hat, n, n_hat, S, S_hat, N, N_hat)
    return ad.add(ad.mul(time_term, cfg.alpha), mag_term)


def forward_losses(model, speech, noise, mixture):
    """Run one aligned segment through the network; returns the loss terms."""
    seg = segment_samples(model)
    if mixture.shape[0] != seg:
        raise ValueError(f"segment must be exactly {seg} samples, got {mixture.shape[0]}")
    Y = stft(mixture, model.codec)
    S = stft(speech, model.codec)
    N = stft(noise, model.codec)
    masks = unet_forward(model, Y)
    S_hat, N_hat = estimate_sources(Y, masks)
    s_hat = istft_tensor(S_hat.stacked.tensor, S_hat.nyquist_bin, model.codec, seg)
    n_hat = istft_tensor(N_hat.stacked.tensor, N_hat.nyquist_bin, model.codec, seg)
    return loss_parts(speech, s_hat, noise, n_hat, S, S_hat, N, N_hat)


def calibrate_alpha(batch, model):
    """alpha = 2 * magnitude-term / time-term, averaged over the first batch."""
    times, mags = [], []
    with ad.no_grad():
        for sample in batch:
            tt, mt = forward_losses(model, sample.speech, sample.noise,
                                    sample.mixture)
            times.append(float(tt.data))
            mags.append(float(mt.data))
    t = float(np.mean(times))
    m = float(np.mean(mags))
    if t == 0.0:
        raise ValueError("calibration batch has zero time-domain loss")
    alpha = 2.0 * m / t
    if alpha <= 0.0:
        raise ValueError("calibration produced a non-positive alpha")
    return alpha


# ---------------------------------------------------------------- augment

def augment(sample, spec, rng):
    """Random noise attenuation plus a random aligned segment cut."""
    if sample.samples < spec.segment:
        raise ValueError(
            f"sample has {sample.samples} samples, need at least {spec.segment}")
    gain_db = float(rng.uniform(*spec.gain_db_range))
    scale = 10.0 ** (gain_db / 20.0)
    start = int(rng.integers(0, sample.samples - spec.segment + 1))
    sl = slice(start, start + spec.segment)
    speech = sample.speech[sl]
    noise = sample.noise[sl] * scale
    meta = dict(sample.metadata)
    meta.update(augment_gain_db=gain_db, augment_start=start)
    return MixtureSample(speech=speech, noise=noise, mixture=speech + noise,
                         sample_rate=sample.sample_rate, metadata=meta)


# ------------------------------------------------------------------- adam

def adam_step(state, params, grads):
    """In-place bias-corrected ADAM update; halts on non-finite gradients."""
    for p in params:
        g = grads[p.name]
        if not np.isfinite(g).all():
            bad = int((~np.isfinite(g)).sum())
            raise TrainingDiverged(
                f"non-finite gradient for {p.name} at step {state.step + 1} "
                f"({bad}/{g.size} entries)")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p in params:
        g = grads[p.name]
        m = state.m[p.name] = state.beta1 * state.m[p.name] + (1 - state.beta1) * g
        v = state.v[p.name] = state.beta2 * state.v[p.name] + (1 - state.beta2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ------------------------------------------------------------------ train

def _draw_batch(train_samples, aug, rng, batch_size):
    idx = rng.integers(0, len(train_samples), size=batch_size)
    return [augment(train_samples[int(i)], aug, rng) for i in idx]


def validation_si_sdr(model, val_samples):
    """Mean SI-SDR of the selected output channel over a validation set."""
    scores = []
    for sample in val_samples:
        s_hat, n_hat = enhance(model, sample.mixture)
        ch, est = posterior_snr_select(s_hat, n_hat)
        scores.append(si_sdr(est, sample.speech[:, ch]))
    return float(np.mean(scores))


def train(model, train_samples, cfg, val_samples=None, state=None,
          out_dir=None):
    """Train to cfg.steps; returns (history, TrainState, final checkpoint path).

    Resumes from `state` if given (alpha kept, RNG stream continued). Writes
    an append-only metric log `metrics.csv` and checkpoints under out_dir.
    """
    if not train_samples:
        raise ValueError("empty training set")
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    aug = AugmentSpec(gain_db_range=tuple(cfg.gain_db_range),
                      segment=segment_samples(model))

    if state is None:
        rng = np.random.default_rng(cfg.seed)
        adam = AdamState.fresh(params, lr=cfg.lr, beta1=cfg.beta1,
                               beta2=cfg.beta2, eps=cfg.eps)
        alpha = cfg.alpha or calibrate_alpha(
            _draw_batch(train_samples, aug, rng, cfg.batch_size), model)
        state = TrainState(adam=adam, alpha=alpha, rng=rng)
        log.info("calibrated alpha = %.6g", alpha)
    rng = state.rng

    log_path = out / "metrics.csv" if out else None
    if log_path and not log_path.exists():
        log_path.write_text("step,loss,time_term,mag_term,alpha,val_si_sdr,wall_time\n")

    history = []
    t0 = time.monotonic()
    while state.adam.step < cfg.steps:
        batch = _draw_batch(train_samples, aug, rng, cfg.batch_size)
        sums = {p.name: None for p in params}
        loss_vals, time_vals, mag_vals = [], [], []
        for item in batch:
            tt, mt = forward_losses(model, item.speech, item.noise, item.mixture)
            item_loss = ad.add(ad.mul(tt, state.alpha), mt)
            grads = ad.backward(item_loss, params)
            for name, g in grads.items():
                sums[name] = g if sums[name] is None else sums[name] + g
            loss_vals.append(float(item_loss.data))
            time_vals.append(float(tt.data))
            mag_vals.append(float(mt.data))
        mean_loss = float(np.mean(loss_vals))
        if not math.isfinite(mean_loss):
            if out:
                save_checkpoint(model, state, out / "diverged.ckpt")
            raise TrainingDiverged(
                f"non-finite loss {mean_loss} at step {state.adam.step + 1}")
        try:
            adam_step(state.adam, params,
                      {k: g / cfg.batch_size for k, g in sums.items()})
        except TrainingDiverged:
            if out:
                save_checkpoint(model, state, out / "diverged.ckpt")
            raise
        step = state.adam.step

        val_db = None
        if cfg.val_every and val_samples and step % cfg.val_every == 0:
            val_db = validation_si_sdr(model, val_samples)
        record = {"step": step, "loss": mean_loss,
                  "time_term": float(np.mean(time_vals)),
                  "mag_term": float(np.mean(mag_vals)),
                  "alpha": state.alpha, "val_si_sdr": val_db,
                  "wall_time": time.monotonic() - t0}
        history.append(record)
        if log_path and (step % cfg.log_every == 0 or step == cfg.steps
                         or val_db is not None):
            with open(log_path, "a") as fh:
                fh.write("{step},{loss!r},{time_term!r},{mag_term!r},{alpha!r},"
                         "{val},{wall_time:.3f}\n".format(
                             val="" if val_db is None else repr(val_db), **record))
        if out and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(model, state, out / f"checkpoint_{step:06d}.ckpt")

    final = None
    if out:
        final = out / "checkpoint_final.ckpt"
        save_checkpoint(model, state, final)
    return history, state, final
