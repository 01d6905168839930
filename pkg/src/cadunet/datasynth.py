"""Synthetic multichannel speech/noise corpus generation.

Speech-like sources are amplitude-modulated harmonic stacks with a drifting
fundamental plus band-limited onset bursts. They are propagated to C channels
by per-channel delay and gain (integer shifts, or a 32-tap windowed-sinc
interpolator for fractional delays). Noise is either diffuse (independent
pink noise per channel with a 30% common component) or directional (a pink
source through its own geometry). Mixtures are built by scaling the noise to
hit a requested reference-channel SNR and adding, so mixture = speech + noise
holds bitwise.

A corpus is a directory of WAV triples plus a line-delimited manifest with
fields id, speech, noise, mixture, split.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .wavio import read_wav, write_wav

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
SINC_TAPS = 32


@dataclass
class MixtureSample:
    speech: np.ndarray          # N x C
    noise: np.ndarray           # N x C
    mixture: np.ndarray         # N x C
    sample_rate: int = SAMPLE_RATE
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.speech.shape == self.noise.shape == self.mixture.shape):
            raise ValueError(
                f"shape mismatch: speech {self.speech.shape}, noise "
                f"{self.noise.shape}, mixture {self.mixture.shape}")
        if self.speech.ndim != 2:
            raise ValueError(f"expected N x C arrays, got {self.speech.ndim}-D")
        if not np.array_equal(self.mixture, self.speech + self.noise):
            raise ValueError("mixture != speech + noise")

    @property
    def channels(self):
        return self.speech.shape[1]

    @property
    def samples(self):
        return self.speech.shape[0]


@dataclass(frozen=True)
class ArrayGeometry:
    delays: tuple      # per channel, in samples, >= 0
    gains: tuple       # per channel, linear

    def __post_init__(self):
        if len(self.delays) != len(self.gains):
            raise ValueError("delays and gains must have equal length")
        if any(d < 0 for d in self.delays):
            raise ValueError("delays must be nonnegative")
        if not any(d == 0 for d in self.delays):
            raise ValueError("at least one channel must have zero delay")

    @property
    def channels(self):
        return len(self.delays)


def gen_source(duration_s, seed, rate=SAMPLE_RATE):
    """Speech-like mono test signal, unit peak, deterministic in seed."""
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * rate))
    t = np.arange(n) / rate

    # Fundamental drifts smoothly inside 80..300 Hz.
    knots = max(4, int(duration_s * 3) + 2)
    f0_knots = rng.uniform(90.0, 280.0, size=knots)
    f0 = np.interp(np.linspace(0, knots - 1, n), np.arange(knots), f0_knots)
    f0 = np.clip(f0, 80.0, 300.0)
    phase = 2.0 * np.pi * np.cumsum(f0) / rate

    # Harmonic stack kept below 4 kHz for the worst-case fundamental.
    k_max = max(3, int(3800.0 / f0.max()))
    x = np.zeros(n)
    for k in range(1, k_max + 1):
        amp = rng.uniform(0.5, 1.0) / k
        x += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))

    # Slow amplitude modulation, 2..6 Hz, always positive.
    am_knots = rng.uniform(0.15, 1.0, size=max(4, int(duration_s * 4) + 2))
    am = np.interp(np.linspace(0, am_knots.size - 1, n),
                   np.arange(am_knots.size), am_knots)
    x *= am

    # Sparse onset bursts, band-limited to 500..3500 Hz.
    burst = rng.normal(size=n)
    spec = np.fft.rfft(burst)
    freqs = np.fft.rfftfreq(n, 1.0 / rate)
    spec[(freqs < 500.0) | (freqs > 3500.0)] = 0.0
    burst = np.fft.irfft(spec, n)
    burst /= max(np.abs(burst).max(), 1e-12)
    env = np.zeros(n)
    for _ in range(max(1, int(duration_s * 3))):
        at = int(rng.integers(0, max(1, n - rate // 8)))
        width = int(rng.uniform(0.02, 0.08) * rate)
        seg = np.exp(-np.arange(width) / (0.25 * width))
        env[at:at + width] = np.maximum(env[at:at + width], seg[:n - at])
    x += 0.4 * burst * env

    return x / np.abs(x).max()


def _frac_delay_kernel(frac):
    """32-tap Hann-windowed sinc interpolator for a sub-sample delay."""
    m = np.arange(SINC_TAPS)
    center = SINC_TAPS // 2
    h = np.sinc(m - center - frac) * np.hanning(SINC_TAPS)
    return h / h.sum()


def delay_signal(x, delay):
    """Delay a mono signal by a nonnegative (possibly fractional) lag."""
    n = x.shape[0]
    if delay < 0:
        raise ValueError("delay must be nonnegative")
    if delay >= n:
        raise ValueError(f"delay {delay} exceeds signal length {n}")
    di = int(math.floor(delay))
    frac = delay - di
    if frac == 0.0:
        out = np.zeros(n)
        out[di:] = x[:n - di]
        return out
    h = _frac_delay_kernel(frac)
    conv = np.convolve(x, h)
    # conv[k] approximates x(k - center - frac); shift so total lag = delay
    out = np.zeros(n)
    shift = di - SINC_TAPS // 2
    src = conv[max(0, -shift):len(conv)]
    dst0 = max(0, shift)
    length = min(n - dst0, src.shape[0])
    out[dst0:dst0 + length] = src[:length]
    return out


def propagate(source, geometry):
    """Per-channel delayed and scaled copies of a mono source, N x C."""
    cols = [g * delay_signal(source, d)
            for d, g in zip(geometry.delays, geometry.gains)]
    return np.stack(cols, axis=1)


def _pink(n, rng):
    spec = np.fft.rfft(rng.normal(size=n))
    f = np.fft.rfftfreq(n)
    weight = np.zeros_like(f)
    weight[1:] = 1.0 / np.sqrt(f[1:])
    x = np.fft.irfft(spec * weight, n)
    return x / x.std()


def gen_noise(duration_s, channels, kind, seed, rate=SAMPLE_RATE,
              geometry=None):
    """N x C noise field: "diffuse" or "directional"."""
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * rate))
    if kind == "diffuse":
        common = _pink(n, rng)
        out = np.empty((n, channels))
        for c in range(channels):
            out[:, c] = math.sqrt(0.7) * _pink(n, rng) + math.sqrt(0.3) * common
        return out
    if kind == "directional":
        src = _pink(n, rng)
        if geometry is None:
            delays = [0.0] + [float(rng.uniform(0.5, 6.0)) for _ in range(channels - 1)]
            gains = [1.0] + [float(rng.uniform(0.7, 1.0)) for _ in range(channels - 1)]
            geometry = ArrayGeometry(tuple(delays), tuple(gains))
        return propagate(src, geometry)
    raise ValueError(f"unknown noise kind {kind!r}")


def channel_snrs_db(speech, noise):
    """Per-channel SNR in dB; +inf where the noise channel is silent."""
    out = []
    for c in range(speech.shape[1]):
        es = float(np.sum(speech[:, c] ** 2))
        en = float(np.sum(noise[:, c] ** 2))
        out.append(math.inf if en == 0.0 else 10.0 * math.log10(es / en))
    return out


def mix_at_snr(speech, noise, snr_db_ref, ref_channel=0, sample_rate=SAMPLE_RATE,
               metadata=None):
    """Scale the noise for an exact reference-channel SNR and add.

    snr_db_ref = math.inf silences the noise entirely (mixture = speech).
    """
    speech = np.asarray(speech, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if speech.shape != noise.shape:
        raise ValueError(f"speech {speech.shape} vs noise {noise.shape}")
    es = float(np.sum(speech[:, ref_channel] ** 2))
    en = float(np.sum(noise[:, ref_channel] ** 2))
    if es == 0.0:
        raise ValueError("speech reference channel has zero energy")
    if snr_db_ref == math.inf:
        noise = np.zeros_like(noise)
    else:
        if en == 0.0:
            raise ValueError("noise reference channel has zero energy")
        noise = noise * math.sqrt(es / en * 10.0 ** (-snr_db_ref / 10.0))
    meta = dict(metadata or {})
    meta.update(ref_channel=ref_channel, target_snr_db=snr_db_ref,
                snr_db=channel_snrs_db(speech, noise))
    return MixtureSample(speech=speech, noise=noise, mixture=speech + noise,
                         sample_rate=sample_rate, metadata=meta)


# ------------------------------------------------------------------ corpus

def random_geometry(channels, rng, max_delay=4.0):
    delays = [0.0] + [float(rng.uniform(0.0, max_delay)) for _ in range(channels - 1)]
    gains = [1.0] + [float(rng.uniform(0.7, 1.0)) for _ in range(channels - 1)]
    return ArrayGeometry(tuple(delays), tuple(gains))


def synth_sample(seed, duration_s=3.0, channels=6, snr_db=None,
                 rate=SAMPLE_RATE):
    """One deterministic mixture; snr_db defaults to uniform [0, 10] dB."""
    rng = np.random.default_rng(seed)
    if snr_db is None:
        snr_db = float(rng.uniform(0.0, 10.0))
    src = gen_source(duration_s, seed=rng.integers(2 ** 31))
    geo = random_geometry(channels, rng)
    speech = propagate(src, geo)
    kind = "diffuse" if rng.uniform() < 0.7 else "directional"
    noise = gen_noise(duration_s, channels, kind, seed=rng.integers(2 ** 31))
    return mix_at_snr(speech, noise, snr_db,
                      metadata={"seed": seed, "noise_kind": kind,
                                "geometry": {"delays": list(geo.delays),
                                             "gains": list(geo.gains)}})


def synth_corpus(out_dir, counts=None, duration_s=3.0, channels=6, seed=0,
                 snr_range=(0.0, 10.0)):
    """Write WAV triples for the default recipe and return the manifest path."""
    counts = dict(counts or {"train": 200, "dev": 40, "test": 40})
    out = Path(out_dir)
    wav_dir = out / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    idx = 0
    for split, count in counts.items():
        for _ in range(count):
            uid = f"utt_{idx:04d}"
            snr = float(rng.uniform(*snr_range))
            sample = synth_sample(int(rng.integers(2 ** 31)), duration_s,
                                  channels, snr)
            paths = {}
            for part in ("speech", "noise", "mixture"):
                p = wav_dir / f"{uid}_{part}.wav"
                write_wav(p, getattr(sample, part), sample.sample_rate)
                paths[part] = str(p.relative_to(out))
            entries.append({"id": uid, **paths, "split": split})
            idx += 1
    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e) + "\n")
    return manifest


def build_manifest(wav_dir, splits, seed, manifest_path=None):
    """Assign split tags to the WAV triples found under wav_dir.

    splits maps name -> fraction (fractions sum to 1). Assignment is a seeded
    shuffle cut at cumulative-fraction boundaries, so each requested fraction
    is honored within one entry. Incomplete triples are logged and skipped.
    """
    wav_dir = Path(wav_dir)
    total = sum(splits.values())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"split fractions sum to {total}, expected 1")
    ids = sorted(p.name[:-len("_mixture.wav")]
                 for p in wav_dir.glob("*_mixture.wav"))
    kept = []
    for uid in ids:
        triple = {part: wav_dir / f"{uid}_{part}.wav"
                  for part in ("speech", "noise", "mixture")}
        if all(p.exists() for p in triple.values()):
            kept.append((uid, triple))
        else:
            log.warning("skipping %s: incomplete WAV triple", uid)
    order = np.random.default_rng(seed).permutation(len(kept))
    names = list(splits)
    bounds = np.cumsum([int(round(splits[s] * len(kept))) for s in names])
    bounds[-1] = len(kept)
    entries = []
    for rank, j in enumerate(order):
        split = names[int(np.searchsorted(bounds, rank, side="right"))]
        uid, triple = kept[j]
        entries.append({"id": uid,
                        **{k: str(v.relative_to(wav_dir.parent))
                           for k, v in triple.items()},
                        "split": split})
    entries.sort(key=lambda e: e["id"])
    manifest_path = Path(manifest_path or wav_dir.parent / "manifest.jsonl")
    with open(manifest_path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e) + "\n")
    return manifest_path


def read_manifest(path, split=None):
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            e = json.loads(line)
            if split is None or e["split"] == split:
                out.append(e)
    return out


def load_entry(entry, root):
    """Load one manifest entry as a MixtureSample.

    The in-memory mixture is recomputed as speech + noise so the additivity
    invariant holds bitwise; the stored mixture is only checked against it
    (float32 files round the sum's low bits).
    """
    root = Path(root)
    speech, rate = read_wav(root / entry["speech"])
    noise, rate_n = read_wav(root / entry["noise"])
    stored, _ = read_wav(root / entry["mixture"])
    if rate != rate_n:
        raise ValueError(f"{entry['id']}: sample-rate mismatch across the triple")
    mixture = speech + noise
    if np.abs(stored - mixture).max() > 1e-6:
        raise ValueError(f"{entry['id']}: stored mixture disagrees with speech + noise")
    return MixtureSample(speech=speech, noise=noise, mixture=mixture,
                         sample_rate=rate, metadata={"id": entry["id"]})


def iterate(manifest_path, split):
    """Yield MixtureSamples for one split, in manifest order."""
    root = Path(manifest_path).parent
    for entry in read_manifest(manifest_path, split):
        yield load_entry(entry, root)


class ManifestDataset:
    """Lazy list-like view of one manifest split; entries load on access.

    Keeps a full corpus out of memory during training: each batch draw
    rereads its three WAVs, which is cheap next to a network pass.
    """

    def __init__(self, manifest_path, split):
        self.root = Path(manifest_path).parent
        self.entries = read_manifest(manifest_path, split)
        if not self.entries:
            raise ValueError(f"manifest {manifest_path} has no {split!r} entries")

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        return load_entry(self.entries[i], self.root)
