"""Enhancement metrics, output-channel selection, and batch evaluation.

SDR numbers here are scale-invariant SDR and a short-FIR projection SDR, not
BSS Eval or PESQ; absolute values are not comparable to published tables.
Improvements over the noisy input on the same pipeline are the quantity to
report.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import complexops as cx
from .attention import export_attention
from .datasynth import load_entry, read_manifest
from .network import enhance, estimate_sources, network_input, segment_samples
from .stft import stft

log = logging.getLogger(__name__)

SDR_CAP_DB = 100.0


def si_sdr(est, ref):
    """Scale-invariant SDR in dB, capped at +-100."""
    est = np.asarray(est, dtype=np.float64).reshape(-1)
    ref = np.asarray(ref, dtype=np.float64).reshape(-1)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: est {est.size}, ref {ref.size}")
    ref_energy = float(ref @ ref)
    if ref_energy == 0.0:
        raise ValueError("zero reference signal")
    a = float(est @ ref) / ref_energy
    target = a * ref
    et = float(target @ target)
    er = float(np.sum((est - target) ** 2))
    if et == 0.0:
        return -SDR_CAP_DB
    if er <= et * 1e-20:
        return SDR_CAP_DB
    return min(SDR_CAP_DB, 10.0 * math.log10(et / er))


def fir_fit(est, ref, taps):
    """Least-squares FIR (ref -> est) via normal equations.

    Returns (coefficients, ridge_flag); singular systems get a 1e-9 ridge.
    """
    n = est.size
    X = np.zeros((n, taps))
    for k in range(min(taps, n)):
        X[k:, k] = ref[:n - k]
    G = X.T @ X
    b = X.T @ est
    try:
        h = np.linalg.solve(G, b)
        if np.isfinite(h).all():
            return h, X, False
    except np.linalg.LinAlgError:
        pass
    log.warning("projection_sdr: singular normal equations, applying 1e-9 ridge")
    h = np.linalg.solve(G + 1e-9 * np.eye(taps), b)
    return h, X, True


def projection_sdr(est, ref, filter_len=1):
    """SDR after least-squares fitting a short FIR from ref to est."""
    if not 1 <= filter_len <= 64:
        raise ValueError(f"filter_len must be in 1..64, got {filter_len}")
    est = np.asarray(est, dtype=np.float64).reshape(-1)
    ref = np.asarray(ref, dtype=np.float64).reshape(-1)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: est {est.size}, ref {ref.size}")
    if float(ref @ ref) == 0.0:
        raise ValueError("zero reference signal")
    h, X, _ = fir_fit(est, ref, filter_len)
    target = X @ h
    et = float(target @ target)
    er = float(np.sum((est - target) ** 2))
    if et == 0.0:
        return -SDR_CAP_DB
    if er <= et * 1e-20:
        return SDR_CAP_DB
    return min(SDR_CAP_DB, 10.0 * math.log10(et / er))


def posterior_snrs_db(s_hat, n_hat):
    """Per-channel posterior SNR estimate; +inf on silent noise channels."""
    out = []
    for c in range(s_hat.shape[1]):
        es = float(np.sum(s_hat[:, c] ** 2))
        en = float(np.sum(n_hat[:, c] ** 2))
        out.append(math.inf if en == 0.0 else 10.0 * math.log10(max(es, 1e-300) / en))
    return out


def posterior_snr_select(s_hat, n_hat):
    """Pick the channel with the highest posterior SNR (ties: lowest index)."""
    if s_hat.shape != n_hat.shape:
        raise ValueError(f"shape mismatch: {s_hat.shape} vs {n_hat.shape}")
    snrs = posterior_snrs_db(s_hat, n_hat)
    if any(math.isinf(v) for v in snrs):
        log.warning("posterior_snr_select: zero noise estimate on channel %d",
                    snrs.index(math.inf))
    best = int(np.argmax(snrs))  # argmax returns the first maximum
    return best, s_hat[:, best]


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)   # per-utterance dicts
    aggregates: dict = field(default_factory=dict)

    FIELDS = ("id", "channel", "si_sdr_db", "projection_sdr_db",
              "input_si_sdr_db", "improvement_db")

    def finalize(self):
        for key in ("si_sdr_db", "projection_sdr_db", "input_si_sdr_db",
                    "improvement_db"):
            vals = [r[key] for r in self.rows]
            self.aggregates[f"mean_{key}"] = float(np.mean(vals)) if vals else math.nan
            self.aggregates[f"median_{key}"] = float(np.median(vals)) if vals else math.nan
        return self

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(self.FIELDS) + "\n")
            for r in self.rows:
                fh.write(",".join(repr(r[k]) if isinstance(r[k], float)
                                  else str(r[k]) for k in self.FIELDS) + "\n")

    def summary(self):
        lines = [f"utterances: {len(self.rows)}"]
        for key in ("si_sdr_db", "projection_sdr_db", "improvement_db"):
            lines.append(f"{key}: mean {self.aggregates[f'mean_{key}']:+.2f} dB, "
                         f"median {self.aggregates[f'median_{key}']:+.2f} dB")
        return "\n".join(lines)


def evaluate(model, manifest_path, split, projection_taps=8, enhance_fn=None):
    """Evaluate a model over one manifest split.

    Per utterance: enhance, pick the output channel by posterior SNR, then
    score against the clean speech at that channel. Unreadable entries are
    skipped and logged.
    """
    enhance_fn = enhance_fn or enhance
    from pathlib import Path
    root = Path(manifest_path).parent
    report = EvalReport()
    for entry in read_manifest(manifest_path, split):
        try:
            sample = load_entry(entry, root)
        except (OSError, ValueError) as err:
            log.warning("skipping %s: %s", entry.get("id", "?"), err)
            continue
        s_hat, n_hat = enhance_fn(model, sample.mixture)
        ch, est = posterior_snr_select(s_hat, n_hat)
        ref = sample.speech[:, ch]
        noisy = sample.mixture[:, ch]
        out_db = si_sdr(est, ref)
        in_db = si_sdr(noisy, ref)
        report.rows.append({
            "id": entry["id"],
            "channel": ch,
            "si_sdr_db": out_db,
            "projection_sdr_db": projection_sdr(est, ref, projection_taps),
            "input_si_sdr_db": in_db,
            "improvement_db": out_db - in_db,
        })
    return report.finalize()


def oracle_mask_enhance(model, y, speech, mag_clip=5.0):
    """Enhance with the ideal mask S/Y (magnitude-clipped) instead of the net.

    Ground-truth speech must be aligned with y. Useful as an upper-bound
    sanity check on the masking pipeline itself.
    """
    from .network import MaskPair
    from .stft import istft_tensor
    y = np.asarray(y, dtype=np.float64)
    seg = segment_samples(model)
    n, c = y.shape
    total = ((n + seg - 1) // seg) * seg
    pad_y = np.zeros((total, c))
    pad_y[:n] = y
    pad_s = np.zeros((total, c))
    pad_s[:n] = speech
    s_out = np.empty_like(pad_y)
    n_out = np.empty_like(pad_y)
    with ad.no_grad():
        for at in range(0, total, seg):
            spec_y = stft(pad_y[at:at + seg], model.codec)
            spec_s = stft(pad_s[at:at + seg], model.codec)
            zy = cx.unstack_complex(spec_y.stacked.tensor.data)
            zs = cx.unstack_complex(spec_s.stacked.tensor.data)
            m = np.where(np.abs(zy) > 0, zs / np.where(zy == 0, 1.0, zy), 0.0)
            mag = np.abs(m)
            m = np.where(mag > mag_clip, m * (mag_clip / np.maximum(mag, 1e-300)), m)
            mt = ad.Tensor(cx.stack_complex(m))
            pair = MaskPair(mt, cx.noise_mask(mt), "complex")
            se, ne = estimate_sources(spec_y, pair)
            s_out[at:at + seg] = istft_tensor(
                se.stacked.tensor, se.nyquist_bin, model.codec, seg).data
            n_out[at:at + seg] = istft_tensor(
                ne.stacked.tensor, ne.nyquist_bin, model.codec, seg).data
    return s_out[:n], n_out[:n]


def attention_snr_experiment(model, sample, bands=4):
    """Input-attention summary for a mixture with a known best channel.

    Runs the input channel-attention unit on one network segment of the
    mixture and aggregates attention magnitude per contributing channel:
    overall means, per-frequency-band means, and the argmax channel.
    """
    seg = segment_samples(model)
    y = sample.mixture[:seg]
    if y.shape[0] < seg:
        raise ValueError(f"sample shorter than one segment ({seg} samples)")
    spec = stft(y, model.codec)
    with ad.no_grad():
        x = network_input(model, spec)
        amap = export_attention(x, model.input_ca, model.cfg.variant, block="input_ca")
    w = amap.magnitude                     # F x C x C, columns sum to 1
    F, C, _ = w.shape
    per_channel = w.mean(axis=(0, 2))      # mean over frequency and column
    edges = np.linspace(0, F, bands + 1).astype(int)
    band_rows = []
    for b in range(bands):
        chunk = w[edges[b]:edges[b + 1]].mean(axis=(0, 2))
        for c in range(C):
            band_rows.append({"band": b, "f_lo": int(edges[b]),
                              "f_hi": int(edges[b + 1]), "channel": c,
                              "mean_magnitude": float(chunk[c])})
    return {
        "per_channel_mean": per_channel,
        "argmax_channel": int(np.argmax(per_channel)),
        "band_rows": band_rows,
        "attention": amap,
        "posterior_snr_db": posterior_snrs_db(sample.speech, sample.noise),
    }
