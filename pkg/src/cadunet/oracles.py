"""Independent verification oracles.

Every function here re-derives a quantity the main modules compute, using
deliberately different machinery: scalar Python complex loops, the literal
O(n^2) DFT summation, least-squares via numpy's lstsq instead of the normal
equations. None of it shares numerical kernels with the production paths, so
agreement is evidence, not tautology.

run_oracle_suite() executes every scope and returns per-check results; the
whole suite stays under a minute.
"""

from __future__ import annotations

import cmath
import time
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OracleResult:
    name: str
    scope: str
    instances: int
    max_err: float
    tol: float
    passed: bool
    detail: str = ""


# ---------------------------------------------------------------------------
# scalar complex loops


def cmul_loops(a, b):
    """Elementwise complex product via Python scalar arithmetic."""
    out = np.empty(a.shape, dtype=complex)
    flat_a, flat_b, flat_o = a.reshape(-1), b.reshape(-1), out.reshape(-1)
    for i in range(flat_a.size):
        flat_o[i] = complex(flat_a[i]) * complex(flat_b[i])
    return out


def cmatmul_loops(A, B, conjugate_a=False):
    """Batched complex matmul via triple loops, one scalar product at a time."""
    F, m, k = A.shape
    _, k2, n = B.shape
    out = np.zeros((F, m, n), dtype=complex)
    for f in range(F):
        for i in range(m):
            for j in range(n):
                s = 0j
                for t in range(k):
                    a = complex(A[f, i, t])
                    if conjugate_a:
                        a = a.conjugate()
                    s += a * complex(B[f, t, j])
                out[f, i, j] = s
    return out


def attention_weights_loops(P):
    """Literal magnitude softmax with phase carry-over, column by column.

    |w[f, c, j]| = exp(|p[f, c, j]|) / sum_c exp(|p[f, c, j]|), phase kept.
    No max subtraction: inputs used at oracle scale stay moderate.
    """
    F, C, C2 = P.shape
    W = np.zeros_like(P)
    for f in range(F):
        for j in range(C2):
            denom = 0.0
            for c in range(C):
                denom += cmath.exp(abs(P[f, c, j])).real
            for c in range(C):
                mag = cmath.exp(abs(P[f, c, j])).real / denom
                ph = cmath.phase(P[f, c, j]) if P[f, c, j] != 0 else 0.0
                W[f, c, j] = mag * cmath.exp(1j * ph)
    return W


# ---------------------------------------------------------------------------
# scope runners


def _complex_scope(seed):
    from . import complexops as cx
    from .autodiff import Tensor

    rng = np.random.default_rng(seed)
    results = []

    worst = 0.0
    n = 1000
    for _ in range(n):
        shape = tuple(rng.integers(1, 4, size=2)) + (int(rng.integers(1, 4)),)
        a = rng.normal(size=shape) + 1j * rng.normal(size=shape)
        b = rng.normal(size=shape) + 1j * rng.normal(size=shape)
        got = cx.unstack_complex(
            cx.cmul(Tensor(cx.stack_complex(a)), Tensor(cx.stack_complex(b))).data)
        worst = max(worst, float(np.max(np.abs(got - cmul_loops(a, b)))))
    results.append(OracleResult("cmul vs scalar loops", "complex", n, worst, 1e-12, worst < 1e-12))

    worst = 0.0
    n = 0
    for F in (1, 2):
        for m in range(1, 5):
            for k in range(1, 5):
                for nn in range(1, 5):
                    for conj in (False, True):
                        A = rng.normal(size=(F, m, k)) + 1j * rng.normal(size=(F, m, k))
                        B = rng.normal(size=(F, k, nn)) + 1j * rng.normal(size=(F, k, nn))
                        pa = cx.ComplexMatrixBatch(Tensor(A.real.copy()), Tensor(A.imag.copy()))
                        pb = cx.ComplexMatrixBatch(Tensor(B.real.copy()), Tensor(B.imag.copy()))
                        got = cx.cmatmul(pa, pb, conjugate_a=conj).to_complex()
                        worst = max(worst, float(np.max(np.abs(got - cmatmul_loops(A, B, conj)))))
                        n += 1
    results.append(OracleResult(
        "cmatmul vs triple loops, all shapes <= 4", "complex", n, worst, 1e-12, worst < 1e-12))
    return results


def _attention_scope(seed):
    from . import complexops as cx
    from .autodiff import Tensor

    rng = np.random.default_rng(seed)
    results = []
    worst_w = 0.0
    worst_colsum = 0.0
    n = 50
    for _ in range(n):
        F, C = int(rng.integers(1, 4)), int(rng.integers(2, 5))
        P = rng.normal(size=(F, C, C)) + 1j * rng.normal(size=(F, C, C))
        batch = cx.ComplexMatrixBatch(Tensor(P.real.copy()), Tensor(P.imag.copy()))
        got = cx.mag_softmax_phase_keep(batch).to_complex()
        want = attention_weights_loops(P)
        worst_w = max(worst_w, float(np.max(np.abs(got - want))))
        worst_colsum = max(worst_colsum, float(np.max(np.abs(
            np.abs(got).sum(axis=1) - 1.0))))
    results.append(OracleResult(
        "attention weights vs literal column softmax", "attention", n, worst_w, 1e-12,
        worst_w < 1e-12))
    results.append(OracleResult(
        "attention column magnitude sums equal 1", "attention", n, worst_colsum, 1e-9,
        worst_colsum < 1e-9))
    return results


def _dft_scope(seed):
    from . import stft as codec

    rng = np.random.default_rng(seed)
    results = []

    worst = 0.0
    n = 0
    for wl in (128, 1024):
        for _ in range(3):
            frame = rng.normal(size=wl)
            got = np.fft.rfft(frame)
            want = codec.dft_oracle(frame)
            worst = max(worst, float(np.max(np.abs(got - want))))
            n += 1
    results.append(OracleResult(
        "fft frames vs literal DFT summation", "dft", n, worst, 1e-9, worst < 1e-9))

    # whole codec path: every analysis frame equals the windowed literal DFT
    cfg = codec.CodecConfig(window_len=128, hop=32)
    x = rng.normal(size=(cfg.segment_length(16), 2))
    spec = codec.stft(x, cfg)
    full = spec.to_complex()
    win = codec.hann_window(cfg.window_len)
    padded = np.zeros((x.shape[0] + 2 * cfg.window_len, 2))
    padded[cfg.window_len:cfg.window_len + x.shape[0]] = x
    worst = 0.0
    for m in range(spec.frames):
        for c in range(2):
            frame = padded[m * cfg.hop:m * cfg.hop + cfg.window_len, c] * win
            worst = max(worst, float(np.max(np.abs(full[:, m, c] - codec.dft_oracle(frame)))))
    results.append(OracleResult(
        "stft analysis frames vs literal DFT", "dft", spec.frames * 2, worst, 1e-9,
        worst < 1e-9))
    return results


def si_sdr_scalar(est, ref):
    """SI-SDR by the definition, all inner products via math.fsum loops."""
    import math
    dot = math.fsum(float(e) * float(r) for e, r in zip(est, ref))
    ref_e = math.fsum(float(r) * float(r) for r in ref)
    a = dot / ref_e
    target_e = math.fsum((a * float(r)) ** 2 for r in ref)
    resid_e = math.fsum((float(e) - a * float(r)) ** 2 for e, r in zip(est, ref))
    return 10.0 * math.log10(target_e / resid_e)


def _metrics_scope(seed):
    import math

    from . import datasynth as ds
    from . import evaluation as ev

    rng = np.random.default_rng(seed)
    results = []

    worst = 0.0
    n = 200
    for _ in range(n):
        length = int(rng.integers(16, 200))
        ref = rng.normal(size=length)
        est = rng.normal(size=length)
        worst = max(worst, abs(ev.si_sdr(est, ref) - si_sdr_scalar(est, ref)))
    results.append(OracleResult(
        "si_sdr vs scalar-sum formula", "metrics", n, worst, 1e-9, worst < 1e-9))

    hand = abs(ev.si_sdr(np.array([0.5, 0.5]), np.array([1.0, 0.0])) - 0.0)
    results.append(OracleResult(
        "si_sdr hand case [0.5,0.5] vs [1,0] -> 0 dB", "metrics", 1, hand, 1e-12,
        hand < 1e-12))

    # normal-equation FIR fit against numpy's lstsq on the same design matrix
    worst = 0.0
    n = 100
    for _ in range(n):
        length = int(rng.integers(64, 300))
        taps = int(rng.integers(1, 9))
        ref = rng.normal(size=length)
        est = rng.normal(size=length)
        h, X, flagged = ev.fir_fit(est, ref, taps)
        want, *_ = np.linalg.lstsq(X, est, rcond=None)
        if not flagged:
            worst = max(worst, float(np.max(np.abs(h - want))))
    results.append(OracleResult(
        "fir_fit normal equations vs lstsq", "metrics", n, worst, 1e-8, worst < 1e-8))

    # mixing module: reference-channel SNR re-derived with fsum energies
    worst = 0.0
    n = 25
    for i in range(n):
        speech = rng.normal(size=(2000, 2))
        noise = rng.normal(size=(2000, 2)) * rng.uniform(0.5, 2.0)
        target = float(rng.uniform(-5.0, 15.0))
        s = ds.mix_at_snr(speech, noise, target)
        es = math.fsum(float(v) ** 2 for v in s.speech[:, 0])
        en = math.fsum(float(v) ** 2 for v in s.noise[:, 0])
        worst = max(worst, abs(10.0 * math.log10(es / en) - target))
    results.append(OracleResult(
        "mix_at_snr reference SNR vs fsum energies", "metrics", n, worst, 1e-9,
        worst < 1e-9))
    return results


_SCOPES = {
    "complex": _complex_scope,
    "attention": _attention_scope,
    "dft": _dft_scope,
    "metrics": _metrics_scope,
}


def run_oracle_suite(scope="all", seed=20260823):
    """Run one or all oracle scopes; returns a list of OracleResult."""
    if scope == "all":
        names = list(_SCOPES)
    elif scope in _SCOPES:
        names = [scope]
    else:
        raise ValueError(f"unknown oracle scope {scope!r}; have {sorted(_SCOPES)} or 'all'")
    results = []
    for name in names:
        t0 = time.perf_counter()
        rs = _SCOPES[name](seed)
        dt = time.perf_counter() - t0
        for r in rs:
            r.detail = (r.detail + f" [{dt:.2f}s scope]").strip()
        results.extend(rs)
    return results


def format_results(results):
    lines = []
    for r in results:
        flag = "pass" if r.passed else "FAIL"
        lines.append(
            f"{flag}  {r.scope:<10} {r.name:<48} n={r.instances:<5} "
            f"max_err={r.max_err:.3e} tol={r.tol:.0e}")
    return "\n".join(lines)
