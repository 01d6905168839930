"""STFT codec with exact overlap-add reconstruction.

Analysis uses a periodic Hann window, hop = window/4 by default, and one full
window of zero padding on each side so every input sample has complete overlap
coverage. Bins 0..window/2-1 are carried in the stacked-real layout the
network consumes; the Nyquist bin rides along out of band and is never
mask-controlled. The inverse is a fixed linear map expressed through autodiff
matmuls against precomputed synthesis bases, so masked spectrograms stay
differentiable end to end.

The forward transform uses numpy's FFT; dft_oracle() is the literal O(n^2)
summation it is validated against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .complexops import StackedComplexTensor, stack_complex


@dataclass(frozen=True)
class CodecConfig:
    window_len: int = 1024
    hop: int = 256
    sample_rate: int = 16000

    def __post_init__(self):
        if self.window_len % 2:
            raise ValueError(f"window_len must be even, got {self.window_len}")
        if not 0 < self.hop <= self.window_len:
            raise ValueError(f"hop must be in (0, window_len], got {self.hop}")
        if self.window_len % self.hop:
            raise ValueError(
                f"hop {self.hop} must divide window_len {self.window_len} for constant overlap")

    @property
    def bins(self):
        """Stacked bin count F (Nyquist excluded)."""
        return self.window_len // 2

    def num_frames(self, n):
        if n < self.window_len:
            raise ValueError(f"signal of {n} samples shorter than window {self.window_len}")
        return (n + self.window_len) // self.hop + 1

    def segment_length(self, frames):
        """Sample count whose analysis yields exactly `frames` frames."""
        n = (frames - 1) * self.hop - self.window_len
        if n < self.window_len:
            raise ValueError(f"{frames} frames implies {n} samples, below one window")
        return n


@dataclass
class Spectrogram:
    """Stacked-real spectrogram F x T x 2C plus the out-of-band Nyquist row."""

    stacked: StackedComplexTensor
    nyquist_bin: np.ndarray          # complex, T x C
    original_length: int
    config: CodecConfig

    def __post_init__(self):
        F, T, twoC = self.stacked.shape
        if F != self.config.bins:
            raise ValueError(f"expected {self.config.bins} bins, got {F}")
        if self.nyquist_bin.shape != (T, twoC // 2):
            raise ValueError(
                f"nyquist row shape {self.nyquist_bin.shape} inconsistent with {(T, twoC // 2)}")

    @property
    def frames(self):
        return self.stacked.shape[1]

    @property
    def channels(self):
        return self.stacked.channels

    def to_complex(self):
        """Full complex array (F+1) x T x C including the Nyquist row."""
        body = self.stacked.to_complex()
        return np.concatenate([body, self.nyquist_bin[None]], axis=0)


def hann_window(n):
    """Periodic Hann; sums to constant power at hop = n / k overlap."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def dft_oracle(frame):
    """Literal DFT of one real frame by direct summation (no FFT).

    Returns bins 0..len(frame)/2 to match a one-sided transform.
    """
    frame = np.asarray(frame, dtype=np.float64)
    n = frame.size
    k = np.arange(n // 2 + 1)
    basis = np.exp(-2j * np.pi * np.outer(k, np.arange(n)) / n)
    return basis @ frame


def _frame(x, cfg):
    """Zero-pad one window each side and slice into overlapping frames: T x wl x C."""
    n, c = x.shape
    wl, hop = cfg.window_len, cfg.hop
    padded = np.zeros((n + 2 * wl, c), dtype=x.dtype)
    padded[wl:wl + n] = x
    T = cfg.num_frames(n)
    frames = np.empty((T, wl, c), dtype=x.dtype)
    for m in range(T):
        frames[m] = padded[m * hop:m * hop + wl]
    return frames


def stft(x, cfg=CodecConfig()):
    """Analyze a real signal N x C (or N) into a Spectrogram."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError(f"stft expects N or N x C input, got shape {x.shape}")
    n = x.shape[0]
    frames = _frame(x, cfg) * hann_window(cfg.window_len)[None, :, None]
    spec = np.fft.rfft(frames, axis=1)          # T x (F+1) x C
    body = spec[:, :cfg.bins, :].transpose(1, 0, 2)   # F x T x C complex
    nyq = spec[:, cfg.bins, :]                  # T x C
    return Spectrogram(
        stacked=StackedComplexTensor(Tensor(stack_complex(body))),
        nyquist_bin=nyq,
        original_length=n,
        config=cfg,
    )


# ---------------------------------------------------------------------------
# synthesis: fixed linear bases, cached per window length


_BASIS_CACHE = {}
_WSUM_CACHE = {}


def _synthesis_bases(wl):
    """Windowed inverse-DFT bases: frame = re @ Br.T + im @ Bi.T, both (F+1) x wl."""
    if wl not in _BASIS_CACHE:
        k = np.arange(wl // 2 + 1)
        n = np.arange(wl)
        ck = np.full(wl // 2 + 1, 2.0)
        ck[0] = ck[-1] = 1.0
        ang = 2.0 * np.pi * np.outer(k, n) / wl
        w = hann_window(wl)
        br = (ck[:, None] * np.cos(ang) / wl) * w[None, :]
        bi = (-ck[:, None] * np.sin(ang) / wl) * w[None, :]
        _BASIS_CACHE[wl] = (br, bi)
    return _BASIS_CACHE[wl]


def _inv_window_sum(cfg, T):
    """Reciprocal of the squared-window overlap sum over the padded extent."""
    key = (cfg.window_len, cfg.hop, T)
    if key not in _WSUM_CACHE:
        wl, hop = cfg.window_len, cfg.hop
        total = (T - 1) * hop + wl
        wsq = hann_window(wl) ** 2
        acc = np.zeros(total)
        for m in range(T):
            acc[m * hop:m * hop + wl] += wsq
        inv = np.divide(1.0, acc, out=np.zeros_like(acc), where=acc > 1e-12)
        _WSUM_CACHE[key] = inv
    return _WSUM_CACHE[key]


class _OverlapAdd:
    """Linear scatter of T-frame blocks back onto the padded time axis."""

    def __init__(self, cfg, T, channels):
        self.cfg, self.T, self.channels = cfg, T, channels
        self.total = (T - 1) * cfg.hop + cfg.window_len

    def __call__(self, frames):
        cfg, T, C = self.cfg, self.T, self.channels
        wl, hop = cfg.window_len, cfg.hop
        data = frames.data.reshape(C, T, wl)
        out = np.zeros((C, self.total), dtype=data.dtype)
        for m in range(T):
            out[:, m * hop:m * hop + wl] += data[:, m]
        node = ad._node(out, (frames,), None, "overlap_add")
        if node.requires_grad:
            def bwd(g):
                df = np.empty((C, T, wl), dtype=g.dtype)
                for m in range(T):
                    df[:, m] = g[:, m * hop:m * hop + wl]
                ad._acc(frames, df.reshape(C * T, wl))
            node._bwd = bwd
        return node


def istft_tensor(stacked, nyquist_bin, cfg, original_length):
    """Differentiable inverse of stft(); returns a Tensor of N x C.

    Args:
        stacked: Tensor F x T x 2C (graph-connected or constant).
        nyquist_bin: constant complex T x C array.
        cfg: CodecConfig matching the analysis.
        original_length: sample count to crop back to.
    """
    F, T, twoC = stacked.data.shape
    C = twoC // 2
    if F != cfg.bins:
        raise ValueError(f"expected {cfg.bins} bins, got {F}")
    if nyquist_bin.shape != (T, C):
        raise ValueError(f"nyquist row {nyquist_bin.shape} inconsistent with {(T, C)}")
    if cfg.num_frames(original_length) != T:
        raise ValueError(
            f"{original_length} samples yields {cfg.num_frames(original_length)} frames, "
            f"spectrogram has {T}")

    br, bi = _synthesis_bases(cfg.window_len)
    # (F, T, 2C) -> re/im as (C*T, F), Nyquist appended as a constant column
    xt = ad.transpose(stacked, (2, 1, 0))
    re = ad.reshape(ad.narrow(xt, 0, 0, C), (C * T, F))
    im = ad.reshape(ad.narrow(xt, 0, C, C), (C * T, F))
    nyq_col = np.ascontiguousarray(nyquist_bin.T).reshape(C * T, 1)
    re_full = ad.concat([re, Tensor(nyq_col.real.copy())], axis=1)
    im_full = ad.concat([im, Tensor(nyq_col.imag.copy())], axis=1)
    frames = ad.add(ad.matmul(re_full, Tensor(br)), ad.matmul(im_full, Tensor(bi)))
    padded = _OverlapAdd(cfg, T, C)(frames)
    norm = ad.mul(padded, Tensor(np.broadcast_to(_inv_window_sum(cfg, T), padded.shape).copy()))
    wl = cfg.window_len
    cropped = ad.narrow(norm, 1, wl, original_length)
    return ad.transpose(cropped, (1, 0))


def istft(spec):
    """Inverse transform to a plain numpy signal N x C."""
    with ad.no_grad():
        out = istft_tensor(spec.stacked.tensor, spec.nyquist_bin, spec.config,
                           spec.original_length)
    return out.data
