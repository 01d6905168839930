"""Complex arithmetic over stacked real tensors.

A complex array of C channels is carried as a real tensor whose last axis
holds 2C entries: the first C are real parts, the second C imaginary parts.
All ops stay inside the autodiff graph so masks remain differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _acc, _node


def stack_complex(z):
    """numpy complex (..., C) -> numpy real (..., 2C)."""
    return np.concatenate([z.real, z.imag], axis=-1)


def unstack_complex(x):
    """numpy real (..., 2C) -> numpy complex (..., C)."""
    n = x.shape[-1]
    if n % 2:
        raise ValueError(f"unstack_complex: last axis must be even, got {n}")
    c = n // 2
    return x[..., :c] + 1j * x[..., c:]


def _halves(x):
    n = x.data.shape[-1]
    if n % 2:
        raise ValueError(f"stacked tensor needs an even channel count, got {n}")
    c = n // 2
    axis = x.data.ndim - 1
    return ad.narrow(x, axis, 0, c), ad.narrow(x, axis, c, c)


@dataclass
class StackedComplexTensor:
    """Stacked-real view of a complex tensor; last axis is 2C."""

    tensor: Tensor

    def __post_init__(self):
        if self.tensor.data.shape[-1] % 2:
            raise ValueError(
                f"stacked tensor needs an even channel count, got {self.tensor.data.shape[-1]}")

    @property
    def channels(self):
        return self.tensor.data.shape[-1] // 2

    @property
    def shape(self):
        return self.tensor.data.shape

    def to_complex(self):
        return unstack_complex(self.tensor.data)


@dataclass
class ComplexMatrixBatch:
    """Batch of complex matrices as separate real/imag tensors, shape F x A x B."""

    re: Tensor
    im: Tensor

    def __post_init__(self):
        if self.re.data.shape != self.im.data.shape:
            raise ValueError(
                f"re/im shape mismatch {self.re.data.shape} vs {self.im.data.shape}")
        if self.re.data.ndim != 3:
            raise ValueError(f"expected F x A x B, got {self.re.data.shape}")

    @property
    def shape(self):
        return self.re.data.shape

    def to_complex(self):
        return self.re.data + 1j * self.im.data


def cmul(a, b):
    """Elementwise complex product of two stacked tensors of identical shape."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"cmul: shape mismatch {a.data.shape} vs {b.data.shape}")
    ar, ai = _halves(a)
    br, bi = _halves(b)
    re = ad.sub(ad.mul(ar, br), ad.mul(ai, bi))
    im = ad.add(ad.mul(ar, bi), ad.mul(ai, br))
    return ad.concat([re, im], axis=a.data.ndim - 1)


def noise_mask(m):
    """Speech mask -> noise mask: real parts 1 - Mr, imaginary parts -Mi."""
    mr, mi = _halves(m)
    return ad.concat([ad.add(ad.neg(mr), 1.0), ad.neg(mi)], axis=m.data.ndim - 1)


def complex_abs(re, im):
    """Magnitude sqrt(re^2 + im^2); gradient defined as 0 at exact zero."""
    mag = np.hypot(re.data, im.data)
    out = _node(mag, (re, im), None, "cabs")
    if out.requires_grad:
        inv = np.divide(1.0, mag, out=np.zeros_like(mag), where=mag > 0)

        def bwd(g):
            _acc(re, g * re.data * inv)
            _acc(im, g * im.data * inv)
        out._bwd = bwd
    return out


def cmag(x):
    """Magnitudes of a stacked tensor: (..., 2C) -> (..., C)."""
    r, i = _halves(x)
    return complex_abs(r, i)


def _phase_parts(re, im):
    mag = np.hypot(re.data, im.data)
    nz = mag > 0
    inv = np.divide(1.0, mag, out=np.zeros_like(mag), where=nz)
    inv3 = inv ** 3
    return mag, nz, inv, inv3


def phase_cos(re, im):
    """cos of the phase of re + j*im; exact zero maps to 1 (phase 0)."""
    mag, nz, inv, inv3 = _phase_parts(re, im)
    val = np.where(nz, re.data * inv, 1.0)
    out = _node(val, (re, im), None, "phase_cos")
    if out.requires_grad:
        def bwd(g):
            _acc(re, g * im.data * im.data * inv3)
            _acc(im, -g * re.data * im.data * inv3)
        out._bwd = bwd
    return out


def phase_sin(re, im):
    """sin of the phase of re + j*im; exact zero maps to 0 (phase 0)."""
    mag, nz, inv, inv3 = _phase_parts(re, im)
    val = np.where(nz, im.data * inv, 0.0)
    out = _node(val, (re, im), None, "phase_sin")
    if out.requires_grad:
        def bwd(g):
            _acc(re, -g * re.data * im.data * inv3)
            _acc(im, g * re.data * re.data * inv3)
        out._bwd = bwd
    return out


def mag_softmax_phase_keep(p):
    """Softmax over magnitudes with phases carried through unchanged.

    For each batch matrix, |out[:, c, j]| = softmax over c of |p[:, c, j]|
    (normalized down each column) and the phase of every entry equals the
    phase of the matching input entry; zero entries keep phase 0.
    """
    if not isinstance(p, ComplexMatrixBatch):
        raise TypeError("mag_softmax_phase_keep expects a ComplexMatrixBatch")
    mag = complex_abs(p.re, p.im)
    s = ad.softmax(mag, axis=1)
    wr = ad.mul(s, phase_cos(p.re, p.im))
    wi = ad.mul(s, phase_sin(p.re, p.im))
    return ComplexMatrixBatch(wr, wi)


def batch_transpose(p):
    """Swap the matrix axes of a ComplexMatrixBatch (no conjugation)."""
    return ComplexMatrixBatch(ad.transpose(p.re, (0, 2, 1)), ad.transpose(p.im, (0, 2, 1)))


def cmatmul(a, b, conjugate_a=False):
    """Per-batch complex matrix product: (F,A,K) @ (F,K,B) -> (F,A,B).

    conjugate_a applies elementwise conjugation to a first (no transpose).
    """
    ar, ai = a.re, a.im
    if conjugate_a:
        ai = ad.neg(ai)
    re = ad.sub(ad.bmm(ar, b.re), ad.bmm(ai, b.im))
    im = ad.add(ad.bmm(ar, b.im), ad.bmm(ai, b.re))
    return ComplexMatrixBatch(re, im)
