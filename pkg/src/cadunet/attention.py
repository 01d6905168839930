"""Channel-attention unit.

Key, query and value are 1x1 convolutions over the frequency x channel plane
with the time frames acting as conv channels, each followed by an ELU. For
each frequency the unit forms a channel-by-channel similarity matrix from key
and query (plain transpose, no conjugation), pushes its magnitudes through a
softmax down each column while carrying phases over unchanged, and applies
the resulting weights to the value matrix. The complex variant works on
stacked tensors (2C channels); the real variant runs the same pipeline on C
real channels and a softmax over the raw similarities.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import complexops as cx
from .autodiff import Parameter, Tensor


@dataclass
class CAParams:
    """Projection kernels (1 x 1 x T x depth_or_T) and biases for one unit."""

    key_w: Parameter
    key_b: Parameter
    query_w: Parameter
    query_b: Parameter
    value_w: Parameter
    value_b: Parameter

    @property
    def frames(self):
        return self.key_w.data.shape[2]

    @property
    def depth(self):
        return self.key_w.data.shape[3]

    def named(self):
        return [self.key_w, self.key_b, self.query_w, self.query_b,
                self.value_w, self.value_b]


@dataclass
class AttentionMap:
    """Magnitude and phase cubes F x C x C for one unit, plus its block id."""

    magnitude: np.ndarray
    phase: np.ndarray
    block: str = ""


def init_ca_params(prefix, frames, depth, rng):
    """Uniform +-sqrt(1/fan_in) kernels (fan_in = frames for 1x1), zero biases."""
    bound = float(np.sqrt(1.0 / frames))

    def kernel(name, out_ch):
        return Parameter(f"{prefix}.{name}.weight",
                         rng.uniform(-bound, bound, size=(1, 1, frames, out_ch)))

    def bias(name, out_ch):
        return Parameter(f"{prefix}.{name}.bias", np.zeros(out_ch))

    return CAParams(
        key_w=kernel("key", depth), key_b=bias("key", depth),
        query_w=kernel("query", depth), query_b=bias("query", depth),
        value_w=kernel("value", frames), value_b=bias("value", frames),
    )


def _project_one(image, w, b):
    return ad.elu(ad.conv2d(image, w, b))


def ca_project(x, params, variant="complex"):
    """Project x (F x T x ch) to key, query, value.

    Complex variant returns ComplexMatrixBatch triples shaped
    (F, d, C), (F, d, C), (F, T, C) with C = ch / 2; the real variant returns
    plain Tensors with C = ch.
    """
    F, T, ch = x.data.shape
    if params.frames != T:
        raise ValueError(f"attention unit built for {params.frames} frames, input has {T}")
    image = ad.transpose(x, (0, 2, 1))          # F x ch x T
    k_img = _project_one(image, params.key_w, params.key_b)      # F x ch x d
    q_img = _project_one(image, params.query_w, params.query_b)  # F x ch x d
    v_img = _project_one(image, params.value_w, params.value_b)  # F x ch x T

    if variant == "real":
        key = ad.transpose(k_img, (0, 2, 1))    # F x d x C
        query = ad.transpose(q_img, (0, 2, 1))
        value = ad.transpose(v_img, (0, 2, 1))  # F x T x C
        return key, query, value
    if variant != "complex":
        raise ValueError(f"unknown variant {variant!r}")
    if ch % 2:
        raise ValueError(f"complex attention needs an even channel count, got {ch}")
    C = ch // 2

    def split(img, width):
        re = ad.transpose(ad.narrow(img, 1, 0, C), (0, 2, 1))
        im = ad.transpose(ad.narrow(img, 1, C, C), (0, 2, 1))
        return cx.ComplexMatrixBatch(re, im)

    return split(k_img, params.depth), split(q_img, params.depth), split(v_img, T)


def ca_similarity(key, query):
    """Per-frequency similarity: key^T @ query -> (F, C, C), plain transpose."""
    if isinstance(key, cx.ComplexMatrixBatch):
        return cx.cmatmul(cx.batch_transpose(key), query)
    return ad.bmm(ad.transpose(key, (0, 2, 1)), query)


def ca_weights(sim, variant="complex"):
    """Column-normalized attention weights from similarities."""
    if variant == "complex":
        return cx.mag_softmax_phase_keep(sim)
    return ad.softmax(sim, axis=1)


def ca_apply(value, weights, variant="complex"):
    """Apply weights to values and restack to the input layout F x T x ch."""
    if variant == "complex":
        out = cx.cmatmul(value, weights)        # F x T x C complex
        return ad.concat([out.re, out.im], axis=2)
    return ad.bmm(value, weights)


def ca_forward(x, params, variant="complex", want_weights=False):
    """Full unit: shape-preserving attention over channels.

    Returns the output tensor, or (output, weights) when want_weights is set.
    """
    key, query, value = ca_project(x, params, variant)
    w = ca_weights(ca_similarity(key, query), variant)
    out = ca_apply(value, w, variant)
    if want_weights:
        return out, w
    return out


def export_attention(x, params, variant="complex", block=""):
    """Evaluate one unit and export its weights as magnitude/phase cubes."""
    with ad.no_grad():
        _, w = ca_forward(x, params, variant, want_weights=True)
    if variant == "complex":
        mag = np.hypot(w.re.data, w.im.data)
        phase = np.arctan2(w.im.data, w.re.data)
    else:
        mag = np.abs(w.data)
        phase = np.zeros_like(mag)
    return AttentionMap(magnitude=mag, phase=phase, block=block)


def attention_to_csv(amap, path):
    """One row per (f, c, c_ref) with magnitude and phase columns."""
    F, C, C2 = amap.magnitude.shape
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["f", "c", "c_ref", "magnitude", "phase"])
        for f in range(F):
            for c in range(C):
                for j in range(C2):
                    wr.writerow([f, c, j,
                                 repr(float(amap.magnitude[f, c, j])),
                                 repr(float(amap.phase[f, c, j]))])
