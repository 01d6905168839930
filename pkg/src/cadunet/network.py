"""Dense U-Net with a channel-attention unit in every block.

Layout per level: a down-block pools 2x2, runs a dense block that doubles the
channel count (clamped so no block output exceeds the filter cap), applies
channel attention and concatenates the attention output with its input. An
up-block mirrors it: stride-2 transposed conv upsample, 2x2 conv, skip
concatenation, dense block, attention, concatenation. The deepest down-block
feeds the first up-block directly. The input itself passes through an
attention unit whose output is concatenated before the first dense block, and
a 2x2 conv + ReLU head emits the nonnegative stacked mask pair.

2x2 convolutions keep spatial extents by padding one trailing row/column.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import complexops as cx
from .attention import CAParams, ca_forward, init_ca_params
from .autodiff import Parameter, Tensor
from .stft import CodecConfig, Spectrogram, istft_tensor, stft

SAME_PAD = (0, 1, 0, 1)  # pad after, both dims, for 2x2 kernels


@dataclass(frozen=True)
class DenseBlockConfig:
    in_ch: int
    out_ch: int
    layers: int = 4

    def __post_init__(self):
        if self.out_ch % self.layers:
            raise ValueError(
                f"dense output {self.out_ch} not divisible by {self.layers} layers")

    @property
    def growth(self):
        return self.out_ch // self.layers


@dataclass(frozen=True)
class UNetConfig:
    channels: int = 6          # microphones C
    bins: int = 512            # F
    frames: int = 80           # T
    levels: int = 4            # L
    base_filters: int = 32     # first dense block output
    ca_depth: int = 20         # projection depth d
    dense_layers: int = 4      # D
    filter_cap: int = 256
    variant: str = "complex"

    def __post_init__(self):
        if self.variant not in ("complex", "real"):
            raise ValueError(f"variant must be 'complex' or 'real', got {self.variant!r}")
        step = 2 ** self.levels
        if self.bins % step or self.frames % step:
            raise ValueError(
                f"bins x frames {self.bins}x{self.frames} not divisible by 2^{self.levels}")
        if self.base_filters % self.dense_layers:
            raise ValueError(
                f"base_filters {self.base_filters} not divisible by D={self.dense_layers}")
        for tgt in self.down_dense_targets() + self.up_dense_targets():
            if tgt % self.dense_layers:
                raise ValueError(f"dense target {tgt} not divisible by D={self.dense_layers}")
            if self.variant == "complex" and tgt % 2:
                raise ValueError(f"dense target {tgt} must be even for the complex variant")

    @property
    def in_ch(self):
        return 2 * self.channels if self.variant == "complex" else self.channels

    @property
    def mask_ch(self):
        return self.in_ch

    def down_dense_targets(self):
        """Dense-block outputs per down level; block output is twice this."""
        out = []
        ch = self.base_filters
        for _ in range(self.levels):
            tgt = min(2 * ch, self.filter_cap // 2)
            out.append(tgt)
            ch = 2 * tgt
        return out

    def up_dense_targets(self):
        """Dense-block outputs per up block, deepest first; output is twice this."""
        return [min(self.base_filters * 2 ** lvl, self.filter_cap) // 2
                for lvl in range(self.levels, 0, -1)]

    def channel_schedule(self):
        """(name, bins, frames, channels) after every block, input to masks."""
        rows = [("input", self.bins, self.frames, self.in_ch)]
        rows.append(("input+ca", self.bins, self.frames, 2 * self.in_ch))
        rows.append(("pre_dense", self.bins, self.frames, self.base_filters))
        f, t = self.bins, self.frames
        for i, tgt in enumerate(self.down_dense_targets(), 1):
            f, t = f // 2, t // 2
            rows.append((f"down{i}", f, t, 2 * tgt))
        for i, tgt in enumerate(self.up_dense_targets(), 1):
            f, t = f * 2, t * 2
            rows.append((f"up{i}", f, t, 2 * tgt))
        rows.append(("mask", self.bins, self.frames, self.mask_ch))
        return rows


@dataclass
class DenseBlockParams:
    cfg: DenseBlockConfig
    weights: list
    biases: list

    def named(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out


@dataclass
class DownBlockParams:
    dense: DenseBlockParams
    ca: CAParams

    def named(self):
        return self.dense.named() + self.ca.named()


@dataclass
class UpBlockParams:
    up_w: Parameter
    up_b: Parameter
    conv_w: Parameter
    conv_b: Parameter
    dense: DenseBlockParams
    ca: CAParams

    def named(self):
        return [self.up_w, self.up_b, self.conv_w, self.conv_b] + \
            self.dense.named() + self.ca.named()


@dataclass
class MaskPair:
    """Nonnegative speech mask and its derived noise mask, same stacking as Y."""

    speech: Tensor
    noise: Tensor
    variant: str


def init_conv(prefix, kh, kw, cin, cout, rng):
    bound = float(np.sqrt(1.0 / (kh * kw * cin)))
    w = Parameter(f"{prefix}.weight", rng.uniform(-bound, bound, size=(kh, kw, cin, cout)))
    b = Parameter(f"{prefix}.bias", np.zeros(cout))
    return w, b


def init_dense_block(prefix, cfg, rng):
    ws, bs = [], []
    for j in range(cfg.layers):
        cin = cfg.in_ch + j * cfg.growth
        w, b = init_conv(f"{prefix}.layer{j + 1}", 2, 2, cin, cfg.growth, rng)
        ws.append(w)
        bs.append(b)
    return DenseBlockParams(cfg=cfg, weights=ws, biases=bs)


def dense_block(x, params):
    """DenseNet block: each layer convolves the concat of block input and all
    previous layer outputs; the block output is the concat of layer outputs."""
    feed = x
    outs = []
    for w, b in zip(params.weights, params.biases):
        y = ad.elu(ad.conv2d(feed, w, b, pad=SAME_PAD))
        outs.append(y)
        feed = ad.concat([x] + outs, axis=2)
    return ad.concat(outs, axis=2)


def down_block(x, params, variant):
    pooled = ad.pool2d(x, "avg")
    dense = dense_block(pooled, params.dense)
    attn = ca_forward(dense, params.ca, variant)
    return ad.concat([dense, attn], axis=2)


def up_block(x, skip, params, variant):
    f, t, _ = x.data.shape
    want_ch = params.dense.cfg.in_ch - params.conv_w.data.shape[3]
    if skip.data.shape != (2 * f, 2 * t, want_ch):
        raise ValueError(
            f"skip shape {skip.data.shape}, expected {(2 * f, 2 * t, want_ch)}")
    up = ad.tconv2d(x, params.up_w, params.up_b)
    conv = ad.elu(ad.conv2d(up, params.conv_w, params.conv_b, pad=SAME_PAD))
    dense = dense_block(ad.concat([conv, skip], axis=2), params.dense)
    attn = ca_forward(dense, params.ca, variant)
    return ad.concat([dense, attn], axis=2)


def mask_head(x, w, b, variant):
    """Nonnegative speech mask via 2x2 conv + ReLU, with its derived noise mask."""
    m = ad.relu(ad.conv2d(x, w, b, pad=SAME_PAD))
    if variant == "real":
        noise = ad.add(ad.neg(m), 1.0)
    else:
        noise = cx.noise_mask(m)
    return MaskPair(speech=m, noise=noise, variant=variant)


class Model:
    """Parameter container plus forward passes for one network configuration."""

    def __init__(self, cfg: UNetConfig, codec: CodecConfig, seed=0):
        if codec.bins != cfg.bins:
            raise ValueError(f"codec yields {codec.bins} bins, network expects {cfg.bins}")
        self.cfg = cfg
        self.codec = codec
        self.seed = seed
        rng = np.random.default_rng(seed)
        D = cfg.dense_layers

        self.input_ca = init_ca_params("input_ca", cfg.frames, cfg.ca_depth, rng)
        self.pre_dense = init_dense_block(
            "pre_dense", DenseBlockConfig(2 * cfg.in_ch, cfg.base_filters, D), rng)

        self.downs = []
        t = cfg.frames
        ch = cfg.base_filters
        for i, tgt in enumerate(cfg.down_dense_targets(), 1):
            t //= 2
            dense = init_dense_block(f"down{i}.dense", DenseBlockConfig(ch, tgt, D), rng)
            ca = init_ca_params(f"down{i}.ca", t, cfg.ca_depth, rng)
            self.downs.append(DownBlockParams(dense=dense, ca=ca))
            ch = 2 * tgt

        skip_chs = [cfg.base_filters] + [2 * tgt for tgt in cfg.down_dense_targets()[:-1]]
        self.ups = []
        for i, tgt in enumerate(cfg.up_dense_targets(), 1):
            t *= 2
            up_w, up_b = init_conv(f"up{i}.upsample", 2, 2, ch, ch, rng)
            conv_w, conv_b = init_conv(f"up{i}.conv", 2, 2, ch, tgt, rng)
            skip = skip_chs[-i]
            dense = init_dense_block(f"up{i}.dense", DenseBlockConfig(tgt + skip, tgt, D), rng)
            ca = init_ca_params(f"up{i}.ca", t, cfg.ca_depth, rng)
            self.ups.append(UpBlockParams(up_w, up_b, conv_w, conv_b, dense, ca))
            ch = 2 * tgt

        self.mask_w, self.mask_b = init_conv("mask", 2, 2, ch, cfg.mask_ch, rng)

    def parameters(self):
        out = self.input_ca.named() + self.pre_dense.named()
        for blk in self.downs:
            out += blk.named()
        for blk in self.ups:
            out += blk.named()
        out += [self.mask_w, self.mask_b]
        return out

    def parameter_count(self):
        return sum(p.data.size for p in self.parameters())

    def param_dict(self):
        return {p.name: p for p in self.parameters()}


def network_input(model, spec):
    """Network input tensor from a Spectrogram: stacked Y, or |Y| for real."""
    y = spec.stacked.tensor
    if model.cfg.variant == "real":
        return cx.cmag(y)
    return y


def unet_forward(model, spec_or_tensor):
    """Run the U-Net; returns the speech/noise MaskPair."""
    cfg = model.cfg
    x0 = spec_or_tensor if isinstance(spec_or_tensor, Tensor) \
        else network_input(model, spec_or_tensor)
    F, T, ch = x0.data.shape
    if (F, T, ch) != (cfg.bins, cfg.frames, cfg.in_ch):
        raise ValueError(
            f"input {F}x{T}x{ch}, network built for "
            f"{cfg.bins}x{cfg.frames}x{cfg.in_ch}")

    attn = ca_forward(x0, model.input_ca, cfg.variant)
    x = ad.concat([x0, attn], axis=2)
    x = dense_block(x, model.pre_dense)

    skips = [x]
    for blk in model.downs:
        x = down_block(x, blk, cfg.variant)
        skips.append(x)
    skips.pop()  # deepest output feeds the first up-block directly

    for blk in model.ups:
        x = up_block(x, skips.pop(), blk, cfg.variant)

    return mask_head(x, model.mask_w, model.mask_b, cfg.variant)


def estimate_sources(spec, masks):
    """Apply the mask pair to the mixture spectrogram.

    The Nyquist row is not mask-controlled: the speech estimate keeps the
    mixture's Nyquist bin, the noise estimate gets zero there, so the two
    estimates still sum to the mixture at every bin.
    """
    y = spec.stacked.tensor
    if masks.variant == "real":
        yr, yi = cx._halves(y)
        s = ad.concat([ad.mul(yr, masks.speech), ad.mul(yi, masks.speech)], axis=2)
        n = ad.concat([ad.mul(yr, masks.noise), ad.mul(yi, masks.noise)], axis=2)
    else:
        s = cx.cmul(y, masks.speech)
        n = cx.cmul(y, masks.noise)
    s_spec = Spectrogram(cx.StackedComplexTensor(s), spec.nyquist_bin.copy(),
                         spec.original_length, spec.config)
    n_spec = Spectrogram(cx.StackedComplexTensor(n), np.zeros_like(spec.nyquist_bin),
                         spec.original_length, spec.config)
    return s_spec, n_spec


def segment_samples(model):
    """Input samples consumed per network pass."""
    return model.codec.segment_length(model.cfg.frames)


def enhance(model, y):
    """Enhance a multichannel signal of any length.

    The network runs on fixed-length segments; the tail is zero-padded and the
    outputs cropped back. Returns (speech, noise) arrays shaped like y; the two
    sum to y exactly within each segment.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    n, c = y.shape
    if c != model.cfg.channels:
        raise ValueError(f"model built for {model.cfg.channels} channels, input has {c}")
    seg = segment_samples(model)
    total = ((n + seg - 1) // seg) * seg
    padded = np.zeros((total, c))
    padded[:n] = y
    s_out = np.empty_like(padded)
    n_out = np.empty_like(padded)
    with ad.no_grad():
        for at in range(0, total, seg):
            spec = stft(padded[at:at + seg], model.codec)
            masks = unet_forward(model, spec)
            s_spec, n_spec = estimate_sources(spec, masks)
            s_out[at:at + seg] = istft_tensor(
                s_spec.stacked.tensor, s_spec.nyquist_bin, model.codec, seg).data
            n_out[at:at + seg] = istft_tensor(
                n_spec.stacked.tensor, n_spec.nyquist_bin, model.codec, seg).data
    return s_out[:n], n_out[:n]
