"""Binary checkpoint format for models and optimizer state.

Little-endian layout:

    magic   8 bytes  b"CADUNET\\0"
    version u16
    config  u32 length + canonical JSON (network config, codec config, seed)
    params  u32 count, then per parameter:
              u16 name length + UTF-8 name
              u8 dtype code (0 = float32, 1 = float64)
              u8 rank, then rank u32 extents
              raw little-endian data
    optim   u8 flag (0 = none, 1 = present); if present:
              u64 step; f64 lr, beta1, beta2, eps, alpha
              per parameter (model order): first-moment record, second-moment
              record (same tensor format)
              u32 length + JSON RNG bit-generator state

Parameters and moments are stored at full float64 so a reloaded run continues
bit-exactly. Readers reject bad magic, version mismatches, truncation, and
trailing bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np

MAGIC = b"CADUNET\x00"
VERSION = 1

_DTYPES = {0: "<f4", 1: "<f8"}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def _write_tensor(fh, name, arr):
    nb = name.encode("utf-8")
    fh.write(struct.pack("<H", len(nb)) + nb)
    code = _CODES[arr.dtype]
    fh.write(struct.pack("<BB", code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.raw)}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self):
        (nlen,) = self.unpack("<H")
        name = self.take(nlen).decode("utf-8")
        code, rank = self.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name!r}")
        shape = self.unpack(f"<{rank}I")
        dt = np.dtype(_DTYPES[code])
        data = self.take(int(np.prod(shape, dtype=np.int64)) * dt.itemsize)
        arr = np.frombuffer(data, dtype=dt).reshape(shape)
        return name, arr.astype(np.float64) if code == 1 else arr.copy()


def save_checkpoint(model, state, path):
    """Write model (and optionally TrainState) to path."""
    config = {
        "network": asdict(model.cfg),
        "codec": asdict(model.codec),
        "seed": model.seed,
    }
    cfg_bytes = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(cfg_bytes)) + cfg_bytes)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            _write_tensor(fh, p.name, p.data)
        if state is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            a = state.adam
            fh.write(struct.pack("<Q", a.step))
            fh.write(struct.pack("<5d", a.lr, a.beta1, a.beta2, a.eps, state.alpha))
            for p in params:
                _write_tensor(fh, p.name, a.m[p.name])
                _write_tensor(fh, p.name, a.v[p.name])
            rng_bytes = json.dumps(state.rng.bit_generator.state,
                                   sort_keys=True).encode()
            fh.write(struct.pack("<I", len(rng_bytes)) + rng_bytes)


def load_checkpoint(path):
    """Read a checkpoint; returns (model, TrainState or None)."""
    from .network import Model, UNetConfig
    from .stft import CodecConfig
    from .training import AdamState, TrainState

    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {VERSION}")
    (cfg_len,) = r.unpack("<I")
    config = json.loads(r.take(cfg_len).decode())
    model = Model(UNetConfig(**config["network"]),
                  CodecConfig(**config["codec"]), seed=config["seed"])
    by_name = model.param_dict()
    (count,) = r.unpack("<I")
    if count != len(by_name):
        raise CheckpointError(
            f"checkpoint has {count} parameters, model expects {len(by_name)}")
    for _ in range(count):
        name, arr = r.tensor()
        if name not in by_name:
            raise CheckpointError(f"unknown parameter {name!r} in checkpoint")
        if arr.shape != by_name[name].data.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: file {arr.shape}, "
                f"model {by_name[name].data.shape}")
        by_name[name].data = arr.astype(np.float64)
    (flag,) = r.unpack("<B")
    state = None
    if flag == 1:
        (step,) = r.unpack("<Q")
        lr, beta1, beta2, eps, alpha = r.unpack("<5d")
        m, v = {}, {}
        for p in model.parameters():
            name_m, arr_m = r.tensor()
            name_v, arr_v = r.tensor()
            if name_m != p.name or name_v != p.name:
                raise CheckpointError(
                    f"optimizer moments out of order at {p.name!r}")
            m[p.name] = arr_m
            v[p.name] = arr_v
        (rlen,) = r.unpack("<I")
        rng_state = json.loads(r.take(rlen).decode())
        rng = np.random.default_rng(0)
        rng.bit_generator.state = rng_state
        adam = AdamState(step=step, m=m, v=v, lr=lr, beta1=beta1, beta2=beta2,
                         eps=eps)
        state = TrainState(adam=adam, alpha=alpha, rng=rng)
    elif flag != 0:
        raise CheckpointError(f"bad optimizer-section flag {flag}")
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} trailing bytes after checkpoint")
    return model, state
