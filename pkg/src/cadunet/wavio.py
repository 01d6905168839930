"""Minimal RIFF/WAVE reader and writer.

Supports PCM 16-bit and IEEE float32, any channel count, and nothing else.
Readers skip unknown chunks; malformed files are rejected with the offending
chunk named. Samples are exposed as float64 in [-1, 1] (PCM scaled by 1/32768).
"""

from __future__ import annotations

import struct

import numpy as np

_PCM16 = 1
_FLOAT32 = 3


def write_wav(path, signal, rate, fmt="float32"):
    """Write an N or NxC float array. fmt is "float32" or "pcm16"."""
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError(f"signal must be 1-D or 2-D, got shape {x.shape}")
    n, c = x.shape
    if fmt == "float32":
        payload = x.astype("<f4").tobytes()
        code, bits = _FLOAT32, 32
    elif fmt == "pcm16":
        # symmetric 1/32768 step keeps the round-trip error within one LSB
        q = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
        payload = q.tobytes()
        code, bits = _PCM16, 16
    else:
        raise ValueError(f"unsupported format {fmt!r}")
    block = c * bits // 8
    fmt_chunk = struct.pack("<HHIIHH", code, c, rate, rate * block, block, bits)
    body = b"WAVE"
    body += b"fmt " + struct.pack("<I", len(fmt_chunk)) + fmt_chunk
    if code == _FLOAT32:
        body += b"fact" + struct.pack("<II", 4, n)
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) % 2:
        body += b"\x00"
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", len(body)) + body)


def read_wav(path):
    """Read a WAV file; returns (samples NxC float64, sample_rate)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != b"RIFF":
        raise ValueError("not a RIFF file (bad 'RIFF' magic)")
    if raw[8:12] != b"WAVE":
        raise ValueError("RIFF form is not 'WAVE'")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        chunk = raw[pos + 8:pos + 8 + size]
        if len(chunk) < size:
            raise ValueError(f"truncated {cid.decode('latin1')!r} chunk")
        if cid == b"fmt ":
            if size < 16:
                raise ValueError("short 'fmt ' chunk")
            fmt = struct.unpack_from("<HHIIHH", chunk, 0)
        elif cid == b"data":
            data = chunk
        pos += 8 + size + (size % 2)
    if fmt is None:
        raise ValueError("missing 'fmt ' chunk")
    if data is None:
        raise ValueError("missing 'data' chunk")
    code, channels, rate, _, _, bits = fmt
    if code == _PCM16 and bits == 16:
        x = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif code == _FLOAT32 and bits == 32:
        x = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise ValueError(f"unsupported 'fmt ' codec: format {code}, {bits}-bit")
    if channels < 1:
        raise ValueError("'fmt ' chunk declares zero channels")
    if x.size % channels:
        raise ValueError("'data' chunk length not a multiple of the frame size")
    return x.reshape(-1, channels), rate
