"""``.clc1`` container: a 14-byte header then 24 bits per token frame.

Header (little-endian): magic ``CLC1``, u8 version, u16/u16 frame rate
numerator/denominator, u8 bits per frame, u32 frame count. The payload is
the concatenation of every frame's layer-1 then layer-2 12-bit code,
MSB-first, zero-padded to a byte boundary only at the end.
"""
from __future__ import annotations

import struct
from fractions import Fraction

import numpy as np

MAGIC = b"CLC1"
VERSION = 1
FRAME_RATE = Fraction(25, 2)
CODE_BITS = 12
CODES_PER_FRAME = 2
BITS_PER_FRAME = CODE_BITS * CODES_PER_FRAME
_HEADER = struct.Struct("<4sBHHBI")
HEADER_SIZE = _HEADER.size


class BitstreamError(ValueError):
    pass


def bitrate(frame_rate: float, bits_per_frame: float) -> float:
    if frame_rate <= 0 or bits_per_frame <= 0:
        raise ValueError("frame rate and bits per frame must be positive")
    return frame_rate * bits_per_frame


def payload_bytes(n_frames: int) -> int:
    return -(-BITS_PER_FRAME * n_frames // 8)


def pack(frames) -> bytes:
    """Serialize an ``(n, 2)`` array of layer codes."""
    codes = np.asarray(frames, dtype=np.int64).reshape(-1, CODES_PER_FRAME)
    n = codes.shape[0]
    if n == 0:
        raise BitstreamError("cannot pack an empty frame sequence")
    if np.any(codes < 0) or np.any(codes >= 1 << CODE_BITS):
        raise BitstreamError("code out of 12-bit range")
    shifts = np.arange(CODE_BITS - 1, -1, -1)
    bits = ((codes[..., None] >> shifts) & 1).astype(np.uint8).ravel()
    header = _HEADER.pack(MAGIC, VERSION, FRAME_RATE.numerator, FRAME_RATE.denominator,
                          BITS_PER_FRAME, n)
    return header + np.packbits(bits).tobytes()


def unpack(data: bytes) -> np.ndarray:
    """Inverse of :func:`pack`; returns ``(n, 2)`` int64 codes."""
    if len(data) < HEADER_SIZE:
        raise BitstreamError("truncated header")
    magic, version, num, den, bpf, n = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BitstreamError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BitstreamError(f"unsupported version {version}")
    if bpf != BITS_PER_FRAME or Fraction(num, den) != FRAME_RATE:
        raise BitstreamError(f"unsupported framing: {num}/{den} Hz, {bpf} bits/frame")
    if n == 0:
        raise BitstreamError("stream holds no frames")
    payload = np.frombuffer(data, dtype=np.uint8, offset=HEADER_SIZE)
    if payload.size != payload_bytes(n):
        raise BitstreamError(f"payload is {payload.size} bytes, expected {payload_bytes(n)}")
    bits = np.unpackbits(payload)
    used = BITS_PER_FRAME * n
    if np.any(bits[used:]):
        raise BitstreamError("nonzero padding bits")
    bits = bits[:used].reshape(n, CODES_PER_FRAME, CODE_BITS).astype(np.int64)
    return bits @ (1 << np.arange(CODE_BITS - 1, -1, -1))
