"""R-bit uniform quantization codec for model vectors.

Each element is mapped onto one of 2^R evenly spaced levels spanning the
vector's [min, max] range, so a transmitted model costs R bits per
element plus a small fixed header instead of 32.  Rounding is
deterministic (half away from zero) for reproducible runs; stochastic
rounding could slot in behind the same interface.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class QuantizedBlob:
    lo: float
    hi: float
    r_bits: int
    codes: np.ndarray = field(repr=False)  # (length,) uint64, each < 2^r_bits
    length: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.r_bits <= 32:
            raise ValueError("r_bits must be in [1, 32]")
        if self.lo > self.hi:
            raise ValueError("lo must not exceed hi")
        codes = np.asarray(self.codes, dtype=np.uint64)
        if codes.shape != (self.length,):
            raise ValueError("corrupt packing: code count != length")
        if self.length and int(codes.max()) >= (1 << self.r_bits):
            raise ValueError("code exceeds r_bits range")
        codes = codes.copy()
        codes.flags.writeable = False
        object.__setattr__(self, "codes", codes)


def encode(v: np.ndarray, r_bits: int) -> QuantizedBlob:
    """Quantize a flat vector to r_bits per element over its own range.

    code = round((x - lo) / (hi - lo) * (2^R - 1)), half away from zero.
    A constant vector (hi == lo) encodes as all-zero codes.
    """
    if not 1 <= r_bits <= 32:
        raise ValueError("r_bits must be in [1, 32]")
    x = np.asarray(v, dtype=np.float64).ravel()
    if x.size and not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    if x.size == 0:
        return QuantizedBlob(0.0, 0.0, r_bits, np.empty(0, dtype=np.uint64), 0)
    lo = float(x.min())
    hi = float(x.max())
    levels = (1 << r_bits) - 1
    if hi == lo:
        codes = np.zeros(x.size, dtype=np.uint64)
    else:
        scaled = (x - lo) / (hi - lo) * levels
        # values are nonnegative, so half-away-from-zero == floor(x + 0.5)
        codes = np.floor(scaled + 0.5)
        np.clip(codes, 0, levels, out=codes)
        codes = codes.astype(np.uint64)
    return QuantizedBlob(lo, hi, r_bits, codes, x.size)


def decode(b: QuantizedBlob) -> np.ndarray:
    """Reconstruct x_hat = lo + code * (hi - lo) / (2^R - 1).

    Per-element error of encode->decode is at most (hi-lo) / (2*(2^R - 1)).
    """
    if b.length == 0:
        return np.empty(0, dtype=np.float64)
    levels = (1 << b.r_bits) - 1
    step = (b.hi - b.lo) / levels
    return b.lo + b.codes.astype(np.float64) * step


_WIDE_LEN_FLAG = 0x8000
_MAX_NARROW_LEN = 0xFFFF


def payload_bits(b: QuantizedBlob) -> int:
    """Exact on-air size: length * r_bits codes + 64 range bits + header.

    The header is two 16-bit fields (r_bits and length); length widens to
    32 bits, flagged in bit 15 of the r_bits field, when it exceeds 65535.
    """
    return b.length * b.r_bits + 64 + header_bits(b.length)


def header_bits(length: int) -> int:
    return 32 if length <= _MAX_NARROW_LEN else 48


def payload_bits_for(length: int, r_bits: int) -> int:
    """Payload size of a hypothetical blob without encoding anything."""
    if not 1 <= r_bits <= 32:
        raise ValueError("r_bits must be in [1, 32]")
    if length < 0:
        raise ValueError("length must be nonnegative")
    return length * r_bits + 64 + header_bits(length)


def serialize(b: QuantizedBlob) -> bytes:
    """Wire format: little-endian header (r field, length), lo/hi as 32-bit
    floats, codes bit-packed LSB-first and padded to a whole byte."""
    wide = b.length > _MAX_NARROW_LEN
    rfield = b.r_bits | (_WIDE_LEN_FLAG if wide else 0)
    head = struct.pack("<H", rfield)
    head += struct.pack("<I" if wide else "<H", b.length)
    head += struct.pack("<ff", np.float32(b.lo), np.float32(b.hi))
    if b.length == 0:
        return head
    shifts = np.arange(b.r_bits, dtype=np.uint64)
    bits = ((b.codes[:, None] >> shifts) & np.uint64(1)).astype(np.uint8)
    packed = np.packbits(bits.ravel(), bitorder="little")
    return head + packed.tobytes()


def deserialize(data: bytes) -> QuantizedBlob:
    if len(data) < 2:
        raise ValueError("blob too short for header")
    (rfield,) = struct.unpack_from("<H", data, 0)
    wide = bool(rfield & _WIDE_LEN_FLAG)
    r_bits = rfield & ~_WIDE_LEN_FLAG
    off = 2
    if wide:
        (length,) = struct.unpack_from("<I", data, off)
        off += 4
    else:
        (length,) = struct.unpack_from("<H", data, off)
        off += 2
    lo, hi = struct.unpack_from("<ff", data, off)
    off += 8
    n_bytes = (length * r_bits + 7) // 8
    body = data[off:]
    if len(body) != n_bytes:
        raise ValueError(
            f"corrupt packing: expected {n_bytes} code bytes, got {len(body)}")
    if length == 0:
        codes = np.empty(0, dtype=np.uint64)
    else:
        bits = np.unpackbits(np.frombuffer(body, dtype=np.uint8),
                             bitorder="little")[: length * r_bits]
        weights = (np.uint64(1) << np.arange(r_bits, dtype=np.uint64))
        codes = bits.reshape(length, r_bits).astype(np.uint64) @ weights
    return QuantizedBlob(float(lo), float(hi), r_bits, codes, length)
