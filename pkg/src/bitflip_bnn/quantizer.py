"""Symmetric per-layer weight quantization and two's-complement bit access.

Codes are stored as signed integers. The bit view of a code with ``n_bits``
bits is its two's-complement pattern, bit 0 being the LSB and bit
``n_bits - 1`` the sign bit.

One-bit layers are the binary weights of a BNN. Their codes live in
``{-1, +1}``, the single stored bit is the sign (1 for negative), and a flip
maps ``w`` to ``-w``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SUPPORTED_BITS = (1, 2, 4, 8)


@dataclass(frozen=True)
class BitAddress:
    layer_id: int
    weight_index: int
    bit: int


@dataclass(frozen=True, eq=False)
class QuantizedWeight:
    codes: np.ndarray  # int64, shape of the weight tensor
    n_bits: int
    scale: float
    layer_id: int = 0
    degenerate: bool = False
    shape: tuple = field(default=())

    def __post_init__(self):
        if self.n_bits not in SUPPORTED_BITS:
            raise ValueError(f"n_bits must be one of {SUPPORTED_BITS}, got {self.n_bits}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not self.shape:
            object.__setattr__(self, "shape", tuple(self.codes.shape))
        lo, hi = code_range(self.n_bits)
        c = self.codes
        if self.n_bits == 1:
            bad = np.any((c != 1) & (c != -1))
        else:
            bad = c.size and (c.min() < lo or c.max() > hi)
        if bad:
            raise ValueError(f"codes out of range for {self.n_bits}-bit layer")

    @property
    def size(self) -> int:
        return int(self.codes.size)

    def replace_codes(self, codes: np.ndarray) -> "QuantizedWeight":
        return QuantizedWeight(codes, self.n_bits, self.scale, self.layer_id, self.degenerate)

    def __eq__(self, other):
        if not isinstance(other, QuantizedWeight):
            return NotImplemented
        return (
            self.n_bits == other.n_bits
            and self.scale == other.scale
            and self.layer_id == other.layer_id
            and np.array_equal(self.codes, other.codes)
        )


def code_range(n_bits: int) -> tuple[int, int]:
    if n_bits == 1:
        return -1, 1
    return -(2 ** (n_bits - 1)), 2 ** (n_bits - 1) - 1


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_layer(weights, n_bits: int, layer_id: int = 0) -> QuantizedWeight:
    """Quantize ``weights`` with scale ``max|w| / (2**(n_bits-1) - 1)``.

    An all-zero tensor gets scale 1, zero codes and ``degenerate=True``.
    """
    w = np.asarray(weights, dtype=np.float64)
    if n_bits < 2:
        raise ValueError("n_bits < 2: use binarize_layer for 1-bit weights")
    if n_bits not in SUPPORTED_BITS:
        raise ValueError(f"n_bits must be one of {SUPPORTED_BITS}")
    if not np.all(np.isfinite(w)):
        raise ValueError("non-finite weights")
    top = 2 ** (n_bits - 1) - 1
    amax = float(np.max(np.abs(w))) if w.size else 0.0
    if amax == 0.0:
        return QuantizedWeight(np.zeros(w.shape, np.int64), n_bits, 1.0, layer_id, degenerate=True)
    scale = amax / top
    lo, hi = code_range(n_bits)
    codes = np.clip(round_half_away(w / scale), lo, hi).astype(np.int64)
    return QuantizedWeight(codes, n_bits, scale, layer_id)


def binarize_layer(weights, layer_id: int = 0, scale: float = 1.0) -> QuantizedWeight:
    """Sign codes of a binary layer; zero weights map to +1."""
    w = np.asarray(weights)
    codes = np.where(w < 0, -1, 1).astype(np.int64)
    return QuantizedWeight(codes, 1, float(scale), layer_id)


def dequantize(qw: QuantizedWeight) -> np.ndarray:
    return qw.codes.astype(np.float64) * qw.scale


def to_unsigned(codes: np.ndarray, n_bits: int) -> np.ndarray:
    """Raw ``n_bits``-wide bit pattern of each code as a non-negative int."""
    if n_bits == 1:
        return (np.asarray(codes) < 0).astype(np.int64)
    return np.mod(np.asarray(codes, dtype=np.int64), 2**n_bits)


def from_unsigned(u: np.ndarray, n_bits: int) -> np.ndarray:
    u = np.asarray(u, dtype=np.int64)
    if n_bits == 1:
        return np.where(u == 1, -1, 1).astype(np.int64)
    return np.where(u >= 2 ** (n_bits - 1), u - 2**n_bits, u)


def bit_matrix(qw: QuantizedWeight) -> np.ndarray:
    """``(size, n_bits)`` array of 0/1 bits, column p holding bit p."""
    u = to_unsigned(qw.codes.reshape(-1), qw.n_bits)
    return (u[:, None] >> np.arange(qw.n_bits)) & 1


def _check_address(qw: QuantizedWeight, index: int, bit: int) -> None:
    if not 0 <= index < qw.size:
        raise IndexError(f"weight index {index} outside layer of {qw.size} weights")
    if not 0 <= bit < qw.n_bits:
        raise IndexError(f"bit {bit} outside [0, {qw.n_bits})")


def flip_code(code: int, bit: int, n_bits: int) -> int:
    u = int(to_unsigned(np.int64(code), n_bits)) ^ (1 << bit)
    return int(from_unsigned(np.int64(u), n_bits))


def flip_bit(qw: QuantizedWeight, addr: BitAddress) -> QuantizedWeight:
    """Return a copy of ``qw`` with the addressed bit toggled."""
    _check_address(qw, addr.weight_index, addr.bit)
    codes = qw.codes.copy()
    flat = codes.reshape(-1)
    flat[addr.weight_index] = flip_code(flat[addr.weight_index], addr.bit, qw.n_bits)
    return qw.replace_codes(codes)


def bit_flip_deltas(qw: QuantizedWeight) -> np.ndarray:
    """Change in dequantized value caused by flipping each bit.

    Returns a ``(size, n_bits)`` array.
    """
    n = qw.n_bits
    c = qw.codes.reshape(-1, 1).astype(np.int64)
    if n == 1:
        flipped = -c
    else:
        b = bit_matrix(qw)
        step = (1 - 2 * b) * (2 ** np.arange(n, dtype=np.int64))
        step[:, n - 1] = -step[:, n - 1]
        flipped = c + step
    # flipped * s - c * s rather than (flipped - c) * s, so each entry equals
    # dequantize-after-flip minus dequantize-before bit for bit
    return flipped.astype(np.float64) * qw.scale - c.astype(np.float64) * qw.scale


def hamming(a: QuantizedWeight, b: QuantizedWeight) -> int:
    if a.n_bits != b.n_bits or a.shape != b.shape:
        raise ValueError("hamming distance needs matching layouts")
    x = to_unsigned(a.codes.reshape(-1), a.n_bits) ^ to_unsigned(b.codes.reshape(-1), b.n_bits)
    return int(sum(bin(int(v)).count("1") for v in x))


def pack_bits(qw: QuantizedWeight) -> bytes:
    """Bit view of a layer, each weight's field LSB-first, little-endian packed."""
    bits = bit_matrix(qw).reshape(-1).astype(np.uint8)
    return np.packbits(bits, bitorder="little").tobytes()


def unpack_bits(data: bytes, n_bits: int, shape) -> np.ndarray:
    count = int(np.prod(shape)) if len(shape) else 1
    bits = np.unpackbits(np.frombuffer(data, np.uint8), bitorder="little")[: count * n_bits]
    bits = bits.reshape(count, n_bits).astype(np.int64)
    u = (bits << np.arange(n_bits)).sum(axis=1)
    return from_unsigned(u, n_bits).reshape(shape)


def qat_forward(w: np.ndarray, n_bits: int) -> np.ndarray:
    """Forward view used during quantization-aware training."""
    qw = quantize_layer(w, n_bits)
    return dequantize(qw).astype(w.dtype, copy=False)


def qat_backward(w: np.ndarray, grad: np.ndarray) -> np.ndarray:
    # straight-through inside the representable range
    amax = np.max(np.abs(w)) if w.size else 0.0
    return grad * (np.abs(w) <= amax)
