"""Sign quantization and bit-packed tensor storage.

A binarized filter bank is stored as one bit per weight (1 -> +1, 0 -> -1),
packed LSB-first into 64-bit words along the flattened (ci*kh*kw) axis, with
one non-negative scale per output channel. Dense tensors are plain float32
numpy arrays in (n, c, h, w) layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

WORD_BITS = 64

# uint8 -> number of set bits, fallback for numpy < 2.0
_POPCOUNT8 = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)

_HAS_BITWISE_COUNT = hasattr(np, "bitwise_count")


def popcount_words(words: np.ndarray) -> np.ndarray:
    """Per-word set-bit count of a uint64 array."""
    if _HAS_BITWISE_COUNT:
        return np.bitwise_count(words)
    return _POPCOUNT8[words.view(np.uint8)].reshape(words.shape + (8,)).sum(axis=-1)


class ShapeError(ValueError):
    """Operand shapes are inconsistent or degenerate."""


@dataclass(frozen=True)
class QuantizationPolicy:
    """Controls the sign quantizer.

    weight_scaling: per-output-channel alpha = mean(|w|) when on, 1.0 when off.
    activation_scaling: reserved flag for scaled activation binarization;
        default off (activations use plain sign).
    sign(0) is +1 throughout, which keeps pack/unpack a bijection.
    """

    weight_scaling: bool = True
    activation_scaling: bool = False


@dataclass(frozen=True)
class BitPlaneTensor:
    """Bit-packed signs of a (co, ci, kh, kw) tensor plus per-filter scales.

    words has shape (co, words_per_filter); bit j of filter i encodes the sign
    of flat element j (1 -> +1, 0 -> -1), LSB-first within each 64-bit word.
    Padding bits past ci*kh*kw are zero.
    """

    logical_shape: tuple[int, int, int, int]
    words: np.ndarray
    alphas: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        co, ci, kh, kw = self.logical_shape
        n = ci * kh * kw
        if co <= 0 or n <= 0:
            raise ShapeError(f"empty logical shape {self.logical_shape}")
        wpf = words_per_filter(n)
        if self.words.shape != (co, wpf):
            raise ShapeError(
                f"words shape {self.words.shape} != ({co}, {wpf}) for {self.logical_shape}"
            )
        if self.words.dtype != np.uint64:
            raise ShapeError("words must be uint64")
        if self.alphas is None:
            object.__setattr__(self, "alphas", np.ones(co, dtype=np.float32))
        if self.alphas.shape != (co,):
            raise ShapeError(f"alphas shape {self.alphas.shape} != ({co},)")
        if np.any(self.alphas < 0):
            raise ValueError("alphas must be non-negative")
        # zero any stray padding bits so whole-word popcounts stay exact
        tail = n % WORD_BITS
        if tail:
            mask = np.uint64((1 << tail) - 1)
            object.__setattr__(self, "words", self.words.copy())
            self.words[:, -1] &= mask
        self.words.setflags(write=False)

    @property
    def bits_per_filter(self) -> int:
        _, ci, kh, kw = self.logical_shape
        return ci * kh * kw

    def packed_nbytes(self) -> int:
        return self.words.nbytes


def words_per_filter(n_bits: int) -> int:
    return (n_bits + WORD_BITS - 1) // WORD_BITS


def check_dense(x: np.ndarray, ndim: int = 4) -> np.ndarray:
    """Validate a dense tensor: right rank, non-empty, finite."""
    x = np.asarray(x)
    if x.ndim != ndim:
        raise ShapeError(f"expected {ndim}-d tensor, got shape {x.shape}")
    if x.size == 0:
        raise ShapeError(f"empty tensor of shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("tensor contains NaN or Inf")
    return x


def pack_sign_rows(signs: np.ndarray) -> np.ndarray:
    """Pack a (rows, n) array of exact +-1 values into (rows, words) uint64.

    Bit j of each row is 1 where signs[row, j] == +1, LSB-first, little-endian
    words; padding bits are zero.
    """
    signs = np.asarray(signs)
    if signs.ndim != 2:
        raise ShapeError(f"expected 2-d sign rows, got {signs.shape}")
    if not np.all(np.abs(signs) == 1):
        raise ValueError("pack input must be exactly +1/-1")
    bits = (signs > 0).astype(np.uint8)
    by = np.packbits(bits, axis=1, bitorder="little")
    pad = (-by.shape[1]) % 8
    if pad:
        by = np.concatenate([by, np.zeros((by.shape[0], pad), np.uint8)], axis=1)
    return np.ascontiguousarray(by).view("<u8")


def unpack_sign_rows(words: np.ndarray, n: int) -> np.ndarray:
    """Inverse of pack_sign_rows: (rows, words) uint64 -> (rows, n) float32 +-1."""
    if words.ndim != 2:
        raise ShapeError(f"expected 2-d word rows, got {words.shape}")
    by = words.astype("<u8", copy=False).view(np.uint8).reshape(words.shape[0], -1)
    bits = np.unpackbits(by, axis=1, bitorder="little")[:, :n]
    return (bits.astype(np.float32) * 2.0 - 1.0)


def quantize_weights(w: np.ndarray, policy: QuantizationPolicy = QuantizationPolicy()) -> BitPlaneTensor:
    """Binarize a (co, ci, kh, kw) weight tensor.

    Bits are sign(w) with sign(0) = +1. With weight_scaling on, alpha[i] is the
    mean absolute value of filter i, the least-squares scale for sign weights.
    """
    w = check_dense(w)
    co = w.shape[0]
    flat = w.reshape(co, -1)
    signs = np.where(flat >= 0, 1.0, -1.0).astype(np.float32)
    if policy.weight_scaling:
        alphas = np.abs(flat).mean(axis=1).astype(np.float32)
    else:
        alphas = np.ones(co, dtype=np.float32)
    return BitPlaneTensor(tuple(w.shape), pack_sign_rows(signs), alphas)


def pack_bits(signs: np.ndarray) -> BitPlaneTensor:
    """Pack an exact +-1 tensor of shape (co, ci, kh, kw); alphas are all 1."""
    signs = check_dense(signs)
    co = signs.shape[0]
    return BitPlaneTensor(tuple(signs.shape), pack_sign_rows(signs.reshape(co, -1)))


def unpack_bits(b: BitPlaneTensor) -> np.ndarray:
    """Recover the +-1 float32 tensor (alpha-free)."""
    co = b.logical_shape[0]
    flat = unpack_sign_rows(b.words, b.bits_per_filter)
    return flat.reshape(b.logical_shape)


def xnor_dot(a_words: np.ndarray, b_words: np.ndarray, n: int) -> int:
    """Dot product of two +-1 vectors of logical length n from packed words.

    Equals n - 2*popcount(a XOR b); padding bits must match (zeroed padding
    from pack_sign_rows cancels in the XOR).
    """
    a_words = np.atleast_1d(np.asarray(a_words, dtype=np.uint64))
    b_words = np.atleast_1d(np.asarray(b_words, dtype=np.uint64))
    if a_words.shape != b_words.shape:
        raise ShapeError(f"word counts differ: {a_words.shape} vs {b_words.shape}")
    if words_per_filter(n) != a_words.size:
        raise ShapeError(f"n={n} needs {words_per_filter(n)} words, got {a_words.size}")
    return int(n) - 2 * int(popcount_words(a_words ^ b_words).sum())
