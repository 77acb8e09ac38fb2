"""Network operations: convolution, pooling, batch norm, activations.

Convolutions are lowered with im2col. The dense path multiplies floats and is
the ground-truth oracle; the binary path packs the lowered +-1 patches and the
weight bits into 64-bit words and computes each dot product as
n - 2*popcount(xor), scaled per output channel by alpha. Padding on the binary
path is -1 (a 0 bit); the dense path uses 0 for real layers and -1 when
mirroring the binary path.

Each operation has a backward companion used by the manual training engine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bintensor import (
    BitPlaneTensor,
    ShapeError,
    check_dense,
    pack_sign_rows,
    popcount_words,
)


@dataclass(frozen=True)
class ConvParams:
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    in_channels: int = 0
    out_channels: int = 0

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        oh = (h + 2 * ph - kh) // sh + 1
        ow = (w + 2 * pw - kw) // sw + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"kernel {self.kernel} does not fit input {h}x{w}")
        return oh, ow


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def identity(cls, channels: int) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels, np.float32),
            beta=np.zeros(channels, np.float32),
            running_mean=np.zeros(channels, np.float32),
            running_var=np.ones(channels, np.float32),
        )

    def validate(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")


# ---------------------------------------------------------------------------
# im2col lowering

def im2col(x: np.ndarray, p: ConvParams, pad_value: float = 0.0) -> np.ndarray:
    """Lower (n, c, h, w) to patch rows (n*oh*ow, c*kh*kw)."""
    x = check_dense(x)
    n, c, h, w = x.shape
    kh, kw = p.kernel
    sh, sw = p.stride
    ph, pw = p.padding
    oh, ow = p.out_size(h, w)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=pad_value)
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)


def col2im(cols: np.ndarray, x_shape: tuple[int, int, int, int], p: ConvParams) -> np.ndarray:
    """Adjoint of im2col: scatter patch-row gradients back onto the input."""
    n, c, h, w = x_shape
    kh, kw = p.kernel
    sh, sw = p.stride
    ph, pw = p.padding
    oh, ow = p.out_size(h, w)
    cols = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            img[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += cols[:, :, i, j]
    return img[:, :, ph : ph + h, pw : pw + w]


# ---------------------------------------------------------------------------
# convolution

def conv2d_dense(x: np.ndarray, w: np.ndarray, p: ConvParams, pad_value: float = 0.0) -> np.ndarray:
    """Float cross-correlation; the oracle for the binary path."""
    x = check_dense(x)
    w = check_dense(w)
    n, c, h, w_in = x.shape
    co, ci, kh, kw = w.shape
    if (kh, kw) != tuple(p.kernel) or c != ci:
        raise ShapeError(f"weights {w.shape} inconsistent with params {p} and input {x.shape}")
    oh, ow = p.out_size(h, w_in)
    cols = im2col(x, p, pad_value)
    out = cols @ w.reshape(co, -1).T
    return out.reshape(n, oh, ow, co).transpose(0, 3, 1, 2)


def conv2d_dense_backward(
    x: np.ndarray, w: np.ndarray, p: ConvParams, gy: np.ndarray, pad_value: float = 0.0
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients (gx, gw) of conv2d_dense.

    Note: gx is exact only where the padding does not depend on x, which holds
    for both the 0-padded and the constant -1-padded conventions.
    """
    n, c, h, w_in = x.shape
    co = w.shape[0]
    g2 = gy.transpose(0, 2, 3, 1).reshape(-1, co)
    cols = im2col(x, p, pad_value)
    gw = (g2.T @ cols).reshape(w.shape)
    gcols = g2 @ w.reshape(co, -1)
    gx = col2im(gcols, x.shape, p)
    return gx, gw


def gemm_popcount(packed_a: np.ndarray, packed_b: np.ndarray, n: int) -> np.ndarray:
    """Integer matrix of +-1 dot products from packed rows.

    packed_a: (m, W) uint64, packed_b: (p, W) uint64, both LSB-first with
    zeroed padding. Result[i, j] = n - 2*popcount(a_i XOR b_j), an int32
    matrix equal to the dense integer product of the unpacked operands.
    """
    if packed_a.ndim != 2 or packed_b.ndim != 2 or packed_a.shape[1] != packed_b.shape[1]:
        raise ShapeError(f"packed shapes {packed_a.shape} / {packed_b.shape} do not align")
    if n > 2**31:
        raise ShapeError("logical length exceeds int32 accumulator range")
    m = packed_a.shape[0]
    out = np.empty((m, packed_b.shape[0]), np.int32)
    # block rows so the broadcast xor stays within ~32 MB
    block = max(1, (1 << 22) // max(1, packed_b.size))
    for i in range(0, m, block):
        x = packed_a[i : i + block, None, :] ^ packed_b[None, :, :]
        out[i : i + block] = n - 2 * popcount_words(x).sum(axis=2, dtype=np.int64)
    return out


def conv2d_binary(x_signs: np.ndarray, w: BitPlaneTensor, p: ConvParams) -> np.ndarray:
    """XNOR-popcount convolution of a +-1 activation tensor.

    Padding pixels count as -1. The integer accumulation equals the dense
    oracle on the unpacked +-1 tensors exactly; alpha scales each output
    channel in a single multiply.
    """
    x_signs = check_dense(x_signs)
    if not np.all(np.abs(x_signs) == 1):
        raise ValueError("binary conv input must be exactly +1/-1")
    co, ci, kh, kw = w.logical_shape
    n, c, h, w_in = x_signs.shape
    if (kh, kw) != tuple(p.kernel) or c != ci:
        raise ShapeError(f"weights {w.logical_shape} inconsistent with input {x_signs.shape}")
    oh, ow = p.out_size(h, w_in)
    cols = im2col(x_signs, p, pad_value=-1.0)
    packed_cols = pack_sign_rows(cols)
    acc = gemm_popcount(packed_cols, w.words, w.bits_per_filter)
    out = acc.astype(np.float32) * w.alphas[None, :]
    return out.reshape(n, oh, ow, co).transpose(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# pooling

def _pool_windows(x: np.ndarray, size: int = 2, stride: int = 2) -> np.ndarray:
    n, c, h, w = x.shape
    if size <= 0 or stride <= 0:
        raise ShapeError("pool window/stride must be positive")
    oh, ow = h // stride, w // stride
    if oh < 1 or ow < 1:
        raise ShapeError(f"input {h}x{w} too small for {size}x{size} pool")
    x = x[:, :, : oh * stride, : ow * stride]
    return x.reshape(n, c, oh, stride, ow, stride)


def maxpool2d(x: np.ndarray) -> np.ndarray:
    """2x2 stride-2 max pool (odd trailing rows/cols are dropped)."""
    return _pool_windows(check_dense(x)).max(axis=(3, 5))


def maxpool2d_backward(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    win = _pool_windows(x)
    n, c, oh, _, ow, _ = win.shape
    flat = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    arg = flat.argmax(axis=-1)
    mask = np.zeros_like(flat)
    np.put_along_axis(mask, arg[..., None], 1.0, axis=-1)
    g = mask * gy[..., None]
    g = g.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    gx = np.zeros_like(x)
    gx[:, :, : oh * 2, : ow * 2] = g.reshape(n, c, oh * 2, ow * 2)
    return gx


def avgpool2d(x: np.ndarray) -> np.ndarray:
    """2x2 stride-2 average pool."""
    return _pool_windows(check_dense(x)).mean(axis=(3, 5))


def avgpool2d_backward(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    oh, ow = gy.shape[2], gy.shape[3]
    gx = np.zeros_like(x)
    gx[:, :, : oh * 2, : ow * 2] = np.repeat(np.repeat(gy, 2, axis=2), 2, axis=3) * 0.25
    return gx


# ---------------------------------------------------------------------------
# batch norm

def batchnorm(
    x: np.ndarray, bn: BatchNormParams, mode: str = "eval"
) -> tuple[np.ndarray, dict | None]:
    """Per-channel normalization.

    train mode uses batch statistics and updates the running averages in
    place (momentum 0.1); eval mode uses the stored running statistics.
    Returns (y, cache) where cache feeds batchnorm_backward in train mode.
    """
    x = check_dense(x)
    bn.validate()
    g = bn.gamma[None, :, None, None]
    b = bn.beta[None, :, None, None]
    if mode == "eval":
        inv = 1.0 / np.sqrt(bn.running_var + bn.epsilon)
        y = g * ((x - bn.running_mean[None, :, None, None]) * inv[None, :, None, None]) + b
        return y.astype(x.dtype), None
    if mode != "train":
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    axes = (0, 2, 3)
    mu = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv = 1.0 / np.sqrt(var + bn.epsilon)
    xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
    y = g * xhat + b
    m = bn.momentum
    bn.running_mean[:] = (1 - m) * bn.running_mean + m * mu
    bn.running_var[:] = (1 - m) * bn.running_var + m * var
    cache = {"xhat": xhat, "inv": inv, "gamma": bn.gamma}
    return y.astype(x.dtype), cache


def batchnorm_backward(gy: np.ndarray, cache: dict) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (gx, dgamma, dbeta) for train-mode batchnorm."""
    xhat, inv, gamma = cache["xhat"], cache["inv"], cache["gamma"]
    axes = (0, 2, 3)
    m = gy.shape[0] * gy.shape[2] * gy.shape[3]
    dbeta = gy.sum(axis=axes)
    dgamma = (gy * xhat).sum(axis=axes)
    gxhat = gy * gamma[None, :, None, None]
    sum_gxhat_xhat = (gamma * dgamma)[None, :, None, None]
    gx = (
        inv[None, :, None, None]
        / m
        * (m * gxhat - gxhat.sum(axis=axes)[None, :, None, None] - xhat * sum_gxhat_xhat)
    )
    return gx.astype(gy.dtype), dgamma, dbeta


def batchnorm_eval_backward(gy: np.ndarray, bn: BatchNormParams) -> np.ndarray:
    inv = 1.0 / np.sqrt(bn.running_var + bn.epsilon)
    return gy * (bn.gamma * inv)[None, :, None, None]


# ---------------------------------------------------------------------------
# activations and glue

def sign_act(x: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) = +1."""
    return np.where(x >= 0, np.float32(1.0), np.float32(-1.0))


def sign_act_backward(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Straight-through estimator: pass the gradient where |x| <= 1."""
    return gy * (np.abs(x) <= 1.0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    return gy * (x > 0)


def upsample_nearest(x: np.ndarray, factor: int = 2) -> np.ndarray:
    return np.repeat(np.repeat(check_dense(x), factor, axis=2), factor, axis=3)


def upsample_nearest_backward(gy: np.ndarray, factor: int = 2) -> np.ndarray:
    n, c, h, w = gy.shape
    return gy.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))


def concat_channels(xs: list[np.ndarray]) -> np.ndarray:
    if not xs:
        raise ShapeError("concat of zero tensors")
    base = xs[0].shape
    for x in xs[1:]:
        if x.shape[0] != base[0] or x.shape[2:] != base[2:]:
            raise ShapeError(f"concat shapes disagree: {base} vs {x.shape}")
    return np.concatenate(xs, axis=1)


def add(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if x.shape != y.shape:
        raise ShapeError(f"add shapes disagree: {x.shape} vs {y.shape}")
    return x + y
