"""Forward and backward kernels for the layer kinds the network uses.

All functions operate on NCHW arrays. Convolution is a cross-correlation
evaluated as one small matrix product per kernel tap, which keeps peak
memory at a single shifted copy of the input rather than a full im2col
buffer.
"""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError


def _pad_amount(ksize: int, padding: str) -> int:
    if padding == "same":
        return ksize // 2
    if padding == "valid":
        return 0
    raise ValueError(f"unknown padding {padding!r}")


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None,
                   padding: str = "same") -> np.ndarray:
    """Cross-correlate ``x`` (N, C_in, H, W) with ``weight`` (C_out, C_in, kH, kW)."""
    n, c_in, h, w = x.shape
    c_out, w_in, kh, kw = weight.shape
    if c_in != w_in:
        raise ShapeError(f"conv expects {w_in} input channels, got {c_in}")
    if kh != kw:
        raise ShapeError(f"square kernels only, got {kh}x{kw}")
    pad = _pad_amount(kh, padding)
    h_out, w_out = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"input {h}x{w} too small for {kh}x{kw} valid conv")

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.zeros((c_out, n, h_out, w_out), dtype=np.result_type(x, weight))
    for i in range(kh):
        for j in range(kw):
            window = xp[:, :, i:i + h_out, j:j + w_out]
            out += np.tensordot(weight[:, :, i, j], window, axes=([1], [1]))
    out = out.transpose(1, 0, 2, 3)
    if bias is not None:
        out += bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray,
                    has_bias: bool = True, padding: str = "same"):
    """Return ``(grad_x, grad_weight, grad_bias)`` for :func:`conv2d_forward`.

    ``grad_bias`` is ``None`` when the layer has no bias.
    """
    n, c_in, h, w = x.shape
    c_out, _, kh, kw = weight.shape
    pad = _pad_amount(kh, padding)
    h_out, w_out = grad_out.shape[2:]

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    grad_xp = np.zeros_like(xp)
    grad_w = np.empty_like(weight)
    for i in range(kh):
        for j in range(kw):
            window = xp[:, :, i:i + h_out, j:j + w_out]
            grad_w[:, :, i, j] = np.tensordot(grad_out, window, axes=([0, 2, 3], [0, 2, 3]))
            # (C_in, N, H, W) contribution back onto the shifted window
            back = np.tensordot(weight[:, :, i, j], grad_out, axes=([0], [1]))
            grad_xp[:, :, i:i + h_out, j:j + w_out] += back.transpose(1, 0, 2, 3)
    grad_x = grad_xp[:, :, pad:pad + h, pad:pad + w] if pad else grad_xp
    grad_b = grad_out.sum(axis=(0, 2, 3)) if has_bias else None
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly zero is taken as 0
    return grad_out * (x > 0)


def pixel_shuffle(x: np.ndarray, r: int) -> np.ndarray:
    """Rearrange (N, C*r*r, H, W) into (N, C, H*r, W*r).

    ``out[c, h*r + i, w*r + j] = in[c*r*r + i*r + j, h, w]``.
    """
    if r < 1:
        raise ValueError("upscale factor must be >= 1")
    n, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"{c} channels not divisible by r^2={r * r}")
    oc = c // (r * r)
    return (x.reshape(n, oc, r, r, h, w)
             .transpose(0, 1, 4, 2, 5, 3)
             .reshape(n, oc, h * r, w * r))


def pixel_unshuffle(x: np.ndarray, r: int) -> np.ndarray:
    """Exact inverse of :func:`pixel_shuffle`; also its backward pass."""
    n, c, hr, wr = x.shape
    if hr % r or wr % r:
        raise ShapeError(f"spatial size {hr}x{wr} not divisible by {r}")
    h, w = hr // r, wr // r
    return (x.reshape(n, c, h, r, w, r)
             .transpose(0, 1, 3, 5, 2, 4)
             .reshape(n, c * r * r, h, w))


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1)


def split_channels(grad: np.ndarray, first: int) -> tuple[np.ndarray, np.ndarray]:
    """Backward of :func:`concat_channels`: split the gradient at ``first``."""
    return grad[:, :first], grad[:, first:]
