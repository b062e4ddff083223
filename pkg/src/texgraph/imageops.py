"""Differentiable operations on H x W x C feature maps."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, _accum, _make, reduce

__all__ = [
    "conv_out_extent",
    "pad2d",
    "crop2d",
    "conv2d",
    "conv1x1",
    "add_channel_bias",
    "resize_nearest",
    "global_avg_pool",
]


def conv_out_extent(extent: int, k: int, stride: int, pad: int, dilation: int) -> int:
    """Closed-form output extent of a strided dilated convolution."""
    return (extent + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _check_map(x: Tensor, opname: str) -> None:
    if x.ndim != 3:
        raise DimensionError(f"{opname}: expected an H x W x C map, got shape {x.shape}")


def pad2d(x: Tensor, pad: int, mode: str = "zero") -> Tensor:
    """Pad the two spatial axes of a feature map on all four sides."""
    _check_map(x, "pad2d")
    if pad < 0:
        raise ContractError(f"pad2d: negative pad {pad}")
    if mode not in ("zero", "replicate"):
        raise ContractError(f"pad2d: unknown mode {mode!r}")
    if pad == 0:
        return x
    h, w, _ = x.shape
    if mode == "zero":
        out_data = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))

        def bw(g):
            _accum(x, np.ascontiguousarray(g[pad:-pad, pad:-pad]))

    else:
        ri = np.clip(np.arange(-pad, h + pad), 0, h - 1)
        cj = np.clip(np.arange(-pad, w + pad), 0, w - 1)
        out_data = x.data[ri][:, cj]

        def bw(g):
            rows = np.zeros((h, w + 2 * pad, g.shape[2]))
            np.add.at(rows, ri, g)
            acc = np.zeros((w, h, g.shape[2]))
            np.add.at(acc, cj, rows.transpose(1, 0, 2))
            _accum(x, np.ascontiguousarray(acc.transpose(1, 0, 2)))

    return _make(out_data, (x,), bw)


def crop2d(x: Tensor, r0: int, c0: int, h: int, w: int) -> Tensor:
    """Spatial window [r0:r0+h, c0:c0+w] of a feature map."""
    _check_map(x, "crop2d")
    hh, ww, _ = x.shape
    if not (0 <= r0 and r0 + h <= hh and 0 <= c0 and c0 + w <= ww and h > 0 and w > 0):
        raise ContractError(f"crop2d: window ({r0},{c0},{h},{w}) outside map {x.shape}")

    def bw(g):
        acc = np.zeros_like(x.data)
        acc[r0 : r0 + h, c0 : c0 + w] = g
        _accum(x, acc)

    return _make(np.ascontiguousarray(x.data[r0 : r0 + h, c0 : c0 + w]), (x,), bw)


@lru_cache(maxsize=256)
def _conv_indices(hp: int, wp: int, k: int, stride: int, dilation: int):
    h_out = conv_out_extent(hp, k, stride, 0, dilation)
    w_out = conv_out_extent(wp, k, stride, 0, dilation)
    rows = np.arange(h_out)[:, None] * stride + np.arange(k)[None, :] * dilation
    cols = np.arange(w_out)[:, None] * stride + np.arange(k)[None, :] * dilation
    # broadcastable index grids over (h_out, w_out, k, k)
    return rows[:, None, :, None], cols[None, :, None, :], h_out, w_out


def conv2d(
    x: Tensor,
    w: Tensor,
    stride: int = 1,
    pad: int = 0,
    dilation: int = 1,
    pad_mode: str = "zero",
) -> Tensor:
    """2-D convolution of an H x W x Cin map with a k x k x Cin x Cout kernel."""
    _check_map(x, "conv2d")
    if w.ndim != 4 or w.shape[0] != w.shape[1]:
        raise DimensionError(f"conv2d: kernel must be k x k x Cin x Cout, got {w.shape}")
    k = w.shape[0]
    if k < 1 or stride < 1 or dilation < 1:
        raise ContractError(f"conv2d: k={k}, stride={stride}, dilation={dilation} must all be >= 1")
    if x.shape[2] != w.shape[2]:
        raise DimensionError(f"conv2d: input channels {x.shape[2]} != kernel channels {w.shape[2]}")
    h_out = conv_out_extent(x.shape[0], k, stride, pad, dilation)
    w_out = conv_out_extent(x.shape[1], k, stride, pad, dilation)
    if h_out < 1 or w_out < 1:
        raise DimensionError(
            f"conv2d: output extent {h_out}x{w_out} < 1 for input {x.shape[:2]}, "
            f"k={k}, stride={stride}, pad={pad}, dilation={dilation}"
        )
    xp = pad2d(x, pad, pad_mode)

    cin, cout = w.shape[2], w.shape[3]
    rows, cols, ho, wo = _conv_indices(xp.shape[0], xp.shape[1], k, stride, dilation)
    cols_mat = xp.data[rows, cols].reshape(ho * wo, k * k * cin)
    w_mat = w.data.reshape(k * k * cin, cout)
    out_data = (cols_mat @ w_mat).reshape(ho, wo, cout)

    def bw(g):
        g_mat = g.reshape(ho * wo, cout)
        if w.requires_grad:
            _accum(w, (cols_mat.T @ g_mat).reshape(w.shape))
        if xp.requires_grad:
            d_cols = (g_mat @ w_mat.T).reshape(ho, wo, k, k, cin)
            acc = np.zeros_like(xp.data)
            np.add.at(acc, (rows, cols), d_cols)
            _accum(xp, acc)

    return _make(out_data, (xp, w), bw)


def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Pointwise channel mix: H x W x Cin -> H x W x Cout."""
    _check_map(x, "conv1x1")
    if w.ndim != 2:
        raise DimensionError(f"conv1x1: weight must be Cin x Cout, got {w.shape}")
    if x.shape[2] != w.shape[0]:
        raise DimensionError(f"conv1x1: input channels {x.shape[2]} != weight rows {w.shape[0]}")
    h, ww, _ = x.shape
    from .tensor import matmul, reshape  # local import to avoid cycle at module load

    out = reshape(matmul(reshape(x, (h * ww, x.shape[2])), w), (h, ww, w.shape[1]))
    if b is not None:
        out = add_channel_bias(out, b)
    return out


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias vector to a feature map."""
    _check_map(x, "add_channel_bias")
    if b.ndim != 1 or b.shape[0] != x.shape[2]:
        raise DimensionError(f"add_channel_bias: bias {b.shape} does not match channels {x.shape}")

    def bw(g):
        _accum(x, g)
        _accum(b, np.sum(g, axis=(0, 1)))

    return _make(x.data + b.data, (x, b), bw)


def resize_nearest(x: Tensor, h2: int, w2: int) -> Tensor:
    """Nearest-neighbour resize with floor coordinate mapping."""
    _check_map(x, "resize_nearest")
    if h2 < 1 or w2 < 1:
        raise ContractError(f"resize_nearest: target extents {h2}x{w2} must be >= 1")
    h, w, _ = x.shape
    if (h, w) == (h2, w2):
        return x
    ii = (np.arange(h2) * h) // h2
    jj = (np.arange(w2) * w) // w2

    def bw(g):
        acc = np.zeros_like(x.data)
        np.add.at(acc, (ii[:, None], jj[None, :]), g)
        _accum(x, acc)

    return _make(np.ascontiguousarray(x.data[ii[:, None], jj[None, :]]), (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: H x W x C -> C."""
    _check_map(x, "global_avg_pool")
    return reduce(x, (0, 1), "mean")
