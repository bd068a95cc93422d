"""Spatial operations on (batch, channel, height, width) tensors.

All of these work on the trailing two axes. Toy 2-D points have no spatial axes;
callers check :func:`has_spatial_axes` before shifting or resizing.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ContractError, Tensor, _make, as_tensor


def has_spatial_axes(shape: Sequence[int]) -> bool:
    """Image batches are rank 4; anything lower is treated as a flat feature vector."""
    return len(shape) >= 4


# ---------------------------------------------------------------------------
# circular shift


def _roll_index(extent: int, offsets: np.ndarray) -> np.ndarray:
    # out[i] = in[(i - offset) mod extent]
    return (np.arange(extent)[None, :] - offsets[:, None]) % extent


def _shift_array(x: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    n_axes = offsets.shape[1]
    out = x
    for k in range(n_axes):
        axis = x.ndim - n_axes + k
        idx = _roll_index(x.shape[axis], offsets[:, k])
        shape = [1] * x.ndim
        shape[0] = x.shape[0]
        shape[axis] = x.shape[axis]
        out = np.take_along_axis(out, idx.reshape(shape), axis=axis)
    return out


def circular_shift(x, offsets) -> Tensor:
    """Roll the trailing ``k`` axes, where ``k`` is the number of offsets.

    ``offsets`` is either a length-``k`` sequence applied to the whole batch or a
    ``(batch, k)`` array of per-sample offsets. Element ``i`` moves to
    ``(i + offset) mod extent``; the adjoint rolls by ``-offset``.
    """
    x = as_tensor(x)
    off = np.asarray(offsets, dtype=np.int64)
    if off.ndim == 1:
        off = np.broadcast_to(off, (x.shape[0], off.size))
    if off.shape[1] == 0:
        return x
    if off.shape[0] != x.shape[0] or off.shape[1] > x.ndim - 1:
        raise ContractError(f"offsets {off.shape} do not fit tensor {x.shape}")
    return _make(
        _shift_array(x.data, off),
        (x,),
        lambda g: (_shift_array(g, -off),),
        "circular_shift",
    )


# ---------------------------------------------------------------------------
# bilinear resize and zero padding


def _interp_matrix(src: int, dst: int) -> np.ndarray:
    """Row ``i`` holds the corner-aligned bilinear weights of output ``i`` over the source grid."""
    if src < 1 or dst < 1:
        raise ContractError("extents must be >= 1")
    m = np.zeros((dst, src))
    if dst == 1 or src == 1:
        pos = np.zeros(dst)
    else:
        pos = np.arange(dst) * ((src - 1) / (dst - 1))
    lo = np.minimum(np.floor(pos).astype(int), src - 1)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    rows = np.arange(dst)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_bilinear(x, size: Tuple[int, int]) -> Tensor:
    x = as_tensor(x)
    h, w = x.shape[-2:]
    ry = _interp_matrix(h, int(size[0]))
    rx = _interp_matrix(w, int(size[1]))
    out = ry @ x.data @ rx.T
    return _make(out, (x,), lambda g: (ry.T @ g @ rx,), "resize_bilinear")


def pad_zero(x, left: int = 0, right: int = 0, top: int = 0, bottom: int = 0) -> Tensor:
    x = as_tensor(x)
    if min(left, right, top, bottom) < 0:
        raise ContractError("pads must be non-negative")
    widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    h, w = x.shape[-2:]

    def back(g):
        return (g[..., top : top + h, left : left + w],)

    return _make(np.pad(x.data, widths), (x,), back, "pad_zero")


# ---------------------------------------------------------------------------
# smoothing kernels


def gaussian_kernel(size: int = 7, sigma: Optional[float] = None) -> np.ndarray:
    """Normalized isotropic Gaussian on a ``size x size`` grid centered on the middle cell.

    The default ``sigma = (size - 1) / 6`` puts the kernel edge at three standard
    deviations.
    """
    if int(size) != size or size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {size}")
    size = int(size)
    if sigma is None:
        sigma = (size - 1) / 6.0 if size > 1 else 1.0
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = np.arange(size) - size // 2
    g1 = np.exp(-0.5 * (r / sigma) ** 2)
    k = np.outer(g1, g1)
    return k / k.sum()


def _replicate_pad_adjoint(gp: np.ndarray, p: int) -> np.ndarray:
    # fold the replicated border back onto the edge rows/columns
    if p == 0:
        return gp
    g = gp.copy()
    g[..., p, :] += g[..., :p, :].sum(axis=-2)
    g[..., -p - 1, :] += g[..., -p:, :].sum(axis=-2)
    g = g[..., p:-p, :]
    g[..., :, p] += g[..., :, :p].sum(axis=-1)
    g[..., :, -p - 1] += g[..., :, -p:].sum(axis=-1)
    return g[..., :, p:-p]


def _correlate_same(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    p = kernel.shape[0] // 2
    widths = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    xp = np.pad(x, widths, mode="edge")
    windows = sliding_window_view(xp, kernel.shape, axis=(-2, -1))
    return np.tensordot(windows, kernel, axes=([-2, -1], [0, 1]))


def conv_same(g, kernel) -> Tensor:
    """Depthwise 2-D correlation with edge-replicate padding; output shape equals input shape."""
    g = as_tensor(g)
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
        raise ContractError("kernel must be square and odd-sized")
    if k.shape[0] > min(g.shape[-2:]):
        raise ContractError(f"kernel {k.shape} larger than spatial extent {g.shape[-2:]}")
    if k.shape[0] == 1:
        return _make(g.data * k[0, 0], (g,), lambda gr: (gr * k[0, 0],), "conv_same")
    p = k.shape[0] // 2
    h, w = g.shape[-2:]

    def back(gr):
        gp = np.zeros(gr.shape[:-2] + (h + 2 * p, w + 2 * p))
        for i in range(k.shape[0]):
            for j in range(k.shape[1]):
                gp[..., i : i + h, j : j + w] += k[i, j] * gr
        return (_replicate_pad_adjoint(gp, p),)

    return _make(_correlate_same(g.data, k), (g,), back, "conv_same")


# ---------------------------------------------------------------------------
# layers for the small convolutional classifier


def conv2d(x, weight, bias=None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation: x (B, C, H, W), weight (O, C, kh, kw) -> (B, O, H', W')."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    b_, c, h, w = x.shape
    o, c2, kh, kw = weight.shape
    if c != c2:
        raise ContractError(f"input has {c} channels, weight expects {c2}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B, C, H', W', kh, kw
    ho, wo = windows.shape[2:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b_ * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(b_, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def back(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gcols = (gmat @ wmat).reshape(b_, ho, wo, c, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + ho, j : j + wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + w]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, back, "conv2d")


def max_pool2x2(x) -> Tensor:
    x = as_tensor(x)
    b_, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ContractError("max_pool2x2 needs even spatial extents")
    blocks = x.data.reshape(b_, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b_, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(b_, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(b_, c, h, w),)

    return _make(out, (x,), back, "max_pool2x2")
