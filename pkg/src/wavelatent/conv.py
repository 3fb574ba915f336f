"""Grouped 3-D convolution as a differentiable primitive.

Cross-correlation semantics over volumes laid out ``[N, C, D, H, W]``.
The general path lowers to an im2col matrix and a BLAS matmul per group;
1x1x1 kernels at unit stride skip the window extraction entirely. The
backward pass recomputes the column matrix from the saved padded input
instead of retaining it, trading a copy for a 27x smaller activation
footprint.
"""

from __future__ import annotations

from itertools import product

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, _coerce, _make
from .errors import ContractError


def _check_args(x, w, groups, stride, padding):
    if x.ndim != 5:
        raise ContractError(f"conv3d input must be [N,C,D,H,W], got ndim {x.ndim}")
    if w.ndim != 5:
        raise ContractError(f"conv3d weight must be [F,C/g,k,k,k], got ndim {w.ndim}")
    n, c, d, h, wd = x.shape
    f, cg, k1, k2, k3 = w.shape
    if not (k1 == k2 == k3):
        raise ContractError(f"conv3d kernel must be cubic, got {(k1, k2, k3)}")
    if k1 % 2 != 1:
        raise ContractError(f"conv3d kernel extent must be odd, got {k1}")
    if c % groups != 0:
        raise ContractError(f"input channels {c} not divisible by groups {groups}")
    if f % groups != 0:
        raise ContractError(f"output channels {f} not divisible by groups {groups}")
    if cg != c // groups:
        raise ContractError(
            f"weight expects {cg} channels per group, input provides {c // groups}"
        )
    for name, ext in zip("DHW", (d, h, wd)):
        if (ext + 2 * padding - k1) // stride + 1 < 1:
            raise ContractError(
                f"conv3d output extent along {name} would be empty "
                f"(input {ext}, kernel {k1}, stride {stride}, padding {padding})"
            )


def _out_extent(ext, k, stride, padding):
    return (ext + 2 * padding - k) // stride + 1


def _columns(xp, k, stride, out_sp):
    """im2col: padded volume -> [N*P, C*k^3] matrix, P = prod(out spatial)."""
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]
    n, c = xp.shape[:2]
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7)
    return cols.reshape(n * out_sp[0] * out_sp[1] * out_sp[2], c * k ** 3)


def conv3d(x, w, groups=1, stride=1, padding=0) -> Tensor:
    """Convolve ``x`` [N,C,D,H,W] with ``w`` [F,C/g,k,k,k].

    Output spatial extents follow floor((ext + 2*padding - k)/stride) + 1.
    Differentiable with respect to both the input and the weight.
    """
    x, w = _coerce(x), _coerce(w)
    _check_args(x, w, int(groups), int(stride), int(padding))
    groups, stride, padding = int(groups), int(stride), int(padding)
    n, c, d, h, wd = x.shape
    f = w.shape[0]
    k = w.shape[2]
    cg, fg = c // groups, f // groups

    if k == 1 and stride == 1 and padding == 0:
        return _pointwise(x, w, groups)

    out_sp = tuple(_out_extent(e, k, stride, padding) for e in (d, h, wd))
    p_total = out_sp[0] * out_sp[1] * out_sp[2]
    pad_width = ((0, 0), (0, 0)) + ((padding, padding),) * 3
    xp = np.pad(x.data, pad_width) if padding else x.data

    cols = _columns(xp, k, stride, out_sp)  # [N*P, C*k3]
    k3 = k ** 3
    wmat = w.data.reshape(groups, fg, cg * k3)
    if groups == 1:
        y = cols @ wmat[0].T
    else:
        colsg = cols.reshape(n * p_total, groups, cg * k3)
        y = np.empty((n * p_total, f), dtype=x.dtype)
        for gi in range(groups):
            y[:, gi * fg:(gi + 1) * fg] = colsg[:, gi, :] @ wmat[gi].T
    out = y.reshape(n, *out_sp, f).transpose(0, 4, 1, 2, 3)
    out = np.ascontiguousarray(out)

    def back(g):
        gy = g.transpose(0, 2, 3, 4, 1).reshape(n * p_total, f)
        cols_b = _columns(xp, k, stride, out_sp)
        gw = np.empty_like(w.data)
        gcols = np.empty((n * p_total, c * k3), dtype=x.dtype)
        if groups == 1:
            gw[:] = (gy.T @ cols_b).reshape(w.shape)
            gcols[:] = gy @ wmat[0]
        else:
            colsg_b = cols_b.reshape(n * p_total, groups, cg * k3)
            for gi in range(groups):
                gyg = gy[:, gi * fg:(gi + 1) * fg]
                gw[gi * fg:(gi + 1) * fg] = (gyg.T @ colsg_b[:, gi, :]).reshape(fg, cg, k, k, k)
                gcols[:, gi * cg * k3:(gi + 1) * cg * k3] = gyg @ wmat[gi]
        # fold columns back onto the padded grid (col2im)
        patch = gcols.reshape(n, *out_sp, c, k, k, k).transpose(0, 4, 1, 2, 3, 5, 6, 7)
        gxp = np.zeros_like(xp)
        do, ho, wo = out_sp
        for i, j, l in product(range(k), repeat=3):
            gxp[:, :, i:i + stride * do:stride,
                j:j + stride * ho:stride,
                l:l + stride * wo:stride] += patch[..., i, j, l]
        gx = gxp[:, :, padding:padding + d, padding:padding + h, padding:padding + wd] \
            if padding else gxp
        return gx, gw

    return _make(out, (x, w), back, "conv3d")


def _pointwise(x, w, groups) -> Tensor:
    """1x1x1 convolution: a channel-mixing matmul, no window extraction."""
    n, c, d, h, wd = x.shape
    f = w.shape[0]
    cg, fg = c // groups, f // groups
    xm = x.data.reshape(n, groups, cg, d * h * wd)
    wmat = w.data.reshape(groups, fg, cg)
    y = np.einsum("gfc,ngcp->ngfp", wmat, xm, optimize=True)
    out = np.ascontiguousarray(y.reshape(n, f, d, h, wd))

    def back(g):
        gm = g.reshape(n, groups, fg, d * h * wd)
        gw = np.einsum("ngfp,ngcp->gfc", gm, xm, optimize=True)
        gx = np.einsum("gfc,ngfp->ngcp", wmat, gm, optimize=True)
        return (
            np.ascontiguousarray(gx.reshape(x.shape)),
            gw.reshape(w.shape).astype(w.dtype, copy=False),
        )

    return _make(out, (x, w), back, "conv3d_1x1")
