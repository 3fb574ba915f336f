"""Orthonormal separable 3-D discrete wavelet analysis and synthesis.

One decomposition level halves every spatial axis and yields eight
sub-bands. Band order is fixed by the low/high bit pattern over the axes
``(D, H, W)`` with D as the most significant bit:

    index 0 LLL, 1 LLH, 2 LHL, 3 LHH, 4 HLL, 5 HLH, 6 HHL, 7 HHH

so a stacked sub-band tensor carries channels ``[N, 8C, D/2, H/2, W/2]``
with the LLL block first. Checkpoint portability depends on this ordering.

The default family is Haar (taps +-1/sqrt(2)); Daubechies-2 with periodic
extension is available behind the same interface. Both are orthonormal, so
synthesis is the exact inverse *and* the exact adjoint of analysis, which
is what the backward passes use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, _coerce, _make, concat, narrow
from .errors import ContractError

_SQRT3 = math.sqrt(3.0)
_FAMILIES = {
    "haar": np.array([1.0, 1.0]) / math.sqrt(2.0),
    "db2": np.array([1.0 + _SQRT3, 3.0 + _SQRT3, 3.0 - _SQRT3, 1.0 - _SQRT3])
    / (4.0 * math.sqrt(2.0)),
}


def filter_pair(family: str):
    """Lowpass/highpass analysis taps for a named orthonormal family."""
    try:
        h = _FAMILIES[family]
    except KeyError:
        raise ContractError(f"unknown wavelet family '{family}'; have {sorted(_FAMILIES)}")
    g = (h[::-1] * np.power(-1.0, np.arange(len(h))))
    return h, g


def _sl(ndim, axis, s):
    idx = [slice(None)] * ndim
    idx[axis] = s
    return tuple(idx)


def _analysis_axis(x, axis, h, g):
    n = x.shape[axis]
    taps = len(h)
    h = h.astype(x.dtype)
    g = g.astype(x.dtype)
    if taps == 2:
        x0 = x[_sl(x.ndim, axis, slice(0, None, 2))]
        x1 = x[_sl(x.ndim, axis, slice(1, None, 2))]
        return h[0] * (x0 + x1), g[0] * x0 + g[1] * x1
    ext = np.concatenate([x, x[_sl(x.ndim, axis, slice(0, taps - 2))]], axis=axis)
    lo = np.zeros(x[_sl(x.ndim, axis, slice(0, n // 2))].shape, dtype=x.dtype)
    hi = np.zeros_like(lo)
    for k in range(taps):
        seg = ext[_sl(x.ndim, axis, slice(k, k + n - 1, 2))]
        lo += h[k] * seg
        hi += g[k] * seg
    return lo, hi


def _synthesis_axis(lo, hi, axis, h, g):
    n = 2 * lo.shape[axis]
    taps = len(h)
    h = h.astype(lo.dtype)
    g = g.astype(lo.dtype)
    if taps == 2:
        shape = list(lo.shape)
        shape[axis] = n
        out = np.empty(shape, dtype=lo.dtype)
        out[_sl(out.ndim, axis, slice(0, None, 2))] = h[0] * lo + g[0] * hi
        out[_sl(out.ndim, axis, slice(1, None, 2))] = h[1] * lo + g[1] * hi
        return out
    shape = list(lo.shape)
    shape[axis] = n + taps - 2
    ext = np.zeros(shape, dtype=lo.dtype)
    for k in range(taps):
        ext[_sl(ext.ndim, axis, slice(k, k + n - 1, 2))] += h[k] * lo + g[k] * hi
    out = ext[_sl(ext.ndim, axis, slice(0, n))].copy()
    wrap = ext[_sl(ext.ndim, axis, slice(n, None))]
    out[_sl(out.ndim, axis, slice(0, taps - 2))] += wrap
    return out


def _dwt3_raw(x, h, g):
    """Volume [N,C,D,H,W] -> stacked bands [N,8C,D/2,H/2,W/2]."""
    parts = [x]
    for axis in (2, 3, 4):
        nxt = []
        for p in parts:
            lo, hi = _analysis_axis(p, axis, h, g)
            nxt.extend((lo, hi))
        parts = nxt
    # parts is already ordered by bit code (D msb .. W lsb)
    return np.concatenate(parts, axis=1)


def _idwt3_raw(b, h, g):
    c8 = b.shape[1]
    parts = [b[:, i * (c8 // 8):(i + 1) * (c8 // 8)] for i in range(8)]
    for axis in (4, 3, 2):
        nxt = []
        for lo, hi in zip(parts[0::2], parts[1::2]):
            nxt.append(_synthesis_axis(lo, hi, axis, h, g))
        parts = nxt
    return parts[0]


def wavelet_analysis(x, family="haar") -> Tensor:
    """Differentiable single-level analysis producing stacked sub-bands."""
    x = _coerce(x)
    if x.ndim != 5:
        raise ContractError(f"expected [N,C,D,H,W], got ndim {x.ndim}")
    for name, ext in zip("DHW", x.shape[2:]):
        if ext % 2 != 0:
            raise ContractError(
                f"axis {name} has odd extent {ext}; pad to even before the transform"
            )
    h, g = filter_pair(family)
    out = _dwt3_raw(x.data, h, g)
    # orthonormal: the adjoint of analysis is synthesis
    return _make(out, (x,), lambda gr: (_idwt3_raw(gr, h, g),), "dwt3")


def wavelet_synthesis(b, family="haar") -> Tensor:
    """Differentiable single-level synthesis, exact inverse of analysis."""
    b = _coerce(b)
    if b.ndim != 5:
        raise ContractError(f"expected stacked bands [N,8C,d,h,w], got ndim {b.ndim}")
    if b.shape[1] % 8 != 0:
        raise ContractError(f"stacked band channels {b.shape[1]} not divisible by 8")
    h, g = filter_pair(family)
    out = _idwt3_raw(b.data, h, g)
    return _make(out, (b,), lambda gr: (_dwt3_raw(gr, h, g),), "idwt3")


@dataclass
class SubBands:
    """One analysis level: low band ``lll`` [N,C,...] and the seven detail
    bands channel-concatenated as ``detail`` [N,7C,...] in fixed order
    LLH, LHL, LHH, HLL, HLH, HHL, HHH."""

    lll: Tensor
    detail: Tensor

    def stacked(self) -> Tensor:
        return concat([self.lll, self.detail], axis=1)


def dwt3(x, family="haar") -> SubBands:
    stacked = wavelet_analysis(x, family)
    c = stacked.shape[1] // 8
    return SubBands(lll=narrow(stacked, 1, 0, c), detail=narrow(stacked, 1, c, 7 * c))


def idwt3(bands: SubBands, family="haar") -> Tensor:
    c = bands.lll.shape[1]
    if bands.detail.shape[1] != 7 * c:
        raise ContractError(
            f"detail channels {bands.detail.shape[1]} != 7x low-band channels {c}"
        )
    if bands.lll.shape[2:] != bands.detail.shape[2:]:
        raise ContractError("low and detail bands disagree on spatial extents")
    return wavelet_synthesis(bands.stacked(), family)
