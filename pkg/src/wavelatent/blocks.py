"""Residual building blocks: the wavelet residual module and its hosts.

The wavelet residual module (WRM) is purely linear -- three convolution
streams over the source signal, its detail bands, and a second-level
decomposition of its low band, recombined by inverse wavelet synthesis.
Nonlinearities live only in the enclosing block.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .nn import Conv3d, GroupNorm, Linear, Module
from .wavelet import SubBands, dwt3, idwt3


class WaveletResidual(Module):
    """Three-stream frequency-enhanced residual unit. Shape preserving.

    Requires spatial extents divisible by 4 (two decomposition levels).
    All convolutions are bias-free and grouped with G = gcd(C, 4).
    """

    def __init__(self, channels, family="haar", rng=None):
        super().__init__()
        self.channels = channels
        self.family = family
        g = math.gcd(channels, 4)
        self.primary_group = Conv3d(channels, channels, 3, groups=g, bias=False, rng=rng)
        self.primary_point = Conv3d(channels, channels, 1, bias=False, rng=rng)
        self.detail1 = Conv3d(7 * channels, 7 * channels, 3, groups=g, bias=False, rng=rng)
        self.low1 = Conv3d(channels, channels, 3, groups=g, bias=False, rng=rng)
        self.low2 = Conv3d(channels, channels, 3, groups=g, bias=False, rng=rng)
        self.detail2 = Conv3d(7 * channels, 7 * channels, 3, groups=g, bias=False, rng=rng)
        self.fuse = Conv3d(channels, channels, 1, bias=False, rng=rng)

    def __call__(self, x):
        for name, ext in zip("DHW", x.shape[2:]):
            if ext % 4 != 0:
                raise ContractError(
                    f"wavelet residual needs axis {name} divisible by 4, got {ext}"
                )
        primary = x + self.primary_point(self.primary_group(x))
        lvl1 = dwt3(x, self.family)
        sharp = self.detail1(lvl1.detail)
        smooth = self.low1(lvl1.lll)
        lvl2 = dwt3(lvl1.lll, self.family)
        inner = idwt3(SubBands(self.low2(lvl2.lll), self.detail2(lvl2.detail)), self.family)
        freq = idwt3(SubBands(smooth + inner, sharp), self.family)
        return self.fuse(primary + freq)


class ResBlock(Module):
    """Norm -> SiLU -> conv, then either a WRM or a second conv, plus skip.

    ``temb_dim`` enables an additive per-channel timestep shift after the
    first convolution. A unit 1x1x1 shortcut appears only when the channel
    count changes.
    """

    def __init__(self, cin, cout, temb_dim=None, use_wrm=True, family="haar", rng=None):
        super().__init__()
        self.use_wrm = use_wrm
        self.norm1 = GroupNorm(cin)
        self.conv1 = Conv3d(cin, cout, 3, rng=rng)
        if temb_dim is not None:
            self.temb_proj = Linear(temb_dim, cout, rng=rng)
        else:
            self.temb_proj = None
        if use_wrm:
            self.inner = WaveletResidual(cout, family=family, rng=rng)
        else:
            self.norm2 = GroupNorm(cout)
            self.conv2 = Conv3d(cout, cout, 3, rng=rng)
        self.skip = Conv3d(cin, cout, 1, bias=False, rng=rng) if cin != cout else None

    def __call__(self, x, temb=None):
        h = self.conv1(ad.silu(self.norm1(x)))
        if temb is not None and self.temb_proj is not None:
            shift = self.temb_proj(ad.silu(temb))
            h = h + ad.reshape(shift, (shift.shape[0], -1, 1, 1, 1))
        if self.use_wrm:
            h = self.inner(h)
        else:
            h = self.conv2(ad.silu(self.norm2(h)))
        s = x if self.skip is None else self.skip(x)
        return h + s


class Downsample(Module):
    def __init__(self, cin, cout, rng=None):
        super().__init__()
        self.conv = Conv3d(cin, cout, 3, stride=2, rng=rng)

    def __call__(self, x):
        return self.conv(x)


class Upsample(Module):
    def __init__(self, cin, cout, rng=None):
        super().__init__()
        self.conv = Conv3d(cin, cout, 3, rng=rng)

    def __call__(self, x):
        return self.conv(ad.upsample_nearest2(x))
