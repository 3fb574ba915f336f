"""Conditional denoising U-Net with dual skip-connection attention.

Skip features attend over the resized structural half of the condition
code (additive emphasis) and over the modality half (subtractive
filtering) before being concatenated with the upsampled decoder features.
Attention is single-head over flattened voxel tokens with dense
token-token matrices; latent volumes are small enough that the quadratic
cost is irrelevant.

With every attention projection at zero, each fusion degenerates to the
plain skip concatenation, which is exactly the vanilla ablation arm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor, sinusoidal_embedding
from .autoencoder import LatentCode, split_code
from .blocks import Downsample, ResBlock, Upsample
from .errors import ContractError
from .nn import Conv3d, GroupNorm, Linear, Module, ModuleList


@dataclass
class DenoiserInput:
    z_noisy: Tensor
    z_cond: Tensor
    t: object  # timestep index or per-example index array


def _tokens(x) -> Tensor:
    n, c = x.shape[0], x.shape[1]
    return ad.transpose(ad.reshape(x, (n, c, -1)), (0, 2, 1))


def _untokens(tok, shape) -> Tensor:
    n, c = shape[0], shape[1]
    return ad.reshape(ad.transpose(tok, (0, 2, 1)), (n, c) + tuple(shape[2:]))


def _check_geometry(a, b, what):
    if tuple(a.shape[2:]) != tuple(b.shape[2:]):
        raise ContractError(
            f"{what}: spatial geometry mismatch {tuple(a.shape[2:])} vs {tuple(b.shape[2:])}"
        )


class StructureAttention(Module):
    """Additive cross-attention: queries from skip features, keys/values
    from the resized structural condition."""

    def __init__(self, channels, rng=None):
        super().__init__()
        self.channels = channels
        self.query = Conv3d(channels, channels, 1, bias=False, rng=rng)
        self.key = Conv3d(channels, channels, 1, bias=False, rng=rng)
        self.value = Conv3d(channels, channels, 1, bias=False, rng=rng)
        self.value.zero_()  # start as an exact no-op on the skip path

    def __call__(self, skip, cond):
        _check_geometry(skip, cond, "structure attention")
        q = _tokens(self.query(skip))
        k = _tokens(self.key(cond))
        v = _tokens(self.value(cond))
        scores = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(self.channels))
        attn = ad.softmax(scores, axis=-1)
        return _untokens(ad.matmul(attn, v), skip.shape)


class ModalityFilter(Module):
    """Subtractive cross-attention: the attended modality content is
    removed from the projected query."""

    def __init__(self, channels, rng=None):
        super().__init__()
        self.channels = channels
        self.query = Conv3d(channels, channels, 1, bias=False, rng=rng)
        self.key = Conv3d(channels, channels, 1, bias=False, rng=rng)
        self.value = Conv3d(channels, channels, 1, bias=False, rng=rng)
        self.query.zero_()
        self.value.zero_()

    def __call__(self, skip, cond):
        _check_geometry(skip, cond, "modality filter")
        q = _tokens(self.query(skip))
        k = _tokens(self.key(cond))
        v = _tokens(self.value(cond))
        scores = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(self.channels))
        attn = ad.softmax(scores, axis=-1)
        return _untokens(q - ad.matmul(attn, v), skip.shape)


class DualSkipAttention(Module):
    """Fuse a skip tensor with both attention outputs, concat the deep path.

    Output channels = channels(skip) + channels(deep)."""

    def __init__(self, channels, latent_channels, rng=None):
        super().__init__()
        half = latent_channels // 2
        self.structure_proj = Conv3d(half, channels, 1, rng=rng)
        self.modality_proj = Conv3d(half, channels, 1, rng=rng)
        self.emphasis = StructureAttention(channels, rng=rng)
        self.filter = ModalityFilter(channels, rng=rng)

    def __call__(self, skip, deep, cond_code: LatentCode):
        _check_geometry(skip, deep, "dual skip attention")
        target = tuple(skip.shape[2:])
        s = self.structure_proj(ad.resize_trilinear(cond_code.s, target))
        m = self.modality_proj(ad.resize_trilinear(cond_code.m, target))
        fused = skip + self.emphasis(skip, s) + self.filter(skip, m)
        return ad.concat([fused, deep], axis=1)


class ConditionalDenoiser(Module):
    """Noise predictor over latent volumes, conditioned on the source-code
    latent (channel-concatenated at the stem) and a timestep embedding.

    Three resolutions; encoder stages emit skip tensors consumed by the
    attention fusions on the way back up. Stages whose extents admit two
    wavelet levels use wavelet residual blocks when ``use_wrm`` is set,
    plain residual blocks otherwise.
    """

    def __init__(self, latent_channels=8, latent_extent=8, base=32, temb_dim=128,
                 blocks_per_stage=2, use_wrm=True, use_dsca=True, family="haar",
                 rng=None):
        super().__init__()
        self.latent_channels = latent_channels
        self.use_dsca = use_dsca
        widths = (base, base * 2, base * 4)
        extents = (latent_extent, latent_extent // 2, latent_extent // 4)
        wrm_at = [use_wrm and e % 4 == 0 and e >= 4 for e in extents]
        self.time_in = Linear(64, temb_dim, rng=rng)
        self.time_out = Linear(temb_dim, temb_dim, rng=rng)
        self.stem = Conv3d(2 * latent_channels, widths[0], 3, rng=rng)

        def stage(cin, cout, flag):
            blocks = [ResBlock(cin, cout, temb_dim, use_wrm=flag, family=family, rng=rng)]
            for _ in range(blocks_per_stage - 1):
                blocks.append(ResBlock(cout, cout, temb_dim, use_wrm=flag, family=family, rng=rng))
            return ModuleList(blocks)

        self.enc1 = stage(widths[0], widths[0], wrm_at[0])
        self.down1 = Downsample(widths[0], widths[1], rng=rng)
        self.enc2 = stage(widths[1], widths[1], wrm_at[1])
        self.down2 = Downsample(widths[1], widths[2], rng=rng)
        self.enc3 = stage(widths[2], widths[2], wrm_at[2])
        self.mid = ResBlock(widths[2], widths[2], temb_dim, use_wrm=wrm_at[2],
                            family=family, rng=rng)
        if use_dsca:
            self.fuse3 = DualSkipAttention(widths[2], latent_channels, rng=rng)
            self.fuse2 = DualSkipAttention(widths[1], latent_channels, rng=rng)
            self.fuse1 = DualSkipAttention(widths[0], latent_channels, rng=rng)
        self.dec3 = stage(2 * widths[2], widths[2], wrm_at[2])
        self.up3 = Upsample(widths[2], widths[1], rng=rng)
        self.dec2 = stage(2 * widths[1], widths[1], wrm_at[1])
        self.up2 = Upsample(widths[1], widths[0], rng=rng)
        self.dec1 = stage(2 * widths[0], widths[0], wrm_at[0])
        self.out_norm = GroupNorm(widths[0])
        self.out_conv = Conv3d(widths[0], latent_channels, 3, rng=rng)
        self.out_conv.zero_()  # predict zero noise at init

    def _fuse(self, idx, skip, deep, cond_code):
        if self.use_dsca:
            return getattr(self, f"fuse{idx}")(skip, deep, cond_code)
        return ad.concat([skip, deep], axis=1)

    def __call__(self, z_noisy, t, z_cond) -> Tensor:
        if tuple(z_noisy.shape) != tuple(z_cond.shape):
            raise ContractError(
                f"noisy and condition latents disagree: {tuple(z_noisy.shape)} "
                f"vs {tuple(z_cond.shape)}"
            )
        temb = self.time_out(ad.silu(self.time_in(sinusoidal_embedding(t, 64))))
        cond_code = split_code(z_cond)

        h = self.stem(ad.concat([z_noisy, z_cond], axis=1))
        for b in self.enc1:
            h = b(h, temb)
        e1 = h
        h = self.down1(h)
        for b in self.enc2:
            h = b(h, temb)
        e2 = h
        h = self.down2(h)
        for b in self.enc3:
            h = b(h, temb)
        e3 = h
        h = self.mid(h, temb)

        h = self._fuse(3, e3, h, cond_code)
        for b in self.dec3:
            h = b(h, temb)
        h = self.up3(h)
        h = self._fuse(2, e2, h, cond_code)
        for b in self.dec2:
            h = b(h, temb)
        h = self.up2(h)
        h = self._fuse(1, e1, h, cond_code)
        for b in self.dec1:
            h = b(h, temb)
        return self.out_conv(ad.silu(self.out_norm(h)))
