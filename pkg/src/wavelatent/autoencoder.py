"""Shared-parameter variational encoder/decoder and the pretraining losses.

One encoder and one decoder serve both volume modalities. The latent code
Z splits channel-wise into a structural half S (shared across modalities
of one patient) and a modality half M (shared across patients of one
modality); the cosine losses below push the code toward exactly that
factorization. The decoder recovers the modality from M, which is what
lets a single decoder reconstruct both inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, cosine_similarity
from .blocks import Downsample, ResBlock, Upsample
from .errors import ContractError
from .nn import Conv3d, GroupNorm, Module

LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0


@dataclass
class LatentDistribution:
    """Diagonal Gaussian over latent volumes."""

    mu: Tensor
    log_var: Tensor


@dataclass
class LatentCode:
    """A sampled latent split into structural and modality halves."""

    s: Tensor
    m: Tensor

    def z(self) -> Tensor:
        return ad.concat([self.s, self.m], axis=1)


def split_code(z) -> LatentCode:
    c = z.shape[1]
    if c % 2 != 0:
        raise ContractError(f"latent channel count {c} must be even to split")
    return LatentCode(s=ad.narrow(z, 1, 0, c // 2), m=ad.narrow(z, 1, c // 2, c // 2))


def sample_latent(dist: LatentDistribution, rng) -> LatentCode:
    """Reparameterized draw Z = mu + exp(log_var/2) * eps, split into halves."""
    eps = Tensor(rng.standard_normal(dist.mu.shape))
    z = dist.mu + ad.exp(dist.log_var * 0.5) * eps
    return split_code(z)


class VolumeEncoder(Module):
    """Stem conv, then block/downsample twice, a final block, two 1^3 heads."""

    def __init__(self, widths=(8, 12, 16), latent_channels=8, use_wrm=True,
                 family="haar", rng=None):
        super().__init__()
        w0, w1, w2 = widths
        self.latent_channels = latent_channels
        self.stem = Conv3d(1, w0, 3, rng=rng)
        self.block1 = ResBlock(w0, w0, use_wrm=use_wrm, family=family, rng=rng)
        self.down1 = Downsample(w0, w1, rng=rng)
        self.block2 = ResBlock(w1, w1, use_wrm=use_wrm, family=family, rng=rng)
        self.down2 = Downsample(w1, w2, rng=rng)
        self.block3 = ResBlock(w2, w2, use_wrm=use_wrm, family=family, rng=rng)
        self.head_mu = Conv3d(w2, latent_channels, 1, rng=rng)
        self.head_logvar = Conv3d(w2, latent_channels, 1, rng=rng)

    def __call__(self, x) -> LatentDistribution:
        if x.ndim != 5 or x.shape[1] != 1:
            raise ContractError(f"encoder expects [N,1,D,H,W], got {tuple(x.shape)}")
        for name, ext in zip("DHW", x.shape[2:]):
            if ext % 8 != 0:
                raise ContractError(f"encoder needs axis {name} divisible by 8, got {ext}")
        h = self.stem(x)
        h = self.block1(h)
        h = self.down1(h)
        h = self.block2(h)
        h = self.down2(h)
        h = self.block3(h)
        mu = self.head_mu(h)
        log_var = ad.clamp(self.head_logvar(h), LOGVAR_MIN, LOGVAR_MAX)
        return LatentDistribution(mu=mu, log_var=log_var)


class VolumeDecoder(Module):
    """Mirror of the encoder; tanh keeps the output inside [-1, 1]."""

    def __init__(self, widths=(8, 12, 16), latent_channels=8, use_wrm=True,
                 family="haar", rng=None):
        super().__init__()
        w0, w1, w2 = widths
        self.inproj = Conv3d(latent_channels, w2, 1, rng=rng)
        self.block3 = ResBlock(w2, w2, use_wrm=use_wrm, family=family, rng=rng)
        self.up2 = Upsample(w2, w1, rng=rng)
        self.block2 = ResBlock(w1, w1, use_wrm=use_wrm, family=family, rng=rng)
        self.up1 = Upsample(w1, w0, rng=rng)
        self.block1 = ResBlock(w0, w0, use_wrm=use_wrm, family=family, rng=rng)
        self.out_norm = GroupNorm(w0)
        self.out_conv = Conv3d(w0, 1, 3, rng=rng)

    def __call__(self, z) -> Tensor:
        h = self.inproj(z)
        h = self.block3(h)
        h = self.up2(h)
        h = self.block2(h)
        h = self.up1(h)
        h = self.block1(h)
        return ad.tanh(self.out_conv(ad.silu(self.out_norm(h))))


class Autoencoder(Module):
    def __init__(self, widths=(8, 12, 16), latent_channels=8, use_wrm=True,
                 family="haar", rng=None):
        super().__init__()
        self.encoder = VolumeEncoder(widths, latent_channels, use_wrm, family, rng)
        self.decoder = VolumeDecoder(widths, latent_channels, use_wrm, family, rng)

    def encode(self, x) -> LatentDistribution:
        return self.encoder(x)

    def decode(self, z) -> Tensor:
        if isinstance(z, LatentCode):
            z = z.z()
        return self.decoder(z)


class PatchDiscriminator(Module):
    """Three strided conv layers, one logit per spatial patch."""

    def __init__(self, widths=(16, 32, 64), rng=None):
        super().__init__()
        w1, w2, w3 = widths
        self.c1 = Conv3d(1, w1, 3, stride=2, rng=rng)
        self.c2 = Conv3d(w1, w2, 3, stride=2, rng=rng)
        self.c3 = Conv3d(w2, w3, 3, stride=2, rng=rng)
        self.out = Conv3d(w3, 1, 1, rng=rng)

    def __call__(self, x) -> Tensor:
        h = ad.leaky_relu(self.c1(x))
        h = ad.leaky_relu(self.c2(h))
        h = ad.leaky_relu(self.c3(h))
        return self.out(h)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def structure_loss(s_ct, s_mr, s_ct2, s_mr2) -> Tensor:
    """Pull paired structural halves together, push unpaired apart.

    Arguments are the structural halves of (patient A CT, patient A MR,
    patient B CT, patient B MR). Value range [-4, 4]; the optimum for
    perfectly shared within-patient structure is negative.
    """
    paired = cosine_similarity(s_ct, s_mr) + cosine_similarity(s_ct2, s_mr2)
    unpaired = cosine_similarity(s_ct, s_ct2) + cosine_similarity(s_mr, s_mr2)
    return unpaired - paired


def modality_loss(m_ct, m_mr, m_ct2, m_mr2) -> Tensor:
    """Mirror of the structure loss: cluster by modality, separate in-patient."""
    paired = cosine_similarity(m_ct, m_mr) + cosine_similarity(m_ct2, m_mr2)
    unpaired = cosine_similarity(m_ct, m_ct2) + cosine_similarity(m_mr, m_mr2)
    return paired - unpaired


def disentangle_loss(code_act: LatentCode, code_amr: LatentCode,
                     code_bct: LatentCode, code_bmr: LatentCode):
    """Structure plus modality terms; returns (total, structure, modality)."""
    ls = structure_loss(code_act.s, code_amr.s, code_bct.s, code_bmr.s)
    lm = modality_loss(code_act.m, code_amr.m, code_bct.m, code_bmr.m)
    return ls + lm, ls, lm


def kl_loss(dist: LatentDistribution) -> Tensor:
    """Closed-form KL to a standard normal, averaged over elements."""
    mu, lv = dist.mu, dist.log_var
    return 0.5 * ad.mean(mu * mu + ad.exp(lv) - 1.0 - lv)


def generator_adversarial_loss(disc: PatchDiscriminator, fake) -> Tensor:
    """Non-saturating logistic loss; call with discriminator grads disabled."""
    return ad.mean(ad.softplus(-disc(fake)))


def discriminator_loss(disc: PatchDiscriminator, real, fake) -> Tensor:
    return 0.5 * ad.mean(ad.softplus(-disc(real))) + 0.5 * ad.mean(ad.softplus(disc(fake)))


@dataclass
class LossWeights:
    alpha: float = 1e-6  # KL
    beta: float = 0.1    # disentanglement
    gamma: float = 0.05  # adversarial


def _set_requires_grad(module: Module, flag: bool) -> None:
    for p in module.params():
        p.requires_grad = flag


def pretrain_step(ae: Autoencoder, disc, opt_ae, opt_disc, pair_a, pair_b,
                  weights: LossWeights, rng) -> dict:
    """One optimizer step of the pretraining objective on two patients.

    Encodes all four volumes with the shared encoder, decodes each back to
    its own modality, and combines reconstruction, KL, disentanglement and
    adversarial terms. Returns every component as a float, plus 'total'.
    Terms whose weight is zero are skipped entirely, so they contribute
    exactly zero gradient.
    """
    if pair_a.patient_id == pair_b.patient_id:
        raise ContractError(
            f"pretraining needs two distinct patients, got id {pair_a.patient_id} twice"
        )
    batch_np = np.concatenate(
        [pair_a.ct.data, pair_a.mr.data, pair_b.ct.data, pair_b.mr.data], axis=0
    )
    batch = Tensor(batch_np)

    ae.zero_grads()
    dist = ae.encode(batch)
    code = sample_latent(dist, rng)
    recon = ae.decode(code)
    diff = recon - batch
    l_rec = ad.mean(diff * diff)
    l_kl = kl_loss(dist)

    per = [LatentCode(s=ad.narrow(code.s, 0, i, 1), m=ad.narrow(code.m, 0, i, 1))
           for i in range(4)]
    l_d, l_stru, l_modal = disentangle_loss(*per)

    total = l_rec
    if weights.alpha != 0.0:
        total = total + weights.alpha * l_kl
    if weights.beta != 0.0:
        total = total + weights.beta * l_d

    if weights.gamma != 0.0 and disc is not None:
        _set_requires_grad(disc, False)
        l_gen = generator_adversarial_loss(disc, recon)
        _set_requires_grad(disc, True)
        total = total + weights.gamma * l_gen
    else:
        l_gen = None

    ad.backward(total)
    opt_ae.step()

    l_disc = None
    if weights.gamma != 0.0 and disc is not None:
        disc.zero_grads()
        l_disc = discriminator_loss(disc, batch, recon.detach())
        ad.backward(l_disc)
        opt_disc.step()

    return {
        "total": total.item(),
        "rec": l_rec.item(),
        "kl": l_kl.item(),
        "disentangle": l_d.item(),
        "structure": l_stru.item(),
        "modality": l_modal.item(),
        "adv_gen": l_gen.item() if l_gen is not None else 0.0,
        "adv_disc": l_disc.item() if l_disc is not None else 0.0,
    }
