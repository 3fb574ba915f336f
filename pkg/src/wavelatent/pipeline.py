"""Stage orchestration: pretraining, denoiser training, synthesis, and the
four-arm ablation driver.

Stage separation is strict: the denoiser stage loads autoencoder weights
without gradient tracking and never updates them. Every stochastic draw is
keyed by (seed, purpose, step), so interrupting and resuming a run from a
checkpoint reproduces the uninterrupted trajectory exactly.
"""

from __future__ import annotations

import contextlib
import json
import os
from dataclasses import replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .autoencoder import (
    Autoencoder,
    LossWeights,
    PatchDiscriminator,
    pretrain_step,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ARMS, RunConfig, save_config
from .denoiser import ConditionalDenoiser
from .diffusion import make_schedule, sample as ddim_sample, training_loss, uniform_steps
from .errors import ContractError
from .metrics import evaluate_volumes, format_report
from .nn import Adam
from .phantom import augment, generate, load_dataset, save_dataset, write_volume
from .rng import stream


@contextlib.contextmanager
def run_lock(run_dir):
    """One training process per run directory."""
    os.makedirs(run_dir, exist_ok=True)
    lock_path = os.path.join(run_dir, ".lock")
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ContractError(f"run directory {run_dir} is locked by another process")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        if os.path.exists(lock_path):
            os.remove(lock_path)


def build_autoencoder(cfg: RunConfig) -> Autoencoder:
    return Autoencoder(
        widths=tuple(cfg.ae_widths),
        latent_channels=cfg.latent_channels,
        use_wrm=cfg.use_wrm(),
        family=cfg.wavelet_family,
        rng=stream(cfg.seed, "init", "autoencoder"),
    )


def build_discriminator(cfg: RunConfig) -> PatchDiscriminator:
    return PatchDiscriminator(rng=stream(cfg.seed, "init", "discriminator"))


def build_denoiser(cfg: RunConfig) -> ConditionalDenoiser:
    return ConditionalDenoiser(
        latent_channels=cfg.latent_channels,
        latent_extent=cfg.size // 4,
        base=cfg.denoiser_base,
        blocks_per_stage=cfg.blocks_per_stage,
        use_wrm=cfg.use_wrm(),
        use_dsca=cfg.use_dsca(),
        family=cfg.wavelet_family,
        rng=stream(cfg.seed, "init", "denoiser"),
    )


def _prefixed(state: dict, prefix: str) -> dict:
    return {f"{prefix}/{k}": v for k, v in state.items()}


def _unprefixed(archive: dict, prefix: str) -> dict:
    plen = len(prefix) + 1
    return {k[plen:]: v for k, v in archive.items() if k.startswith(prefix + "/")}


# ---------------------------------------------------------------------------
# stage 1: autoencoder pretraining
# ---------------------------------------------------------------------------


def pretrain(cfg: RunConfig, pairs, out_dir, resume=None, quiet=True):
    """Train the shared autoencoder; returns the checkpoint path.

    Each step draws two distinct patients (required by the unpaired loss
    terms). With ``resume`` pointing at a checkpoint written by this
    function, training continues on the exact loss trajectory.
    """
    if len(pairs) < 2:
        raise ContractError("pretraining needs at least two patients")
    os.makedirs(out_dir, exist_ok=True)
    ae = build_autoencoder(cfg)
    disc = build_discriminator(cfg) if cfg.gamma != 0.0 else None
    opt_ae = Adam(ae.named_params(), lr=cfg.ae_lr)
    opt_disc = Adam(disc.named_params(), lr=cfg.disc_lr) if disc is not None else None
    weights = LossWeights(alpha=cfg.alpha, beta=cfg.effective_beta(), gamma=cfg.gamma)

    start = 0
    if resume is not None:
        archive = load_checkpoint(resume)
        ae.load_state(_unprefixed(archive, "ae"))
        opt_ae.load_state(_unprefixed(archive, "opt_ae"))
        if disc is not None:
            disc.load_state(_unprefixed(archive, "disc"))
            opt_disc.load_state(_unprefixed(archive, "opt_disc"))
        start = int(round(float(archive["meta/step"][0])))

    log = []
    for step in range(start, cfg.pretrain_steps):
        pick = stream(cfg.seed, "pretrain-batch", step)
        i, j = pick.choice(len(pairs), size=2, replace=False)
        pair_a, pair_b = pairs[int(i)], pairs[int(j)]
        if cfg.augment:
            pair_a = augment(pair_a, stream(cfg.seed, "augment", step, 0))
            pair_b = augment(pair_b, stream(cfg.seed, "augment", step, 1))
        report = pretrain_step(
            ae, disc, opt_ae, opt_disc, pair_a, pair_b, weights,
            stream(cfg.seed, "reparam", step),
        )
        if step % cfg.log_every == 0 or step == cfg.pretrain_steps - 1:
            log.append({"step": step, **report})
            if not quiet:
                print(f"[pretrain {cfg.arm}] step {step} "
                      f"rec={report['rec']:.5f} total={report['total']:.5f}")

    path = os.path.join(out_dir, "autoencoder.wck")
    archive = _prefixed(ae.state(), "ae")
    archive.update(_prefixed(opt_ae.state(), "opt_ae"))
    if disc is not None:
        archive.update(_prefixed(disc.state(), "disc"))
        archive.update(_prefixed(opt_disc.state(), "opt_disc"))
    archive["meta/step"] = np.array([float(cfg.pretrain_steps)], dtype=np.float32)
    save_checkpoint(path, archive)
    with open(os.path.join(out_dir, "loss_log.json"), "w") as f:
        json.dump(log, f, indent=2)
    return path


def load_autoencoder(cfg: RunConfig, ckpt_path) -> Autoencoder:
    """Rebuild the autoencoder and load weights without gradient tracking."""
    ae = build_autoencoder(cfg)
    ae.load_state(_unprefixed(load_checkpoint(ckpt_path), "ae"))
    ae.freeze()
    return ae


# ---------------------------------------------------------------------------
# stage 2: latent denoiser training
# ---------------------------------------------------------------------------


def encode_dataset(ae: Autoencoder, pairs, batch=8):
    """Mean latents for every pair, computed once with the frozen encoder."""
    z_ct, z_mr = [], []
    with no_grad():
        for lo in range(0, len(pairs), batch):
            chunk = pairs[lo:lo + batch]
            ct = Tensor(np.concatenate([p.ct.data for p in chunk], axis=0))
            mr = Tensor(np.concatenate([p.mr.data for p in chunk], axis=0))
            z_ct.append(ae.encode(ct).mu.data)
            z_mr.append(ae.encode(mr).mu.data)
    return np.concatenate(z_ct, axis=0), np.concatenate(z_mr, axis=0)


def train_diffusion(cfg: RunConfig, pairs, ae_ckpt, out_dir, quiet=True):
    """Train the conditional noise predictor in the frozen latent space."""
    os.makedirs(out_dir, exist_ok=True)
    ae = load_autoencoder(cfg, ae_ckpt)
    lat_ct, lat_mr = encode_dataset(ae, pairs)
    dn = build_denoiser(cfg)
    opt = Adam(dn.named_params(), lr=cfg.diffusion_lr)
    sched = make_schedule(cfg.timesteps, cfg.beta1, cfg.betaT)

    log = []
    n = lat_ct.shape[0]
    for step in range(cfg.diffusion_steps):
        pick = stream(cfg.seed, "diffusion-batch", step)
        idx = pick.integers(0, n, size=min(cfg.diffusion_batch, n))
        z0 = Tensor(lat_ct[idx])
        cond = Tensor(lat_mr[idx])
        t = stream(cfg.seed, "diffusion-t", step).integers(1, cfg.timesteps + 1,
                                                           size=len(idx))
        dn.zero_grads()
        loss = training_loss(z0, cond, t, stream(cfg.seed, "diffusion-noise", step),
                             dn, sched)
        ad.backward(loss)
        opt.step()
        if step % cfg.log_every == 0 or step == cfg.diffusion_steps - 1:
            log.append({"step": step, "loss": loss.item()})
            if not quiet:
                print(f"[diffusion {cfg.arm}] step {step} loss={loss.item():.5f}")

    path = os.path.join(out_dir, "denoiser.wck")
    archive = _prefixed(dn.state(), "denoiser")
    archive.update(_prefixed(opt.state(), "opt"))
    archive["meta/step"] = np.array([float(cfg.diffusion_steps)], dtype=np.float32)
    save_checkpoint(path, archive)
    with open(os.path.join(out_dir, "diffusion_log.json"), "w") as f:
        json.dump(log, f, indent=2)
    return path


def load_denoiser(cfg: RunConfig, ckpt_path) -> ConditionalDenoiser:
    dn = build_denoiser(cfg)
    dn.load_state(_unprefixed(load_checkpoint(ckpt_path), "denoiser"))
    dn.freeze()
    return dn


# ---------------------------------------------------------------------------
# synthesis and evaluation
# ---------------------------------------------------------------------------


def synthesize(cfg: RunConfig, ae: Autoencoder, dn: ConditionalDenoiser, mr,
               sample_seed: int, steps=None) -> np.ndarray:
    """MR volume -> synthetic CT volume [D,H,W] via latent-space sampling."""
    mr_t = mr if isinstance(mr, Tensor) else Tensor(np.asarray(mr))
    if mr_t.ndim == 3:
        mr_t = Tensor(mr_t.data[None, None])
    with no_grad():
        cond32 = ae.encode(mr_t).mu.data

    def predict(z_t, t, cond):
        with no_grad():
            out = dn(Tensor(z_t.astype(np.float32)), int(t),
                     Tensor(cond.astype(np.float32)))
        return out.data.astype(np.float64)

    sched = make_schedule(cfg.timesteps, cfg.beta1, cfg.betaT)
    seq = steps if steps is not None else uniform_steps(cfg.timesteps, cfg.inference_steps)
    z0 = ddim_sample(cond32.astype(np.float64), predict, sched,
                     stream(sample_seed, "ddim-init"), steps=seq)
    with no_grad():
        vol = ae.decode(Tensor(z0.astype(np.float32))).data
    return vol[0, 0]


def evaluate_pairs(preds, pairs) -> dict:
    """Per-volume metrics plus their means over the evaluation set."""
    rows = []
    for pred, pair in zip(preds, pairs):
        row = evaluate_volumes(pred, pair.ct.data[0, 0], labels=pair.labels)
        row["patient_id"] = pair.patient_id
        rows.append(row)
    keys = ("psnr", "ssim", "mae", "ncc", "bone_dice")
    mean = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    return {"volumes": rows, "mean": mean}


# ---------------------------------------------------------------------------
# complete runs
# ---------------------------------------------------------------------------


def split_dataset(pairs, cfg: RunConfig):
    need = cfg.train_count + cfg.eval_count
    if len(pairs) < need:
        raise ContractError(
            f"dataset holds {len(pairs)} pairs; config needs {need} (train+eval)"
        )
    return pairs[: cfg.train_count], pairs[cfg.train_count: need]


def run_arm(cfg: RunConfig, train_pairs, eval_pairs, out_dir, quiet=True) -> dict:
    """One end-to-end arm: pretrain, diffusion, synthesize, evaluate."""
    os.makedirs(out_dir, exist_ok=True)
    save_config(cfg, os.path.join(out_dir, "config.ini"))
    with run_lock(out_dir):
        ae_ckpt = pretrain(cfg, train_pairs, out_dir, quiet=quiet)
        dn_ckpt = train_diffusion(cfg, train_pairs, ae_ckpt, out_dir, quiet=quiet)
        ae = load_autoencoder(cfg, ae_ckpt)
        dn = load_denoiser(cfg, dn_ckpt)
        preds = []
        for pair in eval_pairs:
            pred = synthesize(cfg, ae, dn, pair.mr,
                              sample_seed=cfg.seed + 90000 + pair.patient_id)
            preds.append(pred)
        results = evaluate_pairs(preds, eval_pairs)
    with open(os.path.join(out_dir, "metrics.json"), "w") as f:
        json.dump(results, f, indent=2)
    with open(os.path.join(out_dir, "metrics.txt"), "w") as f:
        f.write(format_report(results["mean"]))
    return results


def run_ablation(cfg: RunConfig, pairs, out_dir, quiet=True) -> dict:
    """All four arms on the same data and seed; emits a comparison table."""
    train_pairs, eval_pairs = split_dataset(pairs, cfg)
    os.makedirs(out_dir, exist_ok=True)
    table = {}
    for arm in ARMS:
        arm_cfg = replace(cfg, arm=arm)
        results = run_arm(arm_cfg, train_pairs, eval_pairs,
                          os.path.join(out_dir, arm), quiet=quiet)
        table[arm] = results["mean"]
        if not quiet:
            m = results["mean"]
            print(f"[ablate] {arm}: ssim={m['ssim']:.4f} mae={m['mae']:.4f} "
                  f"psnr={m['psnr']:.2f} bone_dice={m['bone_dice']:.4f}")
    with open(os.path.join(out_dir, "ablation.json"), "w") as f:
        json.dump(table, f, indent=2)
    with open(os.path.join(out_dir, "ablation.txt"), "w") as f:
        f.write(_ablation_table(table))
    return table


def _ablation_table(table: dict) -> str:
    cols = ("psnr", "ssim", "mae", "ncc", "bone_dice")
    lines = ["arm        " + "".join(f"{c:>12}" for c in cols)]
    for arm in ARMS:
        if arm not in table:
            continue
        row = table[arm]
        lines.append(f"{arm:<11}" + "".join(f"{row[c]:>12.4f}" for c in cols))
    return "\n".join(lines) + "\n"
