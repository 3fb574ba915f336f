"""Wavelet-enhanced latent diffusion for paired-volume modality translation.

The package is organized bottom-up:

- ``autodiff`` / ``conv`` / ``nn``: tensor engine with reverse-mode AD
- ``wavelet``: orthonormal 3-D analysis/synthesis
- ``blocks``: wavelet residual module and residual blocks
- ``autoencoder``: shared variational encoder/decoder + pretraining losses
- ``denoiser``: conditional U-Net with dual skip-connection attention
- ``diffusion``: noise schedule, training objective, deterministic sampler
- ``phantom``: procedural paired dataset and WVL1 volume files
- ``metrics``: PSNR / SSIM / MAE / NCC / Dice
- ``pipeline`` / ``cli``: two-stage workflow, checkpoints, ablation
"""

from .autodiff import Tensor, backward, cosine_similarity, no_grad
from .autoencoder import (
    Autoencoder,
    LatentCode,
    LatentDistribution,
    LossWeights,
    disentangle_loss,
    kl_loss,
    modality_loss,
    sample_latent,
    split_code,
    structure_loss,
)
from .config import RunConfig, load_config, parse_config, save_config, serialize_config
from .denoiser import ConditionalDenoiser
from .diffusion import (
    NoiseSchedule,
    ddim_step,
    make_schedule,
    predict_z0,
    q_sample,
    sample,
    training_loss,
    uniform_steps,
)
from .errors import ContractError
from .metrics import dice, mae, ncc, psnr, segment_bone, ssim3d
from .phantom import (
    PhantomPair,
    augment,
    crop_and_normalize,
    generate,
    read_volume,
    write_volume,
)
from .wavelet import SubBands, dwt3, idwt3

__version__ = "0.1.0"
