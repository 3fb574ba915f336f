"""Run configuration: a typed schema over nested key = value tables.

Files are UTF-8 INI-style sections. Every key is declared in the schema
with its type and default; unknown sections or keys fail fast so a typo
cannot silently run a wrong experiment. Serialization is canonical, and
parse -> serialize -> parse is the identity on the config object.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, fields

from .errors import ConfigError

ARMS = ("vanilla", "wrm", "wrm_smd", "full")


@dataclass
class RunConfig:
    # [model]
    latent_channels: int = 8
    ae_widths: tuple = (8, 12, 16)
    denoiser_base: int = 32
    blocks_per_stage: int = 2
    wavelet_family: str = "haar"
    # [schedule]
    timesteps: int = 1000
    beta1: float = 1e-4
    betaT: float = 0.2
    inference_steps: int = 50
    # [loss]
    alpha: float = 1e-6
    beta: float = 0.1
    gamma: float = 0.05
    # [ablation]
    arm: str = "full"
    # [data]
    size: int = 32
    train_count: int = 200
    eval_count: int = 50
    data_seed: int = 77
    augment: bool = False
    # [train]
    seed: int = 1234
    pretrain_steps: int = 600
    diffusion_steps: int = 2000
    diffusion_batch: int = 8
    ae_lr: float = 2e-3
    diffusion_lr: float = 1e-3
    disc_lr: float = 1e-3
    log_every: int = 50

    # ---- ablation arm semantics -------------------------------------------
    def use_wrm(self) -> bool:
        return self.arm in ("wrm", "wrm_smd", "full")

    def use_smd(self) -> bool:
        return self.arm in ("wrm_smd", "full")

    def use_dsca(self) -> bool:
        return self.arm == "full"

    def effective_beta(self) -> float:
        return self.beta if self.use_smd() else 0.0

    def validate(self) -> None:
        if self.arm not in ARMS:
            raise ConfigError(f"unknown ablation arm '{self.arm}'; choose from {ARMS}")
        if self.latent_channels % 2 != 0:
            raise ConfigError("latent_channels must be even (structure/modality split)")
        if len(self.ae_widths) != 3:
            raise ConfigError("ae_widths must list three stage widths")
        if self.size % 8 != 0:
            raise ConfigError("volume size must be divisible by 8")
        if not (0 < self.beta1 <= self.betaT < 1):
            raise ConfigError("need 0 < beta1 <= betaT < 1")
        if not (1 <= self.inference_steps <= self.timesteps):
            raise ConfigError("inference_steps must lie in [1, timesteps]")


_SECTIONS = {
    "model": ("latent_channels", "ae_widths", "denoiser_base", "blocks_per_stage",
              "wavelet_family"),
    "schedule": ("timesteps", "beta1", "betaT", "inference_steps"),
    "loss": ("alpha", "beta", "gamma"),
    "ablation": ("arm",),
    "data": ("size", "train_count", "eval_count", "data_seed", "augment"),
    "train": ("seed", "pretrain_steps", "diffusion_steps", "diffusion_batch",
              "ae_lr", "diffusion_lr", "disc_lr", "log_every"),
}
_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, text: str):
    ftype = _FIELD_TYPES[key]
    text = text.strip()
    try:
        if ftype == "int":
            return int(text)
        if ftype == "float":
            return float(text)
        if ftype == "bool":
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if ftype == "tuple":
            return tuple(int(v) for v in text.split(","))
        return text
    except ValueError:
        raise ConfigError(f"cannot parse value '{text}' for key '{key}'")


def _format_value(key: str, value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keys are case-sensitive
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}")
    cfg = RunConfig()
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in cp[section].items():
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
            setattr(cfg, key, _parse_value(key, raw))
    cfg.validate()
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    for section, keys in _SECTIONS.items():
        cp[section] = {k: _format_value(k, getattr(cfg, k)) for k in keys}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(serialize_config(cfg))
