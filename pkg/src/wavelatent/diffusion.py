"""Noise schedule, forward noising, training objective, and the
deterministic accelerated sampler.

Schedule tables are built and kept in 64-bit; the sampler also runs its
algebra in 64-bit because the late-schedule signal coefficient
sqrt(alpha_bar_T) is around 1e-22 and 32-bit arithmetic cannot subtract
through it. The training path stays in the engine dtype since forward
noising involves no cancellation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from . import autodiff as ad
from .errors import ContractError


@dataclass
class NoiseSchedule:
    T: int
    beta: np.ndarray        # [T], float64
    alpha: np.ndarray       # 1 - beta
    alpha_bar: np.ndarray   # cumulative product
    sample_steps: list = field(default_factory=list)

    def bar(self, t) -> np.ndarray:
        """alpha_bar at step t (scalar or array), with alpha_bar(0) == 1."""
        ts = np.asarray(t)
        if np.any(ts < 0) or np.any(ts > self.T):
            raise ContractError(f"timestep {t} outside [0, {self.T}]")
        table = np.concatenate([[1.0], self.alpha_bar])
        return table[ts]


def make_schedule(T: int, beta1: float = 1e-4, betaT: float = 0.2) -> NoiseSchedule:
    """Linear variance schedule inclusive of both endpoints."""
    if T < 1:
        raise ContractError(f"schedule length T must be >= 1, got {T}")
    if not (0.0 < beta1 <= betaT < 1.0):
        raise ContractError(f"need 0 < beta1 <= betaT < 1, got beta1={beta1}, betaT={betaT}")
    beta = np.linspace(beta1, betaT, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def uniform_steps(T: int, n: int) -> list:
    """n roughly uniform timesteps in [1, T], strictly increasing, ending at T."""
    if not 1 <= n <= T:
        raise ContractError(f"step count {n} outside [1, {T}]")
    raw = np.linspace(1, T, n)
    steps = sorted(set(int(round(v)) for v in raw))
    if steps[-1] != T:
        steps[-1] = T
    return steps


def _check_t(t, T):
    ts = np.asarray(t)
    if np.any(ts < 1) or np.any(ts > T):
        raise ContractError(f"timestep {t} outside [1, {T}]")


def q_sample(z0, t, eps, s: NoiseSchedule):
    """Closed-form forward marginal z_t = sqrt(ab_t) z0 + sqrt(1-ab_t) eps.

    Accepts Tensors (differentiable, used in training) or plain arrays.
    ``t`` may be a scalar or a per-example array matched to axis 0.
    """
    _check_t(t, s.T)
    zshape = z0.shape
    if hasattr(eps, "shape") and tuple(eps.shape) != tuple(zshape):
        raise ContractError(f"noise shape {tuple(eps.shape)} != signal shape {tuple(zshape)}")
    ab = s.bar(t)
    c_sig = np.sqrt(ab)
    c_noise = np.sqrt(1.0 - ab)
    if np.ndim(c_sig) > 0:
        bshape = (len(c_sig),) + (1,) * (len(zshape) - 1)
        c_sig = c_sig.reshape(bshape)
        c_noise = c_noise.reshape(bshape)
    if isinstance(z0, Tensor) or isinstance(eps, Tensor):
        return ad.add(ad.mul(z0, c_sig), ad.mul(eps, c_noise))
    return c_sig * z0 + c_noise * eps


def training_loss(z0_ct, z_mr, t, rng, model, s: NoiseSchedule) -> Tensor:
    """Noise-prediction MSE at timestep(s) t, differentiable through model."""
    _check_t(t, s.T)
    eps = Tensor(rng.standard_normal(z0_ct.shape))
    z_t = q_sample(z0_ct, t, eps, s)
    eps_hat = model(z_t, t, z_mr)
    diff = eps - eps_hat
    return ad.mean(diff * diff)


def predict_z0(z_t, eps_hat, t, s: NoiseSchedule):
    """Single-step inversion of q_sample given a noise estimate."""
    _check_t(t, s.T)
    ab = float(s.bar(int(t)))
    return (z_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def ddim_step(z_t, t, t_prev, model, cond, s: NoiseSchedule):
    """One deterministic update from level t down to level t_prev.

    t_prev = 0 lands on the clean estimate (alpha_bar(0) == 1 convention).
    The noise predictor is evaluated once, at level t.
    """
    _check_t(t, s.T)
    if t_prev > t:
        raise ContractError(f"ddim_step requires t_prev <= t, got {t_prev} > {t}")
    if t_prev < 0:
        raise ContractError(f"t_prev must be >= 0, got {t_prev}")
    eps_hat = model(z_t, int(t), cond)
    z0_hat = predict_z0(z_t, eps_hat, t, s)
    ab_prev = float(s.bar(int(t_prev)))
    return np.sqrt(ab_prev) * z0_hat + np.sqrt(1.0 - ab_prev) * eps_hat


def sample(cond, model, s: NoiseSchedule, rng, steps=None):
    """Deterministic accelerated sampling from pure noise.

    Iterates ddim_step over the configured subsequence of timesteps in
    descending order, ending at 0. ``model`` is a plain callable
    (z_t, t, cond) -> eps_hat operating on arrays; all sampler algebra
    runs in 64-bit.
    """
    seq = steps if steps is not None else (s.sample_steps or uniform_steps(s.T, 50))
    if seq[-1] != s.T:
        raise ContractError(f"sampling subsequence must end at T={s.T}, got {seq[-1]}")
    if seq[0] < 1 or any(b <= a for a, b in zip(seq, seq[1:])):
        raise ContractError("sampling subsequence must be strictly increasing within [1, T]")
    z = rng.standard_normal(cond.shape)
    lower = [0] + list(seq[:-1])
    for t, t_prev in zip(reversed(seq), reversed(lower)):
        z = ddim_step(z, t, t_prev, model, cond, s)
    return z
