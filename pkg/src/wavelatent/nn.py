"""Parameter containers, common layers, and the optimizer.

A ``Module`` registers any Tensor attribute as a parameter and any Module
attribute as a child; ``named_params`` flattens the hierarchy into
slash-joined names, which is also the naming scheme used by checkpoint
archives.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .conv import conv3d
from .errors import ContractError


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_params(self, prefix: str = "") -> dict:
        out = {}
        for k, p in self._params.items():
            out[prefix + k] = p
        for k, m in self._modules.items():
            out.update(m.named_params(f"{prefix}{k}/"))
        return out

    def params(self) -> list:
        return list(self.named_params().values())

    def state(self) -> dict:
        return {k: p.data for k, p in self.named_params().items()}

    def load_state(self, state: dict) -> None:
        mine = self.named_params()
        missing = sorted(set(mine) - set(state))
        if missing:
            raise ContractError(f"state is missing parameters: {missing[:5]} ...")
        for name, p in mine.items():
            src = np.asarray(state[name])
            if tuple(src.shape) != tuple(p.shape):
                raise ContractError(
                    f"parameter '{name}' shape {tuple(src.shape)} != expected {tuple(p.shape)}"
                )
            p.data = src.astype(p.data.dtype)

    def freeze(self) -> None:
        """Drop gradient tracking on every parameter (frozen stage input)."""
        for p in self.params():
            p.requires_grad = False
            p.grad = None

    def zero_grads(self) -> None:
        for p in self.params():
            p.grad = None


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._items = []
        for m in mods:
            self.append(m)

    def append(self, mod: Module) -> None:
        setattr(self, str(len(self._items)), mod)
        self._items.append(mod)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self):
        return len(self._items)


def param(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


class Conv3d(Module):
    """Grouped 3-D convolution layer with He-normal weights."""

    def __init__(self, cin, cout, k, stride=1, padding=None, groups=1, bias=True, rng=None):
        super().__init__()
        self.cin, self.cout, self.k = cin, cout, k
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.groups = groups
        fan_in = (cin // groups) * k ** 3
        std = math.sqrt(2.0 / fan_in)
        gen = rng if rng is not None else np.random.default_rng(0)
        self.weight = param(gen.normal(0.0, std, size=(cout, cin // groups, k, k, k)))
        self.bias = param(np.zeros(cout)) if bias else None

    def __call__(self, x):
        y = conv3d(x, self.weight, groups=self.groups, stride=self.stride,
                   padding=self.padding)
        if self.bias is not None:
            y = y + ad.reshape(self.bias, (1, self.cout, 1, 1, 1))
        return y

    def zero_(self):
        self.weight.data[...] = 0.0
        if self.bias is not None:
            self.bias.data[...] = 0.0
        return self

    def identity_(self):
        """Make a 1x1x1 ungrouped conv pass channels through unchanged."""
        if self.k != 1 or self.groups != 1 or self.cin != self.cout:
            raise ContractError("identity init needs an ungrouped 1x1x1 conv, cin == cout")
        self.weight.data[...] = 0.0
        for i in range(self.cin):
            self.weight.data[i, i, 0, 0, 0] = 1.0
        if self.bias is not None:
            self.bias.data[...] = 0.0
        return self


def group_norm(x, groups, eps=1e-5, weight=None, bias=None):
    """Normalize each channel group to zero mean, unit variance.

    Statistics accumulate in 64-bit through the mean ops. Affine parameters
    broadcast over [1, C, 1, 1, 1].
    """
    n, c = x.shape[0], x.shape[1]
    if c % groups != 0:
        raise ContractError(f"channels {c} not divisible by groups {groups}")
    xr = ad.reshape(x, (n, groups, -1))
    mu = ad.mean(xr, axis=2, keepdims=True)
    xc = xr - mu
    var = ad.mean(xc * xc, axis=2, keepdims=True)
    y = xc / ad.sqrt(var + eps)
    y = ad.reshape(y, x.shape)
    if weight is not None:
        y = y * ad.reshape(weight, (1, c, 1, 1, 1))
    if bias is not None:
        y = y + ad.reshape(bias, (1, c, 1, 1, 1))
    return y


class GroupNorm(Module):
    def __init__(self, channels, groups=None, eps=1e-5):
        super().__init__()
        self.groups = groups if groups is not None else math.gcd(channels, 8)
        self.eps = eps
        self.channels = channels
        self.weight = param(np.ones(channels))
        self.bias = param(np.zeros(channels))

    def __call__(self, x):
        return group_norm(x, self.groups, self.eps, self.weight, self.bias)


class Linear(Module):
    def __init__(self, cin, cout, rng=None):
        super().__init__()
        gen = rng if rng is not None else np.random.default_rng(0)
        self.weight = param(gen.normal(0.0, math.sqrt(1.0 / cin), size=(cin, cout)))
        self.bias = param(np.zeros(cout))

    def __call__(self, x):
        return ad.matmul(x, self.weight) + ad.reshape(self.bias, (1, -1))


class Adam:
    """First-order adaptive optimizer with bias-corrected moments."""

    def __init__(self, named_params: dict, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.named = dict(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.named.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.named.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.named.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grads(self) -> None:
        for p in self.named.values():
            p.grad = None

    def state(self) -> dict:
        """Moment buffers plus step counter, keyed for checkpointing."""
        out = {"adam/t": np.array([float(self.t)], dtype=np.float32)}
        for k in self.named:
            out[f"adam/m/{k}"] = self.m[k]
            out[f"adam/v/{k}"] = self.v[k]
        return out

    def load_state(self, state: dict) -> None:
        self.t = int(round(float(np.asarray(state["adam/t"])[0])))
        for k in self.named:
            self.m[k] = np.asarray(state[f"adam/m/{k}"]).astype(np.float32).copy()
            self.v[k] = np.asarray(state[f"adam/v/{k}"]).astype(np.float32).copy()
