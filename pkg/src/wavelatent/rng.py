"""Deterministic, splittable random streams.

Every stochastic draw in the package comes from a counter-based Philox
generator keyed by ``(seed, stream label...)``. A stream is fully determined
by its key, so training steps, phantom indices, and sampling runs can each
own an independent generator that is reproducible bit-for-bit regardless of
execution order. This is also what makes checkpoint resume exact: step k
always re-derives the same noise no matter how the process got there.
"""

from __future__ import annotations

import numpy as np

_MIX = 0x9E3779B97F4A7C15  # 64-bit golden-ratio increment


def _fold(label) -> int:
    """Hash a label (int or str) into a 64-bit word, stable across runs."""
    if isinstance(label, (int, np.integer)):
        h = int(label) & 0xFFFFFFFFFFFFFFFF
    elif isinstance(label, str):
        h = 0xCBF29CE484222325  # FNV-1a
        for b in label.encode("utf-8"):
            h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    else:
        raise TypeError(f"stream label must be int or str, got {type(label).__name__}")
    return h


def stream(seed: int, *labels) -> np.random.Generator:
    """Return the generator for stream ``(seed, *labels)``.

    Same arguments always yield an identical generator; distinct label
    tuples yield statistically independent Philox keys.
    """
    key = int(seed) & 0xFFFFFFFFFFFFFFFF
    for lab in labels:
        key = ((key ^ _fold(lab)) * _MIX + 0x632BE59BD9B4E019) & 0xFFFFFFFFFFFFFFFF
    return np.random.Generator(np.random.Philox(key=[int(seed) & 0xFFFFFFFFFFFFFFFF, key]))
