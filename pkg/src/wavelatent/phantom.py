"""Procedural paired-phantom generator and volume file I/O.

Each phantom patient is a body ellipsoid containing a few organ ellipsoids
and a vertical stack of small bright-in-CT spheres standing in for a
spine. One shared geometry drives both modality intensity maps, so the
pseudo-MR and pseudo-CT are perfectly co-registered by construction, with
an integer label volume as ground truth:

    0 background, 1 soft tissue, 2 organ-a, 3 organ-b, 4 bone

Bone is rendered bright in CT (>= 0.6) and dark in MR (<= -0.2), with
margins wide enough that the additive noise (clipped at 3 sigma) cannot
break either bound. Everything is a pure function of (seed, patient index)
through counter-based streams, so regeneration is bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .autodiff import Tensor
from .errors import (
    BadMagicError,
    ContractError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from .rng import stream

LABEL_BACKGROUND, LABEL_SOFT, LABEL_ORGAN_A, LABEL_ORGAN_B, LABEL_BONE = range(5)
VOXEL_SPACING_MM = (2.0, 2.0, 2.0)
NOISE_SIGMA = 0.02
BIAS_AMPLITUDE = 0.15


@dataclass
class PhantomPair:
    """Co-registered pseudo-MR and pseudo-CT with shared labels."""

    patient_id: int
    mr: Tensor      # [1,1,D,H,W] in [-1,1]
    ct: Tensor      # [1,1,D,H,W] in [-1,1]
    labels: np.ndarray  # [D,H,W] uint8


def _ellipsoid_mask(shape, center, semi):
    grids = np.ogrid[: shape[0], : shape[1], : shape[2]]
    acc = np.zeros(shape)
    for g, c, a in zip(grids, center, semi):
        acc = acc + ((g - c) / a) ** 2
    return acc <= 1.0


def _geometry(rng, size: int) -> np.ndarray:
    """Label volume for one patient."""
    labels = np.zeros((size, size, size), dtype=np.uint8)
    body_semi = rng.uniform(0.38, 0.47, 3) * size
    body_center = size / 2 + rng.uniform(-0.04, 0.04, 3) * size
    labels[_ellipsoid_mask(labels.shape, body_center, body_semi)] = LABEL_SOFT

    n_organs = int(rng.integers(2, 5))
    for oi in range(n_organs):
        semi = rng.uniform(0.08, 0.18, 3) * size
        offset = rng.uniform(-0.55, 0.55, 3) * (body_semi - semi)
        mask = _ellipsoid_mask(labels.shape, body_center + offset, semi)
        mask &= labels == LABEL_SOFT
        labels[mask] = LABEL_ORGAN_A if oi % 2 == 0 else LABEL_ORGAN_B

    n_vert = int(rng.integers(3, 7))
    radius = rng.uniform(0.045, 0.07) * size
    spacing = 2.4 * radius
    back = body_center[1] + rng.uniform(0.35, 0.5) * body_semi[1]
    lateral = body_center[2] + rng.uniform(-0.05, 0.05) * size
    start = body_center[0] - spacing * (n_vert - 1) / 2
    for vi in range(n_vert):
        center = (start + vi * spacing, back, lateral)
        semi = (radius * rng.uniform(0.9, 1.1), radius, radius)
        mask = _ellipsoid_mask(labels.shape, center, semi)
        mask &= labels != LABEL_BACKGROUND
        labels[mask] = LABEL_BONE
    return labels


# per-tissue base intensity and jitter half-width, pre bias/noise
_CT_LEVELS = {
    LABEL_BACKGROUND: (-1.0, 0.0),
    LABEL_SOFT: (-0.05, 0.03),
    LABEL_ORGAN_A: (0.12, 0.03),
    LABEL_ORGAN_B: (-0.22, 0.03),
    LABEL_BONE: (0.78, 0.02),
}
_MR_LEVELS = {
    LABEL_BACKGROUND: (-1.0, 0.0),
    LABEL_SOFT: (0.25, 0.05),
    LABEL_ORGAN_A: (0.55, 0.05),
    LABEL_ORGAN_B: (-0.05, 0.04),
    LABEL_BONE: (-0.45, 0.03),
}


def _intensities(rng, labels):
    """Clean modality renders from a label volume (shared geometry)."""
    ct = np.empty(labels.shape, dtype=np.float32)
    mr = np.empty(labels.shape, dtype=np.float32)
    for lab in range(5):
        base, jit = _CT_LEVELS[lab]
        ct[labels == lab] = base + rng.uniform(-jit, jit)
        base, jit = _MR_LEVELS[lab]
        mr[labels == lab] = base + rng.uniform(-jit, jit)
    return mr, ct


def _bias_field(rng, shape):
    """Smooth multiplicative field 1 +- BIAS_AMPLITUDE from a random
    quadratic polynomial over normalized coordinates."""
    coords = [np.linspace(-1.0, 1.0, n) for n in shape]
    zz, yy, xx = np.meshgrid(*coords, indexing="ij")
    basis = [zz, yy, xx, zz * yy, zz * xx, yy * xx, zz ** 2, yy ** 2, xx ** 2]
    coeff = rng.uniform(-1.0, 1.0, len(basis))
    poly = sum(c * b for c, b in zip(coeff, basis))
    peak = np.abs(poly).max()
    if peak > 0:
        poly = poly / peak
    return (1.0 + BIAS_AMPLITUDE * poly).astype(np.float32)


def generate(seed: int, size: int, count: int) -> list:
    """Deterministically generate ``count`` phantom pairs of extent size^3."""
    if size not in (16, 32, 64):
        raise ContractError(f"phantom size must be one of 16, 32, 64, got {size}")
    pairs = []
    for idx in range(count):
        rng = stream(seed, "phantom", idx)
        labels = _geometry(rng, size)
        mr, ct = _intensities(rng, labels)
        mr = mr * _bias_field(rng, labels.shape)
        noise = np.clip(rng.standard_normal(labels.shape), -3.0, 3.0) * NOISE_SIGMA
        mr = np.clip(mr + noise.astype(np.float32), -1.0, 1.0)
        noise = np.clip(rng.standard_normal(labels.shape), -3.0, 3.0) * NOISE_SIGMA
        ct = np.clip(ct + noise.astype(np.float32), -1.0, 1.0)
        pairs.append(
            PhantomPair(
                patient_id=idx,
                mr=Tensor(mr[None, None]),
                ct=Tensor(ct[None, None]),
                labels=labels,
            )
        )
    return pairs


# ---------------------------------------------------------------------------
# WVL1 volume files
# ---------------------------------------------------------------------------

_MAGIC = b"WVL1"
_DTYPE_CODES = {1: np.float32, 2: np.uint8}


def write_volume(path, x, spacing=VOXEL_SPACING_MM) -> None:
    """Write a 3-D volume; float32 -> dtype code 1, uint8 labels -> code 2."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim != 3:
        raise ContractError(f"volume files hold 3-D arrays, got ndim {arr.ndim}")
    if any(e == 0 for e in arr.shape):
        raise ContractError(f"zero-sized extent in shape {tuple(arr.shape)}")
    if arr.dtype == np.uint8:
        code = 2
    else:
        code = 1
        arr = arr.astype("<f4")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<BBB", 1, code, 3))
        f.write(struct.pack("<3I", *arr.shape))
        f.write(struct.pack("<3f", *spacing))
        f.write(arr.tobytes())


def read_volume(path):
    """Read a WVL1 file; returns (array [D,H,W], spacing mm tuple)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != _MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}; expected 'WVL1'")
    if len(raw) < 7:
        raise TruncatedFileError("header cut short before version/dtype/ndims")
    version, code, ndims = struct.unpack_from("<BBB", raw, 4)
    if version != 1:
        raise UnsupportedVersionError(f"unsupported format version {version}")
    if code not in _DTYPE_CODES:
        raise UnsupportedVersionError(f"unknown dtype code {code}")
    if ndims != 3:
        raise UnsupportedVersionError(f"expected 3 dimensions, got {ndims}")
    need = 7 + 12 + 12
    if len(raw) < need:
        raise TruncatedFileError("header cut short before extents/spacing")
    extents = struct.unpack_from("<3I", raw, 7)
    spacing = struct.unpack_from("<3f", raw, 19)
    dtype = _DTYPE_CODES[code]
    payload = int(np.prod(extents)) * np.dtype(dtype).itemsize
    if len(raw) < need + payload:
        raise TruncatedFileError(
            f"payload truncated: need {payload} bytes, have {len(raw) - need}"
        )
    arr = np.frombuffer(raw[need:need + payload], dtype="<f4" if code == 1 else np.uint8)
    return arr.reshape(extents).copy(), spacing


# ---------------------------------------------------------------------------
# cropping and augmentation
# ---------------------------------------------------------------------------


def crop_and_normalize(x, target: int, rng=None):
    """Crop a cube of extent ``target`` (random with rng, centered without).

    Values are expected to be normalized already; out-of-range data is a
    contract violation, not silently rescaled.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    sp = arr.shape[-3:]
    if any(target > e for e in sp):
        raise ContractError(f"crop target {target} exceeds extents {sp}")
    if float(arr.min()) < -1.0 - 1e-6 or float(arr.max()) > 1.0 + 1e-6:
        raise ContractError("volume values outside [-1, 1]; normalize before cropping")
    if rng is None:
        offs = [(e - target) // 2 for e in sp]
    else:
        offs = [int(rng.integers(0, e - target + 1)) for e in sp]
    sl = (...,) + tuple(slice(o, o + target) for o in offs)
    out = arr[sl]
    return Tensor(out) if isinstance(x, Tensor) else out


def augment(pair: PhantomPair, rng, flip_prob=0.5, max_rotate_deg=5.0,
            max_scale=0.05, max_brightness=0.05) -> PhantomPair:
    """Jointly transform mr/ct/labels; brightness is per-modality.

    The same flip set and affine map apply to all three volumes (labels
    resampled nearest-neighbor), so geometry stays shared. Zero amplitudes
    reproduce the input exactly.
    """
    mr = pair.mr.data[0, 0].copy()
    ct = pair.ct.data[0, 0].copy()
    labels = pair.labels.copy()

    flips = rng.random(3) < flip_prob
    axes = tuple(i for i, f in enumerate(flips) if f)
    if axes:
        mr = np.flip(mr, axes).copy()
        ct = np.flip(ct, axes).copy()
        labels = np.flip(labels, axes).copy()

    angles = rng.uniform(-max_rotate_deg, max_rotate_deg, 3)
    scale = 1.0 + rng.uniform(-max_scale, max_scale)
    if np.any(angles != 0.0) or scale != 1.0:
        mat = _rotation_matrix(np.deg2rad(angles)) * scale
        center = (np.asarray(mr.shape) - 1) / 2.0
        offset = center - mat @ center
        mr = ndimage.affine_transform(mr, mat, offset=offset, order=1, mode="nearest")
        ct = ndimage.affine_transform(ct, mat, offset=offset, order=1, mode="nearest")
        labels = ndimage.affine_transform(labels, mat, offset=offset, order=0,
                                          mode="nearest")

    out = []
    for vol in (mr, ct):
        gain = 1.0 + rng.uniform(-max_brightness, max_brightness)
        shift = rng.uniform(-max_brightness, max_brightness)
        if gain != 1.0 or shift != 0.0:
            vol = np.clip(vol * gain + shift, -1.0, 1.0)
        out.append(vol.astype(np.float32))

    return PhantomPair(
        patient_id=pair.patient_id,
        mr=Tensor(out[0][None, None]),
        ct=Tensor(out[1][None, None]),
        labels=labels.astype(np.uint8),
    )


def _rotation_matrix(radians):
    rz, ry, rx = radians
    cz, sz = np.cos(rz), np.sin(rz)
    cy, sy = np.cos(ry), np.sin(ry)
    cx, sx = np.cos(rx), np.sin(rx)
    m0 = np.array([[1, 0, 0], [0, cz, -sz], [0, sz, cz]])
    m1 = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    m2 = np.array([[cx, -sx, 0], [sx, cx, 0], [0, 0, 1]])
    return m0 @ m1 @ m2


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------


def save_dataset(pairs, out_dir, seed=None, size=None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for p in pairs:
        tag = f"p{p.patient_id:04d}"
        write_volume(os.path.join(out_dir, f"{tag}_mr.wvl"), p.mr.data[0, 0])
        write_volume(os.path.join(out_dir, f"{tag}_ct.wvl"), p.ct.data[0, 0])
        write_volume(os.path.join(out_dir, f"{tag}_labels.wvl"), p.labels)
    manifest = {
        "count": len(pairs),
        "ids": [p.patient_id for p in pairs],
        "seed": seed,
        "size": size,
        "spacing_mm": list(VOXEL_SPACING_MM),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)


def load_dataset(data_dir) -> list:
    with open(os.path.join(data_dir, "manifest.json")) as f:
        manifest = json.load(f)
    pairs = []
    for pid in manifest["ids"]:
        tag = f"p{pid:04d}"
        mr, _ = read_volume(os.path.join(data_dir, f"{tag}_mr.wvl"))
        ct, _ = read_volume(os.path.join(data_dir, f"{tag}_ct.wvl"))
        labels, _ = read_volume(os.path.join(data_dir, f"{tag}_labels.wvl"))
        pairs.append(
            PhantomPair(
                patient_id=pid,
                mr=Tensor(mr[None, None]),
                ct=Tensor(ct[None, None]),
                labels=labels.astype(np.uint8),
            )
        )
    return pairs
