"""Named-tensor checkpoint archives (WCK1).

Layout, all little-endian:

    bytes 0-3   magic "WCK1"
    u32         entry count
    per entry:  u16 name length, UTF-8 name, u8 ndims,
                ndims x u32 extents, float32 payload

Round trips are bit-exact; payloads are stored and restored as float32.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import CheckpointFormatError, ContractError

_MAGIC = b"WCK1"


def save_checkpoint(path, tensors: dict) -> None:
    """Write a name -> array mapping; arrays are cast to float32."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            data = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
            if data.ndim == 0:
                data = data.reshape(1)
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise ContractError(f"tensor name too long: {name[:40]}...")
            if data.ndim > 255:
                raise ContractError(f"tensor '{name}' has too many dimensions")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != _MAGIC:
        raise CheckpointFormatError(f"bad magic {raw[:4]!r}; expected 'WCK1'")
    if len(raw) < 8:
        raise CheckpointFormatError("archive cut short before entry count")
    (count,) = struct.unpack_from("<I", raw, 4)
    pos = 8
    out = {}
    for i in range(count):
        if pos + 2 > len(raw):
            raise CheckpointFormatError(f"entry {i}: truncated before name length")
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        if pos + nlen + 1 > len(raw):
            raise CheckpointFormatError(f"entry {i}: truncated inside name")
        try:
            name = raw[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError(f"entry {i}: name is not valid UTF-8")
        pos += nlen
        ndims = raw[pos]
        pos += 1
        if pos + 4 * ndims > len(raw):
            raise CheckpointFormatError(f"entry '{name}': truncated extents")
        shape = struct.unpack_from(f"<{ndims}I", raw, pos)
        pos += 4 * ndims
        n_elem = 1
        for e in shape:
            n_elem *= e
        nbytes = 4 * n_elem
        if pos + nbytes > len(raw):
            raise CheckpointFormatError(
                f"entry '{name}': payload truncated ({len(raw) - pos} of {nbytes} bytes)"
            )
        arr = np.frombuffer(raw[pos:pos + nbytes], dtype="<f4").reshape(shape).copy()
        pos += nbytes
        out[name] = arr
    if pos != len(raw):
        raise CheckpointFormatError(f"{len(raw) - pos} trailing bytes after last entry")
    return out
