"""Binary checkpoint container.

Layout (little-endian throughout):

    magic  b"NARF"
    u32    format version (currently 1)
    u16    digest length, then digest bytes (utf-8 config digest)
    u32    record count
    per record:
        u16  name length, then name bytes (utf-8)
        u8   dtype tag (0=float32, 1=float64, 2=int64)
        u8   ndim, then ndim * u32 dims
        raw  values, C order

Loading verifies the stored digest against the expected one, so a
checkpoint can never be silently applied to a differently-configured model.
Values round-trip bit-exactly at their stored precision.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"NARF"
VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], digest: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    digest_b = digest.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<H", len(digest_b)))
        fh.write(digest_b)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _DTYPE_TAGS:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path, expected_digest: str | None = None) -> tuple[dict[str, np.ndarray], str]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (dlen,) = struct.unpack("<H", fh.read(2))
        digest = fh.read(dlen).decode("utf-8")
        if expected_digest is not None and digest != expected_digest:
            raise CheckpointError(
                f"{path}: config digest mismatch (checkpoint {digest[:12]}.., expected {expected_digest[:12]}..)"
            )
        (count,) = struct.unpack("<I", fh.read(4))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            tag, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            dtype = _TAG_DTYPES[tag]
            n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            buf = fh.read(n_bytes)
            arrays[name] = np.frombuffer(buf, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
    return arrays, digest
