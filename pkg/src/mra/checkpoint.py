"""Binary checkpoint serialization.

Layout: magic ``MRACKPT1``, a u32-length-prefixed UTF-8 JSON metadata
document, then one record per tensor: u32 name length, name bytes, u32 rank,
u32 dims, raw little-endian float32 values. Round-tripping a file reproduces
it byte-exactly.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"MRACKPT1"


class CheckpointError(IOError):
    pass


def save_checkpoint(path: str, tensors: dict[str, np.ndarray],
                    metadata: dict) -> None:
    blob = bytearray()
    blob += MAGIC
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(meta))
    blob += meta
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        blob += struct.pack("<I", len(nb))
        blob += nb
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)),
                               prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    off = 8
    (meta_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    metadata = json.loads(blob[off:off + meta_len].decode("utf-8"))
    off += meta_len
    tensors: dict[str, np.ndarray] = {}
    while off < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        off += 4 * count
        tensors[name] = arr.reshape(dims).copy()
    return metadata, tensors
