"""Single-file checkpoint container.

Layout: magic ``PRBC``, ``u32`` version, 32-byte config hash, ``u32`` tensor
count, then per tensor a ``u32``-length-prefixed UTF-8 name and a
``u64``-length-prefixed ``.prb`` blob.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .dataio import LoadError, decode_prb, encode_prb

MAGIC = b"PRBC"
VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], config_hash: bytes) -> None:
    if len(config_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    parts = [MAGIC, struct.pack("<I", VERSION), config_hash, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        blob = encode_prb(np.asarray(arr))
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<Q", len(blob)), blob]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[bytes, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise LoadError(f"{path}: not a checkpoint (magic {buf[:4]!r})")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise LoadError(f"{path}: unsupported checkpoint version {version}")
    config_hash = buf[8:40]
    (count,) = struct.unpack_from("<I", buf, 40)
    pos = 44
    tensors = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (m,) = struct.unpack_from("<Q", buf, pos)
            tensors[name] = decode_prb(buf[pos + 8:pos + 8 + m], source=f"{path}:{name}")
            pos += 8 + m
    except struct.error as exc:
        raise LoadError(f"{path}: truncated checkpoint") from exc
    if pos != len(buf):
        raise LoadError(f"{path}: {len(buf) - pos} trailing bytes")
    return config_hash, tensors
