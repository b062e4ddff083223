"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic            12 bytes  b"TEXGRAPHCKPT"
    version          u32
    epoch            u64
    config length    u32, then UTF-8 canonical config text
    rng length       u32, then UTF-8 canonical JSON of the RNG state
    param count      u32, then records
    buffer count     u32, then records (optimizer momentum buffers)
    checksum         32 bytes, SHA-256 of everything before it

A record is: name length u32, name UTF-8, rank u32, one u32 extent per
axis, then raw little-endian float64 data.  Records are written sorted
by name so identical states produce identical bytes.  Loading verifies
the checksum before anything is parsed, so truncated or corrupted files
are rejected without touching caller state.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ChecksumError, VersionMismatchError

__all__ = ["CheckpointData", "save_checkpoint", "load_checkpoint", "FORMAT_VERSION"]

MAGIC = b"TEXGRAPHCKPT"
FORMAT_VERSION = 1


@dataclass
class CheckpointData:
    version: int
    epoch: int
    config_text: str
    rng_state: dict
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _pack_section(arrays: dict[str, np.ndarray]) -> bytes:
    out = struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        out += _pack_record(name, np.asarray(arrays[name]))
    return out


def save_checkpoint(
    path,
    config_text: str,
    params: dict,
    buffers: dict[str, np.ndarray],
    epoch: int,
    rng_state: dict,
    version: int = FORMAT_VERSION,
) -> None:
    """Write atomically (temp file + rename)."""
    cfg_b = config_text.encode("utf-8")
    rng_b = json.dumps(rng_state, sort_keys=True, default=int).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", version, epoch)
    body += struct.pack("<I", len(cfg_b)) + cfg_b
    body += struct.pack("<I", len(rng_b)) + rng_b
    body += _pack_section({n: getattr(p, "data", p) for n, p in params.items()})
    body += _pack_section(buffers)
    body += hashlib.sha256(body).digest()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(body)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ChecksumError("checkpoint ends prematurely inside a record")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def _read_section(r: _Reader) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape)
        out[name] = data.astype(np.float64).copy()
    return out


def load_checkpoint(path) -> CheckpointData:
    """Read and fully validate a checkpoint; never partially applies state."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 32:
        raise ChecksumError(f"checkpoint {path} is truncated ({len(blob)} bytes)")
    body, stored = blob[:-32], blob[-32:]
    digest = hashlib.sha256(body).digest()
    if digest != stored:
        raise ChecksumError(f"checkpoint {path} failed its checksum")
    r = _Reader(body)
    if r.take(len(MAGIC)) != MAGIC:
        raise ChecksumError(f"checkpoint {path} has a bad magic header")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"checkpoint {path} has format version {version}, this build reads {FORMAT_VERSION}"
        )
    epoch = r.u64()
    config_text = r.take(r.u32()).decode("utf-8")
    rng_state = json.loads(r.take(r.u32()).decode("utf-8"))
    params = _read_section(r)
    buffers = _read_section(r)
    return CheckpointData(version, epoch, config_text, rng_state, params, buffers)
