"""Binary checkpoint container.

Layout (little-endian)::

    b"EMMACKPT"  u16 version  u32 config_len  config (UTF-8)
    u32 tensor_count
    per tensor: u16 name_len  name  u8 dtype  u8 rank  u32 dims[rank]  payload
    32-byte SHA-256 of everything above

Tensor records are written in sorted name order so equal contents give
equal bytes.
"""

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DigestError, FormatError

MAGIC = b"EMMACKPT"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}
DIGEST_SIZE = 32


@dataclass(eq=False)
class Checkpoint:
    config_text: str
    tensors: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint) or self.config_text != other.config_text:
            return False
        if set(self.tensors) != set(other.tensors):
            return False
        return all(
            self.tensors[k].dtype == other.tensors[k].dtype and np.array_equal(self.tensors[k], other.tensors[k])
            for k in self.tensors
        )

    def subset(self, prefix):
        """Tensors under ``prefix`` with the prefix stripped."""
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def to_bytes(ckpt):
    cfg = ckpt.config_text.encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(cfg)), cfg, struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_CODES:
            raise FormatError(f"tensor {name}: unsupported dtype {arr.dtype}")
        key = name.encode("utf-8")
        parts.append(struct.pack(f"<H{len(key)}sBB", len(key), key, DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ckpt, path):
    data = to_bytes(ckpt)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def from_bytes(data):
    if data[: len(MAGIC)] != MAGIC:
        raise FormatError("bad magic, not a checkpoint", 0)
    limit = len(data) - DIGEST_SIZE
    pos = len(MAGIC)

    def take(size, what):
        nonlocal pos
        if pos + size > limit:
            raise FormatError(f"truncated while reading {what}", pos)
        chunk = data[pos:pos + size]
        pos += size
        return chunk

    def unpack(fmt, what):
        return struct.unpack(fmt, take(struct.calcsize(fmt), what))

    version, cfg_len = unpack("<HI", "header")
    if version != VERSION:
        raise FormatError(f"unknown checkpoint version {version}", len(MAGIC))
    cfg_at = pos
    try:
        config_text = take(cfg_len, "config").decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("config echo is not UTF-8", cfg_at) from None
    (count,) = unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        at = pos
        (name_len,) = unpack("<H", "name length")
        name = take(name_len, "name").decode("utf-8", errors="replace")
        code, rank = unpack("<BB", f"header of {name}")
        if code not in DTYPES:
            raise FormatError(f"tensor {name}: unknown dtype code {code}", at)
        dims = unpack(f"<{rank}I", f"dims of {name}")
        dt = DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(take(size, f"payload of {name}"), dtype=dt).reshape(dims).copy()
    if pos != limit:
        raise FormatError("unexpected bytes after last tensor", pos)
    if hashlib.sha256(data[:limit]).digest() != data[limit:]:
        raise DigestError("content digest mismatch", limit)
    return Checkpoint(config_text, tensors)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
