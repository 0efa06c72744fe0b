"""Binary tensor records and checkpoint files.

Tensor record::

    b"IFTN" | u32 version=1 | u32 ndim | ndim x u64 extents | float32 payload

All integers and floats are little-endian; the payload is row-major.

Checkpoint::

    u32 count | count x (u16 name length | utf-8 name | tensor record)
"""
from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"IFTN"
VERSION = 1


class TensorFormatError(ValueError):
    """Malformed tensor or checkpoint bytes; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    start = f.tell()
    buf = f.read(n)
    if len(buf) != n:
        raise TensorFormatError(f"truncated {what}: wanted {n} bytes, got {len(buf)}", start)
    return buf


def write_tensor(f: BinaryIO, array) -> None:
    a = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    if a.ndim == 0:
        a = a.reshape(1)
    f.write(MAGIC)
    f.write(struct.pack("<II", VERSION, a.ndim))
    f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    f.write(a.tobytes(order="C"))


def read_tensor(f: BinaryIO) -> np.ndarray:
    start = f.tell()
    magic = _read_exact(f, 4, "magic")
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}", start)
    pos = f.tell()
    version, ndim = struct.unpack("<II", _read_exact(f, 8, "header"))
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}", pos)
    if ndim == 0 or ndim > 32:
        raise TensorFormatError(f"implausible ndim {ndim}", pos + 4)
    shape = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim, "extents"))
    count = int(np.prod(shape, dtype=np.int64))
    payload = _read_exact(f, 4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)


def save_tensor(path, array) -> None:
    with open(path, "wb") as f:
        write_tensor(f, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        out = read_tensor(f)
        if f.read(1):
            raise TensorFormatError("trailing bytes after tensor record", f.tell() - 1)
    return out


def tensor_bytes(array) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, object] | None = None) -> None:
    """Write named tensors; ``meta`` goes to a ``<path>.meta`` key=value sidecar."""
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(tensors)))
        for name, value in tensors.items():
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ValueError(f"parameter name too long: {name[:40]}...")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            write_tensor(f, value)
    if meta is not None:
        write_kv(str(path) + ".meta", meta)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        (count,) = struct.unpack("<I", _read_exact(f, 4, "count"))
        for _ in range(count):
            (n,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            pos = f.tell()
            try:
                name = _read_exact(f, n, "name").decode("utf-8")
            except UnicodeDecodeError:
                raise TensorFormatError("name is not valid utf-8", pos) from None
            tensors[name] = read_tensor(f)
    meta_path = str(path) + ".meta"
    meta = read_kv(meta_path) if os.path.exists(meta_path) else {}
    return tensors, meta


def write_kv(path, values: Mapping[str, object]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for k, v in values.items():
            f.write(f"{k}={format_value(v)}\n")


def read_kv(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as f:
        return parse_kv(f.read())


def parse_kv(text: str) -> dict[str, str]:
    """Parse the flat ``key=value`` dialect (``#`` starts a comment line)."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def format_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)
