"""Binary named-array containers for checkpoints and adapter bundles.

Layout (all integers little-endian):

    magic           8 bytes, b"USATCKPT" or b"USATADPT"
    version         u32
    fingerprint     32 raw bytes (SHA-256 of the backbone parameters)
    entry_count     u32
    per entry:
        name_len    u32
        name        UTF-8 bytes
        dtype_code  u8    (0=float32, 1=float64, 2=int64, 3=uint8)
        rank        u32
        dims        rank x u64
        data        raw array bytes, C order

Entries are written sorted by name so identical payloads produce identical
files. Readers reject bad magic, unknown dtype codes, truncation, and
trailing bytes after the final entry.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ContainerError

CHECKPOINT_MAGIC = b"USATCKPT"
ADAPTER_MAGIC = b"USATADPT"
CONTAINER_VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("u1"): 3,
}
_CODE_DTYPES = {code: dt for dt, code in _DTYPE_CODES.items()}


def write_container(
    path: str | Path,
    magic: bytes,
    fingerprint: bytes,
    entries: dict[str, np.ndarray],
) -> None:
    """Serialize named arrays to `path` under the given magic and fingerprint."""
    if magic not in (CHECKPOINT_MAGIC, ADAPTER_MAGIC):
        raise ContainerError(f"unsupported container magic {magic!r}")
    if len(fingerprint) != 32:
        raise ContainerError("fingerprint must be exactly 32 bytes")
    chunks = [magic, struct.pack("<I", CONTAINER_VERSION), fingerprint,
              struct.pack("<I", len(entries))]
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name])
        if arr.dtype not in _DTYPE_CODES:
            # normalize the common cases before giving up
            if arr.dtype.kind == "f":
                arr = arr.astype("<f4") if arr.dtype.itemsize <= 4 else arr.astype("<f8")
            elif arr.dtype.kind in "iu" and arr.dtype != np.dtype("u1"):
                arr = arr.astype("<i8")
            else:
                raise ContainerError(f"entry {name!r} has unsupported dtype {arr.dtype}")
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<B", _DTYPE_CODES[arr.dtype]))
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ContainerError("container truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def read_container(
    path: str | Path,
    expected_magic: bytes | None = None,
) -> tuple[bytes, int, bytes, dict[str, np.ndarray]]:
    """Parse a container; returns (magic, version, fingerprint, entries)."""
    cur = _Cursor(Path(path).read_bytes())
    magic = cur.take(8)
    if magic not in (CHECKPOINT_MAGIC, ADAPTER_MAGIC):
        raise ContainerError(f"bad container magic {magic!r}")
    if expected_magic is not None and magic != expected_magic:
        raise ContainerError(
            f"expected magic {expected_magic!r} but file has {magic!r}")
    version = cur.u32()
    if version != CONTAINER_VERSION:
        raise ContainerError(f"unsupported container version {version}")
    fingerprint = cur.take(32)
    count = cur.u32()
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = cur.take(cur.u32()).decode("utf-8")
        code = cur.u8()
        if code not in _CODE_DTYPES:
            raise ContainerError(f"entry {name!r} has unknown dtype code {code}")
        dtype = _CODE_DTYPES[code]
        rank = cur.u32()
        dims = struct.unpack(f"<{rank}Q", cur.take(8 * rank)) if rank else ()
        n_items = 1
        for d in dims:
            n_items *= d
        raw = cur.take(n_items * dtype.itemsize)
        entries[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    if cur.pos != len(cur.buf):
        raise ContainerError("trailing bytes after final entry")
    return magic, version, fingerprint, entries


def compute_fingerprint(named_arrays: Iterable[tuple[str, np.ndarray]]) -> bytes:
    """SHA-256 over sorted (name, shape, float32 payload) of all parameters."""
    h = hashlib.sha256()
    for name, arr in sorted(named_arrays, key=lambda kv: kv[0]):
        a = np.ascontiguousarray(arr, dtype="<f4")
        h.update(name.encode("utf-8"))
        h.update(b"\x00")
        h.update(struct.pack("<I", a.ndim))
        if a.ndim:
            h.update(struct.pack(f"<{a.ndim}Q", *a.shape))
        h.update(a.tobytes(order="C"))
    return h.digest()
