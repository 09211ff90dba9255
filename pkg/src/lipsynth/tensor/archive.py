"""Flat binary archive of named arrays, used for all checkpoints.

Layout (all integers little-endian):

    magic b"TARC" | u32 version | u32 meta_len | meta (UTF-8 JSON)
    u32 n_entries
    entry*: u16 name_len | name UTF-8 | u8 dtype_tag | u8 ndim
            u32 dim* | u64 nbytes | raw little-endian values

Entries are written sorted by name and the meta JSON uses sorted keys,
so identical contents serialize to identical bytes.  The meta block
carries the format version's sibling data: config hash, embedded config
text and any small JSON-safe state (e.g. RNG state).
"""

from __future__ import annotations

import json
import struct
from typing import Any

import numpy as np

from ..errors import DataError

MAGIC = b"TARC"
VERSION = 1

_DTYPE_TAGS = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i8"): 3,
    np.dtype("uint8"): 4,
}
_TAG_DTYPES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<i8"),
    4: np.dtype("uint8"),
}


def save_archive(path, entries: dict[str, np.ndarray], meta: dict[str, Any]) -> None:
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(entries)))
        for name in sorted(entries):
            arr = np.ascontiguousarray(entries[name])
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            tag = _DTYPE_TAGS.get(le.dtype)
            if tag is None:
                raise DataError(f"archive: unsupported dtype {arr.dtype} for entry {name!r}")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<BB", tag, le.ndim))
            for d in le.shape:
                fh.write(struct.pack("<I", d))
            payload = le.tobytes()
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def load_archive(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        if raw[:4] != MAGIC:
            raise DataError(f"archive: bad magic in {path}")
        off = 4
        version, meta_len = struct.unpack_from("<II", raw, off)
        off += 8
        if version != VERSION:
            raise DataError(f"archive: unsupported format version {version} in {path}")
        meta = json.loads(raw[off:off + meta_len].decode("utf-8"))
        off += meta_len
        (n_entries,) = struct.unpack_from("<I", raw, off)
        off += 4
        entries: dict[str, np.ndarray] = {}
        for _ in range(n_entries):
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + name_len].decode("utf-8")
            off += name_len
            tag, ndim = struct.unpack_from("<BB", raw, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", raw, off) if ndim else ()
            off += 4 * ndim
            (nbytes,) = struct.unpack_from("<Q", raw, off)
            off += 8
            dtype = _TAG_DTYPES.get(tag)
            if dtype is None:
                raise DataError(f"archive: unknown dtype tag {tag} for entry {name!r}")
            arr = np.frombuffer(raw[off:off + nbytes], dtype=dtype).reshape(shape)
            off += nbytes
            entries[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
        return entries, meta
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        raise DataError(f"archive: corrupt file {path}: {exc}") from exc
