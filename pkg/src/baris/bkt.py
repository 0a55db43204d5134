"""BKT1 binary tensor files and JSON-manifest checkpoints.

Layout: b"BKT1", u8 dtype code (0=f32, 1=f64), u8 rank, rank x u32 LE dims,
then the row-major little-endian payload.
"""

from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np

MAGIC = b"BKT1"
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    head = MAGIC + struct.pack("<BB", _CODES[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dims = struct.unpack_from(f"<{rank}I", buf, 6)
    off = 6 + 4 * rank
    dt = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - off != count * dt.itemsize:
        raise FormatError(f"payload is {len(buf) - off} bytes, expected {count * dt.itemsize}")
    return np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(dims).astype(dt.newbyteorder("="))


def save(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode(arr))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def _fname(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name) + ".bkt"


def save_checkpoint(directory, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write one BKT1 file per tensor plus ``manifest.json`` (name -> file)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in sorted(tensors):
        fn = _fname(name)
        if fn in files.values():
            raise FormatError(f"file name collision for tensor {name!r}")
        save(d / fn, tensors[name])
        files[name] = fn
    manifest = {"format": "BKT1", "tensors": files}
    if meta:
        manifest["meta"] = meta
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    return {name: load(d / fn) for name, fn in manifest["tensors"].items()}
