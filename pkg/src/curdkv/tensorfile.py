"""CKV1 binary tensor files and cache directories.

Layout (all little-endian)::

    b"CKV1" | dtype u8 (1 = float32, 2 = float64) | ndim u8 | ndim x u64 dims | row-major payload

Zero-sized dimensions are rejected on both write and read.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .cache import KVCache

MAGIC = b"CKV1"
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
DTYPE_CODES = {"f4": 1, "float32": 1, "f8": 2, "float64": 2}


class TensorFileError(ValueError):
    """Malformed or unsupported CKV1 data."""


def dtype_code(dtype) -> int:
    if isinstance(dtype, int) and dtype in DTYPES:
        return dtype
    key = np.dtype(dtype).name if not isinstance(dtype, str) else dtype
    try:
        return DTYPE_CODES[key]
    except KeyError:
        raise TensorFileError(f"unsupported dtype {dtype!r}; CKV1 stores float32 or float64") from None


def encode(array, dtype="f8") -> bytes:
    code = dtype_code(dtype)
    arr = np.asarray(array)
    if arr.ndim > 255:
        raise TensorFileError(f"too many dimensions ({arr.ndim})")
    if arr.size == 0 or 0 in arr.shape:
        raise TensorFileError(f"CKV1 does not store empty tensors, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise TensorFileError("tensor contains NaN or Inf")
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def decode(buf: bytes) -> tuple:
    """Return ``(float64 array, dtype code)``; float32 payloads are promoted."""
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise TensorFileError("missing CKV1 magic")
    code, ndim = struct.unpack_from("<BB", buf, 4)
    if code not in DTYPES:
        raise TensorFileError(f"unknown dtype code {code}")
    head = 6 + 8 * ndim
    if len(buf) < head:
        raise TensorFileError("truncated CKV1 header")
    dims = struct.unpack_from(f"<{ndim}Q", buf, 6)
    if ndim == 0 or 0 in dims:
        raise TensorFileError(f"CKV1 tensor has an empty dimension: {dims}")
    expected = int(np.prod(dims, dtype=np.uint64)) * DTYPES[code].itemsize
    if len(buf) - head != expected:
        raise TensorFileError(f"payload is {len(buf) - head} bytes, dims {dims} need {expected}")
    arr = np.frombuffer(buf, dtype=DTYPES[code], offset=head).reshape(dims)
    return arr.astype(np.float64), code


def write_tensor(path, array, dtype="f8") -> None:
    Path(path).write_bytes(encode(array, dtype))


def read_tensor(path) -> tuple:
    return decode(Path(path).read_bytes())


def write_cache(directory, cache: KVCache, dtype="f8", manifest: dict = None) -> Path:
    """Write ``keys.ckv`` and ``values.ckv`` (shape ``(g, n, d)``) plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(directory / "keys.ckv", cache.keys, dtype)
    write_tensor(directory / "values.ckv", cache.values, dtype)
    g, n, d = cache.shape
    doc = {
        "format": "CKV1",
        "dtype": "f4" if dtype_code(dtype) == 1 else "f8",
        "groups": g,
        "tokens": n,
        "dim": d,
        "keys": "keys.ckv",
        "values": "values.ckv",
    }
    doc.update(manifest or {})
    (directory / "manifest.json").write_text(json.dumps(doc, indent=2) + "\n")
    return directory


def read_cache_files(keys_path, values_path) -> tuple:
    """Load a cache from two CKV1 files; returns ``(KVCache, dtype code)``."""
    keys, kcode = read_tensor(keys_path)
    values, vcode = read_tensor(values_path)
    if keys.ndim != 3:
        raise TensorFileError(f"{keys_path}: expected shape (g, n, d), got {keys.shape}")
    if values.shape != keys.shape:
        raise TensorFileError(f"{values_path}: expected shape {keys.shape} to match keys, got {values.shape}")
    if kcode != vcode:
        raise TensorFileError(f"keys and values use different dtypes ({kcode} vs {vcode})")
    return KVCache(keys, values), kcode


def read_cache(directory) -> tuple:
    """Load ``(KVCache, dtype code, manifest)`` from a directory written by :func:`write_cache`."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    cache, code = read_cache_files(
        directory / manifest.get("keys", "keys.ckv"), directory / manifest.get("values", "values.ckv")
    )
    info = {k: manifest[k] for k in ("kind", "seed", "planted") if k in manifest}
    return KVCache(cache.keys, cache.values, info=info), code, manifest
