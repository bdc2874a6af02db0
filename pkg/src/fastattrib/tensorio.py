"""FATN tensor files and small hashing/JSON helpers used for persistence.

Layout: ``b"FATN"``, u32 version (1), u8 dtype (0 = f64), u32 ndim,
``ndim`` u64 dims, then the little-endian row-major payload.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FATN"
VERSION = 1
DTYPE_F64 = 0


class TensorFormatError(ValueError):
    pass


def tensor_bytes(arr) -> bytes:
    a = np.array(arr, dtype="<f8", order="C")
    head = MAGIC + struct.pack("<IBI", VERSION, DTYPE_F64, a.ndim)
    head += struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes(order="C")


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise TensorFormatError("bad magic")
    version, dtype, ndim = struct.unpack_from("<IBI", buf, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if dtype != DTYPE_F64:
        raise TensorFormatError(f"unsupported dtype tag {dtype}")
    off = 4 + struct.calcsize("<IBI")
    dims = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    count = int(np.prod(dims)) if ndim else 1
    payload = buf[off:]
    if len(payload) != 8 * count:
        raise TensorFormatError(f"payload has {len(payload)} bytes, expected {8 * count}")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(tensor_bytes(arr))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def save_tensors(directory, tensors: dict) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, arr in tensors.items():
        save_tensor(d / f"{name}.fatn", arr)


def load_tensors(directory, names) -> dict:
    d = Path(directory)
    return {name: load_tensor(d / f"{name}.fatn") for name in names}


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())


def sha256_bytes(*chunks: bytes) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c)
    return h.hexdigest()


def hash_arrays(*arrays) -> str:
    return sha256_bytes(*(tensor_bytes(a) for a in arrays))


def hash_path(path) -> str:
    """Hash a file, or every file under a directory in sorted relative order."""
    p = Path(path)
    h = hashlib.sha256()
    if p.is_dir():
        for f in sorted(x for x in p.rglob("*") if x.is_file()):
            h.update(str(f.relative_to(p)).encode())
            h.update(f.read_bytes())
    else:
        h.update(p.read_bytes())
    return h.hexdigest()
