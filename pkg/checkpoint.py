"""Versioned binary checkpoint format shared by the adapter, codec and denoiser.

Layout (all integers little-endian):

    magic      8 bytes   b"SERSTCKP"
    version    uint32    FORMAT_VERSION
    meta_len   uint32    length of the UTF-8 JSON metadata block
    meta       meta_len  JSON object, keys sorted
    count      uint32    number of tensors
    per tensor, in sorted name order:
        name_len  uint16, name (UTF-8)
        ndim      uint8,  dims uint32 x ndim
        payload   float64 x prod(dims), row-major
"""
import json
import logging
import os
import struct

import numpy as np

from errors import InputError

logger = logging.getLogger(__name__)

MAGIC = b"SERSTCKP"
FORMAT_VERSION = 1


def save_checkpoint(path, tensors, meta=None):
    """Write ``tensors`` (name -> array) and ``meta`` to ``path``."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            array = np.ascontiguousarray(tensors[name], dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", array.ndim))
            f.write(struct.pack(f"<{array.ndim}I", *array.shape))
            f.write(array.tobytes())
    logger.debug("wrote checkpoint %s (%d tensors)", path, len(tensors))


def _read_exact(f, n, path):
    data = f.read(n)
    if len(data) != n:
        raise InputError(f"checkpoint {path} is truncated")
    return data


def load_checkpoint(path):
    """Return (tensors, meta) from a file written by ``save_checkpoint``."""
    try:
        f = open(path, "rb")
    except OSError as e:
        raise InputError(f"cannot open checkpoint {path}: {e}") from e
    with f:
        if _read_exact(f, len(MAGIC), path) != MAGIC:
            raise InputError(f"{path} is not a serst checkpoint")
        version, meta_len = struct.unpack("<II", _read_exact(f, 8, path))
        if version != FORMAT_VERSION:
            raise InputError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(_read_exact(f, meta_len, path).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(f, 4, path))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, path))
            name = _read_exact(f, name_len, path).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, path))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, path))
            n = int(np.prod(shape, dtype=np.int64))
            payload = np.frombuffer(_read_exact(f, 8 * n, path), dtype="<f8")
            tensors[name] = payload.reshape(shape).astype(np.float64)
    return tensors, meta


def split_prefix(tensors, prefix):
    """Select the tensors under ``prefix.`` with the prefix stripped."""
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}


def join_prefix(prefix, tensors):
    return {f"{prefix}.{k}": v for k, v in tensors.items()}
