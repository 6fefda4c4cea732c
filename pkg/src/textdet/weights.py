"""Binary weight files.

Layout, all integers unsigned 32-bit little-endian::

    b"SSTD" | version | tensor count |
    repeated: name length | name (utf-8) | d0 d1 d2 d3 | float32 LE data

Tensors of rank below four are padded with trailing unit dimensions and
restored to their saved rank when ``load_weights`` is given a shape template.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

__all__ = ["MAGIC", "FORMAT_VERSION", "WeightFileError", "UnsupportedVersionError", "save_weights",
           "load_weights", "encode_weights", "decode_weights"]

MAGIC = b"SSTD"
FORMAT_VERSION = 1


class WeightFileError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class UnsupportedVersionError(WeightFileError):
    pass


def encode_weights(arrays: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.ndim > 4:
            raise ValueError(f"{name}: rank {arr.ndim} exceeds 4")
        dims = tuple(arr.shape) + (1,) * (4 - arr.ndim)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<4I", *dims))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_weights(buf: bytes) -> dict[str, np.ndarray]:
    """Parse a whole buffer; nothing is returned unless every tensor decodes."""
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise WeightFileError(f"truncated file while reading {what}", pos)
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise WeightFileError("bad magic, not a weight file", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version} (expected {FORMAT_VERSION})", 4)
    out: dict[str, np.ndarray] = {}
    for k in range(count):
        start = pos
        (n,) = struct.unpack("<I", take(4, f"name length of tensor {k}"))
        try:
            name = take(n, f"name of tensor {k}").decode("utf-8")
        except UnicodeDecodeError:
            raise WeightFileError(f"tensor {k} name is not utf-8", start + 4) from None
        dims = struct.unpack("<4I", take(16, f"dims of {name}"))
        if 0 in dims:
            raise WeightFileError(f"{name}: zero dimension", pos - 16)
        size = int(np.prod(dims))
        data = np.frombuffer(take(4 * size, f"data of {name}"), dtype="<f4").astype(np.float32).reshape(dims)
        if name in out:
            raise WeightFileError(f"duplicate tensor name {name!r}", start)
        out[name] = data
    if pos != len(buf):
        raise WeightFileError(f"{len(buf) - pos} trailing bytes after the last tensor", pos)
    return out


def save_weights(params: Mapping, path) -> None:
    arrays = {k: (v.data if hasattr(v, "data") and not isinstance(v, np.ndarray) else v) for k, v in params.items()}
    Path(path).write_bytes(encode_weights(arrays))


def load_weights(path, template: Mapping | None = None):
    """Read a weight file into :class:`~textdet.detector.ModelParams`.

    With ``template`` (any name -> shaped mapping) each tensor is reshaped to
    the template's shape and missing names are an error.
    """
    from .detector import ModelParams

    arrays = decode_weights(Path(path).read_bytes())
    if template is not None:
        for name, ref in template.items():
            if name not in arrays:
                raise KeyError(f"weight file lacks tensor {name!r}")
            shape = tuple(ref.shape)
            if arrays[name].size != int(np.prod(shape)):
                raise ValueError(f"{name}: file holds {arrays[name].shape}, expected {shape}")
            arrays[name] = arrays[name].reshape(shape)
    return ModelParams.from_arrays(arrays)
