"""Self-describing binary container for named parameter tensors.

Layout (all integers little-endian uint32 unless noted):

    magic b"GMCK" | version | precision tag (4 or 8 bytes per value) | count
    then per record: name length | utf-8 name | ndim | dims... | raw values

Raw values are little-endian IEEE floats, so round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .diffengine import Tensor

MAGIC = b"GMCK"
VERSION = 1

_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: Mapping[str, Tensor | np.ndarray]) -> None:
    """Write every named tensor. All entries must share one precision."""
    arrays: dict[str, np.ndarray] = {}
    itemsizes = set()
    for name, p in params.items():
        arr = p.values if isinstance(p, Tensor) else np.asarray(p)
        if arr.dtype.itemsize not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name}")
        arrays[name] = arr
        itemsizes.add(arr.dtype.itemsize)
    if len(itemsizes) > 1:
        raise CheckpointError(f"mixed precisions in one checkpoint: {sorted(itemsizes)}")
    precision = itemsizes.pop() if itemsizes else 4

    chunks = [MAGIC, struct.pack("<III", VERSION, precision, len(arrays))]
    for name, arr in arrays.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[precision]).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], int]:
    """Read back (name -> array, precision tag). Bit-exact inverse of save."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError(f"corrupted checkpoint header in {path}: bad magic")
    version, precision, count = struct.unpack_from("<III", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if precision not in _DTYPES:
        raise CheckpointError(f"unsupported precision tag {precision} in version {version} file")
    dtype = _DTYPES[precision]
    out: dict[str, np.ndarray] = {}
    offset = 16
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", data, offset)
            offset += 4
            name = data[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<I", data, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}I", data, offset)
            offset += 4 * ndim
            nbytes = int(np.prod(shape, dtype=np.int64)) * precision if ndim else precision
            raw = data[offset:offset + nbytes]
            if len(raw) != nbytes:
                raise CheckpointError(f"truncated record for tensor {name}")
            offset += nbytes
            out[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    except struct.error as exc:
        raise CheckpointError(f"corrupted checkpoint body in {path}: {exc}") from exc
    return out, precision


def restore_into(params: Mapping[str, Tensor], arrays: Mapping[str, np.ndarray]) -> None:
    """Load arrays into an existing parameter set; shapes must match exactly."""
    for name, p in params.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing tensor {name}")
        arr = arrays[name]
        if tuple(arr.shape) != tuple(p.values.shape):
            raise CheckpointError(
                f"shape mismatch for tensor {name}: checkpoint {arr.shape} vs model {p.values.shape}")
        np.copyto(p.values, arr.astype(p.values.dtype, copy=False))
