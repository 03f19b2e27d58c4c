"""
Named-tensor container.

Layout (little-endian):
    magic      4 bytes  b"CFTN"
    version    u32
    index_len  u64
    index      index_len bytes of UTF-8 JSON: [{"name", "shape", "dtype", "offset", "axes"?}, ...]
    padding    zeros up to a multiple of 8
    payload    tensors back to back, each starting on an 8-byte boundary;
               offsets are relative to the payload start

dtype codes: 1 = float32, 2 = float64.
"""

import json
import logging
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ValidationError

from chanfuse.errors import DataError
from chanfuse.params import ParamStore

logger = logging.getLogger(__name__)

MAGIC = b"CFTN"
VERSION = 1
ALIGNMENT = 8
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_HEADER = struct.Struct("<4sIQ")


class TensorEntry(BaseModel):
    name: str
    shape: List[int]
    dtype: int
    offset: int
    axes: Optional[List[str]] = None

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) * DTYPE_CODES[self.dtype].itemsize


def _aligned(size: int) -> int:
    return -(-size // ALIGNMENT) * ALIGNMENT


def _dtype_code(array: np.ndarray) -> int:
    if array.dtype == np.float32:
        return 1
    if array.dtype == np.float64:
        return 2
    raise DataError(f"unsupported tensor dtype {array.dtype}; expected float32 or float64")


def encode_tensors(tensors: Mapping[str, np.ndarray], axes: Optional[Mapping[str, Sequence[str]]] = None) -> bytes:
    """Serialises `tensors` in insertion order."""
    axes = axes or {}
    entries = []
    chunks = []
    offset = 0
    for name, array in tensors.items():
        array = np.asarray(array)
        code = _dtype_code(array)
        data = np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes()
        entry = TensorEntry(name=name, shape=list(array.shape), dtype=code, offset=offset)
        if name in axes:
            if len(axes[name]) != array.ndim:
                raise DataError(f"{name}: {len(axes[name])} axis names for a {array.ndim}-d tensor")
            entry.axes = list(axes[name])
        entries.append(entry.model_dump(exclude_none=True))
        padded = _aligned(len(data))
        chunks.append(data + b"\0" * (padded - len(data)))
        offset += padded
    index = json.dumps(entries, separators=(",", ":")).encode("utf-8")
    head = _HEADER.pack(MAGIC, VERSION, len(index)) + index
    head += b"\0" * (_aligned(len(head)) - len(head))
    return head + b"".join(chunks)


def decode_tensors(blob: bytes, source: str = "<bytes>") -> Dict[str, np.ndarray]:
    if len(blob) < _HEADER.size:
        raise DataError(f"{source}: truncated tensor container")
    magic, version, index_len = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DataError(f"{source}: not a tensor container (magic {magic!r})")
    if version != VERSION:
        raise DataError(f"{source}: unsupported container version {version}")
    index_end = _HEADER.size + index_len
    if index_end > len(blob):
        raise DataError(f"{source}: truncated index")
    try:
        entries = [TensorEntry.model_validate(item) for item in json.loads(blob[_HEADER.size : index_end])]
    except (json.JSONDecodeError, UnicodeDecodeError, ValidationError, TypeError) as e:
        raise DataError(f"{source}: corrupt index: {e}") from e
    payload = _aligned(index_end)
    tensors: Dict[str, np.ndarray] = {}
    end = 0
    for entry in sorted(entries, key=lambda e: e.offset):
        if entry.dtype not in DTYPE_CODES:
            raise DataError(f"{source}: {entry.name}: unknown dtype code {entry.dtype}")
        if entry.offset < end or entry.offset % ALIGNMENT:
            raise DataError(f"{source}: {entry.name}: overlapping or misaligned offset {entry.offset}")
        start = payload + entry.offset
        end = entry.offset + entry.nbytes
        if payload + end > len(blob):
            raise DataError(f"{source}: {entry.name}: payload truncated")
        data = np.frombuffer(blob, dtype=DTYPE_CODES[entry.dtype], count=int(np.prod(entry.shape, dtype=np.int64)), offset=start)
        tensors[entry.name] = data.reshape(entry.shape).astype(np.float64 if entry.dtype == 2 else np.float32)
    return {entry.name: tensors[entry.name] for entry in entries}


def save_tensors(
    path: Union[str, Path],
    tensors: Mapping[str, np.ndarray],
    axes: Optional[Mapping[str, Sequence[str]]] = None,
) -> Path:
    """Writes a container atomically (temporary file in the same directory, then rename)."""
    path = Path(path)
    blob = encode_tensors(tensors, axes)
    tmp = None
    try:
        handle, tmp = tempfile.mkstemp(suffix=".cftn", dir=path.parent)
        with os.fdopen(handle, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except OSError as e:
        if tmp is not None and os.path.exists(tmp):
            os.unlink(tmp)
        raise DataError(f"cannot write {path}: {e}") from e
    logger.info("Wrote %d tensors to %s", len(tensors), path)
    return path


def load_tensors(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read tensor container {path}: {e}") from e
    return decode_tensors(blob, str(path))


def save_params(store: ParamStore, path: Union[str, Path], prefix: str = "") -> Path:
    return save_tensors(path, store.arrays(prefix))


def load_params(store: ParamStore, path: Union[str, Path], strict: bool = True) -> int:
    """Loads saved weights into `store`; returns how many tensors were copied."""
    return store.load_arrays(load_tensors(path), strict=strict)
