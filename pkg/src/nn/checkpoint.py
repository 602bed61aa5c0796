"""GENZ tensor container.

Layout (all integers little-endian)::

    header   "<4sIIQQQ"  magic, version, num_tensors, table_size, payload_size, meta_size
    table    per tensor: "<H" name_len, name (utf-8), "<BB" dtype code + ndim,
             "<Q" * ndim dims, "<QQ" payload offset + nbytes
    payload  raw little-endian tensor bytes, tensors in name order
    meta     UTF-8 JSON object (sorted keys)
"""
import hashlib
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from src.errors import (
    BadMagicError,
    CheckpointError,
    OverlappingOffsetsError,
    TruncatedPayloadError,
    UnknownVersionError,
)

logger = logging.getLogger(__name__)

MAGIC = b"GENZ"
VERSION = 1
_HEADER = struct.Struct("<4sIIQQQ")

_DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i4"): 3,
    np.dtype("<i8"): 4,
    np.dtype("u1"): 5,
}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)


def atomic_write_bytes(path: Path | str, data: bytes) -> Path:
    """Write via a temp file in the target directory, fsync, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def _little_endian(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr).reshape(np.shape(arr))
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    if arr.dtype not in _DTYPE_CODES:
        raise CheckpointError(f"Unsupported tensor dtype {arr.dtype}")
    return arr


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    table = bytearray()
    payload = bytearray()
    for name in sorted(ckpt.tensors):
        arr = _little_endian(ckpt.tensors[name])
        encoded = name.encode("utf-8")
        table += struct.pack("<H", len(encoded)) + encoded
        table += struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
        table += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        table += struct.pack("<QQ", len(payload), arr.nbytes)
        payload += arr.tobytes()
    meta = json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header = _HEADER.pack(MAGIC, VERSION, len(ckpt.tensors), len(table), len(payload), len(meta))
    return header + bytes(table) + bytes(payload) + meta


def decode_checkpoint(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(raw) < _HEADER.size:
        if raw[:4] != MAGIC[:len(raw[:4])]:
            raise BadMagicError(f"{source}: not a GENZ container")
        raise TruncatedPayloadError(f"{source}: header truncated")
    magic, version, count, table_size, payload_size, meta_size = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise UnknownVersionError(f"{source}: unknown container version {version}")
    if len(raw) < _HEADER.size + table_size + payload_size + meta_size:
        raise TruncatedPayloadError(f"{source}: expected {_HEADER.size + table_size + payload_size + meta_size} bytes, got {len(raw)}")
    
    table = memoryview(raw)[_HEADER.size:_HEADER.size + table_size]
    payload_start = _HEADER.size + table_size
    entries = []
    pos = 0
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", table, pos)
            pos += 2
            name = bytes(table[pos:pos + name_len]).decode("utf-8")
            pos += name_len
            code, ndim = struct.unpack_from("<BB", table, pos)
            pos += 2
            dims = struct.unpack_from(f"<{ndim}Q", table, pos)
            pos += 8 * ndim
            offset, nbytes = struct.unpack_from("<QQ", table, pos)
            pos += 16
            entries.append((name, code, dims, offset, nbytes))
    except struct.error as e:
        raise TruncatedPayloadError(f"{source}: tensor table truncated") from e
    
    spans = sorted((offset, offset + nbytes, name) for name, _, _, offset, nbytes in entries)
    for (_, end, left), (start, _, right) in zip(spans, spans[1:]):
        if start < end:
            raise OverlappingOffsetsError(f"{source}: tensors {left!r} and {right!r} overlap")
            
    tensors: dict[str, np.ndarray] = {}
    for name, code, dims, offset, nbytes in entries:
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{source}: unknown dtype code {code} for {name!r}")
        dtype = _CODE_DTYPES[code]
        if int(np.prod(dims, dtype=np.int64)) * dtype.itemsize != nbytes:
            raise CheckpointError(f"{source}: {name!r} size does not match its shape {dims}")
        if offset + nbytes > payload_size:
            raise TruncatedPayloadError(f"{source}: {name!r} extends past the payload")
        start = payload_start + offset
        tensors[name] = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize, offset=start).reshape(dims).copy()
        
    meta_start = payload_start + payload_size
    try:
        metadata = json.loads(raw[meta_start:meta_start + meta_size].decode("utf-8")) if meta_size else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: metadata is not valid JSON") from e
    return Checkpoint(tensors, metadata)


def save_checkpoint(
    tensors: dict[str, np.ndarray],
    path: Path | str,
    metadata: Optional[dict[str, Any]] = None
) -> Path:
    data = encode_checkpoint(Checkpoint(dict(tensors), dict(metadata or {})))
    path = atomic_write_bytes(path, data)
    logger.info(f"Wrote checkpoint {path} ({len(tensors)} tensors, {len(data)} bytes)")
    return path


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path))


def file_sha256(path: Path | str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_model(model, path: Path | str, extra_metadata: Optional[dict[str, Any]] = None) -> Path:
    """Persist a ModelGraph; metadata carries the arch so ``load_model`` can rebuild it."""
    metadata = {"kind": "model", "arch": model.arch.model_dump(), "seed": model.arch.seed}
    metadata.update(extra_metadata or {})
    return save_checkpoint(model.state_dict(), path, metadata)


def load_model(path: Path | str):
    from .models import ArchConfig, build_model
    
    ckpt = load_checkpoint(path)
    if ckpt.metadata.get("kind") != "model" or "arch" not in ckpt.metadata:
        raise CheckpointError(f"{path} does not hold a model checkpoint")
    model = build_model(ArchConfig.model_validate(ckpt.metadata["arch"]))
    model.load_state_dict(ckpt.tensors)
    return model.eval()
