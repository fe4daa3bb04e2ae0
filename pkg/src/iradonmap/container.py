"""IRDM1 binary tensor container.

A single tensor file is laid out as::

    b"IRDM1" | u32 rank | u32 dims[rank] | u8 dtype code | payload

with every integer and the payload little-endian and the payload in C
order. A named-tensor archive reuses the same magic but stores the
sentinel ``0xFFFFFFFF`` in the rank slot, followed by::

    u32 count | count * (u32 name_len | utf-8 name | tensor record)

where each tensor record is the single-tensor layout minus the magic.
Record order is preserved on read, so checkpoints are portable as long as
the writer's ordering is kept.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"IRDM1"
ARCHIVE_SENTINEL = 0xFFFFFFFF

DTYPE_CODES = {
    np.dtype("float32"): 0,
    np.dtype("float64"): 1,
    np.dtype("int32"): 2,
    np.dtype("int64"): 3,
    np.dtype("uint8"): 4,
    np.dtype("uint16"): 5,
    np.dtype("bool"): 6,
}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}


class ContainerError(ValueError):
    """Raised for malformed or unsupported IRDM1 content."""


def _write_record(buf, array: np.ndarray) -> None:
    array = np.asarray(array)
    dt = array.dtype.newbyteorder("=") if array.dtype.byteorder == ">" else array.dtype
    if np.dtype(dt.name) not in DTYPE_CODES:
        raise ContainerError(f"unsupported dtype {array.dtype}")
    code = DTYPE_CODES[np.dtype(dt.name)]
    buf.write(struct.pack("<I", array.ndim))
    buf.write(struct.pack(f"<{array.ndim}I", *array.shape))
    buf.write(struct.pack("<B", code))
    buf.write(np.ascontiguousarray(array, dtype=np.dtype(dt.name).newbyteorder("<")).tobytes())


def _read_exact(buf, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise ContainerError("truncated IRDM1 stream")
    return data


def _read_record(buf, rank: int | None = None) -> np.ndarray:
    if rank is None:
        (rank,) = struct.unpack("<I", _read_exact(buf, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(buf, 4 * rank))
    (code,) = struct.unpack("<B", _read_exact(buf, 1))
    if code not in CODE_DTYPES:
        raise ContainerError(f"unknown dtype code {code}")
    dt = CODE_DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    payload = _read_exact(buf, count * dt.itemsize)
    return np.frombuffer(payload, dtype=dt.newbyteorder("<")).astype(dt).reshape(dims)


def dumps_tensor(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    _write_record(buf, array)
    return buf.getvalue()


def dumps_archive(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", ARCHIVE_SENTINEL, len(tensors)))
    for name, array in tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        _write_record(buf, array)
    return buf.getvalue()


def loads(data: bytes) -> np.ndarray | dict[str, np.ndarray]:
    """Decode either a single tensor or an archive (ordered dict)."""
    buf = io.BytesIO(data)
    if _read_exact(buf, len(MAGIC)) != MAGIC:
        raise ContainerError("bad magic, not an IRDM1 file")
    (rank,) = struct.unpack("<I", _read_exact(buf, 4))
    if rank != ARCHIVE_SENTINEL:
        out = _read_record(buf, rank)
    else:
        (count,) = struct.unpack("<I", _read_exact(buf, 4))
        out = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", _read_exact(buf, 4))
            name = _read_exact(buf, n).decode("utf-8")
            out[name] = _read_record(buf)
    if buf.read(1):
        raise ContainerError("trailing bytes after IRDM1 content")
    return out


def save_tensor(path, array: np.ndarray) -> None:
    Path(path).write_bytes(dumps_tensor(array))


def load_tensor(path) -> np.ndarray:
    out = loads(Path(path).read_bytes())
    if isinstance(out, dict):
        raise ContainerError(f"{path} is an archive, expected a single tensor")
    return out


def save_archive(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps_archive(tensors))


def load_archive(path) -> dict[str, np.ndarray]:
    out = loads(Path(path).read_bytes())
    if not isinstance(out, dict):
        raise ContainerError(f"{path} holds a single tensor, expected an archive")
    return out


def encode_json(obj) -> np.ndarray:
    """Pack a JSON-serializable object as a uint8 tensor (for config echoes)."""
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def decode_json(array: np.ndarray):
    return json.loads(np.asarray(array, dtype=np.uint8).tobytes().decode("utf-8"))
