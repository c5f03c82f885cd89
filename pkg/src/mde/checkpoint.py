"""Binary tensor archive used for checkpoints and feature-extractor weights.

Layout, little-endian throughout::

    b"MDE1" | version u32 | record count u32
    record*: name length u32 | name utf-8 | dtype tag u8 | ndim u32 | dims u64*ndim | payload
    rng-state length u32 | rng-state JSON utf-8 (may be empty)
    step u64
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MDE1"
VERSION = 1
DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2, np.dtype("<i8"): 3}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


def write_archive(path, records: Mapping[str, np.ndarray], rng_state: dict | None = None,
                  step: int = 0) -> Path:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if np.dtype(dt) not in DTYPE_TAGS:
            raise CheckpointError(f"record {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<BI", DTYPE_TAGS[np.dtype(dt)], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    state = json.dumps(rng_state, sort_keys=True).encode() if rng_state is not None else b""
    chunks.append(struct.pack("<I", len(state)) + state)
    chunks.append(struct.pack("<Q", step))
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated archive while reading {what} at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_archive(path) -> tuple[dict[str, np.ndarray], dict | None, int]:
    """Return ``(records, rng_state, step)``; raises :class:`CheckpointError` on any defect."""
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an MDE1 archive")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    records: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = r.unpack("<I", f"record {i} name length")
        try:
            name = r.take(nlen, f"record {i} name").decode()
        except UnicodeDecodeError as e:
            raise CheckpointError(f"record {i}: name is not utf-8") from e
        tag, ndim = r.unpack("<BI", f"record {name!r} header")
        if tag not in TAG_DTYPES:
            raise CheckpointError(f"record {name!r}: unknown dtype tag {tag}")
        if ndim > 16:
            raise CheckpointError(f"record {name!r}: implausible rank {ndim}")
        dims = r.unpack(f"<{ndim}Q", f"record {name!r} dims")
        dtype = TAG_DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.uint64)) * dtype.itemsize
        data = r.take(nbytes, f"record {name!r} payload")
        records[name] = np.frombuffer(data, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    (slen,) = r.unpack("<I", "rng state length")
    raw_state = r.take(slen, "rng state")
    try:
        rng_state = json.loads(raw_state) if slen else None
    except (ValueError, UnicodeDecodeError) as e:
        raise CheckpointError("rng state is not valid JSON") from e
    (step,) = r.unpack("<Q", "step")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after the step field")
    return records, rng_state, int(step)


def encode_json(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode(), dtype=np.uint8).copy()


def decode_json(arr: np.ndarray):
    return json.loads(arr.tobytes().decode())
