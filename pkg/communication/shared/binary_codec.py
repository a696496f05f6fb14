"""Little-endian binary formats: the PKM1 checkpoint and the dataset fixture.

Checkpoint layout::

    b"PKM1" | u32 version | u32 n | n bytes of UTF-8 JSON config
    u32 has_memory
    [has_memory] dims "<8I f": d_in d_q d_v n1 n2 k h distance_tag alpha
                 per head: K1 (n1 x half) f32, K2 (n2 x half) f32
                 values (n1*n2 x d_v) f32
    u32 segment count, then per segment:
        u16 name length | name | u8 dtype tag | u8 ndim | ndim x u32 | data

Dataset fixture layout::

    b"PKMD" | u32 version | u32 N | u32 d | u32 m | u64 seed
    N*d f32 rows | N u16 labels
"""
import json
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from pkm_errors import CheckpointError

CHECKPOINT_MAGIC = b"PKM1"
CHECKPOINT_VERSION = 1
DATASET_MAGIC = b"PKMD"
DATASET_VERSION = 1

DISTANCE_TAGS = {"dot": 0, "cosine": 1}
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<i8")}
DIMS = struct.Struct("<8If")


@dataclass
class CheckpointData:
    version: int
    config: dict
    dims: dict = None
    keys1: np.ndarray = None
    keys2: np.ndarray = None
    values: np.ndarray = None
    tensors: dict = field(default_factory=dict)


def _dtype_tag(array):
    return 1 if np.issubdtype(array.dtype, np.integer) else 0


def _encode_segment(name, array):
    array = np.asarray(array)
    tag = _dtype_tag(array)
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", tag, array.ndim)
    head += struct.pack(f"<{array.ndim}I", *array.shape)
    return head + np.ascontiguousarray(array, dtype=DTYPE_TAGS[tag]).tobytes()


def encode_checkpoint(config, tensors, memory=None):
    """Serialize to bytes. ``memory`` is a dict with ``dims``, ``keys1``,
    ``keys2`` and ``values`` or None for memory-free models."""
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob,
             struct.pack("<I", 0 if memory is None else 1)]
    if memory is not None:
        d = memory["dims"]
        parts.append(DIMS.pack(d["d_in"], d["d_q"], d["d_v"], d["n1"], d["n2"], d["k"], d["heads"],
                               DISTANCE_TAGS[d["distance"]], d["alpha"]))
        for h in range(d["heads"]):
            parts.append(np.ascontiguousarray(memory["keys1"][h], dtype="<f4").tobytes())
            parts.append(np.ascontiguousarray(memory["keys2"][h], dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(memory["values"], dtype="<f4").tobytes())
    parts.append(struct.pack("<I", len(tensors)))
    parts.extend(_encode_segment(name, array) for name, array in tensors.items())
    return b"".join(parts)


class _Reader:
    def __init__(self, buffer):
        self.buffer = buffer
        self.offset = 0

    def take(self, n):
        if self.offset + n > len(self.buffer):
            raise CheckpointError(f"Truncated file: needed {n} bytes, {len(self.buffer) - self.offset} left",
                                  self.offset)
        chunk = self.buffer[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def array(self, dtype, shape):
        dtype = np.dtype(dtype)
        count = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(count * dtype.itemsize), dtype=dtype).reshape(shape)


def decode_checkpoint(buffer):
    r = _Reader(buffer)
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"Bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})", 4)
    (length,) = r.unpack("<I")
    start = r.offset
    try:
        config = json.loads(r.take(length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Corrupt config block: {e}", start) from e
    data = CheckpointData(version=version, config=config)

    (has_memory,) = r.unpack("<I")
    if has_memory:
        at = r.offset
        d_in, d_q, d_v, n1, n2, k, h, tag, alpha = r.unpack(DIMS.format)
        distances = {v: name for name, v in DISTANCE_TAGS.items()}
        if tag not in distances or h < 1 or d_q % (2 * h):
            raise CheckpointError("Corrupt memory dimensions header", at)
        half = d_q // (2 * h)
        data.dims = dict(d_in=d_in, d_q=d_q, d_v=d_v, n1=n1, n2=n2, k=k, heads=h, distance=distances[tag],
                         alpha=alpha)
        keys1, keys2 = [], []
        for _ in range(h):
            keys1.append(r.array("<f4", (n1, half)))
            keys2.append(r.array("<f4", (n2, half)))
        data.keys1 = np.stack(keys1).astype(np.float64)
        data.keys2 = np.stack(keys2).astype(np.float64)
        data.values = r.array("<f4", (n1 * n2, d_v)).astype(np.float64)

    (count,) = r.unpack("<I")
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        at = r.offset
        tag, ndim = r.unpack("<BB")
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"Unknown dtype tag {tag} in segment {name!r}", at)
        shape = r.unpack(f"<{ndim}I")
        array = r.array(DTYPE_TAGS[tag], shape)
        data.tensors[name] = array.astype(np.float64 if tag == 0 else np.int64)
    if r.offset != len(buffer):
        raise CheckpointError(f"{len(buffer) - r.offset} trailing bytes after the last segment", r.offset)
    return data


def _write_atomic(path, payload):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def write_checkpoint(path, config, tensors, memory=None):
    payload = encode_checkpoint(config, tensors, memory)
    _write_atomic(path, payload)
    logging.getLogger("BinaryCodec").info("Wrote checkpoint %s (%s bytes, %s segments).",
                                          path, len(payload), len(tensors))


def read_checkpoint(path):
    try:
        with open(path, "rb") as f:
            payload = f.read()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(payload)


# -- dataset fixtures --------------------------------------------------------

DATASET_HEADER = struct.Struct("<4sIIIIQ")


def encode_dataset(points, labels, m, seed):
    points = np.asarray(points)
    labels = np.asarray(labels)
    if m > np.iinfo(np.uint16).max + 1:
        raise ValueError(f"{m} classes do not fit u16 labels")
    N, d = points.shape
    return (DATASET_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, N, d, m, seed)
            + np.ascontiguousarray(points, dtype="<f4").tobytes()
            + np.ascontiguousarray(labels, dtype="<u2").tobytes())


def decode_dataset(buffer):
    """Returns (points f64, labels i64, m, seed)."""
    r = _Reader(buffer)
    magic, version, N, d, m, seed = r.unpack(DATASET_HEADER.format)
    if magic != DATASET_MAGIC:
        raise CheckpointError(f"Bad dataset magic {magic!r}, expected {DATASET_MAGIC!r}", 0)
    if version != DATASET_VERSION:
        raise CheckpointError(f"Unsupported dataset version {version}", 4)
    points = r.array("<f4", (N, d)).astype(np.float64)
    labels = r.array("<u2", (N,)).astype(np.int64)
    if r.offset != len(buffer):
        raise CheckpointError(f"{len(buffer) - r.offset} trailing bytes after the labels", r.offset)
    return points, labels, m, seed


def write_dataset(path, points, labels, m, seed):
    _write_atomic(path, encode_dataset(points, labels, m, seed))


def read_dataset(path):
    with open(path, "rb") as f:
        return decode_dataset(f.read())
