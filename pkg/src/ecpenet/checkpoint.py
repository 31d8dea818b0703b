"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"ECPN" | u32 version | u64 entry count
    entry*: u32 name length | name (utf-8) | u8 dtype tag | u32 rank
            | u64 dim * rank | raw element bytes
    u64 checksum  (blake2b-64 of every preceding byte)

Metadata (resolved config, RNG state) is stored as uint8 entries holding
canonical JSON so that save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

MAGIC = b"ECPN"
FORMAT_VERSION = 1

_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_TAG_OF = {np.dtype(v).str: k for k, v in _TAGS.items()}


class CheckpointError(Exception):
    """Unreadable, corrupt, or incompatible checkpoint."""


@dataclass
class Checkpoint:
    config: dict
    iteration: int
    params: Dict[str, np.ndarray]
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    rng_state: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _json_bytes(obj) -> np.ndarray:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8)


def _entries(ckpt: Checkpoint):
    yield "meta/config", _json_bytes(ckpt.config)
    yield "meta/iteration", np.asarray(ckpt.iteration, dtype="<i8")
    yield "meta/adam_t", np.asarray(ckpt.adam_t, dtype="<i8")
    yield "meta/rng", _json_bytes(ckpt.rng_state)
    for name, arr in ckpt.params.items():
        yield f"param/{name}", arr
    for name, arr in ckpt.adam_m.items():
        yield f"adam_m/{name}", arr
    for name, arr in ckpt.adam_v.items():
        yield f"adam_v/{name}", arr


def encode(ckpt: Checkpoint) -> bytes:
    entries = list(_entries(ckpt))
    out = [MAGIC, struct.pack("<IQ", ckpt.version, len(entries))]
    for name, arr in entries:
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        tag = _TAG_OF.get(np.dtype(le).str)
        if tag is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BI", tag, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes())
    body = b"".join(out)
    return body + struct.pack("<Q", _checksum(body))


def _checksum(body: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(body, digest_size=8).digest(), "little")


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < 24 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or too short)")
    body, tail = blob[:-8], blob[-8:]
    if struct.unpack("<Q", tail)[0] != _checksum(body):
        raise CheckpointError("checksum mismatch (truncated or corrupted file)")
    version, count = struct.unpack_from("<IQ", body, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    pos = 16
    entries = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            tag, rank = struct.unpack_from("<BI", body, pos)
            pos += 5
            dims = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            dt = _TAGS[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(body):
                raise CheckpointError(f"entry {name} runs past end of file")
            arr = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims)
            pos += nbytes
            entries[name] = arr.astype(dt.newbyteorder("="), copy=True)
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if pos != len(body):
        raise CheckpointError("trailing bytes after last entry")

    def meta_json(key):
        return json.loads(entries.pop(key).tobytes().decode("utf-8"))

    try:
        config = meta_json("meta/config")
        rng_state = meta_json("meta/rng")
        iteration = int(entries.pop("meta/iteration"))
        adam_t = int(entries.pop("meta/adam_t"))
    except KeyError as exc:
        raise CheckpointError(f"missing metadata entry {exc}") from exc
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    for key, arr in entries.items():
        kind, _, name = key.partition("/")
        if kind not in groups:
            raise CheckpointError(f"unknown entry {key}")
        groups[kind][name] = arr
    return Checkpoint(config, iteration, groups["param"], groups["adam_m"], groups["adam_v"], adam_t, rng_state, version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically: a failed save never leaves a partial file at ``path``."""
    path = Path(path)
    blob = encode(ckpt)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    return decode(blob)
