"""Binary checkpoint format.

Layout (little-endian)::

    b"DGRU" | u32 version | u64 header length | UTF-8 JSON header | float32 payload

The header carries the model config, label names, normalisation stats and
a manifest of ``{"name", "shape", "offset"}`` entries (offsets in bytes,
relative to the start of the payload). Tensors are written in manifest
order: parameters first, then batch-norm running statistics.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from grurec.data import NormStats
from grurec.errors import CheckpointError, MagicError, TruncatedError, VersionError
from grurec.model import Model, ModelConfig

MAGIC = b"DGRU"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def _f32_list(a):
    return [float(x) for x in np.asarray(a, dtype=np.float32)]


def to_bytes(model: Model) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for kind, src in (("param", model.params), ("state", model.state)):
        for name in sorted(src):
            arr = np.ascontiguousarray(src[name], dtype="<f4")
            manifest.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset})
            chunks.append(arr.tobytes())
            offset += arr.nbytes
    header = {
        "config": model.config.to_dict(),
        "labels": list(model.labels),
        "norm_stats": None
        if model.norm_stats is None
        else {"mean": _f32_list(model.norm_stats.mean), "std": _f32_list(model.norm_stats.std)},
        "tensors": manifest,
        "payload_bytes": offset,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def from_bytes(buf: bytes) -> Model:
    if len(buf) < _PREFIX.size:
        if len(buf) >= 4 and buf[:4] != MAGIC:
            raise MagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
        raise TruncatedError("checkpoint shorter than its fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise MagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version} is not supported (this build reads version {VERSION})")
    start = _PREFIX.size
    if len(buf) < start + hlen:
        raise TruncatedError("checkpoint header is truncated")
    try:
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}") from None
    payload = memoryview(buf)[start + hlen:]
    if len(payload) < header["payload_bytes"]:
        raise TruncatedError(f"payload has {len(payload)} bytes, header declares {header['payload_bytes']}")

    params, state = {}, {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=t["offset"]).astype(np.float32)
        (params if t["kind"] == "param" else state)[t["name"]] = arr.reshape(t["shape"])
    ns = header["norm_stats"]
    norm = None if ns is None else NormStats(np.asarray(ns["mean"], np.float32).astype(np.float64), np.asarray(ns["std"], np.float32).astype(np.float64))
    cfg = ModelConfig(**header["config"])
    return Model(config=cfg, params=params, state=state, labels=header["labels"], norm_stats=norm)


def save_checkpoint(model: Model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(model))


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
