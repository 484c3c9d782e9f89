"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"OTFZ"            4 bytes magic
    version            uint32, currently 1
    header_len         uint64, byte length of the JSON header
    header             UTF-8 JSON, see below
    payload            float32 little-endian tensor data

Header::

    {"arch": {<ArchConfig fields>},
     "tensors": [{"name": str, "shape": [int, ...], "offset": int}, ...],
     "payload_bytes": int,
     "meta": {...}}                     # optional free-form metadata

Offsets are relative to the start of the payload; tensors are stored
contiguously, row-major, in directory order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ArchConfig, Params, check_params, param_shapes

MAGIC = b"OTFZ"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    kind = "checkpoint"


class BadMagicError(CheckpointError):
    kind = "bad-magic"


class UnsupportedVersionError(CheckpointError):
    kind = "bad-version"


class TruncatedPayloadError(CheckpointError):
    kind = "truncated-payload"


class InconsistentDirectoryError(CheckpointError):
    kind = "inconsistent-directory"


def encode_checkpoint(params: Params, arch: ArchConfig, meta: dict | None = None) -> bytes:
    check_params(params, arch)
    directory = []
    chunks = []
    offset = 0
    for name in param_shapes(arch):
        data = np.ascontiguousarray(params[name], dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(params[name].shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = {"arch": arch.to_dict(), "tensors": directory, "payload_bytes": offset}
    if meta:
        header["meta"] = meta
    hbytes = json.dumps(header, indent=1, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def decode_checkpoint(blob: bytes) -> tuple[Params, ArchConfig, dict]:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError("bad magic: not an OTFZ checkpoint")
    if len(blob) < _PREFIX.size:
        raise TruncatedPayloadError("truncated payload: file ends inside the prefix")
    _, version, hlen = _PREFIX.unpack_from(blob)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    if len(blob) < start:
        raise TruncatedPayloadError("truncated payload: file ends inside the header")
    try:
        header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
        arch = ArchConfig.from_dict(header["arch"])
        directory = header["tensors"]
        payload_bytes = int(header["payload_bytes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise InconsistentDirectoryError(f"unreadable header: {exc}") from exc

    payload = memoryview(blob)[start:]
    if len(payload) < payload_bytes:
        raise TruncatedPayloadError(
            f"truncated payload: expected {payload_bytes} bytes, found {len(payload)}"
        )
    if len(payload) > payload_bytes:
        raise InconsistentDirectoryError(
            f"payload has {len(payload) - payload_bytes} trailing bytes"
        )

    expected = param_shapes(arch)
    params: Params = {}
    cursor = 0
    for entry in directory:
        name, shape, offset = entry["name"], tuple(entry["shape"]), int(entry["offset"])
        if name not in expected or expected[name] != shape:
            raise InconsistentDirectoryError(f"tensor {name} with shape {shape} does not fit arch")
        if name in params:
            raise InconsistentDirectoryError(f"duplicate tensor {name}")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset != cursor or offset + nbytes > payload_bytes:
            raise InconsistentDirectoryError(f"tensor {name}: bad offset {offset}")
        params[name] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4,
                                     offset=offset).reshape(shape).astype(np.float32)
        cursor += nbytes
    if cursor != payload_bytes:
        raise InconsistentDirectoryError("directory does not cover the payload")
    try:
        check_params(params, arch)
    except ValueError as exc:
        raise InconsistentDirectoryError(str(exc)) from exc
    return params, arch, header.get("meta", {})


def save_checkpoint(params: Params, arch: ArchConfig, path, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(params, arch, meta))


def load_checkpoint(path) -> tuple[Params, ArchConfig]:
    params, arch, _ = decode_checkpoint(Path(path).read_bytes())
    return params, arch
