"""Deterministic tensor-dict serialization.

``torch.save`` embeds a random serialization id, so two saves of identical
weights differ byte-wise. This container writes a JSON header plus raw
little-endian tensor bytes in sorted key order instead.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

MAGIC = b"STYAUG\x00\x01"


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointHashError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def pack_state(state: dict[str, torch.Tensor]) -> tuple[list[dict], bytes]:
    entries, chunks, offset = [], [], 0
    for name in sorted(state):
        arr = state[name].detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return entries, b"".join(chunks)


def unpack_state(entries: list[dict], blob: bytes) -> dict[str, torch.Tensor]:
    state = {}
    for e in entries:
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointCorruptError(f"tensor {e['name']} is truncated")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.copy())
    return state


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_container(path, header: dict, state: dict[str, torch.Tensor]) -> None:
    entries, blob = pack_state(state)
    header = dict(header, tensors=entries, blob_sha256=hashlib.sha256(blob).hexdigest(), blob_nbytes=len(blob))
    head = canonical_json(header).encode()
    atomic_write_bytes(path, MAGIC + struct.pack("<Q", len(head)) + head + blob)


def read_container(path, format_version: int) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError(f"{path}: not a checkpoint file or truncated header")
    (head_len,) = struct.unpack("<Q", data[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if len(data) < start + head_len:
        raise CheckpointCorruptError(f"{path}: truncated header")
    try:
        header = json.loads(data[start : start + head_len])
    except ValueError as exc:
        raise CheckpointCorruptError(f"{path}: unreadable header ({exc})") from None
    if header.get("format_version") != format_version:
        raise CheckpointVersionError(
            f"{path}: format_version {header.get('format_version')!r}, this build reads {format_version}"
        )
    blob = data[start + head_len :]
    if len(blob) != header["blob_nbytes"]:
        raise CheckpointCorruptError(f"{path}: weight blob is {len(blob)} bytes, header says {header['blob_nbytes']}")
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise CheckpointHashError(f"{path}: weight blob hash does not match header")
    return header, unpack_state(header["tensors"], blob)
