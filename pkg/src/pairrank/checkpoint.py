"""Binary checkpoint format for named parameter tensors.

Layout (all integers little-endian unsigned 32-bit unless noted):

    magic            4 bytes, b"ABLW"
    version          u32 (currently 1)
    stage            u32 length + utf-8 bytes ("pretrain" | "rank")
    config hash      u32 length + raw sha-256 digest
    rng state        u32 length + utf-8 json of the bit-generator state
    tensor count     u32
    per tensor:      u32 name length, name, u32 rank, u32 dims...,
                     float64 little-endian payload

Round trips are bit-exact; loading rejects magic, version, or config-hash
mismatches with an explicit error.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from . import diffcore as dc

MAGIC = b"ABLW"
VERSION = 1
STAGES = ("pretrain", "rank")


class CheckpointError(ValueError):
    pass


def _pack_bytes(b):
    return struct.pack("<I", len(b)) + b


def _read_exact(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def _read_block(fh):
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n)


def save_checkpoint(path, stage, params, config_digest, rng_state=None):
    if stage not in STAGES:
        raise CheckpointError(f"unknown stage {stage!r}")
    rng_json = json.dumps(rng_state, sort_keys=True, default=str).encode()
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += _pack_bytes(stage.encode())
    blob += _pack_bytes(config_digest)
    blob += _pack_bytes(rng_json)
    names = sorted(params)
    blob += struct.pack("<I", len(names))
    for name in names:
        data = np.ascontiguousarray(params[name].data, dtype="<f8")
        blob += _pack_bytes(name.encode())
        blob += struct.pack("<I", data.ndim)
        blob += struct.pack(f"<{data.ndim}I", *data.shape)
        blob += data.tobytes()
    tmp_fd, tmp_path = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)))
    try:
        with os.fdopen(tmp_fd, "wb") as fh:
            fh.write(bytes(blob))
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def load_checkpoint(path, expect_stage=None, expect_digest=None,
                    requires_grad=True):
    """Returns (stage, params dict, rng_state)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise CheckpointError("bad magic; not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        stage = _read_block(fh).decode()
        if stage not in STAGES:
            raise CheckpointError(f"unknown stage {stage!r}")
        if expect_stage is not None and stage != expect_stage:
            raise CheckpointError(f"expected a {expect_stage} checkpoint, got {stage}")
        digest = _read_block(fh)
        if expect_digest is not None and digest != expect_digest:
            raise CheckpointError("config hash mismatch; refusing to load")
        rng_state = json.loads(_read_block(fh).decode())
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        params = {}
        for _ in range(count):
            name = _read_block(fh).decode()
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            n_items = int(np.prod(dims)) if rank else 1
            payload = _read_exact(fh, 8 * n_items)
            arr = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
            params[name] = dc.tensor(arr, requires_grad=requires_grad)
        if fh.read(1):
            raise CheckpointError("trailing bytes after checkpoint payload")
    return stage, params, rng_state
