"""Checkpoint files: a JSON manifest followed by little-endian float32 blobs.

Layout::

    b"SVITCKPT"            8-byte magic
    <u8 little-endian>     manifest length in bytes
    manifest               UTF-8 JSON: model config, tensor names, shapes, offsets
    blob                   float32 little-endian arrays in manifest order

Tensor offsets are relative to the first byte of the blob.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams
from .numerics import Tensor

MAGIC = b"SVITCKPT"
FORMAT_VERSION = 1
BLOB_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def encode_checkpoint(params: ModelParams, meta: dict | None = None) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data, dtype=BLOB_DTYPE)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"format": "supervit-checkpoint", "version": FORMAT_VERSION, "dtype": "<f4",
                "model_config": params.config.to_dict(), "tensors": entries,
                "blob_bytes": offset, "meta": meta or {}}
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def save_checkpoint(params: ModelParams, path, meta: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(params, meta))
    tmp.replace(path)


def read_manifest(buf: bytes) -> tuple[dict, int]:
    if len(buf) < 16 or buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    (n,) = struct.unpack("<Q", buf[8:16])
    if len(buf) < 16 + n:
        raise CheckpointError(f"manifest truncated: need {n} bytes, have {len(buf) - 16}")
    try:
        manifest = json.loads(buf[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"manifest is not valid JSON: {exc}") from None
    return manifest, 16 + n


def decode_checkpoint(buf: bytes, dtype=np.float32) -> tuple[ModelParams, dict]:
    manifest, start = read_manifest(buf)
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
    mc = ModelConfig(**manifest["model_config"]).validate()
    expected = ModelParams.shapes(mc)
    blob = buf[start:]
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"blob holds {len(blob)} bytes, manifest declares {manifest['blob_bytes']}")
    seen = set()
    tensors = {}
    for e in manifest["tensors"]:
        name, shape = e["name"], tuple(e["shape"])
        if name not in expected:
            raise CheckpointError(f"unexpected tensor {name!r}")
        if shape != expected[name]:
            raise CheckpointError(f"tensor {name!r} has shape {list(shape)}, model expects {list(expected[name])}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * BLOB_DTYPE.itemsize
        if e["nbytes"] != nbytes or e["offset"] < 0 or e["offset"] + nbytes > len(blob):
            raise CheckpointError(f"tensor {name!r} extent inconsistent with blob")
        arr = np.frombuffer(blob, dtype=BLOB_DTYPE, count=nbytes // 4, offset=e["offset"])
        tensors[name] = Tensor(arr.reshape(shape).astype(dtype), requires_grad=True)
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {sorted(missing)}")
    ordered = {k: tensors[k] for k in expected}
    return ModelParams(mc, ordered), manifest.get("meta", {})


def load_checkpoint(path, dtype=np.float32) -> ModelParams:
    params, _ = decode_checkpoint(Path(path).read_bytes(), dtype)
    return params


def load_checkpoint_with_meta(path, dtype=np.float32) -> tuple[ModelParams, dict]:
    return decode_checkpoint(Path(path).read_bytes(), dtype)
