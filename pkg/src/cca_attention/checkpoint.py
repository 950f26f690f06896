"""Checkpoint file: ``u64 LE manifest length | JSON manifest | f64 LE payload``.

The manifest lists every tensor's name, shape and byte offset into the
payload, together with the model config and a format version.
"""
from __future__ import annotations

import dataclasses
import json
import math
import struct
from pathlib import Path

import numpy as np

from .attention import AttentionConfig
from .model import ModelConfig, ModelParams

FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


def config_to_dict(config: ModelConfig) -> dict:
    return dataclasses.asdict(config)


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["attention"] = AttentionConfig(**d.get("attention", {}))
    return ModelConfig(**d)


def checkpoint_save(params: ModelParams, path) -> None:
    entries, offset = [], 0
    for name, arr in params.tensors.items():
        nbytes = arr.size * 8
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": "<f8",
        "config": config_to_dict(params.config),
        "tensors": entries,
        "payload_bytes": offset,
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_LEN.pack(len(head)))
        f.write(head)
        for arr in params.tensors.values():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_manifest(path) -> tuple[dict, int]:
    """Return (manifest, payload start offset)."""
    raw = Path(path).read_bytes()
    if len(raw) < _LEN.size:
        raise CheckpointError("truncated checkpoint: missing header")
    (n,) = _LEN.unpack_from(raw)
    if len(raw) < _LEN.size + n:
        raise CheckpointError("truncated checkpoint: manifest incomplete")
    try:
        manifest = json.loads(raw[_LEN.size: _LEN.size + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt manifest: {e}") from None
    return manifest, _LEN.size + n


def checkpoint_load(path) -> ModelParams:
    raw = Path(path).read_bytes()
    manifest, start = read_manifest(path)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version!r} "
                              f"(expected {FORMAT_VERSION})")
    config = config_from_dict(manifest["config"])
    expected = config.param_shapes()
    payload = raw[start:]
    declared = manifest["payload_bytes"]
    listed = sum(math.prod(e["shape"]) * 8 for e in manifest["tensors"])
    if listed != declared:
        raise CheckpointError(f"manifest shapes account for {listed} bytes, declares {declared}")
    if len(payload) != declared:
        raise CheckpointError(f"truncated checkpoint: payload has {len(payload)} bytes, "
                              f"manifest declares {declared}")
    names = [e["name"] for e in manifest["tensors"]]
    if sorted(names) != sorted(expected):
        raise CheckpointError("tensor names do not match the model config")
    tensors = {}
    for e in manifest["tensors"]:
        shape = tuple(e["shape"])
        if shape != expected[e["name"]]:
            raise CheckpointError(f"shape mismatch for {e['name']}: file has {shape}, "
                                  f"config implies {expected[e['name']]}")
        n = math.prod(shape)
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=e["offset"])
        tensors[e["name"]] = arr.astype(np.float64).reshape(shape)
    # keep the config's canonical parameter order
    return ModelParams(config, {k: tensors[k] for k in expected})
