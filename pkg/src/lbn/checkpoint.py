"""Checkpoint files: a JSON manifest followed by raw little-endian float64 parameters.

Layout::

    b"LBNCKPT\\0"            8-byte magic
    uint64 little-endian     manifest length in bytes
    manifest                 UTF-8 JSON
    payload                  parameters concatenated in manifest order

The manifest lists every parameter's name and shape, so its shape list
fully determines the payload length.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from . import estimators

MAGIC = b"LBNCKPT\0"
FORMAT_VERSION = 1

ESTIMATORS = {
    cls.__name__: cls
    for cls in (
        estimators.LBNRegressor,
        estimators.ReLURegressor,
        estimators.CSBNRegressor,
        estimators.ConvLBNDenoiser,
        estimators.PatchDenoiser,
    )
}
_FITTED = ("n_features_in_", "n_outputs_", "_y_1d", "image_shape_")


class CheckpointError(ValueError):
    pass


class UnsupportedVersion(CheckpointError):
    pass


def config_digest(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v


def dumps(estimator, extra=None) -> bytes:
    """Serialise a fitted estimator to checkpoint bytes."""
    model = estimator.model_
    params = model.parameters()
    fitted = {}
    for name in _FITTED:
        if hasattr(estimator, name):
            val = getattr(estimator, name)
            fitted[name] = list(val) if isinstance(val, tuple) else _jsonable(val)
    manifest = {
        "format": "lbn-checkpoint",
        "version": FORMAT_VERSION,
        "estimator": type(estimator).__name__,
        "params": {k: _jsonable(v) for k, v in estimator.get_params().items()},
        "fitted": fitted,
        "model": model.config(),
        "parameters": [{"name": n, "shape": list(p.shape)} for n, p in params.items()],
    }
    if extra:
        manifest.update(extra)
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in params.values())
    return MAGIC + struct.pack("<Q", len(head)) + head + payload


def loads(data: bytes):
    """Inverse of :func:`dumps`; returns ``(estimator, manifest)``."""
    if data[:8] != MAGIC:
        raise CheckpointError("not an LBN checkpoint (bad magic bytes)")
    if len(data) < 16:
        raise CheckpointError("truncated checkpoint header")
    (n,) = struct.unpack("<Q", data[8:16])
    try:
        manifest = json.loads(data[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from exc
    version = manifest.get("version")
    if not isinstance(version, int) or version > FORMAT_VERSION or version < 1:
        raise UnsupportedVersion(
            f"unsupported checkpoint version {version!r} (this build reads up to {FORMAT_VERSION})"
        )
    payload = data[16 + n:]
    expected = 8 * sum(int(np.prod(p["shape"])) for p in manifest["parameters"])
    if len(payload) != expected:
        raise CheckpointError(
            f"payload has {len(payload)} bytes, expected {expected} from the manifest shapes"
        )
    cls = ESTIMATORS.get(manifest["estimator"])
    if cls is None:
        raise CheckpointError(f"unknown estimator {manifest['estimator']!r}")
    params = dict(manifest["params"])
    if "hidden_layer_sizes" in params:
        params["hidden_layer_sizes"] = tuple(params["hidden_layer_sizes"])
    est = cls(**params)
    for name, val in manifest["fitted"].items():
        setattr(est, name, tuple(val) if name == "image_shape_" else val)
    model_cfg = manifest["model"]
    model = estimators.MODEL_CLASSES[model_cfg["class"]].from_config(model_cfg)
    live = model.parameters()
    if [p["name"] for p in manifest["parameters"]] != list(live):
        raise CheckpointError("parameter list does not match the model architecture")
    offset = 0
    for spec in manifest["parameters"]:
        target = live[spec["name"]]
        if list(target.shape) != spec["shape"]:
            raise CheckpointError(f"shape mismatch for {spec['name']}")
        size = target.size * 8
        target[...] = np.frombuffer(payload, dtype="<f8", count=target.size,
                                    offset=offset).reshape(target.shape)
        offset += size
    est.model_ = model
    return est, manifest


def save_checkpoint(path, estimator, extra=None) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    tmp.write_bytes(dumps(estimator, extra))
    os.replace(tmp, path)


def load_checkpoint(path):
    """Load ``(estimator, manifest)`` from ``path``."""
    return loads(Path(path).read_bytes())
