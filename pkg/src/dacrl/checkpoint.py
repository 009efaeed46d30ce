"""Checkpoint and artifact files: named arrays plus JSON metadata, written atomically."""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .atomic import atomic_write_bytes, atomic_write_text
from .data import ValidationError
from .nn_utils import load_state_arrays, state_arrays

META_KEY = "__meta__"


class HashMismatch(ValidationError):
    """A checkpoint was written under a different configuration hash."""


def config_hash(obj) -> str:
    """sha256 of the canonical JSON form (sorted keys, no whitespace)."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def atomic_write_json(path: str | Path, obj) -> Path:
    return atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def npz_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    """npz archive with fixed member timestamps, so equal arrays give equal bytes."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            member = io.BytesIO()
            np.lib.format.write_array(member, np.asarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, member.getvalue())
    return buf.getvalue()


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """npz of named arrays; ``meta`` rides along as a JSON string array."""
    payload = dict(arrays)
    payload[META_KEY] = np.array(json.dumps(meta or {}, sort_keys=True, default=str))
    return atomic_write_bytes(path, npz_bytes(payload))


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files if k != META_KEY}
        meta = json.loads(str(z[META_KEY])) if META_KEY in z.files else {}
    return arrays, meta


def save_module(path: str | Path, module: torch.nn.Module, meta: dict | None = None) -> Path:
    arrays = state_arrays(module)
    meta = dict(meta or {})
    meta["shapes"] = {k: list(v.shape) for k, v in arrays.items()}
    return save_arrays(path, arrays, meta)


def load_module(
    path: str | Path, module: torch.nn.Module, expect_hash: str | None = None, hash_key: str = "config_hash"
) -> dict:
    """Fill ``module`` from a checkpoint; rejects a differing ``meta[hash_key]`` or shape."""
    if not Path(path).exists():
        raise ValidationError(f"missing checkpoint {path}")
    arrays, meta = load_arrays(path)
    if expect_hash is not None and meta.get(hash_key) != expect_hash:
        raise HashMismatch(f"{path}: {hash_key} {meta.get(hash_key)} != expected {expect_hash}")
    ref = module.state_dict()
    missing = set(ref) - set(arrays)
    if missing:
        raise ValidationError(f"{path}: missing parameters {sorted(missing)}")
    for k, v in ref.items():
        if tuple(v.shape) != tuple(arrays[k].shape):
            raise ValidationError(f"{path}: shape of {k} is {arrays[k].shape}, expected {tuple(v.shape)}")
    load_state_arrays(module, arrays)
    return meta


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
