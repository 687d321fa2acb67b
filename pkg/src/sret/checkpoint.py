"""Binary checkpoints: bitwise round-trip of every model tensor.

Layout: magic, a JSON header (format version, the full config text, its
digest, step counter, flags), then named little-endian tensor records in
three sections -- ``param/`` (exactly the registry names), ``buffer/``
(batch-norm running stats) and ``opt/`` (AdamW moments, optional).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import MixedDepthModel, build_mixed_depth, build_model
from .train import AdamW

MAGIC = b"SRETCKP1"
FORMAT_VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    """Malformed, truncated or mismatched checkpoint file."""


@dataclass
class CheckpointContents:
    header: dict
    arrays: dict[str, np.ndarray]


def _write_array(fh, name: str, arr: np.ndarray) -> None:
    nbytes = name.encode()
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
    fh.write(struct.pack("<H", len(nbytes)))
    fh.write(nbytes)
    fh.write(struct.pack("<BB", code, arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<I", extent))
    raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False)
    payload = raw.tobytes()
    fh.write(struct.pack("<Q", len(payload)))
    fh.write(payload)


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint file")
    return data


def _read_array(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
    try:
        name = _read_exact(fh, name_len).decode()
    except UnicodeDecodeError as exc:
        raise CheckpointError("corrupt tensor name") from exc
    code, ndim = struct.unpack("<BB", _read_exact(fh, 2))
    dtype = _CODE_DTYPES.get(code)
    if dtype is None:
        raise CheckpointError(f"unknown dtype code {code} for {name}")
    shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndim))
    (nbytes,) = struct.unpack("<Q", _read_exact(fh, 8))
    if nbytes % dtype.itemsize:
        raise CheckpointError(f"payload for {name} is not a whole number of elements")
    arr = np.frombuffer(_read_exact(fh, nbytes), dtype=dtype.newbyteorder("<"))
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f"payload size mismatch for {name}")
    return name, arr.astype(dtype).reshape(shape)


def save_checkpoint(model, path, step: int = 0, optimizer: Optional[AdamW] = None) -> None:
    from .configfile import config_digest, emit_config

    header = {
        "format_version": FORMAT_VERSION,
        "config": emit_config(model.config),
        "config_digest": config_digest(model.config),
        "step": int(step),
        "mixed_depth": isinstance(model, MixedDepthModel),
        "has_optimizer": optimizer is not None,
        "adam_t": optimizer.state.t if optimizer is not None else 0,
    }
    records: list[tuple[str, np.ndarray]] = []
    for name, tensor in model.registry.items():
        records.append((f"param/{name}", tensor.data))
    for name, arr in model.buffers.items():
        records.append((f"buffer/{name}", arr))
    if optimizer is not None:
        for name, arr in optimizer.state.m.items():
            records.append((f"opt/m/{name}", arr))
        for name, arr in optimizer.state.v.items():
            records.append((f"opt/v/{name}", arr))

    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            _write_array(fh, name, arr)


def read_checkpoint(path) -> CheckpointContents:
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        (header_len,) = struct.unpack("<I", _read_exact(fh, 4))
        try:
            header = json.loads(_read_exact(fh, header_len).decode())
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CheckpointError("corrupt checkpoint header") from exc
        if not isinstance(header, dict):
            raise CheckpointError("corrupt checkpoint header")
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {header.get('format_version')}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays = {}
        for _ in range(count):
            name, arr = _read_array(fh)
            arrays[name] = arr
    return CheckpointContents(header=header, arrays=arrays)


def load_checkpoint(path, model=None):
    """Rebuild (or fill) a model from a checkpoint, bitwise.

    With ``model=None`` the architecture is reconstructed from the embedded
    config text. With a model supplied, its config digest must match the one
    stored at save time.
    """
    from .configfile import config_digest, parse_config

    contents = read_checkpoint(path)
    header = contents.header
    if model is None:
        config, _ = parse_config(header["config"])
        model = build_model(config, rng=np.random.default_rng(0))
        if header.get("mixed_depth"):
            model = build_mixed_depth(model)
    else:
        if config_digest(model.config) != header["config_digest"]:
            raise CheckpointError(
                "checkpoint was written for a different configuration "
                f"(digest {header['config_digest'][:12]}... vs this model's "
                f"{config_digest(model.config)[:12]}...)"
            )
        if header.get("mixed_depth") and not isinstance(model, MixedDepthModel):
            raise CheckpointError("checkpoint holds a mixed-depth model")

    saved_params = {
        name[len("param/") :]: arr
        for name, arr in contents.arrays.items()
        if name.startswith("param/")
    }
    if set(saved_params) != set(model.registry):
        missing = set(model.registry) - set(saved_params)
        extra = set(saved_params) - set(model.registry)
        raise CheckpointError(
            f"parameter names do not match the registry (missing {sorted(missing)[:3]}, "
            f"unexpected {sorted(extra)[:3]})"
        )
    for name, arr in saved_params.items():
        t = model.registry[name]
        if arr.shape != t.data.shape:
            raise CheckpointError(f"shape mismatch for {name}")
        t.data = arr.copy()
    for name, arr in contents.arrays.items():
        if name.startswith("buffer/"):
            model.buffers[name[len("buffer/") :]] = arr.copy()
    return model, header


def load_optimizer_state(path_or_contents, optimizer: AdamW) -> int:
    """Restore AdamW moments; returns the saved step counter."""
    contents = (
        path_or_contents
        if isinstance(path_or_contents, CheckpointContents)
        else read_checkpoint(path_or_contents)
    )
    if not contents.header.get("has_optimizer"):
        raise CheckpointError("checkpoint carries no optimizer state")
    for name in optimizer.state.m:
        key_m, key_v = f"opt/m/{name}", f"opt/v/{name}"
        if key_m not in contents.arrays or key_v not in contents.arrays:
            raise CheckpointError(f"optimizer state missing for {name}")
        optimizer.state.m[name] = contents.arrays[key_m].copy()
        optimizer.state.v[name] = contents.arrays[key_v].copy()
    optimizer.state.t = int(contents.header.get("adam_t", 0))
    return int(contents.header.get("step", 0))
