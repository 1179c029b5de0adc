"""Single-file checkpoint archive.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
header, then the raw array bytes back to back. The header carries the
format version, the flattened model config, training metadata, and one
(name, dtype, shape, offset, nbytes) record per weight. Arrays are
stored little-endian, so save -> load -> infer is bit-identical to the
pre-save model.
"""

from __future__ import annotations

import json
import struct

import numpy as np
import torch

from .config import format_value, from_flat, to_flat
from .errors import CheckpointError, CheckpointVersionError, WeightShapeError

MAGIC = b"TDHZCKP1"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float16: "<f2",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.bool: "|b1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


def save_checkpoint(model, path, metadata: dict | None = None,
                    extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    """Write the model weights, its config snapshot, and metadata."""
    state = model.state_dict()
    records = []
    blobs = []
    offset = 0
    for name, tensor in state.items():
        if tensor.dtype not in _DTYPES:
            raise CheckpointError(f"cannot serialize dtype {tensor.dtype} for {name}")
        arr = tensor.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr).astype(_DTYPES[tensor.dtype], copy=False)
        raw = arr.tobytes()
        records.append({"name": name, "dtype": _DTYPES[tensor.dtype],
                        "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    for name, arr in (extra_arrays or {}).items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<").str if arr.dtype.byteorder in ("=", ">") else arr.dtype.str
        arr = arr.astype(dtype, copy=False)
        raw = arr.tobytes()
        records.append({"name": f"extra/{name}", "dtype": dtype,
                        "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    flat_config = {k: format_value(v) for k, v in to_flat(model.config).items()}
    header = {
        "format_version": FORMAT_VERSION,
        "config": flat_config,
        "metadata": metadata or {},
        "arrays": records,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)


def read_header(path) -> tuple[dict, int]:
    """Parse and validate the header; returns (header, data_offset)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        raw_len = fh.read(8)
        if len(raw_len) != 8:
            raise CheckpointError(f"{path}: truncated before header length")
        (header_len,) = struct.unpack("<Q", raw_len)
        header_bytes = fh.read(header_len)
        if len(header_bytes) != header_len:
            raise CheckpointError(f"{path}: truncated inside header")
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: header is not valid JSON: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(version, FORMAT_VERSION)
    return header, len(MAGIC) + 8 + header_len


def load_checkpoint(path, map_location: str = "cpu"):
    """Rebuild the model from a checkpoint; returns (model, metadata).

    Any weight whose shape disagrees with the model built from the stored
    config raises :class:`WeightShapeError` listing the offending keys; a
    truncated file raises before any model is constructed.
    """
    from .model import DehazeModel, ModelConfig

    header, data_start = read_header(path)
    with open(path, "rb") as fh:
        fh.seek(data_start)
        payload = fh.read()

    arrays = {}
    for rec in header["arrays"]:
        end = rec["offset"] + rec["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated inside array {rec['name']!r}")
        buf = payload[rec["offset"]:end]
        arrays[rec["name"]] = np.frombuffer(buf, dtype=rec["dtype"]).reshape(rec["shape"]).copy()

    config = from_flat(ModelConfig, dict(header["config"]), defaults=ModelConfig()).resolved()
    model = DehazeModel(config)
    state = model.state_dict()

    weight_names = {n for n in arrays if not n.startswith("extra/")}
    missing = sorted(set(state) - weight_names)
    unexpected = sorted(weight_names - set(state))
    if missing or unexpected:
        raise CheckpointError(
            f"{path}: state mismatch; missing {missing or 'none'}, unexpected {unexpected or 'none'}")

    mismatches = []
    new_state = {}
    for name, tensor in state.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            mismatches.append((name, tuple(arr.shape), tuple(tensor.shape)))
            continue
        new_state[name] = torch.from_numpy(arr).to(dtype=tensor.dtype)
    if mismatches:
        raise WeightShapeError(mismatches)

    model.load_state_dict(new_state)
    model.to(map_location)
    extras = {n[len("extra/"):]: a for n, a in arrays.items() if n.startswith("extra/")}
    metadata = dict(header.get("metadata", {}))
    if extras:
        metadata["extra_arrays"] = extras
    return model, metadata
