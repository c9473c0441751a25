"""Flat binary checkpoint format.

Layout (all integers little-endian)::

    b"PATCHATTN-CKPT\\n"                  magic
    u32 header_len, header_len bytes    UTF-8 JSON: {"config_hash", "model_config", "extra"}
    u32 n_records
    per record:
        u16 name_len, name bytes (UTF-8)
        u8  ndim, ndim x u32 dims
        prod(dims) x float32 values, C order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from patchattn.model import ModelConfig, PatchModel, state_arrays

MAGIC = b"PATCHATTN-CKPT\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, model: PatchModel, extra: dict | None = None) -> None:
    header = {
        "config_hash": model.config.config_hash(),
        "model_config": model.config.to_dict(),
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    records = state_arrays(model)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)

    def take(fmt: str):
        nonlocal pos
        vals = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return vals

    (hlen,) = take("<I")
    header = json.loads(data[pos : pos + hlen])
    pos += hlen
    (n_records,) = take("<I")
    records = []
    for _ in range(n_records):
        (nlen,) = take("<H")
        name = data[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
        pos += 4 * count
        records.append((name, arr))
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return header, records


def load_model(path: str | Path, expected: ModelConfig | None = None) -> tuple[PatchModel, dict]:
    """Rebuild a model from a checkpoint, optionally checking it against a config."""
    header, records = read_checkpoint(path)
    config = ModelConfig.from_dict(header["model_config"])
    if config.config_hash() != header["config_hash"]:
        raise CheckpointError(f"{path}: stored config does not match its own hash")
    if expected is not None and expected.config_hash() != header["config_hash"]:
        raise CheckpointError(
            f"config hash mismatch: checkpoint {header['config_hash']} vs requested {expected.config_hash()}"
        )
    model = PatchModel(config)
    params = dict(model.named_parameters())
    if [n for n, _ in records] != list(params):
        raise CheckpointError(f"{path}: parameter names do not match the model layout")
    with torch.no_grad():
        for name, arr in records:
            if tuple(params[name].shape) != arr.shape:
                raise CheckpointError(f"{path}: {name} has shape {arr.shape}, expected {tuple(params[name].shape)}")
            params[name].copy_(torch.from_numpy(arr))
    return model, header
