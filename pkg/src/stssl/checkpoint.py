"""Single-file checkpoints: magic, JSON manifest, raw float64 blob.

Layout::

    b"STSSLCK1" | uint64 LE header length | UTF-8 JSON header | float64 LE blob

The header lists every tensor as {name, shape, offset} (byte offset into the
blob) alongside the run config, the scaler and the grid shape.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .dataio import Scaler
from .trainer import Checkpoint, RunConfig

MAGIC = b"STSSLCK1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors, chunks, offset = [], [], 0
    for name, value in ckpt.params.items():
        raw = np.ascontiguousarray(value, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(value.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format": 1,
        "config": ckpt.config.to_dict(),
        "scaler": ckpt.scaler.to_dict(),
        "grid": {"rows": ckpt.rows, "cols": ckpt.cols, "interval_minutes": ckpt.interval_minutes},
        "best_epoch": ckpt.best_epoch,
        "extra": ckpt.extra,
        "tensors": tensors,
    }
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + n])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    blob = data[16 + n:]
    params = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        end = t["offset"] + 8 * count
        if end > len(blob):
            raise CheckpointError(f"tensor {t['name']} runs past the end of the blob")
        params[t["name"]] = np.frombuffer(blob[t["offset"]:end], dtype="<f8").reshape(
            t["shape"]).astype(np.float64)
    grid = header["grid"]
    return Checkpoint(params, RunConfig.from_dict(header["config"]),
                      Scaler.from_dict(header["scaler"]), grid["rows"], grid["cols"],
                      grid["interval_minutes"], header.get("best_epoch", 0),
                      header.get("extra", {}))
