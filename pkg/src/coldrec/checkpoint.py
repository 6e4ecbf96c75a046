"""``SRCK`` binary checkpoints.

Layout (little-endian): magic ``SRCK``, u32 version, u32 length + UTF-8 JSON
header, then until EOF one record per tensor: u32 length + UTF-8 name,
u32 rank, rank x u64 extents, float64 values in C order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingTable, Variant
from .model import ModelConfig, SeqModel

MAGIC = b"SRCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    meta = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    try:
        return _parse(buf, path)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc


def _parse(buf: bytes, path) -> tuple[dict, dict[str, np.ndarray]]:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an SRCK checkpoint")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    header = json.loads(buf[off:off + n].decode("utf-8"))
    off += n
    tensors = {}
    while off < len(buf):
        (ln,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + ln].decode("utf-8")
        off += ln
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        count = int(np.prod(shape))
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    return header, tensors


def save_model(path, model: SeqModel, config: dict, item_ids: list[str], user_ids: list[str]) -> None:
    table = model.item_table
    header = {
        "config": config,
        "model": model.config.to_dict(),
        "table": {"variant": table.variant.value, "delta_max": table.delta_max},
        "warm_items": model.warm_index.tolist(),
        "item_ids": item_ids,
        "user_ids": user_ids,
    }
    tensors = {k: t.data for k, t in model.named_tensors().items()}
    tensors["item_table.trainable_rows"] = table.trainable_rows.astype(np.float64)
    write_checkpoint(path, header, tensors)


def load_model(path) -> tuple[SeqModel, dict]:
    header, tensors = read_checkpoint(path)
    cfg = ModelConfig(**header["model"])
    t = header["table"]
    variant = Variant(t["variant"])
    if variant is Variant.FROZEN_DELTA:
        table = EmbeddingTable(variant, tensors["item_table.base"], tensors["item_table.delta"],
                               t["delta_max"], tensors["item_table.trainable_rows"] > 0.5)
    else:
        table = EmbeddingTable(variant, tensors["item_table.base"])
    model = SeqModel(cfg, table, header["warm_items"])
    missing = set(model.named_tensors()) - set(tensors)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    model.restore(tensors)
    return model, header
