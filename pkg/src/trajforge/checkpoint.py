"""Versioned binary checkpoint container with CRC-32 payload integrity."""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict

import numpy as np

from .encode import Vocabulary
from .model import LoraAdapter, ModelConfig

MAGIC = b"TRJF"
VERSION = 1


class BadMagic(ValueError):
    pass


class VersionMismatch(ValueError):
    pass


class ChecksumMismatch(ValueError):
    pass


class TruncatedFile(ValueError):
    pass


def vocab_hash(vocab: Vocabulary) -> str:
    h = hashlib.sha256()
    h.update(f"slots={vocab.slots};n_cells={vocab.n_cells}".encode())
    return h.hexdigest()[:16]


def save_checkpoint(
    params: dict[str, np.ndarray],
    config: ModelConfig,
    vocab: Vocabulary,
    adapter: LoraAdapter | None = None,
    train_config: dict | None = None,
) -> bytes:
    """Magic, u32 version, length-prefixed JSON header, LE float32 tensors, CRC-32."""
    tensors: list[tuple[str, np.ndarray]] = sorted(params.items())
    if adapter is not None:
        for name in sorted(adapter.matrices):
            a, b = adapter.matrices[name]
            tensors.append((name + ".lora_A", a))
            tensors.append((name + ".lora_B", b))
    header = {
        "config": asdict(config),
        "train_config": train_config,
        "vocab": {"slots": vocab.slots, "n_cells": vocab.n_cells},
        "vocab_hash": vocab_hash(vocab),
        "adapter": None
        if adapter is None
        else {
            "rank": adapter.rank,
            "alpha": adapter.alpha,
            "dropout": adapter.dropout,
            "names": sorted(adapter.matrices),
        },
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(t, dtype="<f4").tobytes() for _, t in tensors
    )
    return (
        MAGIC
        + struct.pack("<I", VERSION)
        + struct.pack("<I", len(header_bytes))
        + header_bytes
        + payload
        + struct.pack("<I", zlib.crc32(payload))
    )


def load_checkpoint(data: bytes):
    """Inverse of save_checkpoint; returns (params, config, vocab, adapter, train_config)."""
    if len(data) < 12:
        raise TruncatedFile("file shorter than the fixed header")
    if data[:4] != MAGIC:
        raise BadMagic(f"bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise VersionMismatch(f"format version {version}, expected {VERSION}")
    (header_len,) = struct.unpack_from("<I", data, 8)
    if len(data) < 12 + header_len + 4:
        raise TruncatedFile("file ends inside the header")
    header = json.loads(data[12 : 12 + header_len].decode("utf-8"))

    payload_size = sum(
        4 * int(np.prod(t["shape"])) if t["shape"] else 4 for t in header["tensors"]
    )
    start = 12 + header_len
    if len(data) < start + payload_size + 4:
        raise TruncatedFile("file ends inside the tensor payload")
    payload = data[start : start + payload_size]
    (crc,) = struct.unpack_from("<I", data, start + payload_size)
    if zlib.crc32(payload) != crc:
        raise ChecksumMismatch("payload CRC-32 does not match")

    arrays = {}
    offset = 0
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape)
        arrays[t["name"]] = arr.astype(np.float32).copy()
        offset += 4 * n

    config = ModelConfig(**header["config"])
    vocab = Vocabulary(**header["vocab"])
    adapter = None
    if header["adapter"] is not None:
        ah = header["adapter"]
        matrices = {
            name: (arrays.pop(name + ".lora_A"), arrays.pop(name + ".lora_B"))
            for name in ah["names"]
        }
        adapter = LoraAdapter(
            rank=ah["rank"], alpha=ah["alpha"], dropout=ah["dropout"], matrices=matrices
        )
    return arrays, config, vocab, adapter, header["train_config"]
