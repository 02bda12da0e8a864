"""Versioned binary checkpoints.

Layout: a magic line, one JSON header line (kind, config, parameter names and
shapes, vocabulary fingerprints), then each parameter as a flat float64
little-endian array in header order.  Vocabularies live in adjacent text files.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"NMTADV-CKPT\n"
FORMAT_VERSION = 1


def write_checkpoint(path: str | Path, kind: str, config: dict, params: dict, vocab_hashes: dict) -> None:
    header = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "params": [[name, list(t.shape)] for name, t in params.items()],
        "vocab": vocab_hashes,
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for t in params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def read_checkpoint(path: str | Path, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    rest = raw[len(MAGIC):]
    nl = rest.find(b"\n")
    try:
        header = json.loads(rest[:nl].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('version')} != {FORMAT_VERSION}")
    if header.get("kind") != kind:
        raise CheckpointError(f"{path}: holds a {header.get('kind')!r} model, expected {kind!r}")
    body = memoryview(rest)[nl + 1:]
    arrays, offset = {}, 0
    for name, shape in header["params"]:
        n = int(np.prod(shape)) * 8
        if offset + n > len(body):
            raise CheckpointError(f"{path}: truncated at parameter {name}")
        arrays[name] = np.frombuffer(body[offset:offset + n], dtype="<f8").reshape(shape).astype(np.float64)
        offset += n
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes")
    return header, arrays


def load_into(params: dict, arrays: dict[str, np.ndarray], path) -> None:
    if list(params) != list(arrays):
        raise CheckpointError(f"{path}: parameter names differ from the configured model")
    for name, t in params.items():
        if t.shape != arrays[name].shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}: {arrays[name].shape} vs {t.shape}")
        t.data = arrays[name].copy()
