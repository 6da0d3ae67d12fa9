"""Checkpoint files: a JSON header, a NUL byte, then float32 tensors.

The header holds ``format_version``, the model config, the label set, an
index ``[{name, shape, byte_offset}]`` and free-form ``meta``. Offsets are
relative to the first byte after the NUL.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError
from .model import ModelConfig, ModelParams, build

FORMAT_VERSION = 1


def dumps(params: ModelParams, config: ModelConfig, label_set: list[str], meta: Optional[dict] = None) -> bytes:
    index = []
    chunks = []
    offset = 0
    for name, arr in params.state_arrays():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "byte_offset": offset})
        chunks.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "label_set": list(label_set),
        "tensors": index,
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return head + b"\x00" + b"".join(chunks)


def loads(blob: bytes, source: str = "<bytes>") -> tuple[ModelParams, ModelConfig, list[str], dict]:
    nul = blob.find(b"\x00")
    if nul < 0:
        raise DataError(f"{source}: checkpoint header is not NUL-terminated")
    try:
        header = json.loads(blob[:nul].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{source}: malformed checkpoint header ({exc})") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{source}: unsupported checkpoint version {header.get('format_version')!r}")
    label_set = header.get("label_set")
    if not isinstance(label_set, list) or not label_set:
        raise DataError(f"{source}: checkpoint has no label set")

    config = ModelConfig.from_dict(header["config"])
    params = build(config, np.random.default_rng(0), dtype=np.float32)
    payload = memoryview(blob)[nul + 1 :]
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        start = entry["byte_offset"]
        stop = start + 4 * int(np.prod(shape, dtype=np.int64))
        if stop > len(payload):
            raise DataError(f"{source}: tensor {entry['name']!r} runs past the end of the file")
        arrays[entry["name"]] = np.frombuffer(payload[start:stop], dtype="<f4").reshape(shape)
    try:
        params.load_arrays(arrays)
    except (KeyError, ValueError) as exc:
        raise DataError(f"{source}: {exc}") from exc
    if len(label_set) != config.n_classes:
        raise DataError(f"{source}: label set has {len(label_set)} entries but model has {config.n_classes} classes")
    return params, config, label_set, header.get("meta", {})


def save(path, params: ModelParams, config: ModelConfig, label_set: list[str], meta: Optional[dict] = None) -> Path:
    path = Path(path)
    path.write_bytes(dumps(params, config, label_set, meta))
    return path


def load(path) -> tuple[ModelParams, ModelConfig, list[str], dict]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read checkpoint ({exc})") from exc
    return loads(blob, str(path))
