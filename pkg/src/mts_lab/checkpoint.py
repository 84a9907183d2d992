"""Versioned JSON checkpoints holding shape-tagged float64 arrays.

Arrays are stored as base64 of their little-endian bytes, so a save/load
round trip is bit-exact. Writes go through a temporary file and an atomic
rename; a failed save never leaves a partial checkpoint behind.
"""

from __future__ import annotations

import base64
import json
import os
import tempfile
from pathlib import Path
from typing import Any

import numpy as np

from .errors import MalformedData, NotFound

FORMAT = "mts-lab-checkpoint"
VERSION = 1


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    if a.dtype.kind == "f":
        a = a.astype("<f8", copy=False)
        dtype = "float64"
    elif a.dtype.kind in "iu":
        a = a.astype("<i8", copy=False)
        dtype = "int64"
    else:
        raise TypeError(f"cannot checkpoint dtype {a.dtype}")
    return {"shape": list(a.shape), "dtype": dtype, "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(obj: dict) -> np.ndarray:
    dtype = {"float64": "<f8", "int64": "<i8"}[obj["dtype"]]
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype=dtype).reshape(obj["shape"]).astype(dtype[1:]).copy()


def _encode(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return {"__array__": encode_array(value)}
    if isinstance(value, dict):
        return {str(k): _encode(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_encode(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def _decode(value: Any) -> Any:
    if isinstance(value, dict):
        if set(value) == {"__array__"}:
            return decode_array(value["__array__"])
        return {k: _decode(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_decode(v) for v in value]
    return value


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    doc = {"format": FORMAT, "version": VERSION, "arrays": _encode(dict(arrays)), "meta": _encode(meta or {})}
    atomic_write_text(path, json.dumps(doc, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise NotFound(f"checkpoint {path} not found")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedData(f"checkpoint {path}: {exc}") from exc
    if doc.get("format") != FORMAT:
        raise MalformedData(f"{path} is not a checkpoint")
    if doc.get("version") != VERSION:
        raise MalformedData(f"unsupported checkpoint version {doc.get('version')}")
    return _decode(doc["arrays"]), _decode(doc["meta"])
