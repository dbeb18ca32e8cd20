"""PNG and JSON-lines helpers with atomic writes."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from PIL import Image


def _atomic_write(path: Path, write) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            write(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Quantise [0, 1] floats to bytes, rounding half to even."""
    return np.clip(np.round(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path: str | Path, array: np.ndarray) -> None:
    """Write HxW (grey) or HxWx3 (RGB) data; floats are taken to be in [0, 1]."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    img = Image.fromarray(arr)
    _atomic_write(Path(path), lambda fh: img.save(fh, format="PNG", optimize=False))


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    write_png(path, np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8))


def read_rgb(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def read_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return (np.asarray(img.convert("L")) > 127).astype(np.uint8)


def write_jsonl(path: str | Path, records: Iterable[dict[str, Any]]) -> None:
    body = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records).encode()
    _atomic_write(Path(path), lambda fh: fh.write(body))


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_text(path: str | Path, text: str) -> None:
    _atomic_write(Path(path), lambda fh: fh.write(text.encode()))


def write_bytes(path: str | Path, data: bytes) -> None:
    _atomic_write(Path(path), lambda fh: fh.write(data))
