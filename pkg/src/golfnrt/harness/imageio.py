"""8-bit PNG output and a lossless float dump (raw little-endian + JSON header)."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

DUMP_MAGIC = b"GNRTF64\n"


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path: str | Path, image: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = to_uint8(image)
    Image.fromarray(img if img.ndim == 2 or img.shape[-1] != 1 else img[..., 0]).save(path)
    return path


def load_png(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def save_float_dump(path: str | Path, array: np.ndarray, meta: dict | None = None) -> Path:
    """Magic, u32 header length, JSON header (shape, dtype, meta), raw ``<f8`` data."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(array, dtype="<f8")
    header = json.dumps({"shape": list(arr.shape), "dtype": "<f8", "meta": meta or {}}).encode()
    with open(path, "wb") as f:
        f.write(DUMP_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(arr.tobytes())
    return path


def load_float_dump(path: str | Path) -> tuple[np.ndarray, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(DUMP_MAGIC):
        raise ValueError(f"{path} is not a float dump")
    off = len(DUMP_MAGIC)
    (n,) = struct.unpack_from("<I", data, off)
    header = json.loads(data[off + 4: off + 4 + n])
    arr = np.frombuffer(data, dtype="<f8", offset=off + 4 + n).reshape(header["shape"]).copy()
    return arr, header.get("meta", {})
