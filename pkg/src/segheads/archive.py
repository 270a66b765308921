"""TARC tensor-archive format and model checkpoints.

Layout (little-endian): magic ``TARC``, version byte 0x01, u32 tensor
count, then per tensor: u16 name length, UTF-8 name, u8 dtype code
(0=f32, 1=f64, 2=u8), u8 ndim, u32 extents, raw row-major data. Entry
order is preserved, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_MAGIC = b"TARC"
_VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODE_FOR_KIND = {"<f4": 0, "<f8": 1, "|u1": 2}


class ArchiveError(ValueError):
    """Malformed or truncated tensor archive."""


def save_tensors(tensors: dict[str, np.ndarray], path) -> None:
    chunks = [_MAGIC, struct.pack("<BI", _VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype == np.float32:
            code, norm = 0, arr.astype("<f4", copy=False)
        elif arr.dtype == np.float64:
            code, norm = 1, arr.astype("<f8", copy=False)
        elif arr.dtype == np.uint8:
            code, norm = 2, arr
        else:
            raise ArchiveError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ArchiveError(f"tensor name too long: {name!r}")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", code, norm.ndim))
        chunks.append(struct.pack(f"<{norm.ndim}I", *norm.shape))
        chunks.append(np.ascontiguousarray(norm).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    if len(raw) < 9:
        raise ArchiveError(f"{path}: truncated header")
    if raw[:4] != _MAGIC:
        raise ArchiveError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack("<BI", view[4:9])
    if version != _VERSION:
        raise ArchiveError(f"{path}: unsupported version {version}")
    offset = 9
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> memoryview:
        nonlocal offset
        if offset + n > len(raw):
            raise ArchiveError(f"{path}: truncated at byte {offset}")
        chunk = view[offset:offset + n]
        offset += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPE_CODES:
            raise ArchiveError(f"{path}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dtype = _DTYPE_CODES[code]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        data = np.frombuffer(take(n_bytes), dtype=dtype).reshape(shape)
        out[name] = data.copy()
    if offset != len(raw):
        raise ArchiveError(f"{path}: {len(raw) - offset} trailing bytes")
    return out


# -- checkpoints -------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Named tensor map plus the config snapshot and best validation score."""
    tensors: dict[str, np.ndarray]
    config_text: str = ""
    best_val_dice: float = float("nan")
    extra: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    payload = dict(ckpt.tensors)
    for key, arr in ckpt.extra.items():
        payload[f"optimizer.{key}"] = arr
    payload["meta.config"] = np.frombuffer(ckpt.config_text.encode("utf-8"),
                                           dtype=np.uint8).copy()
    payload["meta.best_val_dice"] = np.array([ckpt.best_val_dice], dtype=np.float64)
    save_tensors(payload, path)


def load_checkpoint(path) -> Checkpoint:
    raw = load_tensors(path)
    config_text = ""
    best = float("nan")
    tensors: dict[str, np.ndarray] = {}
    extra: dict[str, np.ndarray] = {}
    for name, arr in raw.items():
        if name == "meta.config":
            config_text = arr.tobytes().decode("utf-8")
        elif name == "meta.best_val_dice":
            best = float(arr[0])
        elif name.startswith("optimizer."):
            extra[name[len("optimizer."):]] = arr
        else:
            tensors[name] = arr
    return Checkpoint(tensors=tensors, config_text=config_text,
                      best_val_dice=best, extra=extra)
