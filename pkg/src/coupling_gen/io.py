"""On-disk formats: checkpoints, sample dumps, line-delimited logs, manifests.

Checkpoints are ``.npz`` named-array containers plus a ``__meta__`` JSON
entry. Raw sample dumps carry a 16-byte little-endian header::

    bytes 0-1   magic b"CG"
    byte  2     dtype code (see DTYPE_CODES)
    byte  3     rank (1..3)
    bytes 4-15  three uint32 dims, unused trailing dims are 0
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import torch

MAGIC = b"CG"
DTYPE_CODES = {1: np.uint8, 2: np.int32, 3: np.int64, 4: np.float32}
_CODE_OF = {np.dtype(v): k for k, v in DTYPE_CODES.items()}


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path: str | Path, obj: Any) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> None:
    import io

    buf = io.BytesIO()
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(buf, **payload)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
        meta = json.loads(data["__meta__"].tobytes().decode()) if "__meta__" in data.files else {}
    return arrays, meta


def module_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    state = {k[len(prefix):]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith(prefix)}
    module.load_state_dict(state)


def write_array_dump(path: str | Path, array: np.ndarray) -> None:
    a = np.ascontiguousarray(array)
    if a.dtype not in _CODE_OF:
        raise ValueError(f"unsupported dump dtype {a.dtype}")
    if not 1 <= a.ndim <= 3:
        raise ValueError("dumps hold arrays of rank 1 to 3")
    dims = list(a.shape) + [0] * (3 - a.ndim)
    header = struct.pack("<2sBB3I", MAGIC, _CODE_OF[a.dtype], a.ndim, *dims)
    atomic_write_bytes(path, header + a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())


def read_array_dump(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, code, rank, *dims = struct.unpack("<2sBB3I", raw[:16])
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if code not in DTYPE_CODES or not 1 <= rank <= 3:
        raise ValueError(f"{path}: corrupt header")
    dtype = np.dtype(DTYPE_CODES[code]).newbyteorder("<")
    return np.frombuffer(raw[16:], dtype=dtype).reshape(dims[:rank]).astype(DTYPE_CODES[code])


def write_sequences(path: str | Path, tokens: np.ndarray) -> None:
    lines = "".join(" ".join(str(int(t)) for t in row) + "\n" for row in tokens)
    atomic_write_bytes(path, lines.encode())


def read_sequences(path: str | Path) -> np.ndarray:
    rows = [list(map(int, line.split())) for line in Path(path).read_text().splitlines() if line.strip()]
    return np.asarray(rows, dtype=np.int64)


def write_image_grid(path: str | Path, images: np.ndarray, ncol: int = 16) -> None:
    """Tile ``(N, H, W)`` binary or [0, 1] images into one lossless PNG."""
    from PIL import Image

    n, h, w = images.shape
    ncol = min(ncol, n)
    nrow = -(-n // ncol)
    canvas = np.zeros((nrow * (h + 1) + 1, ncol * (w + 1) + 1), dtype=np.uint8)
    for i, img in enumerate(images):
        r, c = divmod(i, ncol)
        canvas[1 + r * (h + 1): 1 + r * (h + 1) + h, 1 + c * (w + 1): 1 + c * (w + 1) + w] = (
            np.clip(img, 0, 1) * 255
        ).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas, mode="L").save(path, format="PNG")


class JsonlWriter:
    """Append-only line-delimited JSON records."""

    def __init__(self, path: str | Path | None):
        self.path = None if path is None else Path(path)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict[str, Any]) -> None:
        if self.path is None:
            return
        with self.path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def write_all(self, records: Iterable[dict[str, Any]]) -> None:
        for r in records:
            self.write(r)


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
