"""Light-field containers: a directory of per-view PNGs and a raw tensor file.

Directory layout::

    view_{u}_{v}.png   one image per angular position
    meta.json          {"U", "V", "H", "W", "channels", "bit_depth"}

Raw layout: b"LFRT", version byte, dtype code byte, five little-endian
uint32 extents (U, V, H, W, C), then row-major little-endian scalars.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

RAW_MAGIC = b"LFRT"
RAW_VERSION = 1
_RAW_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("u1"): 3, np.dtype("<u2"): 4}
_RAW_DTYPES = {v: k for k, v in _RAW_CODES.items()}
_HEADER = struct.Struct("<4sBB5I")


class LfFormatError(ValueError):
    """Malformed, incomplete or unsupported light-field container."""


def _as_5d(lf: np.ndarray) -> np.ndarray:
    lf = np.asarray(lf)
    if lf.ndim == 4:
        return lf[..., None]
    if lf.ndim != 5:
        raise LfFormatError(f"light field must be [U, V, H, W] or [U, V, H, W, C], got {lf.shape}")
    return lf


# ---------------------------------------------------------------------------
# PNG directory


def write_lf_dir(path, lf, bit_depth: int = 8) -> Path:
    """Write a [U, V, H, W(, C)] light field with values in [0, 1]."""
    lf = _as_5d(lf)
    u_n, v_n, h, w, c = lf.shape
    if c not in (1, 3):
        raise LfFormatError(f"only grayscale or RGB views are supported, got {c} channels")
    if bit_depth not in (8, 16):
        raise LfFormatError(f"bit depth must be 8 or 16, got {bit_depth}")
    if bit_depth == 16 and c == 3:
        raise LfFormatError("16-bit RGB views are not supported by the PNG writer")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    peak = (1 << bit_depth) - 1
    q = np.round(np.clip(np.asarray(lf, dtype=float), 0.0, 1.0) * peak)
    for u in range(u_n):
        for v in range(v_n):
            view = q[u, v]
            if c == 1 and bit_depth == 16:
                img = Image.fromarray(view[..., 0].astype(np.uint16))
            elif c == 1:
                img = Image.fromarray(view[..., 0].astype(np.uint8), mode="L")
            else:
                img = Image.fromarray(view.astype(np.uint8), mode="RGB")
            img.save(out / f"view_{u}_{v}.png")
    meta = {"U": u_n, "V": v_n, "H": h, "W": w, "channels": c, "bit_depth": bit_depth}
    (out / "meta.json").write_text(json.dumps(meta, indent=2))
    return out


def read_meta(path) -> dict:
    meta_path = Path(path) / "meta.json"
    if not meta_path.is_file():
        raise LfFormatError(f"{path}: missing meta.json")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise LfFormatError(f"{meta_path}: {exc}") from exc
    missing = {"U", "V", "H", "W", "channels", "bit_depth"} - set(meta)
    if missing:
        raise LfFormatError(f"{meta_path}: missing keys {sorted(missing)}")
    return meta


def read_lf_dir(path) -> np.ndarray:
    """Read a PNG container into a float [U, V, H, W, C] array in [0, 1]."""
    root = Path(path)
    meta = read_meta(root)
    u_n, v_n, h, w, c = (int(meta[k]) for k in ("U", "V", "H", "W", "channels"))
    peak = float((1 << int(meta["bit_depth"])) - 1)
    out = np.empty((u_n, v_n, h, w, c))
    for u in range(u_n):
        for v in range(v_n):
            f = root / f"view_{u}_{v}.png"
            if not f.is_file():
                raise LfFormatError(f"{root}: missing view {f.name}")
            with Image.open(f) as img:
                arr = np.asarray(img)
            if arr.ndim == 2:
                arr = arr[..., None]
            if arr.shape != (h, w, c):
                raise LfFormatError(f"{f}: shape {arr.shape} does not match meta {(h, w, c)}")
            out[u, v] = arr / peak
    return out


# ---------------------------------------------------------------------------
# raw tensor file


def write_raw(path, lf) -> Path:
    lf = _as_5d(lf)
    dt = lf.dtype.newbyteorder("<") if lf.dtype.itemsize > 1 else lf.dtype
    if dt not in _RAW_CODES:
        lf = lf.astype("<f8")
        dt = np.dtype("<f8")
    header = _HEADER.pack(RAW_MAGIC, RAW_VERSION, _RAW_CODES[dt], *lf.shape)
    path = Path(path)
    path.write_bytes(header + np.ascontiguousarray(lf, dtype=dt).tobytes())
    return path


def read_raw(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise LfFormatError(f"{path}: too short for a raw light-field header")
    magic, version, code, *shape = _HEADER.unpack_from(blob)
    if magic != RAW_MAGIC:
        raise LfFormatError(f"{path}: bad magic {magic!r}")
    if version != RAW_VERSION:
        raise LfFormatError(f"{path}: unsupported version {version}")
    if code not in _RAW_DTYPES:
        raise LfFormatError(f"{path}: unknown dtype code {code}")
    dt = _RAW_DTYPES[code]
    count = int(np.prod(shape))
    if len(blob) != _HEADER.size + count * dt.itemsize:
        raise LfFormatError(f"{path}: payload is {len(blob) - _HEADER.size} bytes, "
                            f"expected {count * dt.itemsize} for extents {tuple(shape)}")
    return np.frombuffer(blob, dtype=dt, offset=_HEADER.size, count=count).reshape(shape).copy()


def load_lf(path) -> np.ndarray:
    """Read either container; raw integer data is scaled to [0, 1]."""
    p = Path(path)
    if p.is_dir():
        return read_lf_dir(p)
    if not p.exists():
        raise LfFormatError(f"{path}: no such light field")
    arr = read_raw(p)
    if arr.dtype.kind == "u":
        return arr / float(np.iinfo(arr.dtype).max)
    return arr.astype(float)


def save_lf(path, lf, bit_depth: int = 8) -> Path:
    """Write a PNG directory, or a raw file when ``path`` ends in .lfr."""
    p = Path(path)
    if p.suffix == ".lfr":
        return write_raw(p, np.asarray(lf, dtype=float))
    return write_lf_dir(p, lf, bit_depth)
