"""Binary containers shared by every tool in this package.

Two formats, both little-endian and trivially parseable:

* ``VJT1`` -- a single n-dimensional float tensor.
  Layout: magic ``VJT1``, u8 version (=1), u8 dtype (0=f32, 1=f64),
  u8 ndim, u8 reserved (=0), ndim u64 dims, row-major payload.
* ``VJC1`` -- a checkpoint: named VJT1 tensors plus a JSON trailer.
  Layout: magic ``VJC1``, u32 entry count, then per entry
  (u32 name length, UTF-8 name, embedded VJT1 blob), then a UTF-8
  JSON object running to end of file.

Frame dumps use binary PPM (P6) after mapping [-1, 1] to [0, 255].
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

VJT_MAGIC = b"VJT1"
VJC_MAGIC = b"VJC1"
VJT_VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR_DTYPE = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class FormatError(ValueError):
    """Raised when a container file is malformed or truncated."""


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _CODE_FOR_DTYPE:
        raise FormatError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    code = _CODE_FOR_DTYPE[arr.dtype]
    header = VJT_MAGIC + struct.pack("<BBBB", VJT_VERSION, code, arr.ndim, 0)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()
    return header + dims + payload


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one VJT1 blob at ``offset``; returns (array, next offset)."""
    if len(buf) < offset + 8:
        raise FormatError("truncated VJT1 header")
    if buf[offset : offset + 4] != VJT_MAGIC:
        raise FormatError(f"bad magic {buf[offset:offset + 4]!r}, expected {VJT_MAGIC!r}")
    version, code, ndim, _ = struct.unpack_from("<BBBB", buf, offset + 4)
    if version != VJT_VERSION:
        raise FormatError(f"unsupported VJT1 version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}")
    pos = offset + 8
    if len(buf) < pos + 8 * ndim:
        raise FormatError("truncated VJT1 dims")
    dims = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    nbytes = count * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError("truncated VJT1 payload")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(dims)
    return arr.copy(), pos + nbytes


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after tensor")
    return arr


def save_checkpoint_file(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write named tensors plus a JSON metadata trailer. Order is preserved."""
    parts = [VJC_MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(tensor_to_bytes(arr))
    parts.append(json.dumps(meta, sort_keys=True).encode("utf-8"))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint_file(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise FormatError(f"{path}: too short for a VJC1 checkpoint")
    if buf[:4] != VJC_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}, expected {VJC_MAGIC!r}")
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(buf) < pos + 4:
            raise FormatError(f"{path}: truncated entry header")
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if len(buf) < pos + name_len:
            raise FormatError(f"{path}: truncated entry name")
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        tensors[name], pos = tensor_from_bytes(buf, pos)
    try:
        meta = json.loads(buf[pos:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad JSON trailer: {exc}") from exc
    if not isinstance(meta, dict):
        raise FormatError(f"{path}: JSON trailer must be an object")
    return tensors, meta


def frame_to_u8(frame: np.ndarray) -> np.ndarray:
    """Map one [-1, 1] HxWx3 frame to uint8 [0, 255]."""
    scaled = np.rint((np.asarray(frame, dtype=np.float64) + 1.0) * 127.5)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def save_ppm(path: str | Path, frame: np.ndarray) -> None:
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"expected HxWx3 frame, got shape {frame.shape}")
    h, w = frame.shape[:2]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + frame_to_u8(frame).tobytes())


def save_video_frames(out_dir: str | Path, video: np.ndarray, stem: str = "frame") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(video):
        p = out_dir / f"{stem}_{i:03d}.ppm"
        save_ppm(p, frame)
        paths.append(p)
    return paths
