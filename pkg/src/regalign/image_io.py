"""Image file formats: 8-bit PNG/PGM and float PFM.

PNG pixels load as floats in [0, 1]; color inputs collapse to gray with the
0.299/0.587/0.114 luma weights.  PFM is the little-endian portable float map
(rows stored bottom-up, negative scale), round-tripping float32 bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DimensionError
from .image import FeatureMap

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


def load_png(path: str | Path, grayscale: bool = True) -> FeatureMap:
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.dtype != np.uint8:
        raise DimensionError(f"expected 8-bit PNG, got {arr.dtype}")
    data = arr.astype(np.float64) / 255.0
    if data.ndim == 2:
        data = data[:, :, None]
    elif data.shape[2] == 4:
        data = data[:, :, :3]
    if grayscale and data.shape[2] == 3:
        data = (data @ _LUMA)[:, :, None]
    return FeatureMap(data.astype(np.float32))


def save_png(fmap: FeatureMap | np.ndarray, path: str | Path) -> None:
    data = fmap.data if isinstance(fmap, FeatureMap) else np.asarray(fmap)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.shape[2] not in (1, 3):
        raise DimensionError(f"PNG wants 1 or 3 channels, got {data.shape[2]}")
    quant = np.clip(np.rint(data.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    if quant.shape[2] == 1:
        Image.fromarray(quant[:, :, 0], mode="L").save(path, format="PNG")
    else:
        Image.fromarray(quant, mode="RGB").save(path, format="PNG")


def load_pfm(path: str | Path) -> np.ndarray:
    """Read a PFM file; returns (H, W) or (H, W, 3) float32, top row first."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4:
        raise DimensionError("truncated PFM header")
    header, dims, scale_line, payload = parts
    if header == b"PF":
        channels = 3
    elif header == b"Pf":
        channels = 1
    else:
        raise DimensionError(f"not a PFM file (header {header!r})")
    width, height = (int(x) for x in dims.decode("ascii").split())
    scale = float(scale_line.decode("ascii"))
    dtype = "<f4" if scale < 0 else ">f4"
    count = width * height * channels
    data = np.frombuffer(payload[: count * 4], dtype=dtype).astype(np.float32)
    if data.size != count:
        raise DimensionError("PFM payload shorter than header promises")
    data = data.reshape(height, width, channels)[::-1]  # stored bottom-up
    return data[:, :, 0].copy() if channels == 1 else data.copy()


def save_pfm(array: np.ndarray, path: str | Path) -> None:
    """Write float32 data as a little-endian PFM."""
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim == 2:
        channels = 1
    elif arr.ndim == 3 and arr.shape[2] in (1, 3):
        channels = arr.shape[2]
        if channels == 1:
            arr = arr[:, :, 0]
    else:
        raise DimensionError(f"PFM wants (H, W) or (H, W, 3), got {arr.shape}")
    header = b"PF\n" if channels == 3 else b"Pf\n"
    meta = f"{arr.shape[1]} {arr.shape[0]}\n-1.0\n".encode("ascii")
    payload = arr[::-1].astype("<f4").tobytes()
    Path(path).write_bytes(header + meta + payload)


def load_pgm(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.dtype != np.uint8 or arr.ndim != 2:
        raise DimensionError("expected 8-bit single-channel PGM")
    return arr.copy()


def save_pgm(array: np.ndarray, path: str | Path) -> None:
    arr = np.asarray(array)
    if arr.dtype != np.uint8 or arr.ndim != 2:
        raise DimensionError("PGM wants a uint8 (H, W) array")
    Image.fromarray(arr, mode="L").save(path, format="PPM")


def checkpoint_tensors_to_bytes(tensors: dict[str, np.ndarray], version: int = 1) -> bytes:
    """Binary tensor container: magic, version, then length-prefixed tensors."""
    chunks = [b"RGNT", struct.pack("<I", version)]
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype=np.float32)
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.astype("<f4").tobytes())
    return b"".join(chunks)


def checkpoint_tensors_from_bytes(raw: bytes) -> tuple[dict[str, np.ndarray], int]:
    from .errors import CheckpointError

    if raw[:4] != b"RGNT":
        raise CheckpointError(f"bad checkpoint magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != 1:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    off = 8
    while off < len(raw):
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        off += count * 4
        tensors[name] = arr.astype(np.float32)
    return tensors, version


def save_checkpoint(tensors: dict[str, np.ndarray], path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_tensors_to_bytes(tensors))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    tensors, _ = checkpoint_tensors_from_bytes(Path(path).read_bytes())
    return tensors
