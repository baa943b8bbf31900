"""Image and label-map codecs: binary PPM/PGM, PNG (via Pillow), raw tensors."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from ..errors import DecodeError, ShapeError

RAW_DTYPES = {"float32": "<f4", "float64": "<f8", "uint8": "u1", "uint16": "<u2", "int32": "<i4", "int64": "<i8"}


def _netpbm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DecodeError("truncated netpbm header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates header from raster
    return tokens, pos + 1


def read_netpbm(path: str | Path) -> np.ndarray:
    """Decode binary P5/P6. Returns uint8 or uint16 (H, W) / (H, W, 3)."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise DecodeError(f"{path}: not a binary PGM/PPM (magic {magic!r})")
    tokens, offset = _netpbm_tokens(data, 4)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DecodeError(f"{path}: bad netpbm header") from exc
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise DecodeError(f"{path}: invalid dimensions or maxval")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    n = w * h * channels
    raster = data[offset : offset + n * dtype.itemsize]
    if len(raster) != n * dtype.itemsize:
        raise DecodeError(f"{path}: truncated raster")
    arr = np.frombuffer(raster, dtype=dtype).astype(np.uint8 if maxval < 256 else np.uint16)
    arr = arr.reshape((h, w, 3) if channels == 3 else (h, w))
    if maxval not in (255, 65535):
        arr = np.round(arr.astype(np.float64) * ((255 if maxval < 256 else 65535) / maxval)).astype(arr.dtype)
    return arr


def write_netpbm(path: str | Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    elif arr.ndim == 2:
        magic = b"P5"
    else:
        raise ShapeError(f"netpbm needs (H, W) or (H, W, 3), got {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 65535):
        raise ShapeError("netpbm values must lie in [0, 65535]")
    wide = arr.dtype.itemsize > 1 and arr.size and arr.max() > 255
    maxval = 65535 if wide else 255
    raster = arr.astype(">u2" if wide else "u1").tobytes()
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n{maxval}\n".encode())
        fh.write(raster)


def save_raw_tensor(path: str | Path, arr: np.ndarray) -> None:
    """Write ``<path>`` (JSON sidecar) and ``<path>.bin`` (little-endian payload)."""
    arr = np.ascontiguousarray(arr)
    name = next((k for k, v in RAW_DTYPES.items() if np.dtype(v) == arr.dtype.newbyteorder("<")), None)
    if name is None:
        raise ShapeError(f"unsupported raw tensor dtype {arr.dtype}")
    raw = arr.astype(RAW_DTYPES[name], copy=False).tobytes()
    path = Path(path)
    payload = path.with_name(path.name + ".bin")
    payload.write_bytes(raw)
    meta = {"format": "raw-tensor", "dtype": name, "shape": list(arr.shape), "payload": payload.name,
            "sha256": hashlib.sha256(raw).hexdigest()}
    path.write_text(json.dumps(meta, indent=2) + "\n")


def load_raw_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        meta = json.loads(path.read_text())
        raw = (path.parent / meta["payload"]).read_bytes()
        dtype = np.dtype(RAW_DTYPES[meta["dtype"]])
        shape = tuple(meta["shape"])
    except (OSError, KeyError, ValueError) as exc:
        raise DecodeError(f"{path}: unreadable raw tensor: {exc}") from exc
    if "sha256" in meta and hashlib.sha256(raw).hexdigest() != meta["sha256"]:
        raise DecodeError(f"{path}: payload checksum mismatch")
    if len(raw) != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
        raise DecodeError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def _read_pil(path: Path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                return np.asarray(im, dtype=np.int64).astype(np.uint16)
            if im.mode in ("P", "L"):
                return np.asarray(im)
            return np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"{path}: cannot decode image: {exc}") from exc


def read_raster(path: str | Path) -> np.ndarray:
    """Decode any supported file to its stored integer (or raw float) values."""
    path = Path(path)
    if not path.exists():
        raise DecodeError(f"{path}: no such file")
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pgm", ".pnm"):
        return read_netpbm(path)
    if suffix == ".json":
        return load_raw_tensor(path)
    if suffix in (".png", ".jpg", ".jpeg", ".bmp"):
        return _read_pil(path)
    raise DecodeError(f"{path}: unsupported image format {suffix!r}")


def load_image(path: str | Path) -> np.ndarray:
    """Load an RGB image as float32 (H, W, 3) in [0, 1].

    Grayscale inputs are replicated to three channels. Raw tensors are
    returned as stored (float data is assumed to already be in [0, 1]).
    """
    arr = read_raster(path)
    if arr.dtype.kind == "f":
        img = arr.astype(np.float32)
    else:
        img = arr.astype(np.float32) / (65535.0 if arr.dtype == np.uint16 else 255.0)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise DecodeError(f"{path}: expected an (H, W, 1|3) image, got {img.shape}")
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return img


def normalize_image(img: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    return ((img - mean) / std).astype(np.float32)


def load_label_map(path: str | Path) -> np.ndarray:
    arr = read_raster(path)
    if arr.ndim == 3:
        if arr.shape[2] != 1 and not (np.all(arr[..., 0] == arr[..., 1]) and np.all(arr[..., 0] == arr[..., 2])):
            raise DecodeError(f"{path}: label map must be single-channel")
        arr = arr[..., 0]
    if arr.dtype.kind == "f":
        raise DecodeError(f"{path}: label map must hold integers")
    return arr.astype(np.int64)


def image_size(path: str | Path) -> tuple[int, int]:
    """(H, W) of an image file."""
    arr = read_raster(path)
    return arr.shape[0], arr.shape[1]
