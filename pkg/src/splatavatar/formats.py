"""On-disk formats: PPM images, raw byte rasters, and the checkpoint container.

Every binary format starts with four magic bytes so a wrong file is rejected
early instead of being misread.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from ._validation import InvalidInputError

MASK_MAGIC = b"SMSK"
LABEL_MAGIC = b"SLBL"
CHECKPOINT_MAGIC = b"SGCK"
CHECKPOINT_VERSION = 1


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def to_uint8(img):
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(img) -> bytes:
    data = to_uint8(img)
    if data.ndim == 2:
        data = np.repeat(data[..., None], 3, axis=2)
    if data.ndim != 3 or data.shape[2] != 3:
        raise InvalidInputError(f"PPM needs an (H, W, 3) image, got shape {data.shape}")
    h, w = data.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(data).tobytes()


def write_ppm(path, img) -> None:
    atomic_write_bytes(path, encode_ppm(img))


def read_ppm(path) -> np.ndarray:
    """Binary P6 with maxval 255; returns uint8 (H, W, 3)."""
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise InvalidInputError(f"{path}: only binary 8-bit PPM is supported")
    w, h = int(fields[1]), int(fields[2])
    body = data[pos + 1:pos + 1 + w * h * 3]
    if len(body) != w * h * 3:
        raise InvalidInputError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def encode_raster(values, magic: bytes) -> bytes:
    """One byte per pixel after an 8-byte header: magic, H and W as uint16."""
    values = np.asarray(values)
    h, w = values.shape
    if values.min(initial=0) < 0 or values.max(initial=0) > 255:
        raise InvalidInputError("raster values must fit in one byte")
    return magic + struct.pack("<HH", h, w) + values.astype(np.uint8).tobytes()


def decode_raster(data: bytes, magic: bytes, source="raster") -> np.ndarray:
    if data[:4] != magic:
        raise InvalidInputError(f"{source}: bad magic {data[:4]!r}, expected {magic!r}")
    h, w = struct.unpack_from("<HH", data, 4)
    body = data[8:8 + h * w]
    if len(body) != h * w:
        raise InvalidInputError(f"{source}: truncated raster")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def write_mask(path, mask) -> None:
    atomic_write_bytes(path, encode_raster((np.asarray(mask) > 0).astype(np.uint8), MASK_MAGIC))


def read_mask(path) -> np.ndarray:
    return decode_raster(Path(path).read_bytes(), MASK_MAGIC, path)


def write_labels(path, labels) -> None:
    atomic_write_bytes(path, encode_raster(labels, LABEL_MAGIC))


def read_labels(path) -> np.ndarray:
    return decode_raster(Path(path).read_bytes(), LABEL_MAGIC, path)


# --------------------------------------------------------------------------
# checkpoint container
# --------------------------------------------------------------------------

def config_hash(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def encode_checkpoint(arrays: dict, meta: dict) -> bytes:
    """Magic, version, JSON header length, JSON header, then raw arrays.

    Arrays are written little-endian in sorted-name order; the header is JSON
    with sorted keys, so equal content always gives equal bytes.
    """
    table = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8")
        elif arr.dtype.kind in "iub":
            arr = arr.astype("<i8")
        else:
            raise InvalidInputError(f"cannot store array {name} of dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr).tobytes()
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": table}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    return (CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header))
            + header + b"".join(blobs))


def decode_checkpoint(data: bytes, source="checkpoint"):
    if data[:4] != CHECKPOINT_MAGIC:
        raise InvalidInputError(f"{source}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise InvalidInputError(f"{source}: unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    base = 12 + hlen
    arrays = {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        raw = data[start:start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise InvalidInputError(f"{source}: truncated array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
    return arrays, header["meta"]


def save_checkpoint(path, arrays: dict, meta: dict) -> None:
    atomic_write_bytes(path, encode_checkpoint(arrays, meta))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes(), str(path))
