"""Binary tensor files (CMFT) and binary PGM/PPM images."""

from __future__ import annotations

import os
import struct

import numpy as np

from .records import DataError

MAGIC = b"CMFT"
VERSION = 1


def write_tensor(path, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = MAGIC + struct.pack(f"<II{arr.ndim}I", VERSION, arr.ndim, *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_tensor(data, os.fspath(path))


def decode_tensor(data: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(data) < 12:
        raise DataError(f"{name}: truncated header at byte offset {len(data)} (need 12 bytes)")
    if data[:4] != MAGIC:
        raise DataError(f"{name}: bad magic {data[:4]!r} at byte offset 0, expected {MAGIC!r}")
    version, rank = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise DataError(f"{name}: unsupported version {version} at byte offset 4")
    end = 12 + 4 * rank
    if len(data) < end:
        raise DataError(f"{name}: truncated dims at byte offset {len(data)} (need {end} bytes)")
    dims = struct.unpack_from(f"<{rank}I", data, 12)
    expected = 4 * int(np.prod(dims, dtype=np.int64))
    actual = len(data) - end
    if actual != expected:
        raise DataError(f"{name}: payload at byte offset {end} is {actual} bytes, "
                        f"expected {expected} for dims {tuple(dims)}")
    return np.frombuffer(data, dtype="<f4", offset=end).reshape(dims).copy()


def _pnm_tokens(data: bytes, name: str):
    """Header tokens (magic, width, height, maxval) and payload offset."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataError(f"{name}: truncated header at byte offset {pos}")
        tokens.append((data[start:pos], start))
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode_pnm(data: bytes, name: str = "<bytes>") -> np.ndarray:
    """``(H, W)`` uint8 for P5, ``(H, W, 3)`` for P6."""
    tokens, offset = _pnm_tokens(data, name)
    (magic, _), *nums = tokens
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{name}: bad magic {magic!r} at byte offset 0, expected P5 or P6")
    try:
        width, height, maxval = (int(t) for t, _ in nums)
    except ValueError:
        raise DataError(f"{name}: non-numeric header field") from None
    if maxval != 255:
        raise DataError(f"{name}: maxval {maxval} at byte offset {nums[2][1]}, only 255 supported")
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    actual = len(data) - offset
    if actual != expected:
        raise DataError(f"{name}: raster at byte offset {offset} is {actual} bytes, expected {expected}")
    img = np.frombuffer(data, dtype=np.uint8, offset=offset).reshape(height, width, channels)
    return img[:, :, 0].copy() if channels == 1 else img.copy()


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pnm(fh.read(), os.fspath(path))


def encode_pnm(img) -> bytes:
    img = np.asarray(img)
    if img.ndim == 2:
        magic, h, w = b"P5", *img.shape
    elif img.ndim == 3 and img.shape[2] == 3:
        magic, h, w = b"P6", img.shape[0], img.shape[1]
    else:
        raise ValueError(f"image must be (H, W) or (H, W, 3), got {img.shape}")
    raster = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + raster.tobytes()


def write_pnm(path, img):
    with open(path, "wb") as fh:
        fh.write(encode_pnm(img))


def image_to_planes(img: np.ndarray) -> np.ndarray:
    """``(H, W)`` or ``(H, W, 3)`` image to a ``(C, H, W)`` float array."""
    img = np.asarray(img, dtype=np.float64)
    return img[None] if img.ndim == 2 else np.moveaxis(img, -1, 0)


def planes_to_image(planes: np.ndarray) -> np.ndarray:
    planes = np.asarray(planes)
    return planes[0] if planes.shape[0] == 1 else np.moveaxis(planes, 0, -1)
