"""Minimal PNG encoder (grayscale 8/16-bit and RGB 8-bit) on top of zlib."""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF))


def encode_png(pixels: np.ndarray, bit_depth: int = 8) -> bytes:
    """Encode an ``(H, W)`` gray or ``(H, W, 3)`` RGB integer array."""
    if pixels.ndim == 2:
        color_type, channels = 0, 1
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        color_type, channels = 2, 3
    else:
        raise ValueError(f"unsupported pixel array shape {pixels.shape}")
    if bit_depth not in (8, 16) or (channels == 3 and bit_depth != 8):
        raise ValueError("supported: 8/16-bit gray, 8-bit RGB")
    h, w = pixels.shape[:2]
    dtype = ">u2" if bit_depth == 16 else "u1"
    rows = np.ascontiguousarray(pixels.astype(dtype)).reshape(h, -1).view(np.uint8)
    raw = np.concatenate([np.zeros((h, 1), np.uint8), rows], axis=1).tobytes()
    header = struct.pack(">IIBBBBB", w, h, bit_depth, color_type, 0, 0, 0)
    return (b"\x89PNG\r\n\x1a\n" + _chunk(b"IHDR", header)
            + _chunk(b"IDAT", zlib.compress(raw, 9)) + _chunk(b"IEND", b""))


def save_image_png(path, image, bit_depth: int = 8, vmin: float | None = None,
                   vmax: float | None = None) -> None:
    """Write a real-valued image as grayscale PNG, mapping ``[vmin, vmax]`` to full scale."""
    img = np.asarray(image, dtype=np.float64)
    lo = float(img.min()) if vmin is None else vmin
    hi = float(img.max()) if vmax is None else vmax
    scale = (1 << bit_depth) - 1
    norm = np.clip((img - lo) / (hi - lo), 0.0, 1.0) if hi > lo else np.zeros_like(img)
    Path(path).write_bytes(encode_png(np.round(norm * scale), bit_depth))


def decode_png_gray(data: bytes) -> np.ndarray:
    """Decode PNGs written by :func:`encode_png` (no filtering, single IDAT)."""
    pos = 8
    width = height = depth = color = None
    idat = b""
    while pos < len(data):
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        tag = data[pos + 4:pos + 8]
        payload = data[pos + 8:pos + 8 + length]
        if tag == b"IHDR":
            width, height, depth, color = struct.unpack(">IIBB", payload[:10])
        elif tag == b"IDAT":
            idat += payload
        pos += 12 + length
    channels = 1 if color == 0 else 3
    bpp = channels * depth // 8
    raw = np.frombuffer(zlib.decompress(idat), np.uint8).reshape(height, 1 + width * bpp)
    body = raw[:, 1:].copy()
    if depth == 16:
        return body.view(">u2").reshape(height, width).astype(np.uint16)
    return body.reshape(height, width, channels) if channels == 3 else body
