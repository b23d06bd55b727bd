"""PNG serialization for frames, masks, and UV maps.

8-bit images and masks go through Pillow. UV maps are stored as 16-bit RGB
PNGs (bit depth 16, color type 2), which Pillow cannot write, so a minimal
encoder/decoder lives here: the encoder emits filter-0 scanlines; the decoder
handles all five standard scanline filters.

Channel semantics: images are RGB in [0,1] scaled to the full integer range;
masks are single-channel 0/255.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ParameterError


def save_image_u8(path: str | Path, img: np.ndarray) -> None:
    """Float [0,1] HxWx3 (or HxW / HxWx1 grayscale) to 8-bit PNG."""
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q).save(path)


def load_image_u8(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    arr = np.asarray(mask)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    Image.fromarray(np.where(arr > 0.5, 255, 0).astype(np.uint8), mode="L").save(path)


def load_mask(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr > 127).astype(np.float32)[:, :, None]


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF))


def save_rgb16(path: str | Path, img: np.ndarray) -> None:
    """Float [0,1] HxWx3 to a 16-bit-per-channel RGB PNG."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ParameterError("save_rgb16 expects an HxWx3 array")
    h, w = arr.shape[:2]
    q = np.clip(np.rint(arr * 65535.0), 0, 65535).astype(">u2")
    raw = b"".join(b"\x00" + q[y].tobytes() for y in range(h))
    ihdr = struct.pack(">IIBBBBB", w, h, 16, 2, 0, 0, 0)
    data = (b"\x89PNG\r\n\x1a\n" + _chunk(b"IHDR", ihdr)
            + _chunk(b"IDAT", zlib.compress(raw, 6)) + _chunk(b"IEND", b""))
    Path(path).write_bytes(data)


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def load_rgb16(path: str | Path) -> np.ndarray:
    """Read a 16-bit RGB PNG back to float32 [0,1]."""
    data = Path(path).read_bytes()
    if data[:8] != b"\x89PNG\r\n\x1a\n":
        raise ParameterError(f"not a PNG file: {path}")
    pos, w = 8, None
    idat = b""
    while pos < len(data):
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        tag = data[pos + 4:pos + 8]
        payload = data[pos + 8:pos + 8 + length]
        if tag == b"IHDR":
            w, h, depth, ctype = struct.unpack(">IIBB", payload[:10])
            if depth != 16 or ctype != 2:
                raise ParameterError("load_rgb16 only reads 16-bit RGB PNGs")
        elif tag == b"IDAT":
            idat += payload
        elif tag == b"IEND":
            break
        pos += 12 + length
    if w is None:
        raise ParameterError(f"missing IHDR in {path}")

    raw = zlib.decompress(idat)
    bpp = 6  # bytes per pixel
    stride = w * bpp
    out = np.zeros((h, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int32)
    pos = 0
    for y in range(h):
        ftype = raw[pos]
        line = np.frombuffer(raw[pos + 1:pos + 1 + stride], dtype=np.uint8).astype(np.int32)
        pos += 1 + stride
        if ftype == 0:
            cur = line
        elif ftype == 2:  # up
            cur = (line + prev) & 0xFF
        else:  # sub / average / paeth need a byte-serial pass
            cur = np.zeros(stride, dtype=np.int32)
            for i in range(stride):
                a = cur[i - bpp] if i >= bpp else 0
                b = prev[i]
                c = prev[i - bpp] if i >= bpp else 0
                if ftype == 1:
                    cur[i] = (line[i] + a) & 0xFF
                elif ftype == 3:
                    cur[i] = (line[i] + (a + b) // 2) & 0xFF
                elif ftype == 4:
                    cur[i] = (line[i] + _paeth(a, b, c)) & 0xFF
                else:
                    raise ParameterError(f"unsupported PNG filter {ftype}")
        out[y] = cur.astype(np.uint8)
        prev = cur
    pix = out.reshape(h, w, 3, 2)
    vals = (pix[..., 0].astype(np.uint32) << 8) | pix[..., 1]
    return (vals.astype(np.float32) / 65535.0)
