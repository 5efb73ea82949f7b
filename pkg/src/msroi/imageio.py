"""Netpbm (PGM/PPM) codecs plus a PNG fallback through Pillow."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _tokens(buf: bytes, count: int, pos: int):
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated netpbm header")
        out.append(buf[start:pos])
    return out, pos


def decode_pgm(buf: bytes) -> tuple[np.ndarray, int]:
    """Return (pixels [H,W] as uint8/uint16, maxval)."""
    magic = buf[:2]
    if magic not in (b"P5", b"P2"):
        raise ValueError(f"not a PGM file (magic {magic!r})")
    (w, h, maxval), pos = _tokens(buf, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 65536 or w < 1 or h < 1:
        raise ValueError(f"bad PGM header {w}x{h} maxval {maxval}")
    if magic == b"P2":
        vals, _ = _tokens(buf, w * h, pos)
        return np.array([int(v) for v in vals], dtype=np.uint16 if maxval > 255 else np.uint8).reshape(h, w), maxval
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = w * h * dtype.itemsize
    data = buf[pos:pos + need]
    if len(data) != need:
        raise ValueError("truncated PGM pixel data")
    return np.frombuffer(data, dtype=dtype).reshape(h, w).astype(dtype.newbyteorder("=")), maxval


def encode_pgm(pixels: np.ndarray, maxval: int = 255) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError("PGM pixels must be 2-D")
    h, w = pixels.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    body = pixels.astype(">u2" if maxval > 255 else np.uint8).tobytes()
    return header + body


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("PPM pixels must be [H,W,3]")
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[0,1] floats to 8-bit, clipping out-of-range values."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, img01: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(to_uint8(img01)))


def write_ppm(path, rgb01: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(to_uint8(rgb01)))


def read_image(path) -> np.ndarray:
    """Decode PGM or PNG to a float [C,H,W] array scaled to [0,1]."""
    path = Path(path)
    buf = path.read_bytes()
    if buf[:2] in (b"P5", b"P2"):
        px, maxval = decode_pgm(buf)
        return (px.astype(np.float64) / maxval)[None]
    from PIL import Image

    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
                return arr[None]
            arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im, dtype=np.float64) / 255.0
    except OSError as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
