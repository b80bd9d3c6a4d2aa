"""Binary PPM (P6) / PGM (P5) read and write for 8-bit images."""

from __future__ import annotations

import numpy as np


class PpmError(Exception):
    pass


def _read_token(f) -> bytes:
    tok = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise PpmError("unexpected end of header")
        if ch in b" \t\r\n":
            if tok:
                return tok
            continue
        if ch == b"#":
            while ch and ch != b"\n":
                ch = f.read(1)
            continue
        tok += ch


def read_image(path) -> np.ndarray:
    """Read P5 -> (H,W) uint8 or P6 -> (H,W,3) uint8."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic not in (b"P5", b"P6"):
            raise PpmError(f"unsupported magic {magic!r} in {path}")
        w = int(_read_token(f))
        h = int(_read_token(f))
        maxval = int(_read_token(f))
        if maxval != 255:
            raise PpmError(f"only maxval=255 supported, got {maxval}")
        channels = 3 if magic == b"P6" else 1
        raw = f.read(w * h * channels)
        if len(raw) != w * h * channels:
            raise PpmError(f"truncated pixel data in {path}")
    arr = np.frombuffer(raw, dtype=np.uint8)
    if channels == 3:
        return arr.reshape(h, w, 3).copy()
    return arr.reshape(h, w).copy()


def write_image(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim == 3 and img.shape[2] == 3:
        magic, h, w = b"P6", img.shape[0], img.shape[1]
    elif img.ndim == 2:
        magic, h, w = b"P5", img.shape[0], img.shape[1]
    else:
        raise PpmError(f"cannot write image of shape {img.shape}")
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())
