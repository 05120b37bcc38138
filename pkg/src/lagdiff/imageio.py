"""Binary PPM (P6) / PGM (P5) reading and writing.

Images live in memory as float arrays (3, H, W) in [-1, 1]; on disk they are
8-bit with ``v = round((x + 1) / 2 * 255)``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def to_u8(x: np.ndarray) -> np.ndarray:
    return np.rint((np.clip(x, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def from_u8(v: np.ndarray) -> np.ndarray:
    return v.astype(np.float64) / 127.5 - 1.0


def _read_header(raw: bytes, magic: bytes) -> tuple[int, int, int, int]:
    """Return (width, height, maxval, data offset)."""
    if raw[:2] != magic:
        raise ImageFormatError(f"expected {magic.decode()} magic, found {raw[:2]!r}")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError("malformed header")
        fields.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise ImageFormatError("header must end with a single whitespace byte")
    w, h, maxval = fields
    if maxval != 255 or w <= 0 or h <= 0:
        raise ImageFormatError(f"only 8-bit images supported (maxval={maxval}, {w}x{h})")
    return w, h, maxval, pos + 1


def save_image(img: np.ndarray, path) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {img.shape}")
    _, h, w = img.shape
    body = to_u8(img).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + body)


def load_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    w, h, _, off = _read_header(raw, b"P6")
    body = raw[off:]
    if len(body) != w * h * 3:
        raise ImageFormatError(f"{path}: expected {w * h * 3} pixel bytes, got {len(body)}")
    return from_u8(np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1))


def save_mask(mask: np.ndarray, path) -> None:
    """Write a {0, 1} mask as P5 with values 0 / 255."""
    m = np.asarray(mask)
    h, w = m.shape
    body = (m > 0.5).astype(np.uint8) * 255
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + body.tobytes())


def load_mask(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    w, h, _, off = _read_header(raw, b"P5")
    body = raw[off:]
    if len(body) != w * h:
        raise ImageFormatError(f"{path}: expected {w * h} pixel bytes, got {len(body)}")
    return (np.frombuffer(body, dtype=np.uint8).reshape(h, w) > 127).astype(np.float64)
