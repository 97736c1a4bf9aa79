"""Binary PPM (P6) / PGM (P5) codec, 8-bit, plus score-map dumps."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _tokens(data: bytes, count: int):
    """First ``count`` header tokens and the offset of the pixel payload."""
    out, pos, n = [], 0, len(data)
    while len(out) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        out.append(data[start:pos])
    if pos >= n or not data[pos : pos + 1].isspace():
        raise ImageFormatError("missing whitespace after header")
    return out, pos + 1


def decode_pnm(data: bytes) -> tuple[np.ndarray, int]:
    """Raw pixel array (h, w, channels) and maxval."""
    if data[:2] not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {data[:2]!r}; only P5 and P6 are read")
    channels = 3 if data[:2] == b"P6" else 1
    try:
        (_, w, h, maxval), pos = _tokens(data, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageFormatError(f"malformed header: {exc}") from exc
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise ImageFormatError(f"unsupported dimensions or maxval ({w}x{h}, {maxval})")
    need = w * h * channels
    payload = data[pos : pos + need]
    if len(payload) < need:
        raise ImageFormatError(f"truncated payload: {len(payload)} of {need} bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, channels), maxval


def read_image(path) -> np.ndarray:
    """Float RGB tensor in [0, 1]; grayscale is replicated to three channels."""
    raw, maxval = decode_pnm(Path(path).read_bytes())
    img = raw.astype(np.float64) / maxval
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return img


def to_bytes(tensor: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(tensor) * 255.0), 0, 255).astype(np.uint8)


def encode_pnm(tensor: np.ndarray) -> bytes:
    t = np.asarray(tensor)
    if t.ndim == 2:
        t = t[:, :, None]
    if t.shape[2] not in (1, 3):
        raise ImageFormatError(f"cannot encode depth {t.shape[2]}")
    magic = b"P6" if t.shape[2] == 3 else b"P5"
    h, w = t.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + to_bytes(t).tobytes()


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + f".{os.getpid()}.tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def write_image(tensor: np.ndarray, path) -> None:
    _atomic_write(path, encode_pnm(tensor))


def write_scoremap_pgm(values: np.ndarray, path) -> float:
    """16-bit PGM, values mapped linearly onto [0, 65535]; returns the scale.

    The scale (value per grey level) is also recorded in a header comment.
    """
    v = np.asarray(values, dtype=np.float64)
    peak = float(v.max()) if v.size else 0.0
    scale = peak / 65535.0 if peak > 0 else 1.0
    grey = np.clip(np.rint(v / scale), 0, 65535).astype(">u2")
    h, w = v.shape
    header = f"P5\n# scale {scale!r}\n{w} {h}\n65535\n".encode()
    _atomic_write(path, header + grey.tobytes())
    return scale


def write_scoremap_csv(values: np.ndarray, path) -> None:
    v = np.asarray(values, dtype=np.float64)
    lines = [",".join(repr(float(x)) for x in row) for row in v]
    _atomic_write(path, ("\n".join(lines) + "\n").encode())
