"""Binary PPM (P6) and PGM (P5) with 8-bit samples."""

from pathlib import Path

import numpy as np


def write_ppm(path, image: np.ndarray) -> None:
    """``image`` is [3, H, W] in [0, 1]."""
    c, h, w = image.shape
    if c != 3:
        raise ValueError(f"PPM needs 3 channels, got {c}")
    data = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def write_pgm(path, mask: np.ndarray) -> None:
    """Binary 2-D mask written as 0/255."""
    h, w = mask.shape
    data = np.where(mask > 0, 255, 0).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def _parse(buf: bytes, magic: bytes):
    fields = []
    pos = 0
    while len(fields) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        fields.append(buf[pos:end])
        pos = end
    if fields[0] != magic:
        raise ValueError(f"expected {magic!r} header, got {fields[0]!r}")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"only 8-bit files are supported (maxval {maxval})")
    return w, h, buf[pos + 1:]


def read_ppm(path) -> np.ndarray:
    w, h, payload = _parse(Path(path).read_bytes(), b"P6")
    arr = np.frombuffer(payload, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    w, h, payload = _parse(Path(path).read_bytes(), b"P5")
    return np.frombuffer(payload, dtype=np.uint8, count=w * h).reshape(h, w).copy()
