"""Binary PGM (P5, maxval 255) reader and writer with bit-exact round trips."""

import numpy as np

from .errors import PgmError


def read_pgm(path):
    """Read a P5 file into a float64 (H, W) array of values in [0, 255]."""
    with open(path, "rb") as f:
        data = f.read()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(data):
            if data[pos:pos + 1].isspace():
                pos += 1
            elif data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos:pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PgmError(f"{path}: truncated header")
        return data[start:pos]

    magic = token()
    if magic != b"P5":
        raise PgmError(f"{path}: unsupported format {magic!r}, only P5 is handled")
    try:
        width = int(token())
        height = int(token())
        maxval = int(token())
    except ValueError as exc:
        raise PgmError(f"{path}: malformed header") from exc
    if width <= 0 or height <= 0:
        raise PgmError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise PgmError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    payload = data[pos:pos + width * height]
    if len(payload) != width * height:
        raise PgmError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).astype(np.float64)


def write_pgm(path, image):
    """Write an (H, W) array as P5. Values are rounded and clamped to [0, 255]."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise PgmError(f"cannot write shape {img.shape} as PGM")
    h, w = img.shape
    payload = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(payload.tobytes())
