"""Minimal portable anymap (PGM/PPM) reader and writer.

Supports ASCII (P2/P3) and binary (P5/P6) graymaps and pixmaps with
maxval up to 65535.  Pixels come back as an (height, width, channels)
uint16/uint8 array in raster-scan order.
"""

import numpy as np

_CHANNELS = {b"P2": 1, b"P3": 3, b"P5": 1, b"P6": 3}


class PNMError(ValueError):
    pass


def _tokens(data, start, count):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out = []
    i = start
    n = len(data)
    while len(out) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
            j += 1
        if j == i:
            raise PNMError("truncated header")
        out.append(data[i:j])
        i = j
    return out, i


def read_pnm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    magic = data[:2]
    if magic not in _CHANNELS:
        raise PNMError(f"{path}: unsupported magic number {magic!r}")
    ch = _CHANNELS[magic]
    (w, h, maxval), pos = _tokens(data, 2, 3)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise PNMError(f"{path}: malformed header") from None
    if w <= 0 or h <= 0 or not (0 < maxval < 65536):
        raise PNMError(f"{path}: invalid header values {w}x{h} maxval={maxval}")
    count = w * h * ch
    if magic in (b"P2", b"P3"):
        vals = data[pos:].split()
        if len(vals) < count:
            raise PNMError(f"{path}: expected {count} samples, found {len(vals)}")
        pix = np.array([int(v) for v in vals[:count]], dtype=np.int64)
    else:
        pos += 1  # single whitespace byte after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = data[pos:pos + count * dtype.itemsize]
        if len(raw) < count * dtype.itemsize:
            raise PNMError(f"{path}: truncated pixel data")
        pix = np.frombuffer(raw, dtype=dtype).astype(np.int64)
    if np.any(pix > maxval) or np.any(pix < 0):
        raise PNMError(f"{path}: sample exceeds maxval {maxval}")
    return pix.reshape(h, w, ch), maxval


def write_pnm(path, pixels, binary=True):
    """Write an (h, w) or (h, w, 1|3) array; values are rounded and clipped to 0..255."""
    pix = np.asarray(pixels, dtype=np.float64)
    if pix.ndim == 2:
        pix = pix[:, :, None]
    if pix.ndim != 3 or pix.shape[2] not in (1, 3):
        raise PNMError(f"cannot write array of shape {pix.shape} as PNM")
    h, w, ch = pix.shape
    q = np.clip(np.rint(pix), 0, 255).astype(np.uint8)
    if binary:
        magic = b"P5" if ch == 1 else b"P6"
        body = q.tobytes()
    else:
        magic = b"P2" if ch == 1 else b"P3"
        rows = [" ".join(str(v) for v in row.reshape(-1)) for row in q]
        body = ("\n".join(rows) + "\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(body)
