"""Netpbm and PNG image files, manifest and generic CSV tables."""
from __future__ import annotations

import csv
import os

import numpy as np


class DataError(ValueError):
    """Unreadable or malformed input data."""


# ---------------------------------------------------------------------------
# netpbm
# ---------------------------------------------------------------------------

def _header(kind: bytes, width: int, height: int, maxval: int | None, comment: str | None = None) -> bytes:
    head = b"%s\n" % kind
    if comment:
        head += b"# %s\n" % comment.encode("ascii")
    head += b"%d %d\n" % (width, height)
    if maxval is not None:
        head += b"%d\n" % maxval
    return head


def write_ppm(path: str, rgb: np.ndarray, comment: str | None = None) -> None:
    """8-bit binary pixmap (P6) from a [H, W, 3] uint8 array."""
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected uint8 [H, W, 3], got {rgb.dtype} {rgb.shape}")
    with open(path, "wb") as fh:
        fh.write(_header(b"P6", rgb.shape[1], rgb.shape[0], 255, comment))
        fh.write(np.ascontiguousarray(rgb).tobytes())


def write_pgm16(path: str, gray: np.ndarray, comment: str | None = None) -> None:
    """16-bit binary graymap (P5, big-endian samples) from a [H, W] uint16 array."""
    gray = np.asarray(gray)
    if gray.dtype != np.uint16 or gray.ndim != 2:
        raise ValueError(f"expected uint16 [H, W], got {gray.dtype} {gray.shape}")
    with open(path, "wb") as fh:
        fh.write(_header(b"P5", gray.shape[1], gray.shape[0], 65535, comment))
        fh.write(gray.astype(">u2").tobytes())


def write_pbm(path: str, mask: np.ndarray, comment: str | None = None) -> None:
    """Binary bitmap (P4); set pixels are written as 1 (black)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"expected [H, W] mask, got {mask.shape}")
    with open(path, "wb") as fh:
        fh.write(_header(b"P4", mask.shape[1], mask.shape[0], None, comment))
        fh.write(np.packbits(mask, axis=1).tobytes())


def _tokens(data: bytes, count: int):
    """First ``count`` header tokens and the offset of the raster that follows."""
    out, pos = [], 0
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated netpbm header")
        out.append(data[start:pos])
    # exactly one whitespace byte separates header and raster
    return out, pos + 1


def read_netpbm(path: str) -> np.ndarray:
    """Read P4, P5 or P6.  Returns bool [H,W], uint8/uint16 [H,W] or uint8/uint16 [H,W,3]."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic = data[:2]
    if magic == b"P4":
        (_, w, h), off = _tokens(data, 3)
        w, h = int(w), int(h)
        row = (w + 7) // 8
        raw = np.frombuffer(data, dtype=np.uint8, count=row * h, offset=off).reshape(h, row)
        return np.unpackbits(raw, axis=1)[:, :w].astype(bool)
    if magic in (b"P5", b"P6"):
        (_, w, h, maxval), off = _tokens(data, 4)
        w, h, maxval = int(w), int(h), int(maxval)
        chans = 3 if magic == b"P6" else 1
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
        n = w * h * chans
        if len(data) - off < n * dtype.itemsize:
            raise DataError(f"{path}: raster shorter than header declares")
        arr = np.frombuffer(data, dtype=dtype, count=n, offset=off)
        arr = arr.astype(np.uint16 if maxval > 255 else np.uint8)
        return arr.reshape((h, w, 3) if chans == 3 else (h, w))
    raise DataError(f"{path}: not a binary netpbm file (magic {magic!r})")


def read_image(path: str) -> np.ndarray:
    """8-bit RGB image from PPM or PNG as float64 [H, W, 3] in [0, 1]."""
    ext = os.path.splitext(path)[1].lower()
    if not os.path.exists(path):
        raise DataError(f"missing image file: {path}")
    if ext == ".png":
        from PIL import Image
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    elif ext in (".ppm", ".pnm"):
        arr = read_netpbm(path)
        if arr.ndim != 3 or arr.dtype != np.uint8:
            raise DataError(f"{path}: expected an 8-bit colour pixmap")
    else:
        raise DataError(f"{path}: unsupported image format {ext!r} (use .ppm or .png)")
    return arr.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

MANIFEST_FIELDS = ("id", "path", "grade")


def write_manifest(path: str, rows, comment: str | None = None) -> None:
    write_csv(path, MANIFEST_FIELDS, [dict(zip(MANIFEST_FIELDS, r)) for r in rows], comment)


def read_manifest(path: str, require_grade: bool = True) -> list:
    """Rows of ``id,path,grade`` as (id, absolute path, grade or None)."""
    base = os.path.dirname(os.path.abspath(path))
    out = []
    for lineno, row in read_csv(path, ("id", "path") + (("grade",) if require_grade else ())):
        g = row.get("grade", "")
        if g in ("", None):
            if require_grade:
                raise DataError(f"{path}:{lineno}: missing grade")
            grade = None
        else:
            try:
                grade = int(g)
            except ValueError:
                raise DataError(f"{path}:{lineno}: grade {g!r} is not an integer") from None
            if not 0 <= grade <= 4:
                raise DataError(f"{path}:{lineno}: grade {grade} outside 0..4")
        p = row["path"]
        out.append((row["id"], p if os.path.isabs(p) else os.path.join(base, p), grade))
    return out


def write_csv(path: str, fields, rows, comment: str | None = None) -> None:
    """Write dict rows; an optional leading ``# comment`` line (e.g. the config digest)."""
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in fields})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_csv(path: str, required=()):
    """Yield (line number, row dict), skipping ``#`` comment lines."""
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    with open(path, newline="") as fh:
        lines = [(i + 1, line) for i, line in enumerate(fh) if not line.startswith("#")]
    if not lines:
        raise DataError(f"{path}: empty CSV")
    reader = csv.reader([line for _, line in lines])
    header = next(reader)
    missing = [f for f in required if f not in header]
    if missing:
        raise DataError(f"{path}:{lines[0][0]}: missing columns {missing}")
    for (lineno, _), values in zip(lines[1:], reader):
        if not values:
            continue
        if len(values) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(values)}")
        yield lineno, dict(zip(header, values))


def csv_comment(path: str) -> str | None:
    """The leading ``# ...`` line of a CSV written by :func:`write_csv`, if any."""
    with open(path) as fh:
        first = fh.readline()
    return first[2:].strip() if first.startswith("# ") else None
