"""Binary file formats consumed and produced by the engine.

All formats are little-endian with a 4-byte magic and a u16 version:

SCCD (DSM raster)
    magic "SCCD", version u16, origin_x f64, origin_y f64, cell_size f64,
    rows u32, cols u32, nodata f32, rows*cols f32 row-major.

SCCF (feature map)
    magic "SCCF", version u16, flags u16 (bit 0: CLS token present),
    h u32, w u32, d u32, h*w*d f32 row-major tokens, then d f32 CLS when
    the flag is set.

SCCM (match set)
    magic "SCCM", version u16, count u32, then per match
    x_q f32, y_q f32, x_db f32, y_db f32, conf f32.

Parse failures raise :class:`FormatError` carrying the byte offset at which
the file stopped making sense.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .geo import DsmRaster
from .retrieval import FeatureMap

FORMAT_VERSION = 1


class _Reader:
    """Tracks the read offset so errors can name the failing byte."""

    def __init__(self, data: bytes, path: str):
        self.data = data
        self.path = path
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError(
                f"{self.path}: truncated while reading {what} at byte {self.off} "
                f"(need {n}, have {len(self.data) - self.off})"
            )
        chunk = self.data[self.off : self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def expect_magic(self, magic: bytes):
        got = self.take(len(magic), "magic")
        if got != magic:
            raise FormatError(
                f"{self.path}: bad magic at byte 0: expected {magic!r}, got {got!r}"
            )

    def expect_version(self):
        (version,) = self.unpack("<H", "version")
        if version != FORMAT_VERSION:
            raise FormatError(
                f"{self.path}: unsupported version {version} at byte {self.off - 2}"
            )

    def floats(self, count: int, what: str) -> np.ndarray:
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32)

    def done(self):
        if self.off != len(self.data):
            raise FormatError(
                f"{self.path}: {len(self.data) - self.off} trailing bytes "
                f"after byte {self.off}"
            )


def write_dsm(path: str | Path, dsm: DsmRaster) -> None:
    data = np.ascontiguousarray(dsm.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(b"SCCD")
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(struct.pack("<ddd", dsm.origin_x, dsm.origin_y, dsm.cell_size))
        fh.write(struct.pack("<II", dsm.rows, dsm.cols))
        fh.write(struct.pack("<f", dsm.nodata))
        fh.write(data.tobytes())


def read_dsm(path: str | Path) -> DsmRaster:
    rd = _Reader(Path(path).read_bytes(), str(path))
    rd.expect_magic(b"SCCD")
    rd.expect_version()
    origin_x, origin_y, cell_size = rd.unpack("<ddd", "raster header")
    rows, cols = rd.unpack("<II", "grid dimensions")
    (nodata,) = rd.unpack("<f", "nodata sentinel")
    if cell_size <= 0:
        raise FormatError(f"{path}: non-positive cell_size {cell_size} at byte 6")
    grid = rd.floats(rows * cols, f"{rows}x{cols} elevation grid")
    rd.done()
    return DsmRaster(
        origin_x=origin_x,
        origin_y=origin_y,
        cell_size=cell_size,
        data=grid.reshape(rows, cols),
        nodata=nodata,
    )


def write_features(path: str | Path, fmap: FeatureMap) -> None:
    flags = 1 if fmap.cls is not None else 0
    with open(path, "wb") as fh:
        fh.write(b"SCCF")
        fh.write(struct.pack("<HH", FORMAT_VERSION, flags))
        fh.write(struct.pack("<III", fmap.h, fmap.w, fmap.d))
        fh.write(np.ascontiguousarray(fmap.tokens, dtype="<f4").tobytes())
        if fmap.cls is not None:
            fh.write(np.ascontiguousarray(fmap.cls, dtype="<f4").tobytes())


def read_features(path: str | Path) -> FeatureMap:
    rd = _Reader(Path(path).read_bytes(), str(path))
    rd.expect_magic(b"SCCF")
    rd.expect_version()
    (flags,) = rd.unpack("<H", "flags")
    h, w, d = rd.unpack("<III", "token-grid dimensions")
    if min(h, w, d) < 1:
        raise FormatError(f"{path}: degenerate dimensions {h}x{w}x{d} at byte 8")
    tokens = rd.floats(h * w * d, f"{h}x{w}x{d} token grid").reshape(h, w, d)
    cls = rd.floats(d, "CLS token") if flags & 1 else None
    rd.done()
    if not np.all(np.isfinite(tokens)) or (cls is not None and not np.all(np.isfinite(cls))):
        raise FormatError(f"{path}: non-finite feature values")
    return FeatureMap(tokens=tokens, cls=cls)


def write_matches(path: str | Path, records: np.ndarray) -> None:
    """Write an (N, 5) array of (x_q, y_q, x_db, y_db, conf) rows."""
    records = np.asarray(records, dtype="<f4").reshape(-1, 5)
    with open(path, "wb") as fh:
        fh.write(b"SCCM")
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(records)))
        fh.write(np.ascontiguousarray(records).tobytes())


def read_matches(path: str | Path) -> np.ndarray:
    """Read an SCCM file into an (N, 5) float32 array."""
    rd = _Reader(Path(path).read_bytes(), str(path))
    rd.expect_magic(b"SCCM")
    rd.expect_version()
    (count,) = rd.unpack("<I", "match count")
    flat = rd.floats(count * 5, f"{count} match records")
    rd.done()
    return flat.reshape(count, 5)


def load_image(path: str | Path) -> np.ndarray:
    """Load a grayscale image raster as float32 in [0, 1].

    Accepts ``.npy`` float rasters directly and common image formats via
    Pillow (converted to single-channel luminance).
    """
    path = Path(path)
    if path.suffix == ".npy":
        img = np.load(path).astype(np.float32)
        if img.ndim != 2:
            raise FormatError(f"{path}: expected a 2D raster, got shape {img.shape}")
        return img
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    return arr


def save_image(path: str | Path, img: np.ndarray) -> None:
    """Save a float raster; ``.npy`` exact, otherwise 8-bit grayscale."""
    path = Path(path)
    if path.suffix == ".npy":
        np.save(path, np.asarray(img, dtype=np.float32))
        return
    from PIL import Image

    arr = np.clip(np.asarray(img, dtype=np.float32), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="L").save(path)
