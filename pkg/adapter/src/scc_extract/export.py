"""SCCF/SCCM serialization and the batch export entry points.

The binary writers here are an independent implementation of the engine's
documented formats; interop is proven by the engine parsing the output, not
by sharing code.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .backbones import load_backbone
from .errors import ShapeMismatch
from .matchers import load_matcher

FORMAT_VERSION = 1


@dataclass
class AdapterConfig:
    backbone: str = "grid-stats"
    matcher: str = "ncc-grid"
    device: str = "cpu"
    flip_rows: bool = False  # set for north-up tile images; see engine docs


def load_gray(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


def write_sccf(path: str | Path, tokens: np.ndarray, cls: np.ndarray | None) -> None:
    tokens = np.ascontiguousarray(tokens, dtype="<f4")
    if tokens.ndim != 3:
        raise ShapeMismatch(f"token grid must be h x w x d, got {tokens.shape}")
    h, w, d = tokens.shape
    flags = 0
    if cls is not None:
        cls = np.ascontiguousarray(cls, dtype="<f4").reshape(-1)
        if cls.shape[0] != d:
            raise ShapeMismatch("global token dimension differs from grid depth")
        flags = 1
    with open(path, "wb") as fh:
        fh.write(b"SCCF")
        fh.write(struct.pack("<HH", FORMAT_VERSION, flags))
        fh.write(struct.pack("<III", h, w, d))
        fh.write(tokens.tobytes())
        if cls is not None:
            fh.write(cls.tobytes())


def write_sccm(path: str | Path, records: np.ndarray) -> None:
    records = np.ascontiguousarray(records, dtype="<f4").reshape(-1, 5)
    with open(path, "wb") as fh:
        fh.write(b"SCCM")
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(records)))
        fh.write(records.tobytes())


def reference_gem(tokens: np.ndarray, psi: float = 4.0, eps: float = 1e-6) -> np.ndarray:
    """Adapter-side pooled descriptor used to cross-check the engine."""
    clamped = np.maximum(tokens.astype(np.float64), eps)
    pooled = np.mean(clamped**psi, axis=(0, 1)) ** (1.0 / psi)
    return pooled / np.linalg.norm(pooled)


def export_features(
    images: list[str | Path], cfg: AdapterConfig, out_dir: str | Path
) -> list[Path]:
    """One SCCF file per input image, named after the image stem."""
    backbone = load_backbone(cfg.backbone, device=cfg.device)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for img_path in images:
        img = load_gray(img_path)
        tokens, cls = backbone.extract(img)
        if cfg.flip_rows:
            tokens = tokens[::-1].copy()
        dest = out / (Path(img_path).stem + ".sccf")
        write_sccf(dest, tokens, cls)
        written.append(dest)
    return written


def export_matches(
    query_img: str | Path, db_img: str | Path, cfg: AdapterConfig, out_file: str | Path
) -> Path:
    matcher = load_matcher(cfg.matcher)
    records = matcher.match(load_gray(query_img), load_gray(db_img))
    write_sccm(out_file, records)
    return Path(out_file)
