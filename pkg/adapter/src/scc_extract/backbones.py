"""Dense feature backbones.

Every backbone maps a grayscale image to an (h, w, d) token grid plus a
d-vector global token.  Two families are registered:

``grid-stats``
    A self-contained classical descriptor: per-cell intensity statistics
    and gradient-orientation histograms.  Deterministic, dependency-free,
    and good enough to exercise the full export path and the engine's
    retrieval machinery on real images.

``hf:<model-id>``
    Any vision transformer loadable through ``transformers`` that exposes
    patch tokens and a pooled/class token (for example the dinov2
    checkpoints).  Requires the optional torch extra and downloaded
    weights; load failures surface as :class:`ModelLoadFailure`.
"""

from __future__ import annotations

import numpy as np

from .errors import ModelLoadFailure, ShapeMismatch

GRID_STATS_DIM = 16


def _cell_descriptor(cell: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(cell)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)  # (-pi, pi]
    hist, _ = np.histogram(ang, bins=8, range=(-np.pi, np.pi), weights=mag)
    hist_sum = hist.sum()
    if hist_sum > 1e-12:
        hist = hist / hist_sum
    h, w = cell.shape
    return np.array(
        [
            cell.mean(),
            cell.std(),
            mag.mean(),
            np.abs(gx).mean(),
            np.abs(gy).mean(),
            cell.min(),
            cell.max(),
            cell[h // 2, w // 2],
            *hist,
        ],
        dtype=np.float32,
    )


class GridStatsBackbone:
    """Per-cell statistics over a fixed token grid."""

    def __init__(self, grid: int = 16):
        self.grid = grid
        self.dim = GRID_STATS_DIM

    def extract(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 3:
            img = img.mean(axis=2)
        rows = np.linspace(0, img.shape[0], self.grid + 1).astype(int)
        cols = np.linspace(0, img.shape[1], self.grid + 1).astype(int)
        tokens = np.zeros((self.grid, self.grid, self.dim), dtype=np.float32)
        for i in range(self.grid):
            for j in range(self.grid):
                cell = img[rows[i] : rows[i + 1], cols[j] : cols[j + 1]]
                if cell.size == 0:
                    raise ShapeMismatch(
                        f"image {img.shape} too small for a {self.grid}x{self.grid} grid"
                    )
                tokens[i, j] = _cell_descriptor(cell)
        cls = tokens.reshape(-1, self.dim).mean(axis=0)
        norm = float(np.linalg.norm(cls))
        if norm > 1e-12:
            cls = cls / norm
        return tokens, cls.astype(np.float32)


class HfBackbone:
    """Vision-transformer tokens via the transformers library."""

    def __init__(self, model_id: str, device: str = "cpu"):
        try:
            import torch
            from transformers import AutoImageProcessor, AutoModel
        except ImportError as exc:
            raise ModelLoadFailure(f"torch/transformers unavailable: {exc}") from exc
        try:
            self.processor = AutoImageProcessor.from_pretrained(model_id)
            self.model = AutoModel.from_pretrained(model_id).to(device).eval()
        except Exception as exc:  # model hub or weight errors
            raise ModelLoadFailure(f"could not load {model_id!r}: {exc}") from exc
        self.torch = torch
        self.device = device

    def extract(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        torch = self.torch
        rgb = np.asarray(image)
        if rgb.ndim == 2:
            rgb = np.stack([rgb] * 3, axis=2)
        if rgb.dtype != np.uint8:
            rgb = (np.clip(rgb, 0, 1) * 255).astype(np.uint8)
        inputs = self.processor(images=rgb, return_tensors="pt").to(self.device)
        with torch.no_grad():
            out = self.model(**inputs)
        hidden = out.last_hidden_state[0].cpu().numpy()
        cls, patches = hidden[0], hidden[1:]
        side = int(round(np.sqrt(len(patches))))
        if side * side != len(patches):
            raise ShapeMismatch(f"{len(patches)} patch tokens do not form a square grid")
        tokens = patches.reshape(side, side, -1).astype(np.float32)
        return tokens, cls.astype(np.float32)


def load_backbone(identifier: str, device: str = "cpu"):
    """Instantiate a backbone from its identifier string."""
    if identifier == "grid-stats":
        return GridStatsBackbone()
    if identifier.startswith("grid-stats:"):
        return GridStatsBackbone(grid=int(identifier.split(":", 1)[1]))
    if identifier.startswith("hf:"):
        return HfBackbone(identifier.split(":", 1)[1], device=device)
    raise ModelLoadFailure(
        f"unknown backbone {identifier!r}; use 'grid-stats', 'grid-stats:<N>' "
        f"or 'hf:<model-id>'"
    )
