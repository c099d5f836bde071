"""Semantic viewport alignment: probe a candidate tile with the query's
global token, estimate where the query footprint sits, and shift/rescale the
crop accordingly.

Tile token grids are stored in geographic orientation: columns run east
(+x) and rows run north (+y), i.e. row 0 is the southern edge of the tile.
With that convention the normalized heatmap centroid converts to a world
shift without any axis flip; exporters working from image-oriented feature
grids must flip rows before writing tile features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoSemanticMass
from .retrieval import FeatureMap, TileGeometry


@dataclass
class SemanticHeatmap:
    """Per-cell cosine similarity between the query token and tile tokens."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("heatmap must be 2D")

    @property
    def h(self) -> int:
        return self.values.shape[0]

    @property
    def w(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class HeatmapStats:
    """Centroid (normalized [0,1]^2, x then y) and spatial spread of the
    rectified heatmap mass."""

    mu: tuple[float, float]
    sigma: float


@dataclass
class SgvaConfig:
    sensitivity: float = 5.0    # scales spread into the [0,1] uncertainty
    boost: float = 0.5          # shifting gain at zero uncertainty
    expansion: float = 0.2      # crop growth rate at full uncertainty

    def __post_init__(self):
        if min(self.sensitivity, self.boost, self.expansion) < 0:
            raise ValueError("SGVA parameters must be nonnegative")


@dataclass(frozen=True)
class CropAdjustment:
    offset: tuple[float, float]  # normalized center shift, x then y
    scale: float                 # elastic crop scale, >= 1
    eta: float                   # clamped uncertainty in [0, 1]
    gain: float                  # shifting gain applied to the offset

    @classmethod
    def identity(cls) -> "CropAdjustment":
        """Fallback when the heatmap carries no usable mass."""
        return cls(offset=(0.0, 0.0), scale=1.0, eta=0.0, gain=1.0)


def semantic_heatmap(cls_q: np.ndarray, tile_feats: FeatureMap) -> SemanticHeatmap:
    """Cosine similarity between the normalized query token and every tile
    token.  Cells whose token norm is ~0 read as 0, as does everything when
    the query token itself is degenerate."""
    cls_q = np.asarray(cls_q, dtype=np.float64).reshape(-1)
    if cls_q.shape[0] != tile_feats.d:
        raise ValueError("query token dimension does not match tile features")
    qn = np.linalg.norm(cls_q)
    tokens = tile_feats.tokens.astype(np.float64)
    tn = np.linalg.norm(tokens, axis=2)
    if qn < 1e-12:
        return SemanticHeatmap(values=np.zeros((tile_feats.h, tile_feats.w)))
    sims = tokens @ (cls_q / qn)
    ok = tn >= 1e-12
    out = np.zeros_like(sims)
    out[ok] = sims[ok] / tn[ok]
    return SemanticHeatmap(values=out)


def heatmap_stats(m: SemanticHeatmap) -> HeatmapStats:
    """Centroid and spread of the ReLU-rectified, sum-normalized heatmap.

    Cell (i, j) sits at normalized coordinates ((j+0.5)/w, (i+0.5)/h).
    Raises :class:`NoSemanticMass` when nothing survives rectification.
    """
    mass = np.maximum(m.values, 0.0)
    total = mass.sum()
    if total < 1e-12:
        raise NoSemanticMass("rectified heatmap mass below 1e-12")
    p = mass / total
    xs = (np.arange(m.w) + 0.5) / m.w
    ys = (np.arange(m.h) + 0.5) / m.h
    mu_x = float((p.sum(axis=0) * xs).sum())
    mu_y = float((p.sum(axis=1) * ys).sum())
    gx, gy = np.meshgrid(xs, ys)
    var = float((p * ((gx - mu_x) ** 2 + (gy - mu_y) ** 2)).sum())
    return HeatmapStats(mu=(mu_x, mu_y), sigma=float(np.sqrt(max(var, 0.0))))


def compute_adjustment(stats: HeatmapStats, cfg: SgvaConfig) -> CropAdjustment:
    """Turn centroid and spread into a crop shift and elastic scale.

    Low spread means a confident localization: the gain grows and the center
    shifts boldly toward the centroid.  High spread instead damps the shift
    and enlarges the crop to keep context.
    """
    eta = min(max(cfg.sensitivity * stats.sigma, 0.0), 1.0)
    gain = 1.0 + cfg.boost * (1.0 - eta)
    scale = 1.0 + cfg.expansion * eta
    offset = ((stats.mu[0] - 0.5) * gain, (stats.mu[1] - 0.5) * gain)
    return CropAdjustment(offset=offset, scale=scale, eta=eta, gain=gain)


def apply_adjustment(
    tile: TileGeometry, adj: CropAdjustment, map_extent: TileGeometry
) -> TileGeometry:
    """Shift and rescale the crop, then clamp it inside the global map.

    The offset is normalized by the tile size and applied componentwise in
    world axes.  The center moves as needed to keep the crop inside the map;
    the size shrinks only when the map itself is smaller than the requested
    crop.
    """
    new_w = adj.scale * tile.width
    new_h = adj.scale * tile.height
    cx = tile.center_x + adj.offset[0] * tile.width
    cy = tile.center_y + adj.offset[1] * tile.height
    x_min, y_min, x_max, y_max = map_extent.bounds
    new_w = min(new_w, x_max - x_min)
    new_h = min(new_h, y_max - y_min)
    cx = min(max(cx, x_min + new_w / 2.0), x_max - new_w / 2.0)
    cy = min(max(cy, y_min + new_h / 2.0), y_max - new_h / 2.0)
    return TileGeometry(cx, cy, new_w, new_h, tile.gsd)


def align_tile(
    cls_q: np.ndarray,
    tile_feats: FeatureMap,
    tile: TileGeometry,
    map_extent: TileGeometry,
    cfg: SgvaConfig,
) -> tuple[TileGeometry, CropAdjustment]:
    """Full alignment pass for one candidate; zero-mass heatmaps fall back to
    the identity adjustment and leave the tile geometry untouched (modulo
    map clamping, which is a no-op for an in-map tile)."""
    heat = semantic_heatmap(cls_q, tile_feats)
    try:
        stats = heatmap_stats(heat)
        adj = compute_adjustment(stats, cfg)
    except NoSemanticMass:
        adj = CropAdjustment.identity()
    return apply_adjustment(tile, adj, map_extent), adj
