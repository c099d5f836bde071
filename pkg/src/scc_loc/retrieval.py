"""Coarse tile retrieval: tile database, GeM descriptors, ranking, PDE."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateNorm, EmptyDatabase
from .geo import CameraModel


@dataclass
class FeatureMap:
    """Dense h x w x d token grid plus optional global CLS token."""

    tokens: np.ndarray
    cls: np.ndarray | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float32)
        if self.tokens.ndim != 3 or min(self.tokens.shape) < 1:
            raise ValueError(f"tokens must be h x w x d, got {self.tokens.shape}")
        if self.cls is not None:
            self.cls = np.asarray(self.cls, dtype=np.float32).reshape(-1)
            if self.cls.shape[0] != self.tokens.shape[2]:
                raise ValueError("CLS dimension does not match token dimension")

    @property
    def h(self) -> int:
        return self.tokens.shape[0]

    @property
    def w(self) -> int:
        return self.tokens.shape[1]

    @property
    def d(self) -> int:
        return self.tokens.shape[2]


@dataclass(frozen=True)
class GlobalDescriptor:
    """Unit-norm pooled descriptor."""

    vec: np.ndarray

    def __post_init__(self):
        norm = float(np.linalg.norm(self.vec))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"descriptor norm {norm} not unit")


@dataclass(frozen=True)
class TileGeometry:
    """A satellite crop: world center, physical size, and pixel resolution."""

    center_x: float
    center_y: float
    width: float
    height: float
    gsd: float

    def __post_init__(self):
        if min(self.width, self.height, self.gsd) <= 0:
            raise ValueError("width, height and gsd must be positive")

    @property
    def px_width(self) -> int:
        return max(1, round(self.width / self.gsd))

    @property
    def px_height(self) -> int:
        return max(1, round(self.height / self.gsd))

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """(x_min, y_min, x_max, y_max)."""
        return (
            self.center_x - self.width / 2.0,
            self.center_y - self.height / 2.0,
            self.center_x + self.width / 2.0,
            self.center_y + self.height / 2.0,
        )

    def pixel_to_world(self, uv: np.ndarray) -> np.ndarray:
        """Map (N, 2) crop pixels to (N, 2) world meters.

        Pixel centers follow the symmetric convention: pixel (W-1)/2 sits at
        the crop center.  Row 0 is the northern edge, so v grows southward.
        """
        uv = np.asarray(uv, dtype=float)
        x = self.center_x + (uv[:, 0] - (self.px_width - 1) / 2.0) * self.gsd
        y = self.center_y - (uv[:, 1] - (self.px_height - 1) / 2.0) * self.gsd
        return np.stack([x, y], axis=1)

    def world_to_pixel(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        u = (xy[:, 0] - self.center_x) / self.gsd + (self.px_width - 1) / 2.0
        v = (self.center_y - xy[:, 1]) / self.gsd + (self.px_height - 1) / 2.0
        return np.stack([u, v], axis=1)


@dataclass
class RetrievalConfig:
    psi: float = 4.0
    eps_min: float = 1e-6
    search_area: float = 600.0 * 600.0
    overlap: float = 0.6
    gsd_scale: float = 1.5
    top_n: int = 5

    def __post_init__(self):
        if self.psi < 1:
            raise ValueError("GeM exponent must be >= 1")
        if not 0 < self.eps_min < 1e-2:
            raise ValueError("eps_min must be a small positive clamp floor")
        if not 0 <= self.overlap < 1:
            raise ValueError("overlap must lie in [0, 1)")


def gem_pool_raw(fmap: FeatureMap, cfg: RetrievalConfig) -> np.ndarray:
    """Generalized-mean pooled vector before L2 normalization.

    Each token component is clamped to >= eps_min, raised to the pooling
    exponent, averaged over the grid, and the mean taken back to the 1/psi
    power.
    """
    clamped = np.maximum(fmap.tokens.astype(np.float64), cfg.eps_min)
    pooled = np.mean(clamped ** cfg.psi, axis=(0, 1)) ** (1.0 / cfg.psi)
    return pooled


def gem_pool(fmap: FeatureMap, cfg: RetrievalConfig) -> GlobalDescriptor:
    pooled = gem_pool_raw(fmap, cfg)
    norm = float(np.linalg.norm(pooled))
    if norm < 1e-12:
        raise DegenerateNorm(f"pooled norm {norm:.3e} below 1e-12")
    return GlobalDescriptor(vec=pooled / norm)


def query_tile_side(cam: CameraModel, cfg: RetrievalConfig) -> float:
    """Physical tile side derived from the query ground footprint.

    A nadir camera at the telemetry altitude sees ``altitude * width / fx``
    meters across; the gsd scaling factor enlarges that to give the matcher
    peripheral context.
    """
    footprint = 2.0 * cam.altitude_prior * math.tan(cam.fov_x / 2.0)
    return footprint * cfg.gsd_scale


def _axis_positions(lo: float, hi: float, side: float, stride: float) -> list[float]:
    """Tile-center positions covering [lo, hi], last tile clamped inside."""
    first = lo + side / 2.0
    last = hi - side / 2.0
    if last < first - 1e-9:
        return []
    positions = []
    c = first
    while c <= last + 1e-9:
        positions.append(min(c, last))
        c += stride
    if positions[-1] < last - 1e-9:
        positions.append(last)
    return positions


def build_tile_db(
    map_extent: TileGeometry, cam: CameraModel, cfg: RetrievalConfig
) -> list[TileGeometry]:
    """Sliding-window tile grid over the search area, row-major order.

    The search region is a square of area ``cfg.search_area`` centered on the
    map extent, intersected with it.  Stride is ``side * (1 - overlap)``;
    edge tiles are clamped inside the region.
    """
    side = query_tile_side(cam, cfg)
    stride = side * (1.0 - cfg.overlap)
    if stride <= 0:
        raise EmptyDatabase("non-positive stride")
    half = math.sqrt(cfg.search_area) / 2.0
    x_lo = max(map_extent.bounds[0], map_extent.center_x - half)
    x_hi = min(map_extent.bounds[2], map_extent.center_x + half)
    y_lo = max(map_extent.bounds[1], map_extent.center_y - half)
    y_hi = min(map_extent.bounds[3], map_extent.center_y + half)

    xs = _axis_positions(x_lo, x_hi, side, stride)
    ys = _axis_positions(y_lo, y_hi, side, stride)
    if not xs or not ys:
        raise EmptyDatabase(
            f"tile side {side:.1f} m does not fit the "
            f"{x_hi - x_lo:.1f} x {y_hi - y_lo:.1f} m search region"
        )
    return [
        TileGeometry(cx, cy, side, side, map_extent.gsd)
        for cy in ys
        for cx in xs
    ]


def rank_candidates(
    query: GlobalDescriptor, db: list[GlobalDescriptor], top_n: int
) -> list[tuple[int, float]]:
    """Indices and cosine similarities of the top-N database entries.

    Sorted by descending similarity, ties broken by ascending index; a short
    list comes back when the database is smaller than top_n.
    """
    if not db:
        return []
    mat = np.stack([d.vec for d in db])
    sims = mat @ query.vec
    order = np.lexsort((np.arange(len(db)), -sims))
    return [(int(i), float(sims[i])) for i in order[:top_n]]


def pde(retrieved: TileGeometry, truth_x: float, truth_y: float) -> float:
    """Position deviation: center offset normalized by the larger tile side."""
    dist = math.hypot(retrieved.center_x - truth_x, retrieved.center_y - truth_y)
    return dist / max(retrieved.width, retrieved.height)


def is_retrieval_hit(retrieved: TileGeometry, truth_x: float, truth_y: float) -> bool:
    """A retrieval counts as a hit only when PDE is strictly below 0.5."""
    return pde(retrieved, truth_x, truth_y) < 0.5


def descriptor_cache_key(file_bytes: bytes, cfg: RetrievalConfig) -> str:
    """Content hash keying the sidecar descriptor cache."""
    h = hashlib.sha256()
    h.update(file_bytes)
    h.update(f"psi={cfg.psi};eps={cfg.eps_min}".encode())
    return h.hexdigest()


class DescriptorCache:
    """Sidecar .npz cache of pooled tile descriptors, keyed by content hash."""

    def __init__(self, path):
        from pathlib import Path

        self.path = Path(path)
        self._store: dict[str, np.ndarray] = {}
        if self.path.exists():
            with np.load(self.path) as z:
                self._store = {k: z[k] for k in z.files}
        self._dirty = False

    def get(self, key: str) -> np.ndarray | None:
        return self._store.get(key)

    def put(self, key: str, vec: np.ndarray) -> None:
        self._store[key] = np.asarray(vec, dtype=np.float64)
        self._dirty = True

    def flush(self) -> None:
        if self._dirty:
            np.savez(self.path, **self._store)
            self._dirty = False
