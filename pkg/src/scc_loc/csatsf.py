"""Cascaded correspondence filtering.

Four stages shrink a raw dense match set into a dependable one:

1. spatial equalization with logarithmic per-cell quotas,
2. texture saliency gating on both images,
3. Delaunay area-ratio voting against local topological distortion,
4. global heading/scale consensus around the match centroids.

Every stage returns a subset of its input in the original order, so the set
only ever shrinks.  Degenerate inputs pass through with a warning flag
instead of aborting the candidate; downstream reliability scoring penalizes
such candidates naturally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay, QhullError

STAGES = ("raw", "equalized", "textured", "topo", "final")

FLAG_DEGENERATE_TRIANGULATION = "degenerate_triangulation"
FLAG_INSUFFICIENT_MATCHES = "insufficient_matches"
FLAG_DEGENERATE_SALIENCY = "degenerate_saliency"


@dataclass(frozen=True)
class Correspondence:
    """One 2D-2D match between query and aligned satellite crop."""

    pq: tuple[float, float]
    pdb: tuple[float, float]
    conf: float


@dataclass
class MatchSet:
    """Ordered correspondences at one cascade stage.

    ``orig_indices`` tracks each row's position in the raw input, which keeps
    the subset relation explicit and the output order deterministic.
    """

    pq: np.ndarray
    pdb: np.ndarray
    conf: np.ndarray
    stage: str = "raw"
    orig_indices: np.ndarray | None = None
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.pq = np.asarray(self.pq, dtype=np.float64).reshape(-1, 2)
        self.pdb = np.asarray(self.pdb, dtype=np.float64).reshape(-1, 2)
        self.conf = np.asarray(self.conf, dtype=np.float64).reshape(-1)
        if not (len(self.pq) == len(self.pdb) == len(self.conf)):
            raise ValueError("pq, pdb and conf must have equal length")
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.orig_indices is None:
            self.orig_indices = np.arange(len(self.pq))
        else:
            self.orig_indices = np.asarray(self.orig_indices, dtype=int)

    def __len__(self) -> int:
        return len(self.pq)

    @classmethod
    def from_array(cls, records: np.ndarray, stage: str = "raw") -> "MatchSet":
        """Build from an (N, 5) array of (x_q, y_q, x_db, y_db, conf)."""
        records = np.asarray(records, dtype=np.float64).reshape(-1, 5)
        return cls(pq=records[:, 0:2], pdb=records[:, 2:4], conf=records[:, 4], stage=stage)

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.pq, self.pdb, self.conf[:, None]], axis=1)

    def correspondences(self) -> list[Correspondence]:
        return [
            Correspondence(tuple(q), tuple(d), float(c))
            for q, d, c in zip(self.pq, self.pdb, self.conf)
        ]

    def subset(self, keep: np.ndarray, stage: str, extra_flags: list[str] | None = None) -> "MatchSet":
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        keep = np.sort(keep)
        if STAGES.index(stage) <= STAGES.index(self.stage):
            raise ValueError(f"stage must advance, {self.stage} -> {stage}")
        return MatchSet(
            pq=self.pq[keep],
            pdb=self.pdb[keep],
            conf=self.conf[keep],
            stage=stage,
            orig_indices=self.orig_indices[keep],
            flags=self.flags + (extra_flags or []),
        )


@dataclass
class FilterConfig:
    grid_g: int = 8
    q_base: int = 3
    q_max: int | None = None     # defaults to 3 * q_base
    gamma: float = 0.5
    window: int = 7
    eps_topo: float = 0.4
    eps_ang: float = math.radians(20.0)
    eps_scale: float = 0.3

    def __post_init__(self):
        if self.grid_g < 1 or self.q_base < 1:
            raise ValueError("grid_g and q_base must be >= 1")
        if self.q_max is None:
            self.q_max = 3 * self.q_base
        if min(self.eps_topo, self.eps_ang, self.eps_scale) <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class SaliencyMap:
    """Min-max normalized local texture saliency for one image."""

    values: np.ndarray
    sigma_min: float
    sigma_max: float

    def at(self, points: np.ndarray) -> np.ndarray:
        """Saliency at (N, 2) pixel coordinates, nearest pixel, clipped."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        cols = np.clip(np.rint(pts[:, 0]).astype(int), 0, self.values.shape[1] - 1)
        rows = np.clip(np.rint(pts[:, 1]).astype(int), 0, self.values.shape[0] - 1)
        return self.values[rows, cols]

    @property
    def degenerate(self) -> bool:
        return self.sigma_max - self.sigma_min <= 1e-12


def _require_stage(matches: MatchSet, stage: str) -> None:
    if matches.stage != stage:
        raise ValueError(f"expected stage {stage!r}, got {matches.stage!r}")


def log_quota(cell_count: int, cfg: FilterConfig) -> int:
    """Per-cell keep quota: q_base + floor(log2(c + 1)), capped at q_max.

    Exact integer log via bit_length; no floating point at power-of-two
    boundaries.
    """
    return min(cfg.q_base + ((cell_count + 1).bit_length() - 1), cfg.q_max)


def spatial_equalize(
    raw: MatchSet, cfg: FilterConfig, image_size: tuple[int, int]
) -> MatchSet:
    """Keep the top-quota matches by confidence inside each grid cell.

    The query image is split into a grid_g x grid_g lattice; each cell's
    quota grows logarithmically with its population.  Ties in confidence
    break toward the earlier original index.
    """
    _require_stage(raw, "raw")
    width, height = image_size
    g = cfg.grid_g
    if len(raw) == 0:
        return raw.subset(np.array([], dtype=int), "equalized")
    cell_x = np.clip((raw.pq[:, 0] / (width / g)).astype(int), 0, g - 1)
    cell_y = np.clip((raw.pq[:, 1] / (height / g)).astype(int), 0, g - 1)
    cell_id = cell_y * g + cell_x

    keep: list[int] = []
    for cid in np.unique(cell_id):
        members = np.flatnonzero(cell_id == cid)
        quota = log_quota(len(members), cfg)
        order = sorted(members, key=lambda i: (-raw.conf[i], i))
        keep.extend(order[:quota])
    return raw.subset(np.array(keep, dtype=int), "equalized")


def saliency_map(image: np.ndarray, window: int) -> SaliencyMap:
    """Local standard deviation over a clipped window, min-max normalized.

    Intensities are expected in [0, 1].  A flat image has no saliency
    extremes; the map then degenerates to all zeros.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("saliency expects a single-channel raster")
    lo = (window - 1) // 2
    hi = window // 2

    def box_sum(a: np.ndarray) -> np.ndarray:
        # summed-area table with clipped windows at the borders
        pad = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
        pad[1:, 1:] = np.cumsum(np.cumsum(a, axis=0), axis=1)
        r0 = np.clip(np.arange(a.shape[0]) - lo, 0, a.shape[0])
        r1 = np.clip(np.arange(a.shape[0]) + hi + 1, 0, a.shape[0])
        c0 = np.clip(np.arange(a.shape[1]) - lo, 0, a.shape[1])
        c1 = np.clip(np.arange(a.shape[1]) + hi + 1, 0, a.shape[1])
        return (
            pad[np.ix_(r1, c1)] - pad[np.ix_(r0, c1)]
            - pad[np.ix_(r1, c0)] + pad[np.ix_(r0, c0)]
        )

    ones = np.ones_like(img)
    count = box_sum(ones)
    # shifting by the global mean keeps the moment difference from cancelling
    # catastrophically on near-constant images
    shifted = img - img.mean()
    mean = box_sum(shifted) / count
    mean_sq = box_sum(shifted * shifted) / count
    sigma = np.sqrt(np.maximum(mean_sq - mean * mean, 0.0))
    s_min, s_max = float(sigma.min()), float(sigma.max())
    if s_max - s_min <= 1e-12:
        return SaliencyMap(values=np.zeros_like(sigma), sigma_min=s_min, sigma_max=s_max)
    return SaliencyMap(
        values=(sigma - s_min) / (s_max - s_min), sigma_min=s_min, sigma_max=s_max
    )


def texture_gate(
    eq: MatchSet, vq: SaliencyMap, vdb: SaliencyMap, cfg: FilterConfig
) -> MatchSet:
    """Drop matches that sit in low-texture terrain in either image.

    The per-image threshold adapts to the image itself: gamma times the mean
    saliency.  Both sides must clear their threshold (strict AND).
    """
    _require_stage(eq, "equalized")
    if len(eq) == 0:
        return eq.subset(np.array([], dtype=int), "textured")
    eps_q = cfg.gamma * float(vq.values.mean())
    eps_db = cfg.gamma * float(vdb.values.mean())
    keep = (vq.at(eq.pq) > eps_q) & (vdb.at(eq.pdb) > eps_db)
    return eq.subset(keep, "textured")


def _triangle_areas(points: np.ndarray, simplices: np.ndarray) -> np.ndarray:
    a = points[simplices[:, 0]]
    b = points[simplices[:, 1]]
    c = points[simplices[:, 2]]
    return 0.5 * np.abs(
        (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
        - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
    )


def topo_filter(tex: MatchSet, cfg: FilterConfig) -> MatchSet:
    """Reject matches whose incident triangles distort the area-ratio
    consensus.

    Triangulation runs on the query keypoints only; triangles map to the
    satellite side through the match pairing.  A keypoint survives when at
    most half of its incident triangles deviate from the median area ratio
    by more than eps_topo.  Collinear or too-few points pass through with a
    warning flag.
    """
    _require_stage(tex, "textured")
    n = len(tex)
    if n < 3:
        return tex.subset(np.arange(n), "topo", [FLAG_DEGENERATE_TRIANGULATION])
    try:
        tri = Delaunay(tex.pq)
    except QhullError:
        return tex.subset(np.arange(n), "topo", [FLAG_DEGENERATE_TRIANGULATION])
    simplices = tri.simplices
    if len(simplices) == 0:
        return tex.subset(np.arange(n), "topo", [FLAG_DEGENERATE_TRIANGULATION])

    area_q = _triangle_areas(tex.pq, simplices)
    area_db = _triangle_areas(tex.pdb, simplices)
    ok = area_q > 1e-12
    ratios = np.zeros(len(simplices))
    ratios[ok] = area_db[ok] / area_q[ok]
    med = float(np.median(ratios))
    deviations = np.abs(ratios - med) / max(med, 1e-12)
    bad = deviations > cfg.eps_topo

    incident = np.zeros(n, dtype=int)
    negative = np.zeros(n, dtype=int)
    for t, verts in enumerate(simplices):
        for v in verts:
            incident[v] += 1
            if bad[t]:
                negative[v] += 1
    # points that ended up in no triangle carry no topological evidence
    kappa = np.where(incident > 0, negative / np.maximum(incident, 1), 0.0)
    return tex.subset(kappa <= 0.5, "topo")


def _wrap_angle(a: np.ndarray | float) -> np.ndarray | float:
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + math.pi, 2.0 * math.pi) - math.pi
    w = np.where(w == -math.pi, math.pi, w)
    return w if np.ndim(a) else float(w)


def circular_median(angles: np.ndarray) -> float:
    """Angle among the inputs minimizing summed absolute circular deviation.

    A plain median fails when the sample straddles +-pi; restricting the
    candidates to the observed angles keeps the estimate deterministic
    (first minimizer wins).
    """
    angles = np.asarray(angles, dtype=float)
    devs = np.abs(_wrap_angle(angles[None, :] - angles[:, None])).sum(axis=1)
    return float(angles[int(np.argmin(devs))])


def global_consistency(topo: MatchSet, cfg: FilterConfig) -> MatchSet:
    """Enforce a shared rotation and scale of headings around the centroids.

    Heading vectors shorter than one pixel on the query side carry no scale
    or direction evidence; they are excluded from the medians and kept.
    """
    _require_stage(topo, "topo")
    n = len(topo)
    if n < 2:
        return topo.subset(np.arange(n), "final", [FLAG_INSUFFICIENT_MATCHES])
    cq = topo.pq.mean(axis=0)
    cdb = topo.pdb.mean(axis=0)
    vq = topo.pq - cq
    vdb = topo.pdb - cdb
    len_q = np.linalg.norm(vq, axis=1)
    len_db = np.linalg.norm(vdb, axis=1)
    usable = len_q >= 1.0
    if usable.sum() < 2:
        return topo.subset(np.arange(n), "final", [FLAG_INSUFFICIENT_MATCHES])

    phi = np.arctan2(vdb[:, 1], vdb[:, 0]) - np.arctan2(vq[:, 1], vq[:, 0])
    phi = _wrap_angle(phi)
    med_phi = circular_median(phi[usable])
    scale_med = float(np.median(len_db[usable] / len_q[usable]))

    ang_ok = np.abs(_wrap_angle(phi - med_phi)) < cfg.eps_ang
    with np.errstate(divide="ignore", invalid="ignore"):
        scale_dev = np.abs(len_db / (scale_med * np.maximum(len_q, 1e-12)) - 1.0)
    scale_ok = scale_dev <= cfg.eps_scale
    keep = (ang_ok & scale_ok) | ~usable
    return topo.subset(keep, "final")


@dataclass
class CascadeDiagnostics:
    """Per-stage survivor counts and pass-through flags."""

    counts: dict[str, int]
    flags: list[str]
    thresholds: dict[str, float] = field(default_factory=dict)


def run_cascade(
    raw: MatchSet,
    query_img: np.ndarray | None,
    db_img: np.ndarray | None,
    cfg: FilterConfig,
    saliency_q: SaliencyMap | None = None,
    saliency_db: SaliencyMap | None = None,
) -> tuple[MatchSet, CascadeDiagnostics]:
    """Full filter chain.

    Saliency maps may be supplied precomputed (and shared across candidates
    matching the same query image), in which case the raw images are not
    needed.
    """
    _require_stage(raw, "raw")
    vq = saliency_q if saliency_q is not None else saliency_map(query_img, cfg.window)
    vdb = saliency_db if saliency_db is not None else saliency_map(db_img, cfg.window)
    height, width = vq.values.shape
    eq = spatial_equalize(raw, cfg, (width, height))
    flags = []
    if vq.degenerate or vdb.degenerate:
        flags.append(FLAG_DEGENERATE_SALIENCY)
    tex = texture_gate(eq, vq, vdb, cfg)
    topo = topo_filter(tex, cfg)
    final = global_consistency(topo, cfg)
    final.flags = final.flags + flags
    diag = CascadeDiagnostics(
        counts={
            "raw": len(raw),
            "equalized": len(eq),
            "textured": len(tex),
            "topo": len(topo),
            "final": len(final),
        },
        flags=final.flags,
    )
    return final, diag
