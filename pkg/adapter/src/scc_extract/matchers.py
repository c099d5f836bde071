"""Dense matchers producing 2D-2D correspondences with confidences.

The built-in ``ncc-grid`` matcher samples keypoints on a regular grid in the
query image and finds each patch's normalized-cross-correlation peak inside
a search window of the database image.  It assumes the inputs are roughly
aligned (the engine always matches a query against its aligned crop), which
keeps the search local and fast.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MatcherFailure


@dataclass
class GridNccMatcher:
    grid: int = 20          # keypoints per side
    patch: int = 11         # odd patch side in query pixels
    search: int = 40        # search half-window in db pixels

    def match(self, query: np.ndarray, db: np.ndarray) -> np.ndarray:
        """Return (N, 5) rows of (x_q, y_q, x_db, y_db, conf)."""
        q = np.asarray(query, dtype=np.float64)
        d = np.asarray(db, dtype=np.float64)
        if q.ndim != 2 or d.ndim != 2:
            raise MatcherFailure("matcher expects single-channel rasters")
        half = self.patch // 2
        if min(q.shape) < self.patch + 2 or min(d.shape) < self.patch + 2:
            raise MatcherFailure("images smaller than the matcher patch")

        sy = d.shape[0] / q.shape[0]
        sx = d.shape[1] / q.shape[1]
        records = []
        ys = np.linspace(half + 1, q.shape[0] - half - 2, self.grid).astype(int)
        xs = np.linspace(half + 1, q.shape[1] - half - 2, self.grid).astype(int)
        for yq in ys:
            for xq in xs:
                patch = q[yq - half : yq + half + 1, xq - half : xq + half + 1]
                p_std = patch.std()
                if p_std < 1e-9:
                    continue  # textureless patch carries no signal
                cx = int(round(xq * sx))
                cy = int(round(yq * sy))
                x0 = max(half, cx - self.search)
                x1 = min(d.shape[1] - half - 1, cx + self.search)
                y0 = max(half, cy - self.search)
                y1 = min(d.shape[0] - half - 1, cy + self.search)
                if x1 <= x0 or y1 <= y0:
                    continue
                best = self._ncc_peak(patch, d, x0, x1, y0, y1, half)
                if best is None:
                    continue
                xb, yb, score = best
                conf = float(np.clip((score + 1.0) / 2.0, 0.0, 1.0))
                records.append((float(xq), float(yq), float(xb), float(yb), conf))
        if not records:
            raise MatcherFailure("no matchable patches found")
        return np.array(records, dtype=np.float32)

    @staticmethod
    def _ncc_peak(patch, image, x0, x1, y0, y1, half):
        pm = patch - patch.mean()
        pn = np.linalg.norm(pm)
        best = None
        for yc in range(y0, y1 + 1):
            window = image[yc - half : yc + half + 1]
            for xc in range(x0, x1 + 1):
                cand = window[:, xc - half : xc + half + 1]
                cm = cand - cand.mean()
                cn = np.linalg.norm(cm)
                if cn < 1e-9:
                    continue
                score = float((pm * cm).sum() / (pn * cn))
                if best is None or score > best[2]:
                    best = (xc, yc, score)
        return best


class FastGridNccMatcher(GridNccMatcher):
    """Vectorized variant using stacked sliding windows per keypoint."""

    def _ncc_peak(self, patch, image, x0, x1, y0, y1, half):
        from numpy.lib.stride_tricks import sliding_window_view

        pm = patch - patch.mean()
        pn = np.linalg.norm(pm)
        region = image[y0 - half : y1 + half + 1, x0 - half : x1 + half + 1]
        wins = sliding_window_view(region, patch.shape)
        means = wins.mean(axis=(2, 3), keepdims=True)
        centered = wins - means
        norms = np.sqrt((centered**2).sum(axis=(2, 3)))
        scores = np.einsum("ijkl,kl->ij", centered, pm)
        with np.errstate(divide="ignore", invalid="ignore"):
            scores = np.where(norms > 1e-9, scores / (norms * pn), -np.inf)
        flat = int(np.argmax(scores))
        iy, ix = np.unravel_index(flat, scores.shape)
        if not np.isfinite(scores[iy, ix]):
            return None
        return (x0 + ix, y0 + iy, float(scores[iy, ix]))


def load_matcher(identifier: str):
    if identifier == "ncc-grid":
        return FastGridNccMatcher()
    if identifier.startswith("ncc-grid:"):
        grid = int(identifier.split(":", 1)[1])
        return FastGridNccMatcher(grid=grid)
    raise MatcherFailure(
        f"unknown matcher {identifier!r}; use 'ncc-grid' or 'ncc-grid:<N>'"
    )
