"""End-to-end orchestration over an on-disk dataset.

A dataset directory (see :mod:`scc_loc.synth` for the generator) carries the
tile grid, feature files, match files, crop images, a DSM, telemetry and
optional ground truth.  The runner re-executes retrieval and viewport
alignment from the stored features, filters the stored matches, estimates
and refines per-candidate poses, scores them, and selects a position per
query.  Per-query failures are recorded, never raised.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cdraps, csatsf, formats
from .config import PipelineConfig, load_config
from .csatsf import MatchSet, saliency_map
from .errors import (
    AllCandidatesGated,
    AllNoData,
    EngineError,
    InsufficientCorrespondences,
    KeyMismatch,
    NoConsensus,
    SingularHessian,
)
from .geo import CameraModel
from .retrieval import TileGeometry, gem_pool, is_retrieval_hit, rank_candidates
from .sgva import align_tile

ACC_RADII = (5.0, 10.0, 20.0)
RECALL_NS = (3, 5, 10)


@dataclass
class QueryRecord:
    query_id: int
    selected: tuple[float, float] | None = None
    error: float | None = None
    failed: bool = False
    failure_reason: str = ""
    retrieval_hits: list[bool] = field(default_factory=list)
    candidates: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "selected": list(self.selected) if self.selected else None,
            "error": self.error,
            "failed": self.failed,
            "failure_reason": self.failure_reason,
            "retrieval_hits": self.retrieval_hits,
            "candidates": self.candidates,
        }


@dataclass
class EvalReport:
    n_queries: int = 0
    n_failures: int = 0
    recall_at_n: dict[int, float] = field(default_factory=dict)
    acc_at_r: dict[float, float] = field(default_factory=dict)
    mean_error: float = 0.0
    std_error: float = 0.0
    records: list[QueryRecord] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)
    penalize_failures: bool = False

    def to_dict(self) -> dict:
        """Canonical machine-readable form; wall times stay out so two runs
        with the same seed serialize byte-identically."""
        return {
            "n_queries": self.n_queries,
            "n_failures": self.n_failures,
            "recall_at_n": {str(k): v for k, v in sorted(self.recall_at_n.items())},
            "acc_at_r": {f"{k:g}": v for k, v in sorted(self.acc_at_r.items())},
            "mean_error": self.mean_error,
            "std_error": self.std_error,
            "penalize_failures": self.penalize_failures,
            "records": [r.to_dict() for r in self.records],
        }


class Dataset:
    """Lazy view over a dataset directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest_path = self.root / "dataset.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no dataset.json under {self.root}")
        self.manifest = json.loads(manifest_path.read_text())
        self.dsm = formats.read_dsm(self.root / "dsm.sccd")
        self.tiles = [TileGeometry(**t) for t in json.loads((self.root / "tiles.json").read_text())]
        self.telemetry = {
            t["id"]: t for t in json.loads((self.root / "telemetry.json").read_text())
        }
        truth_path = self.root / "truth.json"
        self.truth = (
            {t["id"]: t for t in json.loads(truth_path.read_text())}
            if truth_path.exists()
            else {}
        )
        ext = self.manifest["map_extent"]
        self.map_extent = TileGeometry(**ext)

    def camera_for(self, qid: int) -> CameraModel:
        c = self.manifest["camera"]
        t = self.telemetry[qid]
        return CameraModel(
            fx=c["fx"], fy=c["fy"], cx=c["cx"], cy=c["cy"],
            width=c["width"], height=c["height"],
            pitch_prior=t["pitch_prior"], yaw_prior=t["yaw_prior"],
            altitude_prior=t["altitude_prior"],
        )

    def features(self, name: str):
        return formats.read_features(self.root / "features" / name)

    def image(self, name: str) -> np.ndarray:
        return formats.load_image(self.root / "images" / name)

    def matches(self, name: str) -> np.ndarray:
        return formats.read_matches(self.root / "matches" / name)


def _gate_reason(exc: Exception) -> str:
    return type(exc).__name__


def _process_candidate(
    ds: Dataset,
    cand: dict,
    query_fm,
    query_sal,
    cam: CameraModel,
    cfg: PipelineConfig,
    similarity: float,
) -> tuple[cdraps.CandidateScore, dict]:
    """Filter, lift, estimate, refine and score a single candidate."""
    score = cdraps.CandidateScore(a_ret=float(similarity))
    tile = TileGeometry(**cand["tile"])
    tile_fm = ds.features(cand["feature_file"])
    crop, _adj = align_tile(query_fm.cls, tile_fm, tile, ds.map_extent, cfg.sgva)
    stored = TileGeometry(**cand["crop"])
    drift = max(
        abs(crop.center_x - stored.center_x),
        abs(crop.center_y - stored.center_y),
        abs(crop.width - stored.width),
    )
    if drift > 1e-6:
        # the stored matches are expressed in the stored crop's pixel frame
        crop = stored

    raw = MatchSet.from_array(ds.matches(cand["match_file"]))
    db_img = ds.image(cand["image_file"])
    db_sal = saliency_map(db_img, cfg.filter.window)
    final, diag = csatsf.run_cascade(
        raw, None, None, cfg.filter, saliency_q=query_sal, saliency_db=db_sal
    )

    try:
        lifted = cdraps.lift_to_3d(final, crop, ds.dsm)
        est = cdraps.initial_pnp(lifted, cam, cfg.optim)
        refined = cdraps.refine_pose(est, lifted, cam, cfg.optim)
        score.n_in = int(len(refined.inliers))
        score.e_err = float(refined.reproj_error)
        if not refined.converged:
            score.gate_reason = "NonConvergence"
            return score, diag.counts
        if score.n_in < cfg.optim.min_inliers:
            score.gate_reason = "InsufficientInliers"
            return score, diag.counts
        u_unc, _cov = cdraps.pose_uncertainty(refined, lifted, cam, cfg.optim)
    except (AllNoData, InsufficientCorrespondences, NoConsensus, SingularHessian) as exc:
        score.gate_reason = _gate_reason(exc)
        return score, diag.counts
    except np.linalg.LinAlgError:
        score.gate_reason = "LinAlgError"
        return score, diag.counts
    score.u_unc = float(u_unc)
    t = refined.pose.translation
    score.location = (float(t[0]), float(t[1]), float(t[2]))
    score.valid = True
    return score, diag.counts


def run_pipeline(dataset_dir: str | Path, cfg: PipelineConfig | None = None) -> EvalReport:
    """Localize every query in the dataset and aggregate an evaluation report."""
    ds = Dataset(dataset_dir)
    if cfg is None:
        cfg = config_from_manifest(ds.manifest)

    tile_descs = _tile_descriptors(ds, cfg)
    records: list[QueryRecord] = []
    wall_times: list[float] = []
    for q in ds.manifest["queries"]:
        qid = q["id"]
        t0 = time.perf_counter()
        rec = QueryRecord(query_id=qid)
        try:
            rec = _run_query(ds, q, cfg, tile_descs)
        except EngineError as exc:
            rec.failed = True
            rec.failure_reason = _gate_reason(exc)
        wall_times.append(time.perf_counter() - t0)
        records.append(rec)

    report = evaluate(records, ds.truth, penalize_failures=cfg.penalize_failures,
                      map_extent=ds.map_extent)
    report.wall_times = wall_times
    return report


def _tile_descriptors(ds: Dataset, cfg: PipelineConfig):
    """Pooled descriptors for the global tile grid, cached next to the
    features and keyed by file content and pooling parameters."""
    from .retrieval import DescriptorCache, GlobalDescriptor, descriptor_cache_key

    cache = DescriptorCache(ds.root / "features" / ".gem_cache.npz")
    descs = []
    for ti in range(ds.manifest["n_tiles"]):
        name = f"tile_{ti:04d}.sccf"
        blob = (ds.root / "features" / name).read_bytes()
        key = descriptor_cache_key(blob, cfg.retrieval)
        vec = cache.get(key)
        if vec is None:
            vec = gem_pool(ds.features(name), cfg.retrieval).vec
            cache.put(key, vec)
        descs.append(GlobalDescriptor(vec=np.asarray(vec)))
    cache.flush()
    return descs


def _run_query(ds: Dataset, q: dict, cfg: PipelineConfig, tile_descs) -> QueryRecord:
    qid = q["id"]
    rec = QueryRecord(query_id=qid)
    cam = ds.camera_for(qid)
    query_fm = ds.features(q["feature_file"])
    query_img = ds.image(q["image_file"])
    query_sal = saliency_map(query_img, cfg.filter.window)

    # retrieval runs live against the stored features; the match files were
    # generated for exactly this ranking, so any drift is a hard error
    pool = list(tile_descs)
    for d in q.get("decoys", []):
        pool.append(gem_pool(ds.features(d["feature_file"]), cfg.retrieval))
    ranked = rank_candidates(gem_pool(query_fm, cfg.retrieval), pool, cfg.retrieval.top_n)
    n_tiles = ds.manifest["n_tiles"]
    stored_keys = [
        (c["source"], c["source_index"]) for c in q["candidates"]
    ]
    live_keys = [
        ("decoy", i - n_tiles) if i >= n_tiles else ("tile", i) for i, _ in ranked
    ]
    if live_keys != stored_keys:
        raise KeyMismatch(
            f"query {qid}: live retrieval ranking diverged from the stored "
            f"candidate set"
        )

    truth = ds.truth.get(qid)
    scores: list[cdraps.CandidateScore] = []
    stage_counts: list[dict] = []
    for cand, (_, live_sim) in zip(q["candidates"], ranked):
        tile = TileGeometry(**cand["tile"])
        if truth is not None:
            rec.retrieval_hits.append(bool(is_retrieval_hit(tile, truth["x"], truth["y"])))
        score, counts = _process_candidate(ds, cand, query_fm, query_sal, cam, cfg, live_sim)
        scores.append(score)
        stage_counts.append(counts)

    scores = cdraps.base_reliability(scores, cfg.optim)
    scores = cdraps.geo_consensus(scores, cfg.optim)
    for cand, s, counts in zip(q["candidates"], scores, stage_counts):
        entry = {
            "rank": cand["rank"],
            "is_decoy": bool(cand.get("is_decoy", False)),
            "a_ret": s.a_ret,
            "n_in": s.n_in,
            "e_err": s.e_err if math.isfinite(s.e_err) else None,
            "u_unc": s.u_unc if math.isfinite(s.u_unc) else None,
            "r_base": s.r_base,
            "c_geo": s.c_geo,
            "r_total": s.r_total,
            "valid": s.valid,
            "gate_reason": s.gate_reason,
            "location": list(s.location) if s.location else None,
            "stage_counts": counts,
        }
        rec.candidates.append(entry)

    try:
        rec.selected = cdraps.select_position(scores)
    except AllCandidatesGated:
        rec.failed = True
        rec.failure_reason = "AllCandidatesGated"
        return rec
    if truth is not None:
        rec.error = float(
            math.hypot(rec.selected[0] - truth["x"], rec.selected[1] - truth["y"])
        )
    return rec


def config_from_manifest(manifest: dict) -> PipelineConfig:
    """Rebuild the generation-time config embedded in a dataset manifest."""
    import tempfile

    import yaml

    cfg_dict = manifest.get("config")
    if cfg_dict is None:
        return load_config(None)
    with tempfile.NamedTemporaryFile("w", suffix=".yaml", delete=False) as fh:
        yaml.safe_dump(cfg_dict, fh)
        path = fh.name
    try:
        return load_config(path)
    finally:
        Path(path).unlink(missing_ok=True)


def evaluate(
    records: list[QueryRecord],
    truths: dict[int, dict],
    penalize_failures: bool = False,
    map_extent: TileGeometry | None = None,
    acc_radii=ACC_RADII,
    recall_ns=RECALL_NS,
) -> EvalReport:
    """Aggregate accuracy, recall and error statistics from query records.

    Accuracy at radius R counts errors strictly below R.  Failed queries
    always miss every radius; they enter the mean/std only in penalizing
    mode, where the prediction falls back to the search-area center.
    """
    report = EvalReport(records=records, penalize_failures=penalize_failures)
    report.n_queries = len(records)
    report.n_failures = sum(r.failed for r in records)
    if truths:
        missing = [r.query_id for r in records if r.query_id not in truths]
        if missing:
            raise KeyMismatch(f"records without truth entries: {missing[:5]}")

    errors = []
    for r in records:
        if r.failed or r.error is None:
            if penalize_failures and truths and map_extent is not None:
                t = truths.get(r.query_id)
                if t is not None:
                    e = math.hypot(t["x"] - map_extent.center_x, t["y"] - map_extent.center_y)
                    r.error = e
                    errors.append(e)
            continue
        errors.append(r.error)

    for radius in acc_radii:
        hits = sum(
            1 for r in records
            if not r.failed and r.error is not None and r.error < radius
        )
        report.acc_at_r[radius] = 100.0 * hits / max(1, len(records))

    max_rank = max((len(r.retrieval_hits) for r in records), default=0)
    for n in recall_ns:
        if n > max_rank:
            continue
        got = sum(1 for r in records if any(r.retrieval_hits[:n]))
        report.recall_at_n[n] = 100.0 * got / max(1, len(records))

    if errors:
        arr = np.asarray(errors)
        report.mean_error = float(arr.mean())
        report.std_error = float(arr.std())
    return report
