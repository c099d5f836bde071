"""Command-line interface.

Subcommands mirror the pipeline stages so each can run standalone on files:

    scc-loc tile      build the sliding-window tile grid
    scc-loc retrieve  rank database features against a query
    scc-loc align     adjust one candidate crop from semantic guidance
    scc-loc filter    run the match-filter cascade, dumping per-stage sets
    scc-loc localize  pose-estimate and select over prepared candidates
    scc-loc run       full pipeline over a dataset directory
    scc-loc synth     generate a synthetic dataset from a scenario file
    scc-loc eval      recompute metrics from records and truth files
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import cdraps, formats
from .config import load_config
from .csatsf import MatchSet, run_cascade
from .errors import EngineError
from .geo import CameraModel
from .pipeline import QueryRecord, evaluate, run_pipeline
from .report import write_report
from .retrieval import TileGeometry, build_tile_db, gem_pool, rank_candidates
from .sgva import align_tile
from .synth import load_scenario, synth_scenario


def _camera_from_json(path: str) -> CameraModel:
    return CameraModel(**json.loads(Path(path).read_text()))


def _tile_from_json(path: str) -> TileGeometry:
    return TileGeometry(**json.loads(Path(path).read_text()))


def cmd_tile(args) -> int:
    cfg = load_config(args.config)
    extent = _tile_from_json(args.map_extent)
    cam = _camera_from_json(args.camera)
    tiles = build_tile_db(extent, cam, cfg.retrieval)
    payload = [dataclasses.asdict(t) for t in tiles]
    Path(args.out).write_text(json.dumps(payload, indent=1, sort_keys=True))
    print(f"wrote {len(tiles)} tiles to {args.out}")
    return 0


def cmd_retrieve(args) -> int:
    cfg = load_config(args.config)
    if args.top_n:
        cfg.retrieval.top_n = args.top_n
    query = gem_pool(formats.read_features(args.query), cfg.retrieval)
    feature_dir = Path(args.features)
    names = sorted(p.name for p in feature_dir.glob("*.sccf"))
    db = [gem_pool(formats.read_features(feature_dir / n), cfg.retrieval) for n in names]
    ranked = rank_candidates(query, db, cfg.retrieval.top_n)
    out = [{"rank": r, "file": names[i], "similarity": s} for r, (i, s) in enumerate(ranked)]
    print(json.dumps(out, indent=1))
    return 0


def cmd_align(args) -> int:
    cfg = load_config(args.config)
    query = formats.read_features(args.query)
    if query.cls is None:
        print("error: query features carry no global token", file=sys.stderr)
        return 2
    tile_fm = formats.read_features(args.tile)
    geom = json.loads(Path(args.geom).read_text())
    tile = TileGeometry(**geom["tile"])
    extent = TileGeometry(**geom["map_extent"])
    crop, adj = align_tile(query.cls, tile_fm, tile, extent, cfg.sgva)
    print(json.dumps({
        "crop": dataclasses.asdict(crop),
        "eta": adj.eta,
        "gain": adj.gain,
        "scale": adj.scale,
        "offset": list(adj.offset),
    }, indent=1, sort_keys=True))
    return 0


def cmd_filter(args) -> int:
    cfg = load_config(args.config)
    raw = MatchSet.from_array(formats.read_matches(args.matches))
    query_img = formats.load_image(args.query_img)
    db_img = formats.load_image(args.db_img)
    final, diag = run_cascade(raw, query_img, db_img, cfg.filter)
    print(json.dumps({"counts": diag.counts, "flags": diag.flags}, indent=1))
    if args.dump_stages:
        out = Path(args.dump_stages)
        out.mkdir(parents=True, exist_ok=True)
        formats.write_matches(out / "final.sccm", final.to_array())
        (out / "counts.json").write_text(json.dumps(diag.counts, indent=1))
    return 0


def cmd_localize(args) -> int:
    cfg = load_config(args.config)
    dsm = formats.read_dsm(args.dsm)
    telemetry = json.loads(Path(args.telemetry).read_text())
    manifest = json.loads((Path(args.candidates) / "candidates.json").read_text())
    cam = CameraModel(
        **manifest["camera"],
        pitch_prior=telemetry["pitch_prior"],
        yaw_prior=telemetry.get("yaw_prior", 0.0),
        altitude_prior=telemetry.get("altitude_prior", 0.0),
    )
    scores = []
    for entry in manifest["candidates"]:
        score = cdraps.CandidateScore(a_ret=float(entry.get("similarity", 0.0)))
        try:
            matches = MatchSet.from_array(
                formats.read_matches(Path(args.candidates) / entry["match_file"]),
            )
            matches.stage = "final"
            crop = TileGeometry(**entry["crop"])
            lifted = cdraps.lift_to_3d(matches, crop, dsm)
            est = cdraps.initial_pnp(lifted, cam, cfg.optim)
            refined = cdraps.refine_pose(est, lifted, cam, cfg.optim)
            score.n_in = len(refined.inliers)
            score.e_err = refined.reproj_error
            if refined.converged and score.n_in >= cfg.optim.min_inliers:
                u_unc, _ = cdraps.pose_uncertainty(refined, lifted, cam, cfg.optim)
                score.u_unc = u_unc
                t = refined.pose.translation
                score.location = (float(t[0]), float(t[1]), float(t[2]))
                score.valid = True
        except EngineError as exc:
            score.gate_reason = type(exc).__name__
        scores.append(score)
    scores = cdraps.base_reliability(scores, cfg.optim)
    scores = cdraps.geo_consensus(scores, cfg.optim)
    try:
        x, y = cdraps.select_position(scores)
        result = {"x": x, "y": y, "failed": False}
    except EngineError as exc:
        result = {"failed": True, "reason": type(exc).__name__}
    result["candidates"] = [
        {
            "a_ret": s.a_ret, "n_in": s.n_in,
            "e_err": s.e_err if np.isfinite(s.e_err) else None,
            "u_unc": s.u_unc if np.isfinite(s.u_unc) else None,
            "r_base": s.r_base, "c_geo": s.c_geo, "r_total": s.r_total,
            "valid": s.valid, "gate_reason": s.gate_reason,
        }
        for s in scores
    ]
    print(json.dumps(result, indent=1, sort_keys=True))
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.penalize_failures:
        cfg.penalize_failures = True
    report = run_pipeline(args.dataset, cfg if args.config else None)
    out = write_report(
        report, args.out, cfg, emit_csv=args.emit_csv, figures=not args.no_figures,
    )
    print((out / "report.txt").read_text())
    return 0


def cmd_synth(args) -> int:
    scenario = load_scenario(args.spec)
    cfg = load_config(args.config)
    out = synth_scenario(scenario, cfg, args.out)
    print(f"dataset written to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    records = []
    with open(args.records) as fh:
        for line in fh:
            d = json.loads(line)
            records.append(QueryRecord(
                query_id=d["query_id"],
                selected=tuple(d["selected"]) if d.get("selected") else None,
                error=d.get("error"),
                failed=d.get("failed", False),
                failure_reason=d.get("failure_reason", ""),
                retrieval_hits=d.get("retrieval_hits", []),
                candidates=d.get("candidates", []),
            ))
    truths = {t["id"]: t for t in json.loads(Path(args.truth).read_text())}
    extent = _tile_from_json(args.map_extent) if args.map_extent else None
    report = evaluate(records, truths, penalize_failures=args.penalize_failures,
                      map_extent=extent)
    out = write_report(report, args.out, cfg, emit_csv=args.emit_csv,
                       figures=not args.no_figures)
    print((out / "report.txt").read_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scc-loc",
        description="Geo-localization engine over file-ingested features and matches",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tile", help="build the sliding-window tile database")
    p.add_argument("--map-extent", required=True, help="JSON tile geometry of the map")
    p.add_argument("--camera", required=True, help="JSON camera model")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("retrieve", help="rank database features against a query")
    p.add_argument("--query", required=True, help="query SCCF file")
    p.add_argument("--features", required=True, help="directory of database SCCF files")
    p.add_argument("--top-n", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("align", help="semantically align one candidate crop")
    p.add_argument("--query", required=True, help="query SCCF (needs the global token)")
    p.add_argument("--tile", required=True, help="candidate tile SCCF")
    p.add_argument("--geom", required=True,
                   help='JSON {"tile": {...}, "map_extent": {...}}')
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("filter", help="run the correspondence filter cascade")
    p.add_argument("--matches", required=True, help="SCCM file")
    p.add_argument("--query-img", required=True)
    p.add_argument("--db-img", required=True)
    p.add_argument("--dump-stages", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("localize", help="estimate and select over candidates")
    p.add_argument("--candidates", required=True,
                   help="directory with candidates.json and SCCM files")
    p.add_argument("--dsm", required=True)
    p.add_argument("--telemetry", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("run", help="full pipeline over a dataset directory")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--emit-csv", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--penalize-failures", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="scenario YAML")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="recompute metrics from records and truth")
    p.add_argument("--records", required=True, help="records.jsonl from a run")
    p.add_argument("--truth", required=True, help="truth.json from the dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--emit-csv", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--penalize-failures", action="store_true")
    p.add_argument("--map-extent", default=None,
                   help="JSON tile geometry; required for failure penalties")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except EngineError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
