"""Synthetic scenario generation.

Builds a procedural world (terrain raster, intensity texture, and a smooth
latent feature field), places queries with known poses, and emulates the
external backbone and matcher: feature files carry a planted similarity
signal that peaks at the true location, and match files contain projected
true correspondences plus scattered outliers.  Decoy candidates copy the
true area's appearance at a displaced location and carry internally
consistent matches fabricated from a displaced virtual camera, reproducing
the high-inlier / wrong-place failure mode the selection stage must defeat.

Telemetry noise enters through two channels: the stored pitch prior feeds
the pose refiner's penalty, and the pitch mismatch additionally degrades the
emulated matcher (a systematic radial scale error plus extra outliers and
noise), mirroring how a biased ground-footprint estimate hurts real
cross-modal matching.  Yaw noise becomes a residual in-plane rotation of the
query, which a rotation-tolerant pipeline should absorb.

Everything is a pure function of the scenario seed; the same spec
regenerates byte-identical datasets.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import yaml

from . import formats
from .config import PipelineConfig, config_to_dict
from .errors import ConfigError, SpecInfeasible
from .geo import CameraModel, DsmRaster, from_rt, log_map, rot_x, rot_y, rot_z
from .retrieval import (
    FeatureMap,
    TileGeometry,
    build_tile_db,
    gem_pool,
    rank_candidates,
)
from .sgva import align_tile

QUERY_GRID = 16     # query/tile feature token grid side
FEATURE_DIM = 24
LATENT_CELLS = 48   # control points across the map for the feature field
TILE_NOISE = 0.15
QUERY_NOISE = 0.35  # modality gap between query and database features
CLS_NOISE = 0.05


@dataclass
class Scenario:
    """Declarative description of one synthetic dataset."""

    name: str = "scenario"
    seed: int = 0
    n_queries: int = 20
    terrain: str = "flat"            # flat | ramp | hills
    outlier_fraction: float = 0.4
    pixel_noise: float = 0.5
    matches_per_query: int = 1200
    decoy_count: int = 0
    decoy_displacement: float = 250.0
    decoy_inflation: float = 1.6
    decoy_noise_factor: float = 1.3  # look-alikes match only approximately
    pitch_noise_deg: float = 0.0
    yaw_noise_deg: float = 0.0
    map_size: float = 900.0
    gsd: float = 0.5
    altitude: float = 120.0
    dsm_cell: float = 3.0
    degrade_outlier_gain: float = 3.0
    degrade_noise_gain: float = 2.0

    def __post_init__(self):
        if not 0 <= self.outlier_fraction < 1:
            raise ConfigError("outlier_fraction must lie in [0, 1)")
        if self.terrain not in ("flat", "ramp", "hills"):
            raise ConfigError(f"unknown terrain {self.terrain!r}")


def load_scenario(path: str | Path) -> Scenario:
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: scenario file must be a mapping")
    known = {f.name for f in fields(Scenario)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown scenario key {key!r}; known: {sorted(known)}")
    return Scenario(**raw)


def default_camera(altitude: float) -> CameraModel:
    return CameraModel(
        fx=300.0, fy=300.0, cx=200.0, cy=200.0, width=400, height=400,
        altitude_prior=altitude,
    )


class _SmoothField:
    """Bilinearly interpolated seeded control grid over the map square."""

    def __init__(self, rng: np.random.Generator, cells: int, depth: int, size: float):
        self.grid = rng.normal(size=(cells, cells, depth))
        self.cells = cells
        self.size = size

    def sample(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        f = np.clip(xy / self.size * (self.cells - 1), 0, self.cells - 1 - 1e-9)
        c0 = f.astype(int)
        t = f - c0
        g = self.grid
        x0, y0 = c0[:, 0], c0[:, 1]
        tx, ty = t[:, 0][:, None], t[:, 1][:, None]
        return (
            g[y0, x0] * (1 - tx) * (1 - ty)
            + g[y0, x0 + 1] * tx * (1 - ty)
            + g[y0 + 1, x0] * (1 - tx) * ty
            + g[y0 + 1, x0 + 1] * tx * ty
        )


class World:
    """Deterministic world model shared by all artifacts of one dataset."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        rng = np.random.default_rng([scenario.seed, 11])
        self.latent = _SmoothField(rng, LATENT_CELLS, FEATURE_DIM, scenario.map_size)
        self.tex_coarse = _SmoothField(rng, 64, 1, scenario.map_size)
        self.tex_fine = _SmoothField(rng, 256, 1, scenario.map_size)
        self.relief = _SmoothField(rng, 40, 1, scenario.map_size)
        n = int(round(scenario.map_size / scenario.dsm_cell))
        xs = (np.arange(n) + 0.5) * scenario.dsm_cell
        gx, gy = np.meshgrid(xs, xs)
        z = self.terrain_z(np.column_stack([gx.ravel(), gy.ravel()])).reshape(n, n)
        self.dsm = DsmRaster(0.0, 0.0, scenario.dsm_cell, z.astype(np.float32))

    @property
    def extent(self) -> TileGeometry:
        s = self.scenario.map_size
        return TileGeometry(s / 2, s / 2, s, s, self.scenario.gsd)

    def terrain_z(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        kind = self.scenario.terrain
        if kind == "flat":
            return np.full(len(xy), 4.0)
        ramp = 0.02 * xy[:, 0] - 0.015 * xy[:, 1] + 5.0
        if kind == "ramp":
            return ramp
        return ramp + 3.0 * self.relief.sample(xy)[:, 0]

    def latent_tokens(self, xy: np.ndarray) -> np.ndarray:
        """Nonnegative feature-field samples (pooling clamps negatives)."""
        return np.abs(self.latent.sample(xy)) + 0.1

    def intensity(self, xy: np.ndarray) -> np.ndarray:
        v = 0.7 * self.tex_coarse.sample(xy)[:, 0] + 0.3 * self.tex_fine.sample(xy)[:, 0]
        return 1.0 / (1.0 + np.exp(-1.2 * v))

    def render_crop(self, crop: TileGeometry) -> np.ndarray:
        w, h = crop.px_width, crop.px_height
        uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
        xy = crop.pixel_to_world(np.column_stack([uu.ravel(), vv.ravel()]))
        xy = np.clip(xy, 0.0, self.scenario.map_size)
        return self.intensity(xy).reshape(h, w).astype(np.float32)

    def tile_feature_grid(self, tile: TileGeometry) -> np.ndarray:
        """Token-grid world coordinates, rows south to north."""
        x_min, y_min, x_max, y_max = tile.bounds
        xs = x_min + (np.arange(QUERY_GRID) + 0.5) / QUERY_GRID * tile.width
        ys = y_min + (np.arange(QUERY_GRID) + 0.5) / QUERY_GRID * tile.height
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])


def _normalize_rows(mat: np.ndarray) -> np.ndarray:
    return mat / np.maximum(np.linalg.norm(mat, axis=1, keepdims=True), 1e-12)


def make_tile_features(world: World, tile: TileGeometry, rng: np.random.Generator) -> FeatureMap:
    xy = np.clip(world.tile_feature_grid(tile), 0.0, world.scenario.map_size)
    tokens = world.latent_tokens(xy) + TILE_NOISE * rng.normal(size=(QUERY_GRID**2, FEATURE_DIM))
    tokens = _normalize_rows(tokens).reshape(QUERY_GRID, QUERY_GRID, FEATURE_DIM)
    return FeatureMap(tokens=tokens.astype(np.float32))


def make_decoy_features(
    world: World, decoy: TileGeometry, truth_xy: np.ndarray, rng: np.random.Generator
) -> FeatureMap:
    """The decoy tile looks like the area around the truth, shifted wholesale."""
    xy = world.tile_feature_grid(decoy)
    shifted = xy - np.array([decoy.center_x, decoy.center_y]) + truth_xy
    shifted = np.clip(shifted, 0.0, world.scenario.map_size)
    tokens = world.latent_tokens(shifted) + TILE_NOISE * rng.normal(size=(QUERY_GRID**2, FEATURE_DIM))
    tokens = _normalize_rows(tokens).reshape(QUERY_GRID, QUERY_GRID, FEATURE_DIM)
    return FeatureMap(tokens=tokens.astype(np.float32))


def make_query_features(
    world: World, truth_xy: np.ndarray, yaw_res: float, footprint: float,
    rng: np.random.Generator,
) -> FeatureMap:
    """Query tokens sample the latent field over the true (rotated) footprint."""
    half = footprint / 2.0
    lin = (np.arange(QUERY_GRID) + 0.5) / QUERY_GRID * footprint - half
    gx, gy = np.meshgrid(lin, lin)
    local = np.column_stack([gx.ravel(), gy.ravel()])
    c, s = math.cos(yaw_res), math.sin(yaw_res)
    rot = np.array([[c, -s], [s, c]])
    xy = np.clip(local @ rot.T + truth_xy, 0.0, world.scenario.map_size)
    base = world.latent_tokens(xy)
    tokens = base + QUERY_NOISE * rng.normal(size=base.shape)
    tokens = _normalize_rows(tokens).reshape(QUERY_GRID, QUERY_GRID, FEATURE_DIM)
    cls = base.mean(axis=0) + CLS_NOISE * rng.normal(size=FEATURE_DIM)
    cls = cls / max(np.linalg.norm(cls), 1e-12)
    return FeatureMap(tokens=tokens.astype(np.float32), cls=cls.astype(np.float32))


def _ray_to_terrain(world: World, pose, cam: CameraModel, uv: np.ndarray) -> np.ndarray:
    """Intersect pixel rays with the terrain surface (fixed-point on z)."""
    o = pose.translation
    d_cam = np.column_stack([
        (uv[:, 0] - cam.cx) / cam.fx,
        (uv[:, 1] - cam.cy) / cam.fy,
        np.ones(len(uv)),
    ])
    dirs = d_cam @ pose.rotation.T
    s = (world.terrain_z(o[None, :2])[0] - o[2]) / dirs[:, 2]
    for _ in range(40):
        p = o[None, :] + s[:, None] * dirs
        z_t = world.terrain_z(np.clip(p[:, :2], 0.0, world.scenario.map_size))
        s = s + (z_t - p[:, 2]) / dirs[:, 2] * 0.9
    return o[None, :] + s[:, None] * dirs


def synth_matches(
    world: World,
    pose,
    cam: CameraModel,
    crop: TileGeometry,
    n_target: int,
    outlier_fraction: float,
    pixel_noise: float,
    scale_factor: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Emulated dense-matcher output for one candidate crop.

    Returns (records, inlier_labels) where records is the (N, 5) SCCM array.
    True correspondences project terrain points seen by the pose; points the
    crop cannot contain become outliers, as do the requested fraction.  The
    systematic radial scale factor models a footprint misestimate.
    """
    side = int(math.ceil(math.sqrt(n_target)))
    lin = (np.arange(side) + 0.5) / side * (cam.width - 20) + 10
    gu, gv = np.meshgrid(lin, lin)
    uv = np.column_stack([gu.ravel(), gv.ravel()])[:n_target]
    uv = uv + rng.uniform(-4, 4, size=uv.shape)
    pts = _ray_to_terrain(world, pose, cam, uv)

    db_px = crop.world_to_pixel(pts[:, :2])
    center = np.array([(crop.px_width - 1) / 2.0, (crop.px_height - 1) / 2.0])
    db_px = center + (db_px - center) * scale_factor

    n = len(uv)
    inlier = np.ones(n, dtype=bool)
    in_crop = (
        (db_px[:, 0] >= 0) & (db_px[:, 0] <= crop.px_width - 1)
        & (db_px[:, 1] >= 0) & (db_px[:, 1] <= crop.px_height - 1)
    )
    inlier &= in_crop
    flip = rng.uniform(size=n) < outlier_fraction
    inlier &= ~flip

    out_idx = np.flatnonzero(~inlier)
    db_px[out_idx, 0] = rng.uniform(0, crop.px_width - 1, size=len(out_idx))
    db_px[out_idx, 1] = rng.uniform(0, crop.px_height - 1, size=len(out_idx))

    q_px = uv + rng.normal(0, pixel_noise, size=uv.shape)
    db_px = db_px + rng.normal(0, pixel_noise, size=db_px.shape)
    q_px = np.clip(q_px, 0, [[cam.width - 1, cam.height - 1]])
    db_px = np.clip(db_px, 0, [[crop.px_width - 1, crop.px_height - 1]])

    # matcher confidence correlates with correctness but overlaps in the
    # middle, so confidence alone cannot separate the sets
    conf = np.where(
        inlier, rng.uniform(0.55, 1.0, size=n), rng.uniform(0.1, 0.7, size=n)
    )
    records = np.column_stack([q_px, db_px, conf]).astype(np.float32)
    return records, inlier


def synth_scenario(
    scenario: Scenario, cfg: PipelineConfig, out_dir: str | Path
) -> Path:
    """Generate the full on-disk dataset for a scenario.

    The coarse stages (retrieval and viewport alignment) run here with the
    same configuration the pipeline will use, so the emitted match files
    line up with the candidates the pipeline will rank.
    """
    if scenario.decoy_count > 0 and scenario.decoy_displacement <= cfg.optim.d_max:
        raise SpecInfeasible(
            f"decoy displacement {scenario.decoy_displacement} m must exceed "
            f"the consensus radius {cfg.optim.d_max} m"
        )
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(exist_ok=True)
    (out / "matches").mkdir(exist_ok=True)

    world = World(scenario)
    cam = default_camera(scenario.altitude)
    formats.write_dsm(out / "dsm.sccd", world.dsm)

    tiles = build_tile_db(world.extent, cam, cfg.retrieval)
    tiles_json = [dataclasses.asdict(t) for t in tiles]
    (out / "tiles.json").write_text(json.dumps(tiles_json, indent=1, sort_keys=True))

    tile_descs = []
    for ti, tile in enumerate(tiles):
        rng_t = np.random.default_rng([scenario.seed, 21, ti])
        fm = make_tile_features(world, tile, rng_t)
        formats.write_features(out / "features" / f"tile_{ti:04d}.sccf", fm)
        tile_descs.append(gem_pool(fm, cfg.retrieval))

    footprint = 2.0 * scenario.altitude * math.tan(cam.fov_x / 2.0)
    half_search = math.sqrt(cfg.retrieval.search_area) / 2.0
    center = scenario.map_size / 2.0
    margin = half_search - footprint  # truths stay well inside the tiling
    if margin <= 0:
        raise SpecInfeasible(
            f"query footprint {footprint:.0f} m leaves no room inside the "
            f"{2 * half_search:.0f} m search region"
        )

    queries = []
    truths = []
    telemetry = []
    for qi in range(scenario.n_queries):
        rng_q = np.random.default_rng([scenario.seed, 31, qi])
        truth_xy = np.array(
            [center + rng_q.uniform(-margin, margin) for _ in range(2)]
        )
        yaw_res = math.radians(rng_q.uniform(-scenario.yaw_noise_deg, scenario.yaw_noise_deg))
        pitch_true = rng_q.normal(0.0, math.radians(0.3))
        gimbal_dev = rng_q.normal(0.0, math.radians(1.0))
        rot = rot_z(yaw_res) @ rot_y(pitch_true) @ rot_x(math.pi + gimbal_dev)
        z_ground = float(world.terrain_z(truth_xy[None, :])[0])
        pose = from_rt(rot, np.array([truth_xy[0], truth_xy[1], z_ground + scenario.altitude]))

        pitch_prior = pitch_true + math.radians(
            rng_q.uniform(-scenario.pitch_noise_deg, scenario.pitch_noise_deg)
        )
        # footprint misestimate from a biased pitch prior degrades matching
        scale_factor = math.cos(pitch_true) / math.cos(pitch_prior)
        mismatch = abs(scale_factor - 1.0)
        eff_outliers = min(0.9, scenario.outlier_fraction + scenario.degrade_outlier_gain * mismatch)
        eff_noise = scenario.pixel_noise * (1.0 + scenario.degrade_noise_gain * mismatch)

        qf = make_query_features(world, truth_xy, yaw_res, footprint, rng_q)
        formats.write_features(out / "features" / f"query_{qi:04d}.sccf", qf)

        # decoys copy the true area's appearance at displaced locations
        decoy_tiles = []
        decoy_fms = []
        placed: list[np.ndarray] = []
        side = tiles[0].width
        for di in range(scenario.decoy_count):
            for _ in range(200):
                ang = rng_q.uniform(0, 2 * math.pi)
                dist = scenario.decoy_displacement * rng_q.uniform(1.0, 1.4)
                c_xy = truth_xy + dist * np.array([math.cos(ang), math.sin(ang)])
                lo = side / 2 + 1
                hi = scenario.map_size - side / 2 - 1
                if not (lo < c_xy[0] < hi and lo < c_xy[1] < hi):
                    continue
                if all(np.linalg.norm(c_xy - p) > 3 * cfg.optim.d_max for p in placed):
                    placed.append(c_xy)
                    break
            else:
                raise SpecInfeasible("could not place decoys inside the map")
            decoy = TileGeometry(float(c_xy[0]), float(c_xy[1]), side, side, scenario.gsd)
            rng_d = np.random.default_rng([scenario.seed, 41, qi, di])
            dfm = make_decoy_features(world, decoy, truth_xy, rng_d)
            formats.write_features(out / "features" / f"decoy_q{qi:04d}_d{di}.sccf", dfm)
            decoy_tiles.append(decoy)
            decoy_fms.append(dfm)
            tile_descs.append(gem_pool(dfm, cfg.retrieval))

        all_tiles = tiles + decoy_tiles
        ranked = rank_candidates(
            gem_pool(qf, cfg.retrieval), tile_descs, cfg.retrieval.top_n
        )
        # drop this query's decoy descriptors from the shared pool again
        if scenario.decoy_count:
            del tile_descs[len(tiles):]

        candidates = []
        for rank, (idx, sim) in enumerate(ranked):
            is_decoy = idx >= len(tiles)
            tile = all_tiles[idx]
            if is_decoy:
                feat_file = f"decoy_q{qi:04d}_d{idx - len(tiles)}.sccf"
                tile_fm = decoy_fms[idx - len(tiles)]
            else:
                feat_file = f"tile_{idx:04d}.sccf"
                tile_fm = make_tile_features(
                    world, tile, np.random.default_rng([scenario.seed, 21, idx])
                )
            crop, _adj = align_tile(qf.cls, tile_fm, tile, world.extent, cfg.sgva)

            rng_m = np.random.default_rng([scenario.seed, 51, qi, rank])
            if is_decoy:
                # the decoy crop portrays a copy of the truth area: fabricate
                # matches against the mirrored crop back at the truth, then
                # reinterpret the same pixel pairs in the decoy crop frame.
                # The pose they support is the true pose translated by the
                # decoy offset, internally consistent but globally wrong.
                offset = np.array([tile.center_x, tile.center_y]) - truth_xy
                mirror_crop = TileGeometry(
                    crop.center_x - offset[0], crop.center_y - offset[1],
                    crop.width, crop.height, crop.gsd,
                )
                n_decoy = int(round(scenario.matches_per_query * scenario.decoy_inflation))
                records, labels = synth_matches(
                    world, pose, cam, mirror_crop, n_decoy,
                    scenario.outlier_fraction,
                    eff_noise * scenario.decoy_noise_factor, scale_factor, rng_m,
                )
                img = world.render_crop(mirror_crop)
            else:
                records, labels = synth_matches(
                    world, pose, cam, crop, scenario.matches_per_query,
                    eff_outliers, eff_noise, scale_factor, rng_m,
                )
                img = world.render_crop(crop)
            img_file = f"crop_q{qi:04d}_c{rank:02d}.png"
            formats.save_image(out / "images" / img_file, img)
            match_file = f"q{qi:04d}_c{rank:02d}.sccm"
            label_file = f"q{qi:04d}_c{rank:02d}.labels.npy"
            formats.write_matches(out / "matches" / match_file, records)
            np.save(out / "matches" / label_file, labels)

            candidates.append({
                "rank": rank,
                "source": ("decoy" if is_decoy else "tile"),
                "source_index": int(idx if not is_decoy else idx - len(tiles)),
                "similarity": float(sim),
                "is_decoy": bool(is_decoy),
                "feature_file": feat_file,
                "tile": dataclasses.asdict(tile),
                "crop": dataclasses.asdict(crop),
                "image_file": img_file,
                "match_file": match_file,
                "label_file": label_file,
                "true_inliers": int(labels.sum()),
            })

        # query raster: the footprint rendered at the camera's resolution,
        # good enough for the texture gate (nadir, small residual rotation)
        q_img = world.render_crop(TileGeometry(
            float(truth_xy[0]), float(truth_xy[1]),
            footprint, footprint, footprint / cam.width,
        ))
        q_img_file = f"query_{qi:04d}.png"
        formats.save_image(out / "images" / q_img_file, q_img)

        queries.append({
            "id": qi,
            "feature_file": f"query_{qi:04d}.sccf",
            "image_file": q_img_file,
            "decoys": [
                {
                    "feature_file": f"decoy_q{qi:04d}_d{di}.sccf",
                    "tile": dataclasses.asdict(d),
                }
                for di, d in enumerate(decoy_tiles)
            ],
            "candidates": candidates,
        })
        truths.append({
            "id": qi,
            "x": float(truth_xy[0]),
            "y": float(truth_xy[1]),
            "z": float(z_ground + scenario.altitude),
            "pitch_true": float(pitch_true),
            "yaw_residual": float(yaw_res),
            "pose_xi": log_map(pose).tolist(),
        })
        telemetry.append({
            "id": qi,
            "pitch_prior": float(pitch_prior),
            "yaw_prior": 0.0,
            "altitude_prior": float(scenario.altitude),
        })

    manifest = {
        "scenario": dataclasses.asdict(scenario),
        "config": config_to_dict(cfg),
        "camera": {
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
        },
        "map_extent": dataclasses.asdict(world.extent),
        "n_tiles": len(tiles),
        "queries": queries,
    }
    (out / "dataset.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (out / "truth.json").write_text(json.dumps(truths, indent=1, sort_keys=True))
    (out / "telemetry.json").write_text(json.dumps(telemetry, indent=1, sort_keys=True))
    return out
