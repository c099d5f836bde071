import json
import math
from pathlib import Path

import numpy as np
import pytest

from scc_loc.config import config_hash, load_config
from scc_loc.errors import ConfigError, KeyMismatch, SpecInfeasible
from scc_loc.pipeline import QueryRecord, evaluate, run_pipeline
from scc_loc.report import write_report
from scc_loc.retrieval import TileGeometry
from scc_loc.synth import Scenario, load_scenario, synth_scenario

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


@pytest.fixture(scope="module")
def smoke_dataset(tmp_path_factory):
    cfg = load_config(None)
    scenario = load_scenario(SCENARIOS / "smoke.yaml")
    out = tmp_path_factory.mktemp("smoke_ds")
    synth_scenario(scenario, cfg, out)
    return out, cfg


class TestConfig:
    def test_defaults_follow_standard_table(self):
        cfg = load_config(None)
        assert cfg.retrieval.psi == 4.0
        assert cfg.retrieval.eps_min == 1e-6
        assert cfg.retrieval.overlap == 0.6
        assert cfg.retrieval.gsd_scale == 1.5
        assert cfg.retrieval.search_area == 600.0 * 600.0
        assert cfg.sgva.sensitivity == 5.0
        assert cfg.sgva.boost == 0.5
        assert cfg.sgva.expansion == 0.2
        assert cfg.filter.grid_g == 8
        assert cfg.filter.q_base == 3
        assert cfg.filter.q_max == 9
        assert cfg.filter.gamma == 0.5
        assert cfg.filter.eps_topo == 0.4
        assert cfg.filter.eps_ang == pytest.approx(math.radians(20.0))
        assert cfg.filter.eps_scale == 0.3
        assert cfg.optim.lambda_roll == 1000.0
        assert cfg.optim.lambda_pitch == 15.0
        assert cfg.optim.weights == (0.1, 0.2, 0.35, 0.35)
        assert cfg.optim.d_max == 20.0
        assert cfg.optim.tau == 0.3
        assert cfg.optim.omega_geo == 0.2
        assert cfg.optim.omega_base == 0.5

    def test_unknown_top_level_key_rejected(self, tmp_path):
        p = tmp_path / "bad.yaml"
        p.write_text("retrevial:\n  psi: 3\n")
        with pytest.raises(ConfigError, match="unknown top-level key"):
            load_config(p)

    def test_unknown_section_key_rejected(self, tmp_path):
        p = tmp_path / "bad.yaml"
        p.write_text("retrieval:\n  spi: 3\n")
        with pytest.raises(ConfigError, match="retrieval.'spi'"):
            load_config(p)

    def test_seed_env_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SCC_LOC_SEED", "1234")
        cfg = load_config(None)
        assert cfg.seed == 1234
        assert cfg.optim.seed == 1234

    def test_config_hash_stable(self):
        assert config_hash(load_config(None)) == config_hash(load_config(None))

    def test_scenario_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "s.yaml"
        p.write_text("name: x\nterrian: flat\n")
        with pytest.raises(ConfigError, match="unknown scenario key"):
            load_scenario(p)


class TestEvaluate:
    def record(self, qid, error=None, failed=False, hits=()):
        return QueryRecord(
            query_id=qid, error=error, failed=failed,
            selected=(0.0, 0.0) if error is not None else None,
            retrieval_hits=list(hits),
        )

    def test_strict_thresholds(self):
        records = [
            self.record(0, 4.9), self.record(1, 5.0), self.record(2, 12.0),
        ]
        rep = evaluate(records, truths={})
        assert rep.acc_at_r[5.0] == pytest.approx(100.0 / 3.0)
        assert rep.acc_at_r[10.0] == pytest.approx(200.0 / 3.0)
        assert rep.acc_at_r[20.0] == pytest.approx(100.0)

    def test_all_zero_errors(self):
        records = [self.record(i, 0.0) for i in range(4)]
        rep = evaluate(records, truths={})
        assert all(v == 100.0 for v in rep.acc_at_r.values())
        assert rep.mean_error == 0.0
        assert rep.std_error == 0.0

    def test_mean_std_match_summation_oracle(self):
        rng = np.random.default_rng(0)
        errs = rng.uniform(0, 50, size=100)
        records = [self.record(i, float(e)) for i, e in enumerate(errs)]
        rep = evaluate(records, truths={})
        mean = sum(errs) / len(errs)
        var = sum((e - mean) ** 2 for e in errs) / len(errs)
        assert rep.mean_error == pytest.approx(mean, abs=1e-9)
        assert rep.std_error == pytest.approx(math.sqrt(var), abs=1e-9)

    def test_empty_query_set(self):
        rep = evaluate([], truths={})
        assert rep.n_queries == 0
        assert rep.mean_error == 0.0
        assert all(v == 0.0 for v in rep.acc_at_r.values())

    def test_recall_non_decreasing(self):
        records = [
            self.record(0, 1.0, hits=[False, True, False, False, False]),
            self.record(1, 1.0, hits=[False, False, False, False, True]),
        ]
        rep = evaluate(records, truths={})
        assert rep.recall_at_n[3] <= rep.recall_at_n[5]

    def test_acc_monotone_in_radius(self):
        rng = np.random.default_rng(1)
        records = [self.record(i, float(e)) for i, e in enumerate(rng.uniform(0, 30, 50))]
        rep = evaluate(records, truths={})
        assert rep.acc_at_r[5.0] <= rep.acc_at_r[10.0] <= rep.acc_at_r[20.0]

    def test_key_mismatch(self):
        with pytest.raises(KeyMismatch):
            evaluate([self.record(7, 1.0)], truths={0: {"x": 0, "y": 0}})

    def test_failures_excluded_by_default(self):
        records = [self.record(0, 2.0), self.record(1, failed=True)]
        truths = {0: {"x": 0, "y": 0}, 1: {"x": 10, "y": 10}}
        rep = evaluate(records, truths=truths)
        assert rep.mean_error == pytest.approx(2.0)
        assert rep.n_failures == 1
        # the failed query still drags accuracy down
        assert rep.acc_at_r[5.0] == pytest.approx(50.0)

    def test_failures_penalized_with_center_distance(self):
        records = [self.record(0, 2.0), self.record(1, failed=True)]
        truths = {0: {"x": 0, "y": 0}, 1: {"x": 130.0, "y": 100.0}}
        extent = TileGeometry(100.0, 100.0, 200.0, 200.0, 0.5)
        rep = evaluate(records, truths=truths, penalize_failures=True, map_extent=extent)
        assert rep.mean_error == pytest.approx((2.0 + 30.0) / 2.0)


class TestSynthDataset:
    def test_layout_and_formats(self, smoke_dataset):
        out, _cfg = smoke_dataset
        assert (out / "dataset.json").exists()
        assert (out / "dsm.sccd").exists()
        assert (out / "truth.json").exists()
        assert (out / "telemetry.json").exists()
        manifest = json.loads((out / "dataset.json").read_text())
        assert len(manifest["queries"]) == 6
        for q in manifest["queries"]:
            assert len(q["candidates"]) == 5
            for cand in q["candidates"]:
                assert (out / "matches" / cand["match_file"]).exists()
                assert (out / "images" / cand["image_file"]).exists()

    def test_outlier_free_matches_stay_near_projection(self, tmp_path):
        cfg = load_config(None)
        sc = Scenario(name="clean", seed=3, n_queries=2, terrain="flat",
                      outlier_fraction=0.0, matches_per_query=200)
        out = synth_scenario(sc, cfg, tmp_path / "ds")
        manifest = json.loads((out / "dataset.json").read_text())
        from scc_loc import formats

        for q in manifest["queries"]:
            # the aligned top candidate covers the footprint, so with a zero
            # outlier fraction every match there is a true correspondence
            top = q["candidates"][0]
            labels = np.load(out / "matches" / top["label_file"])
            assert labels.all()
            rec = formats.read_matches(out / "matches" / top["match_file"])
            assert len(rec) == len(labels)

    def test_pitch_noise_bounded_by_spec(self, tmp_path):
        cfg = load_config(None)
        sc = Scenario(name="t", seed=4, n_queries=10, terrain="flat",
                      pitch_noise_deg=20.0, matches_per_query=64)
        out = synth_scenario(sc, cfg, tmp_path / "ds")
        telem = json.loads((out / "telemetry.json").read_text())
        truth = json.loads((out / "truth.json").read_text())
        for t, tr in zip(telem, truth):
            delta = abs(t["pitch_prior"] - tr["pitch_true"])
            assert delta <= math.radians(20.0) + 1e-12

    def test_infeasible_decoy_displacement(self, tmp_path):
        cfg = load_config(None)
        sc = Scenario(name="bad", seed=1, n_queries=1, decoy_count=1,
                      decoy_displacement=10.0)  # below the consensus radius
        with pytest.raises(SpecInfeasible):
            synth_scenario(sc, cfg, tmp_path / "ds")

    def test_synth_deterministic(self, tmp_path):
        cfg = load_config(None)
        sc = Scenario(name="det", seed=9, n_queries=2, matches_per_query=100)
        out1 = synth_scenario(sc, cfg, tmp_path / "a")
        out2 = synth_scenario(sc, cfg, tmp_path / "b")
        for rel in ["dataset.json", "truth.json", "dsm.sccd",
                    "matches/q0000_c00.sccm", "features/query_0000.sccf"]:
            assert (out1 / rel).read_bytes() == (out2 / rel).read_bytes(), rel


class TestRunPipeline:
    def test_smoke_run_localizes(self, smoke_dataset):
        out, cfg = smoke_dataset
        report = run_pipeline(out, cfg)
        assert report.n_queries == 6
        assert report.n_failures == 0
        assert all(r.error is not None and r.error < 2.0 for r in report.records)

    def test_report_round_trip_and_determinism(self, smoke_dataset, tmp_path):
        out, cfg = smoke_dataset
        r1 = run_pipeline(out, cfg)
        r2 = run_pipeline(out, cfg)
        d1 = tmp_path / "run1"
        d2 = tmp_path / "run2"
        write_report(r1, d1, cfg, emit_csv=True, figures=False)
        write_report(r2, d2, cfg, emit_csv=True, figures=False)
        for rel in ["report.json", "records.jsonl", "records.csv", "run_manifest.json"]:
            assert (d1 / rel).read_bytes() == (d2 / rel).read_bytes(), rel

    def test_figures_rendered(self, smoke_dataset, tmp_path):
        out, cfg = smoke_dataset
        report = run_pipeline(out, cfg)
        write_report(report, tmp_path / "rep", cfg, figures=True)
        for name in ["fig_error_hist.png", "fig_error_cdf.png",
                     "fig_cascade.png", "fig_reliability.png"]:
            p = tmp_path / "rep" / name
            assert p.exists() and p.stat().st_size > 1000

    def test_manifest_config_reused_when_cfg_none(self, smoke_dataset):
        out, cfg = smoke_dataset
        report = run_pipeline(out, None)
        assert report.n_queries == 6
        assert report.n_failures == 0

    def test_descriptor_cache_created_and_reused(self, smoke_dataset):
        out, cfg = smoke_dataset
        cache = out / "features" / ".gem_cache.npz"
        run_pipeline(out, cfg)
        assert cache.exists()
        stamp = cache.stat().st_mtime_ns
        run_pipeline(out, cfg)  # second run hits the cache, no rewrite
        assert cache.stat().st_mtime_ns == stamp

    def test_single_noiseless_query_under_decimeter(self, tmp_path):
        cfg = load_config(None)
        sc = Scenario(name="exact", seed=77, n_queries=1, terrain="flat",
                      outlier_fraction=0.0, pixel_noise=0.0)
        out = synth_scenario(sc, cfg, tmp_path / "ds")
        report = run_pipeline(out, cfg)
        assert report.n_failures == 0
        assert report.records[0].error < 0.1
