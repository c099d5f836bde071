import math
import statistics

import numpy as np
import pytest
from scipy.spatial import Delaunay

from scc_loc.csatsf import (
    FLAG_DEGENERATE_TRIANGULATION,
    FLAG_INSUFFICIENT_MATCHES,
    FilterConfig,
    MatchSet,
    SaliencyMap,
    circular_median,
    global_consistency,
    log_quota,
    run_cascade,
    saliency_map,
    spatial_equalize,
    texture_gate,
    topo_filter,
)


def random_matchset(rng, n, width=400, height=400, stage="raw"):
    return MatchSet(
        pq=rng.uniform(0, width, size=(n, 2)),
        pdb=rng.uniform(0, width, size=(n, 2)),
        conf=rng.uniform(0, 1, size=n),
        stage=stage,
    )


class TestQuota:
    def test_empty_cell(self):
        assert log_quota(0, FilterConfig()) == 3

    def test_seven_population(self):
        assert log_quota(7, FilterConfig()) == 6

    def test_cap(self):
        assert log_quota(1000, FilterConfig()) == 9

    def test_exact_power_of_two_boundaries(self):
        cfg = FilterConfig()
        assert log_quota(1, cfg) == 4
        assert log_quota(3, cfg) == 5
        assert log_quota(4, cfg) == 5
        assert log_quota(63, cfg) == 9
        assert log_quota(62, cfg) == 8


class TestSpatialEqualize:
    def test_matches_per_cell_oracle(self):
        cfg = FilterConfig(grid_g=8)
        for seed in range(20):
            rng = np.random.default_rng(seed)
            raw = random_matchset(rng, 500)
            out = spatial_equalize(raw, cfg, (400, 400))

            # per-cell sort-and-truncate oracle
            expected = set()
            cells = {}
            for i in range(500):
                cx = min(int(raw.pq[i, 0] / 50.0), 7)
                cy = min(int(raw.pq[i, 1] / 50.0), 7)
                cells.setdefault((cx, cy), []).append(i)
            for members in cells.values():
                quota = min(3 + math.floor(math.log2(len(members) + 1)), 9)
                ranked = sorted(members, key=lambda i: (-raw.conf[i], i))
                expected.update(ranked[:quota])
            assert set(out.orig_indices.tolist()) == expected
            assert out.stage == "equalized"

    def test_cap_never_exceeded(self):
        cfg = FilterConfig(grid_g=4)
        rng = np.random.default_rng(99)
        raw = random_matchset(rng, 2000)
        out = spatial_equalize(raw, cfg, (400, 400))
        counts = {}
        for px, py in out.pq:
            key = (min(int(px / 100), 3), min(int(py / 100), 3))
            counts[key] = counts.get(key, 0) + 1
        assert max(counts.values()) <= cfg.q_max

    def test_empty_input(self):
        raw = MatchSet(pq=np.zeros((0, 2)), pdb=np.zeros((0, 2)), conf=np.zeros(0))
        out = spatial_equalize(raw, FilterConfig(), (100, 100))
        assert len(out) == 0 and out.stage == "equalized"

    def test_confidence_tie_breaks_by_index(self):
        raw = MatchSet(
            pq=np.full((5, 2), 10.0),
            pdb=np.zeros((5, 2)),
            conf=np.full(5, 0.5),
        )
        # quota = min(1 + floor(log2(6)), 4) = 3, ties keep the earliest rows
        out = spatial_equalize(raw, FilterConfig(grid_g=1, q_base=1, q_max=4), (100, 100))
        assert out.orig_indices.tolist() == [0, 1, 2]


class TestSaliency:
    def test_constant_image_degenerate(self):
        sal = saliency_map(np.full((20, 20), 0.6), 7)
        assert sal.degenerate
        assert np.all(sal.values == 0.0)

    def test_normalization_endpoints(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 1, size=(40, 40))
        sal = saliency_map(img, 7)
        assert sal.values.min() == pytest.approx(0.0)
        assert sal.values.max() == pytest.approx(1.0)

    def test_checkerboard_interior_matches_bernoulli_variance(self):
        img = np.indices((30, 30)).sum(axis=0) % 2
        img = img.astype(float)
        window = 5
        sal = saliency_map(img, window)
        i, j = 15, 15
        patch = img[i - 2 : i + 3, j - 2 : j + 3]
        p = patch.mean()
        var_closed = p * (1 - p)
        # direct summation oracle for the window variance
        var_direct = float(np.mean(patch**2) - np.mean(patch) ** 2)
        assert var_closed == pytest.approx(var_direct, abs=1e-12)
        sigma = math.sqrt(var_direct)
        recon = sal.values[i, j] * (sal.sigma_max - sal.sigma_min) + sal.sigma_min
        assert recon == pytest.approx(sigma, abs=1e-9)

    def test_border_window_clipping(self):
        rng = np.random.default_rng(2)
        img = rng.uniform(0, 1, size=(15, 15))
        sal = saliency_map(img, 7)
        patch = img[0:4, 0:4]  # clipped window at the corner
        sigma = float(np.sqrt(np.mean(patch**2) - np.mean(patch) ** 2))
        recon = sal.values[0, 0] * (sal.sigma_max - sal.sigma_min) + sal.sigma_min
        assert recon == pytest.approx(sigma, abs=1e-9)


class TestTextureGate:
    def const_maps(self, vq_val, vdb_val, shape=(50, 50)):
        vq = SaliencyMap(values=np.full(shape, vq_val), sigma_min=0.0, sigma_max=1.0)
        vdb = SaliencyMap(values=np.full(shape, vdb_val), sigma_min=0.0, sigma_max=1.0)
        return vq, vdb

    def test_both_sides_clear_threshold(self):
        ms = MatchSet(pq=[[10, 10]], pdb=[[20, 20]], conf=[0.9], stage="equalized")
        vq = SaliencyMap(values=np.full((50, 50), 0.4), sigma_min=0, sigma_max=1)
        vq.values[10, 10] = 0.8
        vdb = SaliencyMap(values=np.full((50, 50), 0.4), sigma_min=0, sigma_max=1)
        vdb.values[20, 20] = 0.9
        out = texture_gate(ms, vq, vdb, FilterConfig(gamma=0.5))
        assert len(out) == 1

    def test_logical_and_drops_one_sided(self):
        ms = MatchSet(pq=[[10, 10]], pdb=[[20, 20]], conf=[0.9], stage="equalized")
        vq = SaliencyMap(values=np.full((50, 50), 0.4), sigma_min=0, sigma_max=1)
        vq.values[10, 10] = 0.8
        vdb = SaliencyMap(values=np.full((50, 50), 0.4), sigma_min=0, sigma_max=1)
        vdb.values[20, 20] = 0.1
        out = texture_gate(ms, vq, vdb, FilterConfig(gamma=0.5))
        assert len(out) == 0

    def test_matches_predicate_oracle(self):
        rng = np.random.default_rng(3)
        n = 200
        ms = MatchSet(
            pq=rng.uniform(0, 49, size=(n, 2)),
            pdb=rng.uniform(0, 49, size=(n, 2)),
            conf=rng.uniform(0, 1, n),
            stage="equalized",
        )
        vq = SaliencyMap(values=rng.uniform(0, 1, (50, 50)), sigma_min=0, sigma_max=1)
        vdb = SaliencyMap(values=rng.uniform(0, 1, (50, 50)), sigma_min=0, sigma_max=1)
        cfg = FilterConfig(gamma=0.5)
        out = texture_gate(ms, vq, vdb, cfg)
        eps_q = 0.5 * vq.values.mean()
        eps_db = 0.5 * vdb.values.mean()
        expected = [
            i
            for i in range(n)
            if vq.values[round(ms.pq[i, 1]), round(ms.pq[i, 0])] > eps_q
            and vdb.values[round(ms.pdb[i, 1]), round(ms.pdb[i, 0])] > eps_db
        ]
        assert out.orig_indices.tolist() == expected


def similarity_transform(points, angle, scale, shift):
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    return points @ rot.T * scale + shift


class TestTopoFilter:
    def test_identity_map_keeps_all(self):
        rng = np.random.default_rng(4)
        pq = rng.uniform(0, 100, size=(25, 2))
        ms = MatchSet(pq=pq, pdb=pq.copy(), conf=np.ones(25), stage="textured")
        out = topo_filter(ms, FilterConfig())
        assert len(out) == 25

    def test_uniform_doubling_keeps_all(self):
        rng = np.random.default_rng(5)
        pq = rng.uniform(0, 100, size=(25, 2))
        ms = MatchSet(pq=pq, pdb=2.0 * pq, conf=np.ones(25), stage="textured")
        out = topo_filter(ms, FilterConfig())
        assert len(out) == 25

    def test_displaced_point_removed_and_kappa_matches_oracle(self):
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            n = rng.integers(15, 30)
            pq = rng.uniform(0, 100, size=(n, 2))
            pdb = similarity_transform(pq, 0.2, 1.1, np.array([5.0, -3.0]))
            bad = int(rng.integers(0, n))
            pdb[bad] += np.array([220.0, 260.0])
            ms = MatchSet(pq=pq, pdb=pdb, conf=np.ones(n), stage="textured")
            cfg = FilterConfig(eps_topo=0.4)
            out = topo_filter(ms, cfg)

            # exhaustive incident-triangle enumeration oracle
            tri = Delaunay(pq)

            def cross2(a, b):
                return a[0] * b[1] - a[1] * b[0]

            ratios = []
            for simplex in tri.simplices:
                aq = abs(cross2(pq[simplex[1]] - pq[simplex[0]], pq[simplex[2]] - pq[simplex[0]])) / 2
                ad = abs(cross2(pdb[simplex[1]] - pdb[simplex[0]], pdb[simplex[2]] - pdb[simplex[0]])) / 2
                ratios.append(ad / aq if aq > 1e-12 else 0.0)
            med = statistics.median(ratios)
            keep = []
            for i in range(n):
                inc = [t for t, sx in enumerate(tri.simplices) if i in sx]
                neg = sum(
                    1 for t in inc if abs(ratios[t] - med) / max(med, 1e-12) > cfg.eps_topo
                )
                kappa = neg / len(inc) if inc else 0.0
                if kappa <= 0.5:
                    keep.append(i)
            assert out.orig_indices.tolist() == keep
            assert bad not in out.orig_indices

    def test_too_few_points_pass_through_flagged(self):
        ms = MatchSet(pq=[[0, 0], [5, 5]], pdb=[[0, 0], [5, 5]], conf=[1, 1], stage="textured")
        out = topo_filter(ms, FilterConfig())
        assert len(out) == 2
        assert FLAG_DEGENERATE_TRIANGULATION in out.flags

    def test_collinear_points_pass_through_flagged(self):
        pq = np.array([[float(i), float(i)] for i in range(10)])
        ms = MatchSet(pq=pq, pdb=pq.copy(), conf=np.ones(10), stage="textured")
        out = topo_filter(ms, FilterConfig())
        assert len(out) == 10
        assert FLAG_DEGENERATE_TRIANGULATION in out.flags


class TestGlobalConsistency:
    def test_pure_rotation_kept(self):
        rng = np.random.default_rng(6)
        pq = rng.uniform(0, 100, size=(30, 2))
        centroid = pq.mean(axis=0)
        pdb = similarity_transform(pq - centroid, 0.8, 1.0, centroid)
        ms = MatchSet(pq=pq, pdb=pdb, conf=np.ones(30), stage="topo")
        out = global_consistency(ms, FilterConfig())
        assert len(out) == 30

    def test_pure_scale_kept(self):
        rng = np.random.default_rng(7)
        pq = rng.uniform(0, 100, size=(30, 2))
        centroid = pq.mean(axis=0)
        pdb = (pq - centroid) * 1.7 + centroid
        ms = MatchSet(pq=pq, pdb=pdb, conf=np.ones(30), stage="topo")
        out = global_consistency(ms, FilterConfig())
        assert len(out) == 30

    def test_rotated_heading_rejected_and_predicate_oracle(self):
        rng = np.random.default_rng(8)
        n = 40
        pq = rng.uniform(0, 200, size=(n, 2))
        pdb = pq.copy()
        # rotate one match's heading 90 degrees about the db centroid
        centroid = pdb.mean(axis=0)
        v = pdb[5] - centroid
        pdb[5] = centroid + np.array([-v[1], v[0]])
        ms = MatchSet(pq=pq, pdb=pdb, conf=np.ones(n), stage="topo")
        cfg = FilterConfig()
        out = global_consistency(ms, cfg)
        assert 5 not in out.orig_indices

        # direct predicate oracle with the same circular median
        cq, cdb = pq.mean(axis=0), pdb.mean(axis=0)
        vq, vdb = pq - cq, pdb - cdb
        lq = np.linalg.norm(vq, axis=1)
        ldb = np.linalg.norm(vdb, axis=1)
        phi = np.arctan2(vdb[:, 1], vdb[:, 0]) - np.arctan2(vq[:, 1], vq[:, 0])
        phi = np.mod(phi + np.pi, 2 * np.pi) - np.pi
        usable = lq >= 1.0
        med = circular_median(phi[usable])
        s_bar = float(np.median(ldb[usable] / lq[usable]))
        expected = []
        for i in range(n):
            if not usable[i]:
                expected.append(i)
                continue
            dphi = abs(math.remainder(phi[i] - med, 2 * math.pi))
            if dphi < cfg.eps_ang and abs(ldb[i] / (s_bar * lq[i]) - 1) <= cfg.eps_scale:
                expected.append(i)
        assert out.orig_indices.tolist() == expected

    def test_subpixel_heading_auto_kept(self):
        pq = np.array([[0.0, 0.0], [100.0, 0.0], [0.0, 100.0], [33.4, 33.4]])
        # the final point sits almost exactly at the query centroid
        pq[3] = pq[:3].mean(axis=0) * 0.75 + pq[3] * 0.25
        pq[3] = pq.mean(axis=0)
        pdb = pq.copy()
        pdb[3] = pdb[3] + np.array([300.0, 300.0])  # wild db heading, no q evidence
        ms = MatchSet(pq=pq, pdb=pdb, conf=np.ones(4), stage="topo")
        out = global_consistency(ms, FilterConfig())
        assert 3 in out.orig_indices

    def test_insufficient_matches_flagged(self):
        ms = MatchSet(pq=[[1, 1]], pdb=[[1, 1]], conf=[1], stage="topo")
        out = global_consistency(ms, FilterConfig())
        assert FLAG_INSUFFICIENT_MATCHES in out.flags


class TestCircularMedian:
    def test_wraparound_cluster(self):
        angles = np.array([math.pi - 0.05, -math.pi + 0.05, math.pi - 0.01])
        med = circular_median(angles)
        # all three are within 0.06 rad of the +-pi seam
        assert min(abs(med - math.pi), abs(med + math.pi)) < 0.06

    def test_plain_cluster(self):
        angles = np.array([0.1, 0.2, 0.3, 0.25, 0.15])
        assert circular_median(angles) == pytest.approx(0.2)


class TestCascade:
    def make_images(self, rng, size=200):
        # textured field so the saliency gate keeps interior structure
        x = np.linspace(0, 8 * np.pi, size)
        img = 0.5 + 0.25 * np.sin(x)[None, :] * np.cos(x)[:, None]
        img += rng.uniform(-0.05, 0.05, size=(size, size))
        return np.clip(img, 0, 1)

    def test_clean_identity_survives_all_stages(self):
        rng = np.random.default_rng(9)
        img = self.make_images(rng)
        pq = rng.uniform(10, 190, size=(60, 2))
        ms = MatchSet(pq=pq, pdb=pq.copy(), conf=rng.uniform(0.5, 1, 60))
        cfg = FilterConfig(gamma=0.2)
        out, diag = run_cascade(ms, img, img, cfg)
        assert out.stage == "final"
        assert diag.counts["final"] >= 0.8 * diag.counts["equalized"]

    def test_empty_input(self):
        ms = MatchSet(pq=np.zeros((0, 2)), pdb=np.zeros((0, 2)), conf=np.zeros(0))
        img = np.random.default_rng(0).uniform(0, 1, size=(50, 50))
        out, diag = run_cascade(ms, img, img, FilterConfig())
        assert len(out) == 0
        assert diag.counts == {
            "raw": 0, "equalized": 0, "textured": 0, "topo": 0, "final": 0,
        }

    def test_monotone_shrinkage(self):
        rng = np.random.default_rng(10)
        img = self.make_images(rng)
        ms = random_matchset(rng, 300, width=200, height=200)
        _, diag = run_cascade(ms, img, img, FilterConfig())
        c = diag.counts
        assert c["final"] <= c["topo"] <= c["textured"] <= c["equalized"] <= c["raw"]

    def test_labeled_outliers_precision_improves(self):
        rng = np.random.default_rng(11)
        img = self.make_images(rng)
        n_in, n_out = 60, 40
        pq_in = rng.uniform(10, 190, size=(n_in, 2))
        pdb_in = similarity_transform(pq_in, 0.1, 1.05, np.array([3.0, -2.0]))
        pdb_in += rng.normal(0, 0.5, pdb_in.shape)
        pq_out = rng.uniform(10, 190, size=(n_out, 2))
        pdb_out = rng.uniform(0, 200, size=(n_out, 2))
        ms = MatchSet(
            pq=np.vstack([pq_in, pq_out]),
            pdb=np.vstack([pdb_in, pdb_out]),
            conf=rng.uniform(0.2, 1.0, n_in + n_out),
        )
        labels = np.concatenate([np.ones(n_in, dtype=bool), np.zeros(n_out, dtype=bool)])
        out, _ = run_cascade(ms, img, img, FilterConfig())
        survivors = out.orig_indices
        assert len(survivors) > 0
        precision_raw = n_in / (n_in + n_out)
        precision_final = labels[survivors].mean()
        assert precision_final >= precision_raw

    def test_similarity_invariance_of_structural_stages(self):
        rng = np.random.default_rng(12)
        pq = rng.uniform(0, 150, size=(40, 2))
        pdb = pq + rng.normal(0, 0.3, pq.shape)
        base = MatchSet(pq=pq, pdb=pdb, conf=np.ones(40), stage="textured")
        cfg = FilterConfig()
        kept_base = topo_filter(base, cfg)
        final_base = global_consistency(kept_base, cfg)

        moved = similarity_transform(pdb, 0.7, 1.9, np.array([40.0, -80.0]))
        other = MatchSet(pq=pq, pdb=moved, conf=np.ones(40), stage="textured")
        kept_other = topo_filter(other, cfg)
        final_other = global_consistency(kept_other, cfg)
        assert kept_base.orig_indices.tolist() == kept_other.orig_indices.tolist()
        assert final_base.orig_indices.tolist() == final_other.orig_indices.tolist()

    def test_determinism_byte_identical(self):
        rng_a = np.random.default_rng(13)
        img = self.make_images(rng_a)
        ms = random_matchset(rng_a, 250, width=200, height=200)
        out1, d1 = run_cascade(ms, img, img, FilterConfig())
        ms2 = MatchSet(pq=ms.pq.copy(), pdb=ms.pdb.copy(), conf=ms.conf.copy())
        out2, d2 = run_cascade(ms2, img, img, FilterConfig())
        assert out1.to_array().tobytes() == out2.to_array().tobytes()
        assert d1.counts == d2.counts

    def test_stage_order_enforced(self):
        ms = random_matchset(np.random.default_rng(14), 10)
        with pytest.raises(ValueError):
            texture_gate(
                ms,
                SaliencyMap(values=np.zeros((5, 5)), sigma_min=0, sigma_max=1),
                SaliencyMap(values=np.zeros((5, 5)), sigma_min=0, sigma_max=1),
                FilterConfig(),
            )
