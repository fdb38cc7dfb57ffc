import numpy as np
import pytest

from meshprior.metrics import (
    MetricReport,
    chamfer_metric,
    emd_metric,
    f_score,
    normal_consistency,
    scale_points_by_gt,
)

from conftest import cube, icosphere
from oracles import chamfer_metric_brute, emd_exhaustive, f_score_brute, normal_consistency_brute


class TestFScore:
    def test_identical_sets(self):
        p = np.random.default_rng(0).random((500, 3))
        assert f_score(p, p, 0.1) == pytest.approx(100.0)

    def test_disjoint_sets(self):
        p = np.zeros((10, 3))
        q = np.ones((10, 3)) * 100
        assert f_score(p, q, 0.1) == 0.0

    def test_half_within(self):
        rng = np.random.default_rng(1)
        gt = rng.random((200, 3))
        near = gt[:100] + 1e-6
        far = gt[100:] + 50.0
        pred = np.vstack([near, far])
        # P=0.5; every gt point has a pred (its near copy or a neighbor) nearby only for first half.
        val = f_score(pred, gt, 0.1)
        d_g = np.array([np.linalg.norm(gt - x, axis=1).min() for x in gt[100:]])
        # Compare against the exact formula on measured precision/recall.
        assert val == pytest.approx(f_score_brute(pred, gt, 0.1), abs=1e-9)

    def test_rigid_invariance(self):
        rng = np.random.default_rng(2)
        pred, gt = rng.random((100, 3)), rng.random((120, 3))
        base = f_score(pred, gt, 0.1)
        theta = 0.7
        R = np.array(
            [[np.cos(theta), -np.sin(theta), 0], [np.sin(theta), np.cos(theta), 0], [0, 0, 1]]
        )
        t = np.array([3.0, -2.0, 0.5])
        assert f_score(pred @ R.T + t, gt @ R.T + t, 0.1) == pytest.approx(base, abs=1e-9)

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            f_score(np.zeros((4, 3)), np.zeros((4, 3)), threshold=0.0)

    def test_scale_helper(self):
        rng = np.random.default_rng(3)
        gt = rng.random((50, 3)) * np.array([2.0, 1.0, 0.5])
        pred = gt + 0.01
        p2, g2 = scale_points_by_gt(pred, gt, 100.0)
        assert (g2.max(axis=0) - g2.min(axis=0)).max() == pytest.approx(100.0)


class TestChamferMetric:
    def test_identical(self):
        p = np.random.default_rng(4).random((100, 3))
        assert chamfer_metric(p, p) == pytest.approx(0.0, abs=1e-12)

    def test_two_points(self):
        d = 0.42
        assert chamfer_metric(np.array([[0.0, 0, 0]]), np.array([[d, 0, 0]])) == pytest.approx(2 * d)

    def test_matches_brute(self):
        rng = np.random.default_rng(5)
        a, b = rng.random((40, 3)), rng.random((55, 3))
        assert chamfer_metric(a, b) == pytest.approx(chamfer_metric_brute(a, b), abs=1e-9)


class TestEMD:
    def test_identical(self):
        p = np.random.default_rng(6).random((64, 3))
        assert emd_metric(p, p) == pytest.approx(0.0, abs=1e-9)

    def test_translation(self):
        p = np.random.default_rng(7).random((64, 3))
        t = np.array([0.3, -0.1, 0.2])
        assert emd_metric(p + t, p) == pytest.approx(np.linalg.norm(t), rel=1e-9)

    def test_matches_exhaustive_m8(self):
        rng = np.random.default_rng(8)
        for trial in range(5):
            a, b = rng.random((8, 3)), rng.random((8, 3))
            assert emd_metric(a, b) == pytest.approx(emd_exhaustive(a, b), rel=1e-9)

    def test_unequal_sizes_rejected(self):
        with pytest.raises(ValueError):
            emd_metric(np.zeros((5, 3)), np.zeros((6, 3)))

    def test_entropic_gap_within_2_percent(self):
        # The approximate path (beyond the exact threshold) vs the exact solver.
        rng = np.random.default_rng(9)
        for trial in range(3):
            a, b = rng.random((512, 3)), rng.random((512, 3))
            exact = emd_metric(a, b, exact_threshold=1024)
            approx = emd_metric(a, b, exact_threshold=256)
            assert approx >= exact - 1e-9  # plan cost upper-bounds the matching
            assert approx <= exact * 1.02

    def test_dominates_half_chamfer(self):
        rng = np.random.default_rng(10)
        a, b = rng.random((128, 3)), rng.random((128, 3))
        assert emd_metric(a, b) >= chamfer_metric(a, b) / 2 - 1e-12

    def test_subsample_deterministic(self):
        rng = np.random.default_rng(11)
        a, b = rng.random((3000, 3)), rng.random((3000, 3))
        assert emd_metric(a, b, subsample=128, seed=5) == emd_metric(a, b, subsample=128, seed=5)


class TestNormalConsistency:
    def test_self_consistency(self):
        # Sampling must be dense relative to facet size for the +-1e-3 bound:
        # near-edge samples find nearest neighbors on adjacent faces.
        mesh = icosphere(3)
        assert normal_consistency(mesh, mesh, k=50_000, seed=0) == pytest.approx(1.0, abs=1e-3)

    def test_flipped_plane(self):
        import numpy as np

        from meshprior.geometry import TriangleMesh

        verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
        plane = TriangleMesh(verts, np.array([[0, 1, 2], [0, 2, 3]]))
        flipped = TriangleMesh(verts, np.array([[0, 2, 1], [0, 3, 2]]))
        assert normal_consistency(plane, flipped, k=2000, seed=0) == pytest.approx(1.0, abs=1e-9)

    def test_sphere_vs_cube_matches_second_implementation(self):
        sphere = icosphere(1)
        box = cube()
        ours = normal_consistency(sphere, box, k=400, seed=3)
        ref = normal_consistency_brute(sphere, box, k=400, seed=3)
        assert ours == pytest.approx(ref, abs=1e-3)


class TestMetricReport:
    def test_record_roundtrip(self):
        rep = MetricReport(f_score=97.7, chamfer=0.0526, emd=0.0969, normal_consistency=0.956)
        back = MetricReport.from_record(rep.to_record())
        assert back == rep

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            MetricReport(f_score=np.nan, chamfer=0, emd=0, normal_consistency=0)
