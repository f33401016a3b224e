import math

import numpy as np
import pytest

import cplab
from cplab import contact, estimators


@pytest.fixture(scope="module")
def poisson_snaps():
    rng = np.random.default_rng(0)
    return rng.poisson(2.0, size=(1500, 24))


class TestK1:
    def test_exact_constant_flags_zero_variance(self):
        snaps = np.full((5, 4), 3)
        est = estimators.estimate_k1(snaps)
        assert np.all(est.values == 3.0)
        assert est.zero_variance == 4

    def test_poisson_calibration(self, poisson_snaps):
        est = estimators.estimate_k1(poisson_snaps)
        assert np.all(np.abs(est.values - 2.0) <= 3.0 * est.stderr + 1e-12)

    def test_two_replica_arithmetic(self):
        est = estimators.estimate_k1(np.array([[0], [2]]))
        assert est.values[0] == 1.0 and est.stderr[0] == 1.0

    def test_needs_two_replicas(self):
        with pytest.raises(ValueError):
            estimators.estimate_k1(np.array([[1, 2]]))


class TestK2:
    def test_factorial_diagonal(self):
        snaps = np.array([[2, 0], [2, 0]])
        est = estimators.estimate_k2(snaps)
        assert est.values[0, 0] == 2.0      # n (n - 1)
        assert est.values[0, 1] == 0.0
        assert est.zero_variance == 4

    def test_poisson_calibration(self, poisson_snaps):
        est = estimators.estimate_k2(poisson_snaps)
        assert np.all(np.abs(est.values - 4.0) <= 3.0 * est.stderr + 1e-12)

    def test_symmetric_by_construction(self, poisson_snaps):
        est = estimators.estimate_k2(poisson_snaps)
        assert np.array_equal(est.values, est.values.T)
        assert np.array_equal(est.stderr, est.stderr.T)

    def test_stderr_scales_with_replicas(self):
        rng = np.random.default_rng(4)
        snaps = rng.poisson(1.5, size=(4000, 8))
        half = estimators.estimate_k1(snaps[:2000])
        full = estimators.estimate_k1(snaps)
        ratio = half.stderr.mean() / full.stderr.mean()
        assert ratio == pytest.approx(math.sqrt(2.0), rel=0.1)

    def test_measure_weights_divide(self):
        space = cplab.KernelSpace([0, 1], np.array([2.0, 1.0]),
                                  np.array([[0.0, 1.0], [0.5, 0.0]]))
        est = estimators.estimate_k1(np.array([[4, 1], [4, 1]]), space)
        assert est.values == pytest.approx([2.0, 1.0])


class TestContinuumPairCorrelation:
    def test_poisson_radial_calibration(self):
        ck = cplab.build_continuum_kernel(2, 12.0, {"kind": "gaussian",
                                                    "sigma": 1.0})
        rng = np.random.default_rng(1)
        pts = [rng.uniform(0, 12.0, size=(rng.poisson(2.0 * 144), 2))
               for _ in range(150)]
        est = estimators.estimate_k2(pts, ck)
        assert np.all(np.abs(est.values - 4.0) <= 4.0 * est.stderr + 0.05)

    def test_cell_list_matches_bruteforce(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(0, 9.0, size=(60, 2))
        edges = np.array([0.0, 0.5, 1.0, 1.5])
        counts = estimators._cell_list_pairs(pts, 9.0, edges)
        delta = estimators._min_image(pts[:, None, :] - pts[None, :, :], 9.0)
        dist = np.sqrt((delta ** 2).sum(axis=2))
        brute = np.histogram(dist[~np.eye(60, dtype=bool)], bins=edges)[0]
        assert np.array_equal(counts, brute)


class TestClustering:
    def test_poisson_ratio_near_one(self, poisson_snaps):
        k1 = estimators.estimate_k1(poisson_snaps, time=0.0)
        k2 = estimators.estimate_k2(poisson_snaps, time=0.0)
        curve = estimators.clustering_diagnostic([(k1, k2)])
        assert curve[0]["ratio"] == pytest.approx(1.0, abs=5 * curve[0]["se"])

    def test_critical_ring_ratio_rises(self):
        space = cplab.build_ring_kernel(32)
        man = contact.RunManifest(model=None, rho=1.0, horizon=12.0, seed=5,
                                  replicas=800, series_times=[0.0, 12.0],
                                  snapshot_times=[0.0, 12.0])
        ens = contact.run_ensemble(space, man)
        series = []
        for t in (0.0, 12.0):
            k1 = estimators.estimate_k1(ens.snapshots[t], space, time=t)
            k2 = estimators.estimate_k2(ens.snapshots[t], space, time=t)
            series.append((k1, k2))
        curve = estimators.clustering_diagnostic(series)
        gap = curve[1]["ratio"] - curve[0]["ratio"]
        joint = math.hypot(curve[0]["se"], curve[1]["se"])
        assert gap > 3.0 * joint

    def test_vanishing_density_flagged(self):
        k1 = estimators.CorrelationEstimate(order=1, values=np.zeros(3),
                                            stderr=np.zeros(3), replicas=5,
                                            time=1.0)
        k2 = estimators.CorrelationEstimate(order=2, values=np.zeros((3, 3)),
                                            stderr=np.zeros((3, 3)),
                                            replicas=5, time=1.0)
        curve = estimators.clustering_diagnostic([(k1, k2)])
        assert math.isnan(curve[0]["ratio"])
        assert curve[0]["flagged_sites"] == 3


class TestMoments:
    def test_poisson_factorial_moments(self):
        rng = np.random.default_rng(3)
        snaps = rng.poisson(1.0, size=(3000, 16))
        window = list(range(8))
        rep = estimators.moment_growth_check(snaps, window, n_max=4)
        for n in range(1, 5):
            expect = 8.0 ** n / math.factorial(n)
            assert abs(rep.m_hat[n - 1] - expect) <= 3.0 * rep.m_se[n - 1]

    def test_empty_snapshots(self):
        rep = estimators.moment_growth_check(np.zeros((10, 4), dtype=int),
                                             [0, 1], n_max=3)
        assert np.all(rep.m_hat == 0.0)

    def test_partial_sums_nondecreasing(self, poisson_snaps):
        rep = estimators.moment_growth_check(poisson_snaps, [0, 1, 2], n_max=4)
        assert np.all(np.diff(rep.partial_sums) >= 0)

    def test_bound_table_shape_const_over_n(self):
        # m_n built from the factorial-squared bound K_n = Q^n (n!)^2 gives
        # (m_n)^(-1/n) ~ const / n
        Q, W = 0.5, 4.0
        scaled = []
        for n in range(1, 9):
            m_n = (W ** n) * (Q ** n) * math.factorial(n)  # |window|^n K_n / n!
            scaled.append(n * m_n ** (-1.0 / n))
        scaled = np.array(scaled)
        # n * m_n^{-1/n} increases toward the Stirling limit e/(WQ), so
        # m_n^{-1/n} is bounded below by const/n
        assert np.all(np.diff(scaled) > 0)
        assert scaled.min() >= 0.5
        assert scaled.max() <= math.e / (W * Q) + 1e-9

    def test_n_max_cap(self, poisson_snaps):
        with pytest.raises(ValueError):
            estimators.moment_growth_check(poisson_snaps, [0], n_max=7)

    def test_caveat_always_stated(self, poisson_snaps):
        rep = estimators.moment_growth_check(poisson_snaps, [0, 1], n_max=3)
        assert "n_max" in rep.caveat


class TestLenard:
    def test_poisson_passes(self, poisson_snaps):
        est = estimators.estimate_k2(poisson_snaps)
        assert estimators.lenard_positivity_spot_check(est).passed

    def test_constructed_negative_fails(self):
        est = estimators.CorrelationEstimate(
            order=1, values=np.array([-1.0]), stderr=np.array([0.01]),
            replicas=10)
        rep = estimators.lenard_positivity_spot_check(est)
        assert not rep.passed and rep.violations[0][1] == -1.0

    def test_scope_note_present(self, poisson_snaps):
        est = estimators.estimate_k1(poisson_snaps)
        rep = estimators.lenard_positivity_spot_check(est)
        assert "not claimed" in rep.note
