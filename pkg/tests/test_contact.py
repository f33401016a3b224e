import numpy as np
import pytest

import cplab
from cplab import contact
from cplab.rng import make_rng


@pytest.fixture(scope="module")
def two_ring():
    return cplab.build_ring_kernel(2)


def manifest(**kw):
    base = dict(model=None, rho=1.0, horizon=10.0, seed=42, replicas=4,
                series_times=[0.0, 5.0, 10.0])
    base.update(kw)
    return contact.RunManifest(**base)


class TestRates:
    def test_tree_interior_rate_2n(self):
        tree = cplab.build_tree_kernel(3, 3, boundary_mode="periodic")
        counts = np.zeros(tree.n_sites, dtype=np.int64)
        counts[[0, 1, 2]] = [2, 1, 4]
        cfg = contact.Configuration(counts=counts, space=tree)
        assert contact.total_event_rate(tree, cfg) == pytest.approx(2 * 7)

    def test_empty_configuration_zero(self, two_ring):
        cfg = contact.Configuration(counts=np.zeros(2, dtype=np.int64))
        assert contact.total_event_rate(two_ring, cfg) == 0.0

    def test_two_ring_column_arithmetic(self, two_ring):
        cfg = contact.Configuration(counts=np.array([2, 0]))
        assert contact.total_event_rate(two_ring, cfg) == pytest.approx(4.0)

    def test_birth_aggregate_matches_recompute(self, two_ring):
        cfg = contact.Configuration(counts=np.array([3, 5]))
        assert cfg.birth_aggregate(two_ring) == pytest.approx(8.0)


class TestInitPoisson:
    def test_mean_total_discrete(self):
        space = cplab.build_ring_kernel(32)
        totals = [contact.init_poisson(space, 2.0, seed=s).total
                  for s in range(400)]
        se = np.std(totals, ddof=1) / np.sqrt(len(totals))
        assert abs(np.mean(totals) - 64.0) <= 3.0 * se

    def test_vanishing_intensity_empty(self):
        space = cplab.build_ring_kernel(32)
        assert all(contact.init_poisson(space, 1e-9, seed=s).total == 0
                   for s in range(5))

    def test_continuum_mean_points(self):
        ck = cplab.build_continuum_kernel(1, 10.0, {"kind": "uniform",
                                                    "radius": 1.0})
        totals = [contact.init_poisson(ck, 3.0, seed=s).total
                  for s in range(400)]
        se = np.std(totals, ddof=1) / np.sqrt(len(totals))
        assert abs(np.mean(totals) - 30.0) <= 3.0 * se

    def test_interior_mask(self):
        tree = cplab.build_tree_kernel(3, 4)
        cfg = contact.init_poisson(tree, 5.0, seed=1, mask=tree.interior)
        assert cfg.counts[~tree.interior].sum() == 0

    def test_rho_must_be_positive(self, two_ring):
        with pytest.raises(ValueError):
            contact.init_poisson(two_ring, 0.0, seed=1)


class TestStepEvent:
    def test_two_ring_event_split(self, two_ring):
        rng = make_rng(0, "step-test")
        cfg = contact.Configuration(counts=np.array([1, 0]))
        kinds = []
        births_at_1 = 0
        for _ in range(4000):
            rec, _ = contact.step_event(two_ring, cfg, rng)
            kinds.append(rec.kind)
            if rec.kind == "birth":
                births_at_1 += rec.site == 1
        deaths = kinds.count("death")
        assert deaths / len(kinds) == pytest.approx(0.5, abs=0.03)
        assert births_at_1 == kinds.count("birth")

    def test_deterministic_replay(self, two_ring):
        cfg = contact.Configuration(counts=np.array([2, 1]))
        r1, c1 = contact.step_event(two_ring, cfg, make_rng(7, "replay"))
        r2, c2 = contact.step_event(two_ring, cfg, make_rng(7, "replay"))
        assert (r1.time, r1.kind, r1.site) == (r2.time, r2.kind, r2.site)
        assert np.array_equal(c1.counts, c2.counts)

    def test_empty_raises(self, two_ring):
        cfg = contact.Configuration(counts=np.zeros(2, dtype=np.int64))
        with pytest.raises(ValueError):
            contact.step_event(two_ring, cfg, make_rng(0, "x"))

    def test_continuum_birth_wraps(self):
        ck = cplab.build_continuum_kernel(1, 8.0, {"kind": "uniform",
                                                   "radius": 1.5})
        cfg = contact.Configuration(points=np.array([[7.9]]), space=ck)
        rng = make_rng(3, "cont-step")
        for _ in range(50):
            rec, new = contact.step_event(ck, cfg, rng)
            if rec.kind == "birth":
                assert 0.0 <= new.points[-1, 0] < 8.0


class TestRunContact:
    def test_horizon_zero_returns_initial(self, two_ring):
        man = manifest(horizon=0.0, series_times=[0.0])
        res = contact.run_contact(two_ring, man, replica=0)
        init = contact.init_poisson(two_ring, 1.0,
                                    contact._replica_seed(man.seed, 0))
        assert np.array_equal(res.final.counts, init.counts)
        assert res.totals == [init.total]

    def test_absorption_ends_run(self, two_ring):
        man = manifest(rho=0.5, horizon=400.0, series_times=[0.0, 400.0])
        res = contact.run_contact(two_ring, man, replica=0)
        if res.absorbed_at is not None:
            assert res.totals[-1] == 0
            assert res.final.counts.sum() == 0

    def test_event_cap_truncates(self):
        space = cplab.build_ring_kernel(16)
        man = manifest(horizon=50.0, event_cap=100, replicas=1)
        res = contact.run_contact(space, man, replica=0)
        assert res.truncated and res.events == 100

    def test_cached_rates_stay_synced(self):
        space = cplab.build_ring_kernel(64)
        man = manifest(rho=4.0, horizon=50.0, series_times=[0.0, 50.0])
        res = contact.run_contact(space, man, replica=1)
        assert res.events > contact.RESYNC_EVERY
        assert res.resync_drift <= 1e-9

    def test_periodic_has_no_leaks(self):
        space = cplab.build_tree_kernel(3, 4, boundary_mode="periodic")
        man = manifest(horizon=10.0, series_times=[0.0, 10.0])
        res = contact.run_contact(space, man, replica=0)
        assert res.leaks[-1] == 0

    def test_absorbing_tree_counts_leaks(self):
        space = cplab.build_tree_kernel(3, 4)
        man = manifest(rho=2.0, horizon=10.0, series_times=[0.0, 10.0])
        res = contact.run_contact(space, man, replica=0)
        assert res.leaks[-1] > 0


class TestEnsemble:
    def test_deterministic_rerun(self):
        space = cplab.build_ring_kernel(16)
        man = manifest(replicas=3, horizon=5.0, series_times=[0.0, 5.0])
        e1 = contact.run_ensemble(space, man)
        e2 = contact.run_ensemble(space, man)
        assert np.array_equal(e1.totals, e2.totals)
        assert np.array_equal(e1.leaks, e2.leaks)

    def test_adding_replicas_preserves_existing(self):
        space = cplab.build_ring_kernel(16)
        man3 = manifest(replicas=3, horizon=5.0, series_times=[0.0, 5.0])
        man5 = manifest(replicas=5, horizon=5.0, series_times=[0.0, 5.0])
        e3 = contact.run_ensemble(space, man3)
        e5 = contact.run_ensemble(space, man5)
        assert np.array_equal(e5.totals[:3], e3.totals)

    def test_threads_match_sequential(self):
        space = cplab.build_ring_kernel(16)
        man = manifest(replicas=6, horizon=5.0, series_times=[0.0, 5.0])
        seq = contact.run_ensemble(space, man, threads=1)
        par = contact.run_ensemble(space, man, threads=2)
        assert np.array_equal(seq.totals, par.totals)

    def test_replica_mean_is_ensemble_mean(self):
        space = cplab.build_ring_kernel(16)
        man = manifest(replicas=8, horizon=5.0, series_times=[0.0, 5.0])
        ens = contact.run_ensemble(space, man)
        assert ens.density_mean == pytest.approx(
            (ens.totals / 16.0).mean(axis=0))

    def test_critical_conservation(self):
        space = cplab.build_ring_kernel(32)
        man = manifest(rho=2.0, replicas=150, horizon=10.0,
                       series_times=[0.0, 10.0])
        ens = contact.run_ensemble(space, man)
        assert abs(ens.density_mean[-1] - 2.0) <= 3.0 * ens.density_se[-1]

    def test_subcritical_decay_matches_ode(self):
        space = cplab.scale_kernel(cplab.build_ring_kernel(32), 0.9)
        man = manifest(rho=1.0, replicas=200, horizon=5.0,
                       series_times=[0.0, 5.0])
        ens = contact.run_ensemble(space, man)
        expect = np.exp(-0.1 * 5.0)
        assert abs(ens.density_mean[-1] - expect) <= 3.0 * ens.density_se[-1]

    def test_continuum_matches_discrete_mean_curve(self):
        ring = cplab.build_ring_kernel(32)
        ck = cplab.build_continuum_kernel(1, 32.0, {"kind": "nn_lattice",
                                                    "step": 1.0})
        man = manifest(rho=1.0, replicas=250, horizon=5.0,
                       series_times=[0.0, 2.5, 5.0])
        dis = contact.run_ensemble(ring, man)
        con = contact.run_ensemble(ck, man)
        for i in range(3):
            joint = np.hypot(dis.density_se[i], con.density_se[i])
            assert abs(dis.density_mean[i] - con.density_mean[i]) <= \
                max(3.0 * joint, 1e-9)

    def test_snapshots_collected(self):
        space = cplab.build_ring_kernel(16)
        man = manifest(replicas=4, horizon=2.0, series_times=[0.0, 2.0],
                       snapshot_times=[1.0, 2.0])
        ens = contact.run_ensemble(space, man)
        assert set(ens.snapshots) == {1.0, 2.0}
        assert ens.snapshots[1.0].shape == (4, 16)
