"""Event-driven simulation of the contact process.

Each particle dies at rate 1 and, sitting at parent site p, produces
offspring at site y with rate a(y, p) m(y); the total offspring rate of
a particle at p is the weighted column sum beta(p).  The scheduler is a
direct Gillespie loop: exponential waiting time at the total event rate,
then death / birth / boundary-leak selection by rate shares.  Parent
selection runs by uniform pick over the particle list with a
beta-rejection step (exact, and rejection-free on symmetric kernels
where beta is constant), offspring sites come from per-parent alias
tables, so each event is O(1) amortized.

On absorbing windows the builders record the offspring rate the
untruncated model would have had; the difference is simulated as
explicit leak events that are counted but change nothing, making
boundary loss a first-class observable.

Continuum configurations on the torus use the same scheme with unit
birth rate per particle (the dispersal density integrates to one) and
wrapped displacement sampling; there is no boundary and no leak.

Occupation numbers are unconstrained (multisets): the hierarchy the
simulation is checked against imposes no exclusion, and a constant
density profile requires unconstrained births.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import UniformBuffer, make_rng
from .spaces import ContinuumKernel, KernelSpace

EVENT_CAP_DEFAULT = 10 ** 8
RESYNC_EVERY = 10 ** 4


@dataclass
class EventRecord:
    time: float
    kind: str                   # "birth" | "death" | "leak"
    site: object                # site index (discrete) or point (continuum)
    parent: object = None       # set for births and leaks


@dataclass
class RunManifest:
    """Everything needed to replay a run bit-exactly."""

    model: dict | None
    rho: float
    horizon: float
    seed: int
    replicas: int = 1
    boundary_mode: str = "periodic"
    series_times: list = field(default_factory=list)
    snapshot_times: list = field(default_factory=list)
    event_cap: int = EVENT_CAP_DEFAULT
    init_mask: str | None = None   # None (everywhere) or "interior"


class Configuration:
    """Particle state: occupation counts (discrete) or a point list."""

    def __init__(self, counts=None, points=None, space=None):
        if (counts is None) == (points is None):
            raise ValueError("exactly one of counts/points must be given")
        self.counts = None if counts is None else np.asarray(counts, dtype=np.int64)
        self.points = None if points is None else np.asarray(points, dtype=float)
        self._space = space

    @property
    def is_continuum(self) -> bool:
        return self.points is not None

    @property
    def total(self) -> int:
        if self.is_continuum:
            return len(self.points)
        return int(self.counts.sum())

    def birth_aggregate(self, space: KernelSpace) -> float:
        """Cached-style aggregate sum_x n_x beta(x), recomputed from scratch."""
        return float(self.counts @ space.offspring_rates)

    def copy(self) -> "Configuration":
        if self.is_continuum:
            return Configuration(points=self.points.copy(), space=self._space)
        return Configuration(counts=self.counts.copy(), space=self._space)


def init_poisson(space, rho: float, seed: int, mask=None) -> Configuration:
    """Poisson initial configuration with intensity rho.

    Discrete spaces get independent Poisson(rho * m(x)) occupation
    numbers (optionally restricted to ``mask``); a continuum kernel gets
    Poisson(rho * L^d) uniform points on the torus.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    rng = make_rng(seed, "init-poisson")
    if isinstance(space, ContinuumKernel):
        vol = space.side ** space.dimension
        n = rng.poisson(rho * vol)
        points = rng.uniform(0.0, space.side, size=(n, space.dimension))
        return Configuration(points=points, space=space)
    lam = rho * space.measure
    if mask is not None:
        lam = np.where(np.asarray(mask, dtype=bool), lam, 0.0)
    counts = rng.poisson(lam)
    return Configuration(counts=counts, space=space)


def total_event_rate(space: KernelSpace, config: Configuration) -> float:
    """sum_x n_x (1 + beta(x)): unit deaths plus total offspring rates."""
    if config.is_continuum:
        return 2.0 * config.total
    return float(config.counts @ (1.0 + space.offspring_rates))


def step_event(space: KernelSpace, config: Configuration, rng):
    """Sample and apply a single event; returns (EventRecord, new config).

    Raises ``ValueError`` on the empty (absorbing) configuration.  Meant
    for stepping small systems and tests; :func:`run_contact` uses a
    tighter loop with the same law.
    """
    if config.is_continuum:
        return _step_continuum(config, rng)
    counts = config.counts
    n = int(counts.sum())
    if n == 0:
        raise ValueError("empty configuration is absorbing")
    beta = space.offspring_rates
    leak = space.leak_rates
    weights = counts * (1.0 + beta + leak)
    rate = float(weights.sum())
    dt = rng.exponential(1.0 / rate)
    death_rate = float(n)
    birth_rate = float(counts @ beta)
    u = rng.random() * rate
    new = config.copy()
    if u < death_rate:
        site = _weighted_site(counts.astype(float), rng)
        new.counts[site] -= 1
        return EventRecord(time=dt, kind="death", site=site), new
    if u < death_rate + birth_rate:
        parent = _weighted_site(counts * beta, rng)
        child = int(space.birth_sampler.draw_one(parent, rng.random(), rng.random()))
        new.counts[child] += 1
        return EventRecord(time=dt, kind="birth", site=child, parent=parent), new
    parent = _weighted_site(counts * leak, rng)
    return EventRecord(time=dt, kind="leak", site=None, parent=parent), new


def _weighted_site(weights: np.ndarray, rng) -> int:
    c = np.cumsum(weights)
    return int(np.searchsorted(c, rng.random() * c[-1], side="right"))


def _step_continuum(config: Configuration, rng):
    ck = config._space
    n = len(config.points)
    if n == 0:
        raise ValueError("empty configuration is absorbing")
    dt = rng.exponential(1.0 / (2.0 * n))
    idx = int(rng.integers(n))
    if rng.random() < 0.5:
        pts = np.delete(config.points, idx, axis=0)
        return (EventRecord(time=dt, kind="death", site=config.points[idx]),
                Configuration(points=pts, space=ck))
    disp = ck.sample_displacements(1, rng)[0]
    child = (config.points[idx] + disp) % ck.side
    pts = np.vstack([config.points, child])
    return (EventRecord(time=dt, kind="birth", site=child,
                        parent=config.points[idx]),
            Configuration(points=pts, space=ck))


# ---------------------------------------------------------------------------
# full runs


@dataclass
class ContactResult:
    series_times: list
    totals: list
    leaks: list
    snapshots: dict              # time -> counts array / point array
    events: int
    truncated: bool
    absorbed_at: float | None
    final: Configuration
    resync_drift: float          # worst cached-vs-recomputed aggregate gap


def run_contact(space, manifest: RunManifest, observers=None,
                config0: Configuration | None = None,
                replica: int = 0) -> ContactResult:
    """Simulate one trajectory to the horizon (or absorption/event cap)."""
    if config0 is None:
        mask = None
        if manifest.init_mask == "interior" and isinstance(space, KernelSpace):
            mask = space.interior
        config0 = init_poisson(space, manifest.rho,
                               _replica_seed(manifest.seed, replica), mask=mask)
    rng = make_rng(_replica_seed(manifest.seed, replica), "contact-events")
    if isinstance(space, ContinuumKernel):
        return _run_continuum(space, manifest, config0, rng, observers)
    return _run_discrete(space, manifest, config0, rng, observers)


def _replica_seed(seed: int, replica: int) -> int:
    # fold the replica index into the master seed without colliding streams
    return (int(seed) << 20) ^ (replica + 1)


def _run_discrete(space: KernelSpace, manifest, config0, rng, observers):
    counts = config0.counts.tolist()
    beta = space.offspring_rates.tolist()
    leak = space.leak_rates.tolist()
    attempt = [b + l for b, l in zip(beta, leak)]
    attempt_max = max(attempt) if attempt else 0.0
    beta_np = space.offspring_rates
    leak_np = space.leak_rates

    particles = []
    for site, c in enumerate(counts):
        particles.extend([site] * int(c))
    n = len(particles)
    B = float(np.dot(config0.counts, beta_np))       # birth aggregate
    LB = float(np.dot(config0.counts, leak_np))      # leak aggregate
    horizon = float(manifest.horizon)

    schedule = sorted(set(list(manifest.series_times)
                          + list(manifest.snapshot_times)))
    snapshot_at = set(manifest.snapshot_times)
    series_at = set(manifest.series_times)
    draw = UniformBuffer(rng).next
    sampler = space.birth_sampler
    log = math.log

    t = 0.0
    events = 0
    leaks = 0
    truncated = False
    absorbed_at = None
    sched_idx = 0
    out_times, out_totals, out_leaks = [], [], []
    snapshots = {}
    resync_drift = 0.0

    def flush_schedule(up_to):
        nonlocal sched_idx
        while sched_idx < len(schedule) and schedule[sched_idx] <= up_to:
            st = schedule[sched_idx]
            if st in series_at:
                out_times.append(st)
                out_totals.append(n)
                out_leaks.append(leaks)
            if st in snapshot_at:
                snapshots[st] = np.array(counts, dtype=np.int64)
            if observers:
                for obs in observers:
                    obs(st, counts, leaks)
            sched_idx += 1

    while True:
        if n == 0:
            absorbed_at = t
            flush_schedule(horizon)
            break
        rate = n + B + LB
        t_next = t - log(1.0 - draw()) / rate
        if t_next >= horizon:
            flush_schedule(horizon)
            break
        flush_schedule(t_next)
        t = t_next
        u = draw() * rate
        if u < n:
            idx = int(draw() * n)
            if idx >= n:
                idx = n - 1
            site = particles[idx]
            particles[idx] = particles[n - 1]
            particles.pop()
            n -= 1
            counts[site] -= 1
            B -= beta[site]
            LB -= leak[site]
        else:
            while True:  # parent ~ n_x * (beta + leak) by rejection
                idx = int(draw() * n)
                if idx >= n:
                    idx = n - 1
                parent = particles[idx]
                if attempt[parent] >= attempt_max * (1.0 - 1e-12) \
                        or draw() * attempt_max < attempt[parent]:
                    break
            lk = leak[parent]
            if lk > 0.0 and draw() * attempt[parent] < lk:
                leaks += 1
            else:
                child = sampler.draw_one(parent, draw(), draw())
                particles.append(child)
                n += 1
                counts[child] += 1
                B += beta[child]
                LB += leak[child]
        events += 1
        if events % RESYNC_EVERY == 0:
            counts_np = np.array(counts, dtype=np.int64)
            B_true = float(np.dot(counts_np, beta_np))
            LB_true = float(np.dot(counts_np, leak_np))
            resync_drift = max(resync_drift, abs(B - B_true), abs(LB - LB_true))
            B, LB = B_true, LB_true
        if events >= manifest.event_cap:
            truncated = True
            flush_schedule(t)
            break

    final = Configuration(counts=np.array(counts, dtype=np.int64), space=space)
    return ContactResult(series_times=out_times, totals=out_totals,
                         leaks=out_leaks, snapshots=snapshots, events=events,
                         truncated=truncated, absorbed_at=absorbed_at,
                         final=final, resync_drift=resync_drift)


def _run_continuum(ck: ContinuumKernel, manifest, config0, rng, observers):
    points = [tuple(p) for p in config0.points]
    n = len(points)
    d = ck.dimension
    L = ck.side
    horizon = float(manifest.horizon)
    schedule = sorted(set(list(manifest.series_times)
                          + list(manifest.snapshot_times)))
    snapshot_at = set(manifest.snapshot_times)
    series_at = set(manifest.series_times)
    draw = UniformBuffer(rng).next
    log = math.log

    disp_buf = ck.sample_displacements(4096, rng)
    disp_pos = 0

    t = 0.0
    events = 0
    truncated = False
    absorbed_at = None
    sched_idx = 0
    out_times, out_totals, out_leaks = [], [], []
    snapshots = {}

    def flush_schedule(up_to):
        nonlocal sched_idx
        while sched_idx < len(schedule) and schedule[sched_idx] <= up_to:
            st = schedule[sched_idx]
            if st in series_at:
                out_times.append(st)
                out_totals.append(n)
                out_leaks.append(0)
            if st in snapshot_at:
                snapshots[st] = np.array(points, dtype=float).reshape(-1, d)
            if observers:
                for obs in observers:
                    obs(st, points, 0)
            sched_idx += 1

    while True:
        if n == 0:
            absorbed_at = t
            flush_schedule(horizon)
            break
        rate = 2.0 * n
        t_next = t - log(1.0 - draw()) / rate
        if t_next >= horizon:
            flush_schedule(horizon)
            break
        flush_schedule(t_next)
        t = t_next
        idx = int(draw() * n)
        if idx >= n:
            idx = n - 1
        if draw() < 0.5:
            points[idx] = points[n - 1]
            points.pop()
            n -= 1
        else:
            if disp_pos >= len(disp_buf):
                disp_buf = ck.sample_displacements(4096, rng)
                disp_pos = 0
            dx = disp_buf[disp_pos]
            disp_pos += 1
            parent = points[idx]
            child = tuple((parent[i] + dx[i]) % L for i in range(d))
            points.append(child)
            n += 1
        events += 1
        if events >= manifest.event_cap:
            truncated = True
            flush_schedule(t)
            break

    final = Configuration(points=np.array(points, dtype=float).reshape(-1, d),
                          space=ck)
    return ContactResult(series_times=out_times, totals=out_totals,
                         leaks=out_leaks, snapshots=snapshots, events=events,
                         truncated=truncated, absorbed_at=absorbed_at,
                         final=final, resync_drift=0.0)


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class EnsembleResult:
    manifest: RunManifest
    series_times: list
    totals: np.ndarray           # (replicas, times)
    leaks: np.ndarray
    density_mean: np.ndarray
    density_se: np.ndarray
    snapshots: dict              # time -> (replicas, N) occupation array
    truncated_replicas: list
    absorbed_replicas: list
    resync_drift: float


def _ensemble_chunk(args):
    space, manifest, indices = args
    return [run_contact(space, manifest, replica=r) for r in indices]


def run_ensemble(space, manifest: RunManifest, threads: int = 1,
                 keep_snapshots: bool = True) -> EnsembleResult:
    """Independent replicas of :func:`run_contact` with derived seeds.

    Replica r draws every stream from (seed, r), so results are
    independent of scheduling and of the total replica count.
    """
    R = manifest.replicas
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        chunks = [(space, manifest, list(range(lo, min(lo + 8, R))))
                  for lo in range(0, R, 8)]
        results = [None] * R
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for chunk, outs in zip(chunks, pool.map(_ensemble_chunk, chunks)):
                for r, out in zip(chunk[2], outs):
                    results[r] = out
    else:
        results = [run_contact(space, manifest, replica=r) for r in range(R)]

    times = results[0].series_times
    totals = np.array([res.totals for res in results], dtype=float)
    leaks = np.array([res.leaks for res in results], dtype=float)
    if isinstance(space, ContinuumKernel):
        vol = space.side ** space.dimension
    elif manifest.init_mask == "interior":
        vol = float(space.measure[space.interior].sum())
    else:
        vol = float(space.measure.sum())
    density = totals / vol
    density_mean = density.mean(axis=0)
    density_se = (density.std(axis=0, ddof=1) / math.sqrt(R)
                  if R > 1 else np.zeros(len(times)))
    snapshots = {}
    if keep_snapshots and manifest.snapshot_times:
        for st in manifest.snapshot_times:
            snapshots[st] = np.stack([res.snapshots[st] for res in results])
    return EnsembleResult(
        manifest=manifest, series_times=times, totals=totals, leaks=leaks,
        density_mean=density_mean, density_se=density_se, snapshots=snapshots,
        truncated_replicas=[r for r, res in enumerate(results) if res.truncated],
        absorbed_replicas=[r for r, res in enumerate(results)
                           if res.absorbed_at is not None],
        resync_drift=max(res.resync_drift for res in results))
