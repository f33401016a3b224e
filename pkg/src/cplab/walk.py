"""Continuous-time jump walks and transience estimators.

Single paths follow the generator directly: exponential holding times at
the site's total jump rate and alias-sampled targets.  Ensemble
estimators (snapshots, two-walker contact integrals, pair-kernel means)
run through exact uniformization instead — every walker advances on a
shared Poisson clock with self-loop thinning — which vectorizes across
replicas without changing the law of the process and without any time
discretization.

The two-walker functional int_0^T a(X(t), Y(t)) dt is accumulated
segment by segment: the pair state is constant between clock events, so
each replica's partial integrals are exact for its realized path.

``estimate_pair_kernel`` evaluates E_{x,y}[a(X(t), Y(t))] for all start
pairs at once using the Poissonized representation of e^{t(A - I)}:
walkers follow the row-normalized jump chain and carry the product of
row sums as a multiplicative weight, so the estimate stays unbiased on
substochastic (absorbing) and rescaled kernels where holding rates
differ from one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CplabError
from .rng import make_rng
from .spaces import ABSORBING, KernelSpace

TRANSIENT_EXPONENTIAL = "transient-exponential"
TRANSIENT_POLYNOMIAL = "transient-polynomial"
RECURRENT = "recurrent"
INCONCLUSIVE = "inconclusive"


# ---------------------------------------------------------------------------
# single paths


@dataclass
class WalkPath:
    """One realized trajectory: piecewise constant between event times."""

    x0: int
    horizon: float
    times: list
    sites: list                 # site after each event
    terminated: bool = False    # hit a zero-rate site before the horizon

    def site_at(self, t: float) -> int:
        """Site occupied at time t (paths are right-continuous)."""
        idx = np.searchsorted(self.times, t, side="right")
        return self.x0 if idx == 0 else self.sites[idx - 1]


def simulate_jump_process(space: KernelSpace, x0: int, T: float,
                          seed: int) -> WalkPath:
    """Sample the jump Markov process from x0 up to horizon T."""
    if not 0 <= x0 < space.n_sites:
        raise ValueError(f"start site {x0} outside the space")
    if T <= 0:
        raise ValueError("horizon must be positive")
    rates = space.walk_rates
    sampler = space.walk_sampler
    rng = make_rng(seed, "jump-path", x0)
    t, site = 0.0, x0
    times, sites = [], []
    while True:
        rate = rates[site]
        if rate <= 0.0:
            return WalkPath(x0=x0, horizon=T, times=times, sites=sites,
                            terminated=True)
        t += rng.exponential(1.0 / rate)
        if t >= T:
            return WalkPath(x0=x0, horizon=T, times=times, sites=sites)
        site = int(sampler.draw_one(site, rng.random(), rng.random()))
        times.append(t)
        sites.append(site)


def pair_contact_integral(space: KernelSpace, path_x: WalkPath,
                          path_y: WalkPath, T: float) -> float:
    """Exact int_0^T a(X(t), Y(t)) dt for two frozen paths."""
    lookup = _SparseLookup(space)
    events = sorted(set([t for t in path_x.times if t < T]
                        + [t for t in path_y.times if t < T] + [0.0, T]))
    total = 0.0
    for lo, hi in zip(events, events[1:]):
        x = path_x.site_at(lo)
        y = path_y.site_at(lo)
        total += lookup.pair_values(np.array([x]), np.array([y]))[0] * (hi - lo)
    return total


# ---------------------------------------------------------------------------
# vectorized engines


class _SparseLookup:
    """O(log nnz) vectorized lookup of kernel entries a(x, y)."""

    def __init__(self, space: KernelSpace):
        coo = space.kernel.tocoo()
        n = space.n_sites
        keys = coo.row.astype(np.int64) * n + coo.col.astype(np.int64)
        order = np.argsort(keys)
        self._keys = keys[order]
        self._vals = coo.data[order]
        self._n = n

    def pair_values(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        q = np.asarray(x, dtype=np.int64) * self._n + np.asarray(y, dtype=np.int64)
        idx = np.searchsorted(self._keys, q)
        idx = np.minimum(idx, len(self._keys) - 1)
        if len(self._keys) == 0:
            return np.zeros(q.shape)
        return np.where(self._keys[idx] == q, self._vals[idx], 0.0)


def _advance_uniformized(space: KernelSpace, pos: np.ndarray,
                         n_steps: np.ndarray, lam: float,
                         rng: np.random.Generator) -> None:
    """In-place: each walker takes its count of uniformized clock steps."""
    rates = space.walk_rates
    sampler = space.walk_sampler
    remaining = n_steps.copy()
    while True:
        active = np.flatnonzero(remaining > 0)
        if active.size == 0:
            return
        p = pos[active]
        move = rng.random(active.size) * lam < rates[p]
        movers = active[move]
        if movers.size:
            pos[movers] = sampler.draw(pos[movers], rng)
        remaining[active] -= 1


def walk_snapshots(space: KernelSpace, starts: np.ndarray, times,
                   rng: np.random.Generator) -> np.ndarray:
    """Positions of independent walkers at each probe time.

    Returns an array of shape (len(times), len(starts)).
    """
    times = [float(t) for t in times]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("times must be sorted ascending")
    lam = float(space.walk_rates.max())
    pos = np.asarray(starts, dtype=np.int64).copy()
    out = np.empty((len(times), pos.size), dtype=np.int64)
    t_prev = 0.0
    for i, t in enumerate(times):
        dt = t - t_prev
        if dt > 0 and lam > 0:
            counts = rng.poisson(lam * dt, size=pos.size)
            _advance_uniformized(space, pos, counts, lam, rng)
        out[i] = pos
        t_prev = t
    return out


# ---------------------------------------------------------------------------
# two-walker transience integral


@dataclass
class TailFit:
    label: str
    q_hat: float | None
    kappa: float | None
    exponent: float | None
    goodness: dict
    per_pair: list


@dataclass
class TransienceReport:
    """Partial integrals of the two-walker contact functional."""

    pairs: list
    horizons: np.ndarray
    I_mean: np.ndarray          # (pairs, horizons)
    I_se: np.ndarray
    max_curve: np.ndarray       # max over probe pairs per horizon
    replicas: int
    metadata: dict = field(default_factory=dict)
    samples: np.ndarray | None = None   # (pairs, replicas, horizons)
    tail_fit: TailFit | None = None
    q_hat: float | None = None


def _tree_horizon_cap(space: KernelSpace) -> float | None:
    meta = space.metadata
    if meta.get("kind") == "tree" and space.boundary_mode == ABSORBING:
        k = meta["k"]
        drift = (k - 2.0) / k
        return meta["depth"] / (2.0 * drift)
    return None


def estimate_transience_integral(space: KernelSpace, probe_pairs, horizons,
                                 replicas: int, seed: int,
                                 keep_samples: bool = True) -> TransienceReport:
    """Monte Carlo partial integrals Î(T) per probe pair.

    Two independent walkers start from each probe pair; the contact rate
    a(X, Y) is integrated exactly over the piecewise-constant segments of
    the realized pair path.  On absorbing tree truncations horizons above
    depth/(2 * drift) are dropped (and reported), since beyond that the
    missing outer shells bias the integrand.
    """
    if replicas < 100:
        raise ValueError("at least 100 replicas are required")
    horizons = np.asarray(sorted(float(t) for t in horizons))
    if len(horizons) < 1:
        raise ValueError("need at least one horizon")
    meta = {"probe_policy": ("probe pairs approximate the sup over all pairs; "
                             "on vertex-transitive spaces symmetry covers the rest"),
            "seed": seed}
    cap = _tree_horizon_cap(space)
    if cap is not None and horizons[-1] > cap:
        dropped = [float(t) for t in horizons if t > cap]
        horizons = horizons[horizons <= cap]
        meta["horizon_cap"] = cap
        meta["dropped_horizons"] = dropped
        if len(horizons) == 0:
            raise ValueError(f"all horizons exceed the tree cap {cap}")
    if space.boundary_mode != ABSORBING:
        meta["equilibrium_floor"] = float(
            space.n_sites and np.asarray(space.kernel.sum()).item()
            / space.n_sites ** 2)

    lam = float(space.walk_rates.max())
    lookup = _SparseLookup(space)
    pairs = [(int(x), int(y)) for x, y in probe_pairs]
    H = len(horizons)
    T_max = float(horizons[-1])
    all_samples = np.empty((len(pairs), replicas, H))
    rates = space.walk_rates
    sampler = space.walk_sampler
    for p_idx, (x0, y0) in enumerate(pairs):
        rng = make_rng(seed, "transience", p_idx)
        X = np.full(replicas, x0, dtype=np.int64)
        Y = np.full(replicas, y0, dtype=np.int64)
        t = np.zeros(replicas)
        I = np.zeros((replicas, H))
        a_cur = lookup.pair_values(X, Y)
        total_rate = 2.0 * lam
        while True:
            active = np.flatnonzero(t < T_max)
            if active.size == 0:
                break
            tau = rng.exponential(1.0 / total_rate, size=active.size)
            t_lo = t[active]
            t_hi = t_lo + tau
            seg = a_cur[active]
            for j, Tj in enumerate(horizons):
                gain = np.clip(t_hi, None, Tj) - np.clip(t_lo, None, Tj)
                np.add.at(I[:, j], active, seg * np.clip(gain, 0.0, None))
            t[active] = t_hi
            u = rng.random(active.size) * total_rate
            rx = rates[X[active]]
            move_x = u < rx
            move_y = (~move_x) & (u < rx + rates[Y[active]])
            mx = active[move_x]
            if mx.size:
                X[mx] = sampler.draw(X[mx], rng)
            my = active[move_y]
            if my.size:
                Y[my] = sampler.draw(Y[my], rng)
            changed = np.concatenate([mx, my])
            if changed.size:
                a_cur[changed] = lookup.pair_values(X[changed], Y[changed])
        all_samples[p_idx] = I

    I_mean = all_samples.mean(axis=1)
    I_se = all_samples.std(axis=1, ddof=1) / math.sqrt(replicas)
    report = TransienceReport(
        pairs=pairs, horizons=horizons, I_mean=I_mean, I_se=I_se,
        max_curve=I_mean.max(axis=0), replicas=replicas, metadata=meta,
        samples=all_samples if keep_samples else None)
    return report


# ---------------------------------------------------------------------------
# tail classification


def _wls_line(x, y, w):
    """Weighted least squares y = a + b x; returns (a, b, se_b, r2)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    W = w.sum()
    xb = (w * x).sum() / W
    yb = (w * y).sum() / W
    sxx = (w * (x - xb) ** 2).sum()
    if sxx <= 0:
        return yb, 0.0, np.inf, 0.0
    b = (w * (x - xb) * (y - yb)).sum() / sxx
    a = yb - b * xb
    resid = y - (a + b * x)
    dof = max(len(x) - 2, 1)
    sigma2 = (w * resid ** 2).sum() / dof
    se_b = math.sqrt(sigma2 / sxx)
    syy = (w * (y - yb) ** 2).sum()
    r2 = 1.0 - (w * resid ** 2).sum() / syy if syy > 0 else 1.0
    return a, b, se_b, r2


def _classify_single(horizons, means, incr, incr_se, plateau_threshold,
                     transient_ratio, recurrent_ratio):
    """Classify one probe pair's partial-integral curve."""
    detail = {}
    total = means[-1]
    last, last_se = incr[-1], incr_se[-1]
    if total > 0 and (last + 2.0 * last_se) / total < plateau_threshold:
        detail["plateau_rel_increment"] = (last + 2.0 * last_se) / total
        label, q_extra = "plateau", 0.0
    else:
        label, q_extra = None, None

    # the window [0, T1] is not the doubling of a previous window (it holds
    # the initial contact mass), so ratios compare increments from the
    # second window onward only
    ratios, ratio_ses = [], []
    for j in range(2, len(incr)):
        if incr[j - 1] <= 0:
            continue
        r = incr[j] / incr[j - 1]
        rel = 0.0
        if incr[j] > 0:
            rel = math.sqrt((incr_se[j] / incr[j]) ** 2
                            + (incr_se[j - 1] / incr[j - 1]) ** 2)
        ratios.append(r)
        ratio_ses.append(abs(r) * rel)
    detail["ratios"] = ratios
    detail["ratio_ses"] = ratio_ses

    if label is None:
        if len(ratios) < 1:
            return INCONCLUSIVE, None, detail
        tail = min(2, len(ratios))
        rs = np.array(ratios[-tail:])
        ses = np.array(ratio_ses[-tail:])
        if np.all(ses > 0):
            wts = 1.0 / ses ** 2
            r_bar = float((wts * rs).sum() / wts.sum())
            r_se = float(math.sqrt(1.0 / wts.sum()))
        else:
            r_bar = float(rs.mean())
            r_se = float(ses.max())
        detail["ratio_mean"] = r_bar
        detail["ratio_se"] = r_se
        if r_bar - 2.0 * r_se >= recurrent_ratio:
            growth = math.log2(r_bar) + 1.0 if r_bar > 0 else None
            detail["growth_exponent"] = growth
            return RECURRENT, None, detail
        if r_bar + 2.0 * r_se <= transient_ratio:
            label = "converging"
            q_extra = last * r_bar / (1.0 - r_bar) if r_bar < 1.0 else 0.0
        else:
            return INCONCLUSIVE, None, detail

    # subclass: exponential vs polynomial tail of the proper-window increments
    pos = [(j, d) for j, d in enumerate(incr) if j >= 1 and d > 0]
    kappa = exponent = None
    sub = TRANSIENT_POLYNOMIAL
    if len(pos) >= 3:
        idx = [j for j, _ in pos]
        mids = [0.5 * (horizons[j] + horizons[j - 1]) for j in idx]
        logs = [math.log(d) for _, d in pos]
        wts = []
        for j in idx:
            rel = incr_se[j] / incr[j] if incr[j] > 0 else 1.0
            wts.append(1.0 / max(rel, 1e-6) ** 2)
        _, slope_t, se_t, r2_t = _wls_line(mids, logs, wts)
        _, slope_lt, se_lt, r2_lt = _wls_line(np.log(mids), logs, wts)
        detail["exp_fit"] = {"kappa": -slope_t, "se": se_t, "r2": r2_t}
        detail["poly_fit"] = {"exponent": 1.0 - slope_lt, "se": se_lt, "r2": r2_lt}
        # geometric ratios shrink for an exponential tail, stay flat for a
        # polynomial one; test the trend of log ratios
        if len(ratios) >= 3:
            jx = np.arange(len(ratios), dtype=float)
            ly = np.log(np.clip(ratios, 1e-12, None))
            lw = [1.0 / max(s / r, 1e-6) ** 2 if r > 0 else 1.0
                  for r, s in zip(ratios, ratio_ses)]
            _, trend, trend_se, _ = _wls_line(jx, ly, lw)
            detail["ratio_trend"] = {"slope": trend, "se": trend_se}
            if trend + 2.0 * trend_se < 0.0 and slope_t < 0.0:
                sub = TRANSIENT_EXPONENTIAL
                # for a pure exponential tail over doubled windows the last
                # increment ratio is q(1+q) with q = exp(-kappa * L), L the
                # earlier window's length; invert it for an unbiased kappa
                r_last = ratios[-1]
                L_prev = horizons[-2] - horizons[-3]
                if r_last > 0 and L_prev > 0:
                    qv = 0.5 * (math.sqrt(1.0 + 4.0 * r_last) - 1.0)
                    kappa = -math.log(qv) / L_prev if 0 < qv < 1 else -slope_t
                else:
                    kappa = -slope_t
        if sub == TRANSIENT_POLYNOMIAL:
            exponent = 1.0 - slope_lt
    q = total + (q_extra or 0.0)
    detail["q_hat"] = q
    if kappa is not None:
        detail["kappa"] = kappa
    if exponent is not None:
        detail["exponent"] = exponent
    return sub, q, detail


def classify_tail(report: TransienceReport, plateau_threshold: float = 0.02,
                  transient_ratio: float = 0.92,
                  recurrent_ratio: float = 1.0) -> TailFit:
    """Decide transient / recurrent / inconclusive from the partial integrals.

    A pair is transient either through the plateau certificate (the last
    doubling adds less than ``plateau_threshold`` of the total, with its
    confidence interval) or because the doubling increments decay
    geometrically (ratio significantly below ``transient_ratio``), in
    which case the remainder is extrapolated into ``q_hat``.  Growing
    increments (ratio significantly >= ``recurrent_ratio``) mean
    recurrent; anything in between stays inconclusive rather than
    guessing.  The overall label is the worst case over probe pairs.
    """
    if len(report.horizons) < 4:
        raise ValueError("classification needs at least 4 horizons")
    horizons = report.horizons
    per_pair = []
    order = {TRANSIENT_EXPONENTIAL: 0, TRANSIENT_POLYNOMIAL: 1,
             INCONCLUSIVE: 2, RECURRENT: 3}
    worst = TRANSIENT_EXPONENTIAL
    q_hat = None
    kappa = exponent = None
    goodness = {}
    for p in range(len(report.pairs)):
        means = report.I_mean[p]
        if report.samples is not None:
            incs = np.diff(np.concatenate([[np.zeros(report.replicas)],
                                           report.samples[p].T]), axis=0).T
            incr = incs.mean(axis=0)
            incr_se = incs.std(axis=0, ddof=1) / math.sqrt(report.replicas)
        else:
            incr = np.diff(np.concatenate([[0.0], means]))
            ses = report.I_se[p]
            prev = np.concatenate([[0.0], ses[:-1]])
            incr_se = np.sqrt(ses ** 2 + prev ** 2)
        label, q, detail = _classify_single(
            horizons, means, incr, incr_se, plateau_threshold,
            transient_ratio, recurrent_ratio)
        per_pair.append({"pair": report.pairs[p], "label": label, **detail})
        if order[label] > order[worst]:
            worst = label
        if q is not None:
            q_hat = q if q_hat is None else max(q_hat, q)
        if label == TRANSIENT_EXPONENTIAL and "kappa" in detail:
            kappa = max(kappa or 0.0, detail["kappa"])
        if label == TRANSIENT_POLYNOMIAL and "exponent" in detail:
            exponent = detail["exponent"]
        if "exp_fit" in detail:
            goodness.setdefault("exp_r2", []).append(detail["exp_fit"]["r2"])
        if "poly_fit" in detail:
            goodness.setdefault("poly_r2", []).append(detail["poly_fit"]["r2"])
    if worst in (RECURRENT, INCONCLUSIVE):
        q_hat = None
    fit = TailFit(label=worst, q_hat=q_hat, kappa=kappa, exponent=exponent,
                  goodness=goodness, per_pair=per_pair)
    report.tail_fit = fit
    report.q_hat = q_hat
    return fit


# ---------------------------------------------------------------------------
# sufficient condition: sup_x E_x a(X(t), y)


@dataclass
class SupConditionCurve:
    times: np.ndarray
    values: np.ndarray          # max over probe x and targets y
    se: np.ndarray
    probe_x: list
    y_targets: list
    per_target: np.ndarray      # (times, targets)
    metadata: dict


def estimate_sup_condition(space: KernelSpace, y_targets, horizons,
                           replicas: int, seed: int,
                           probe_x=None) -> SupConditionCurve:
    """Curve of max_x Ê_x a(X(t), y), maximized over the target sites.

    The sup over all x is approximated by a probe set (all sites when the
    space is small, a deterministic stride sample otherwise); this is
    recorded in the metadata.
    """
    times = np.asarray(sorted(float(t) for t in horizons))
    if probe_x is None:
        if space.n_sites <= 64:
            probe_x = list(range(space.n_sites))
        else:
            stride = max(1, space.n_sites // 32)
            probe_x = list(range(0, space.n_sites, stride))
    probe_x = [int(x) for x in probe_x]
    y_targets = [int(y) for y in y_targets]
    a_cols = {y: space.kernel[:, [y]].toarray().ravel() for y in y_targets}
    starts = np.repeat(np.asarray(probe_x, dtype=np.int64), replicas)
    rng = make_rng(seed, "sup-condition")
    snaps = walk_snapshots(space, starts, times, rng)
    n_probe = len(probe_x)
    per_target = np.empty((len(times), len(y_targets)))
    per_target_se = np.empty_like(per_target)
    for ti in range(len(times)):
        pos = snaps[ti].reshape(n_probe, replicas)
        for yi, y in enumerate(y_targets):
            vals = a_cols[y][pos]
            means = vals.mean(axis=1)
            best = int(np.argmax(means))
            per_target[ti, yi] = means[best]
            per_target_se[ti, yi] = (vals[best].std(ddof=1)
                                     / math.sqrt(replicas))
    idx = np.argmax(per_target, axis=1)
    values = per_target[np.arange(len(times)), idx]
    se = per_target_se[np.arange(len(times)), idx]
    meta = {"probe_note": ("sup over x approximated by the probe set"),
            "probe_count": n_probe, "seed": seed}
    return SupConditionCurve(times=times, values=values, se=se,
                             probe_x=probe_x, y_targets=y_targets,
                             per_target=per_target, metadata=meta)


# ---------------------------------------------------------------------------
# heat-kernel probe


@dataclass
class HeatKernelEstimate:
    x: int
    times: np.ndarray
    p_hat: np.ndarray
    se: np.ndarray
    statistic: str              # "return" or "sup"
    fits: dict
    better: str | None
    widened_ci: bool
    replicas: int
    metadata: dict


def heat_kernel_probe(space: KernelSpace, x: int, times, replicas: int,
                      seed: int, statistic: str = "return") -> HeatKernelEstimate:
    """Empirical transition probabilities with decay-law fits.

    ``statistic="return"`` estimates p(x, x, t); ``statistic="sup"``
    estimates sup_y p(x, y, t) (the uniform bound probed on trees, where
    the per-site mass spreads over exponentially many sites).  Both an
    exponential law log p = c - kappa t and a free-exponent power law
    log p = c - s log t are fitted by weighted least squares; the better
    (lower chi^2 per dof) is reported.
    """
    times = np.asarray([float(t) for t in times])
    if np.any(np.diff(times) < 0):
        raise ValueError("times must be sorted ascending")
    meta = {"seed": seed}
    cap = _tree_horizon_cap(space)
    if cap is not None and times.size and times[-1] > cap:
        meta["horizon_cap"] = cap
        meta["dropped_times"] = [float(t) for t in times if t > cap]
        times = times[times <= cap]
    rng = make_rng(seed, "heatkernel", x)
    starts = np.full(replicas, x, dtype=np.int64)
    positive = times[times > 0]
    snaps = (walk_snapshots(space, starts, positive, rng)
             if positive.size else np.empty((0, replicas), dtype=np.int64))
    p_hat = np.empty(times.size)
    j = 0
    for i, t in enumerate(times):
        if t == 0.0:
            p_hat[i] = 1.0 if statistic == "return" else 1.0
            continue
        pos = snaps[j]
        j += 1
        if statistic == "return":
            p_hat[i] = np.count_nonzero(pos == x) / replicas
        elif statistic == "sup":
            counts = np.bincount(pos, minlength=space.n_sites)
            p_hat[i] = counts.max() / replicas
        else:
            raise ValueError("statistic must be 'return' or 'sup'")
    se = np.sqrt(np.clip(p_hat * (1.0 - p_hat), 0.0, None) / replicas)

    mask = (times > 0) & (p_hat > 0)
    widened = bool(np.any((times > 0) & (p_hat == 0)))
    fits = {}
    better = None
    if mask.sum() >= 3:
        t_fit = times[mask]
        y = np.log(p_hat[mask])
        rel = se[mask] / p_hat[mask]
        w = 1.0 / np.clip(rel, 1e-6, None) ** 2
        c_e, slope_e, se_e, _ = _wls_line(t_fit, y, w)
        res_e = y - (c_e + slope_e * t_fit)
        chi_e = float((w * res_e ** 2).sum() / max(len(t_fit) - 2, 1))
        c_p, slope_p, se_p, _ = _wls_line(np.log(t_fit), y, w)
        res_p = y - (c_p + slope_p * np.log(t_fit))
        chi_p = float((w * res_p ** 2).sum() / max(len(t_fit) - 2, 1))
        fits["exponential"] = {"kappa": -slope_e, "kappa_se": se_e,
                               "c": c_e, "chi2_dof": chi_e}
        fits["polynomial"] = {"exponent": -slope_p, "exponent_se": se_p,
                              "c": c_p, "chi2_dof": chi_p}
        d = space.metadata.get("d")
        if d is not None:
            # one-parameter alternative with the slope pinned at d/2
            yp = y + 0.5 * d * np.log(t_fit)
            c_pin = float((w * yp).sum() / w.sum())
            res = yp - c_pin
            fits["polynomial_pinned"] = {
                "exponent": 0.5 * d, "c": c_pin,
                "chi2_dof": float((w * res ** 2).sum() / max(len(t_fit) - 1, 1))}
        better = "exponential" if chi_e <= chi_p else "polynomial"
    return HeatKernelEstimate(x=x, times=times, p_hat=p_hat, se=se,
                              statistic=statistic, fits=fits, better=better,
                              widened_ci=widened, replicas=replicas,
                              metadata=meta)


# ---------------------------------------------------------------------------
# pair-kernel estimates for the duality check


@dataclass
class PairKernelEstimate:
    t_grid: tuple
    mean: np.ndarray            # (times, N, N)
    variance: np.ndarray
    replicas: int


def estimate_pair_kernel(space: KernelSpace, t_grid, replicas: int,
                         seed: int, batch: int = 8) -> PairKernelEstimate:
    """Monte Carlo E_{x,y}[a(X(t), Y(t))] for every start pair (x, y).

    Runs ``replicas`` weighted walkers from every site for the X and Y
    roles separately (so diagonal pairs stay independent), advancing both
    ensembles through the probe grid.  Memory is bounded by processing
    the x-rows in batches.
    """
    if space.n_sites > 64:
        raise CplabError("pair-kernel estimation is reserved for N <= 64")
    t_grid = tuple(sorted(float(t) for t in t_grid))
    n = space.n_sites
    a_dense = space.kernel.toarray()
    rates = space.birth_row_sums
    from .sampling import RowSampler
    sampler = RowSampler(space.weighted_kernel)

    rng_x = make_rng(seed, "pair-kernel-x")
    rng_y = make_rng(seed, "pair-kernel-y")
    pos = {"x": np.repeat(np.arange(n, dtype=np.int64), replicas),
           "y": np.repeat(np.arange(n, dtype=np.int64), replicas)}
    wts = {"x": np.ones(n * replicas), "y": np.ones(n * replicas)}
    rngs = {"x": rng_x, "y": rng_y}

    def advance(role, dt):
        counts = rngs[role].poisson(dt, size=n * replicas)
        p, w = pos[role], wts[role]
        remaining = counts
        while True:
            active = np.flatnonzero((remaining > 0) & (w != 0.0))
            if active.size == 0:
                break
            r = rates[p[active]]
            w[active] *= r
            alive = active[r > 0]
            if alive.size:
                p[alive] = sampler.draw(p[alive], rngs[role])
            remaining[active] -= 1

    mean = np.empty((len(t_grid), n, n))
    var = np.empty_like(mean)
    t_prev = 0.0
    for ti, t in enumerate(t_grid):
        if t > t_prev:
            advance("x", t - t_prev)
            advance("y", t - t_prev)
            t_prev = t
        px = pos["x"].reshape(n, replicas)
        py = pos["y"].reshape(n, replicas)
        wx = wts["x"].reshape(n, replicas)
        wy = wts["y"].reshape(n, replicas)
        for lo in range(0, n, batch):
            hi = min(lo + batch, n)
            vals = a_dense[px[lo:hi, None, :], py[None, :, :]]
            vals = vals * wx[lo:hi, None, :] * wy[None, :, :]
            mean[ti, lo:hi] = vals.mean(axis=2)
            var[ti, lo:hi] = vals.var(axis=2, ddof=1)
    return PairKernelEstimate(t_grid=t_grid, mean=mean, variance=var,
                              replicas=replicas)
