"""Command-line orchestration: reproducible experiment pipelines.

Subcommands ``simulate``, ``hierarchy``, ``transience``, ``heatkernel``,
``validate`` and ``report`` share one JSON config (see ``config.py``).
Every run writes a manifest echo with all defaults resolved; rerunning
the echoed manifest reproduces the run, and all delimited outputs are
byte-identical across reruns of the same config (wall-clock data lives
only in the manifest).  Exit codes: 0 pass, 1 check failure, 2
usage/config error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import datetime
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, contact, estimators, hierarchy, walk
from .config import ExperimentConfig, build_model, parse_config
from .errors import ConfigError, CplabError, NonConvergenceError
from .spaces import ContinuumKernel, KernelSpace, verify_criticality

SUBCOMMANDS = ("simulate", "hierarchy", "transience", "heatkernel",
               "validate", "report")


# ---------------------------------------------------------------------------
# deterministic writers


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header, rows) -> str:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return str(path)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def write_json(path, payload) -> str:
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return str(path)


def write_manifest(config: ExperimentConfig, outdir: Path) -> str:
    payload = {
        "config": config.resolved(),
        "library_version": __version__,
        "wall_clock_utc": datetime.datetime.now(datetime.timezone.utc)
        .isoformat(),
        "seed_derivation": "streams are Philox((master, sha256(label), index))",
    }
    return write_json(outdir / "manifest.json", payload)


# ---------------------------------------------------------------------------
# pipelines


def _default_origin(space: KernelSpace) -> int:
    meta = space.metadata
    if meta.get("kind") == "lattice":
        return space.site_index[tuple([meta["side"] // 2] * meta["d"])]
    return 0


def _auto_pairs(space: KernelSpace):
    x0 = _default_origin(space)
    row = space.kernel.getrow(x0)
    neighbour = int(row.indices[np.argmax(row.data)]) if row.nnz else x0
    return [(x0, x0), (x0, neighbour)]


def run_simulate(space, config: ExperimentConfig, outdir: Path,
                 threads: int = 1) -> dict:
    dyn = config.dynamics
    manifest = contact.RunManifest(
        model=config.model, rho=dyn["rho"], horizon=dyn["horizon"],
        seed=config.seed, replicas=dyn["replicas"],
        boundary_mode=getattr(space, "boundary_mode", "periodic"),
        series_times=list(dyn["series_times"]),
        snapshot_times=list(dyn["snapshot_times"]),
        event_cap=int(dyn["event_cap"]), init_mask=dyn["init_mask"])
    ens = contact.run_ensemble(space, manifest, threads=threads)
    rows = []
    for r in range(manifest.replicas):
        for i, t in enumerate(ens.series_times):
            rows.append((t, r, int(ens.totals[r, i]), int(ens.leaks[r, i])))
    artifacts = [write_csv(outdir / "series.csv",
                           ("t", "replica", "total_count", "leak_count"), rows)]
    if config.output["snapshots_jsonl"] and manifest.snapshot_times:
        path = outdir / "snapshots.jsonl"
        with open(path, "w") as fh:
            for t, snap in sorted(ens.snapshots.items()):
                for r in range(snap.shape[0]):
                    if isinstance(space, ContinuumKernel):
                        fh.write(json.dumps(
                            {"time": t, "replica": r,
                             "points": _jsonable(snap[r])}) + "\n")
                    else:
                        for site in np.flatnonzero(snap[r]):
                            fh.write(json.dumps(
                                {"time": t, "replica": r, "site": int(site),
                                 "occupation": int(snap[r, site])}) + "\n")
        artifacts.append(str(path))
    artifacts += _estimator_outputs(space, config, ens, outdir)
    report = {
        "pipeline": "simulate",
        "series_times": ens.series_times,
        "density_mean": ens.density_mean,
        "density_se": ens.density_se,
        "mean_leaks": ens.leaks.mean(axis=0),
        "truncated_replicas": ens.truncated_replicas,
        "absorbed_replicas": len(ens.absorbed_replicas),
        "rate_resync_drift": ens.resync_drift,
        "passed": not ens.truncated_replicas,
    }
    artifacts.append(write_json(outdir / "simulate.json", report))
    if config.output["figures"]:
        from . import figures
        artifacts.append(figures.density_figure(ens, outdir / "density.png"))
    report["artifacts"] = artifacts
    return report


def _estimator_outputs(space, config, ens, outdir: Path):
    """Correlation/clustering/moment CSVs from ensemble snapshots."""
    if not ens.snapshots:
        return []
    artifacts = []
    times = sorted(ens.snapshots)
    if isinstance(space, ContinuumKernel):
        last = times[-1]
        est = estimators.estimate_k2(list(ens.snapshots[last]), space,
                                     time=last)
        centers = 0.5 * (est.bin_edges[:-1] + est.bin_edges[1:])
        artifacts.append(write_csv(
            outdir / "k2_hat.csv", ("r", "k2", "stderr"),
            zip(centers, est.values, est.stderr)))
        return artifacts
    series = []
    rows_k1 = []
    for t in times:
        k1 = estimators.estimate_k1(ens.snapshots[t], space, time=t)
        rows_k1 += [(t, x, k1.values[x], k1.stderr[x])
                    for x in range(space.n_sites)]
        if space.n_sites <= 1024:
            k2 = estimators.estimate_k2(ens.snapshots[t], space, time=t)
            series.append((k1, k2))
    artifacts.append(write_csv(outdir / "k1_hat.csv",
                               ("t", "x", "k1", "stderr"), rows_k1))
    if series:
        last_k2 = series[-1][1]
        rows = [(x, y, last_k2.values[x, y], last_k2.stderr[x, y])
                for x in range(space.n_sites) for y in range(space.n_sites)]
        artifacts.append(write_csv(outdir / "k2_hat.csv",
                                   ("x", "y", "k2", "stderr"), rows))
        curve = estimators.clustering_diagnostic(series)
        artifacts.append(write_csv(
            outdir / "clustering.csv", ("t", "clustering_ratio", "stderr"),
            [(c["time"], c["ratio"], c["se"]) for c in curve]))
        if config.output["figures"]:
            from . import figures
            artifacts.append(figures.clustering_figure(
                curve, outdir / "clustering.png"))
    window = list(range(min(8, space.n_sites)))
    mom = estimators.moment_growth_check(ens.snapshots[times[-1]], window)
    artifacts.append(write_csv(
        outdir / "moments.csv", ("n", "m_hat", "stderr", "partial_sum"),
        [(n + 1, mom.m_hat[n], mom.m_se[n],
          mom.partial_sums[n] if n < len(mom.partial_sums) else "")
         for n in range(len(mom.m_hat))]))
    return artifacts


def run_transience(space, config: ExperimentConfig, outdir: Path) -> dict:
    spec = config.analysis["transience"]
    pairs = spec["pairs"]
    if pairs == "auto":
        pairs = _auto_pairs(space)
    report = walk.estimate_transience_integral(
        space, pairs, spec["horizons"], spec["replicas"], config.seed)
    fit = walk.classify_tail(report)
    rows = []
    for p in range(len(report.pairs)):
        for h, T in enumerate(report.horizons):
            rows.append((p, T, report.I_mean[p, h], report.I_se[p, h]))
    artifacts = [write_csv(outdir / "transience.csv",
                           ("pair_id", "T", "I_hat", "stderr"), rows)]
    payload = {
        "pipeline": "transience",
        "classification": fit.label,
        "q_hat": fit.q_hat,
        "kappa": fit.kappa,
        "exponent": fit.exponent,
        "pairs": report.pairs,
        "horizons": report.horizons,
        "metadata": report.metadata,
        "per_pair": fit.per_pair,
        "passed": fit.label != walk.INCONCLUSIVE,
    }
    artifacts.append(write_json(outdir / "transience.json", payload))
    if config.output["figures"]:
        from . import figures
        artifacts.append(figures.transience_figure(
            report, outdir / "transience.png"))
    payload["artifacts"] = artifacts
    payload["_report"] = report
    return payload


def run_heatkernel(space, config: ExperimentConfig, outdir: Path) -> dict:
    spec = config.analysis["heatkernel"]
    x = spec["x"]
    if x == "auto":
        x = _default_origin(space)
    est = walk.heat_kernel_probe(space, x, spec["times"], spec["replicas"],
                                 config.seed, statistic=spec["statistic"])
    artifacts = [write_csv(outdir / "heatkernel.csv", ("t", "p_hat", "stderr"),
                           zip(est.times, est.p_hat, est.se))]
    payload = {
        "pipeline": "heatkernel",
        "x": x,
        "statistic": est.statistic,
        "fits": est.fits,
        "better": est.better,
        "widened_ci": est.widened_ci,
        "metadata": est.metadata,
        "passed": est.better is not None,
    }
    artifacts.append(write_json(outdir / "heatkernel.json", payload))
    if config.output["figures"]:
        from . import figures
        artifacts.append(figures.heatkernel_figure(
            est, outdir / "heatkernel.png"))
    payload["artifacts"] = artifacts
    return payload


def run_hierarchy(space, config: ExperimentConfig, outdir: Path,
                  transience_result: dict | None = None) -> dict:
    spec = config.analysis["hierarchy"]
    rho = config.dynamics["rho"]
    artifacts = []
    state0 = hierarchy.poisson_state(space, rho, order=2)
    res = hierarchy.evolve_correlations(space, state0, spec["T"],
                                        dt=spec["dt"], tol=spec["tol"])
    k1 = res.state.k1
    artifacts.append(write_csv(outdir / "k1.csv", ("x", "k1"),
                               enumerate(k1)))
    if space.n_sites <= 1024:
        k2 = res.state.k2
        rows = [(x, y, k2[x, y]) for x in range(space.n_sites)
                for y in range(space.n_sites)]
        artifacts.append(write_csv(outdir / "k2.csv", ("x", "y", "k2"), rows))
    payload = {
        "pipeline": "hierarchy",
        "T": spec["T"],
        "step_error": res.step_error,
        "dt": res.dt,
        "k1_min": float(k1.min()),
        "k1_max": float(k1.max()),
        "passed": True,
    }
    if spec["stationary"]:
        skip_reason = None
        if transience_result is not None and \
                transience_result["classification"] in (walk.RECURRENT,
                                                        walk.INCONCLUSIVE):
            skip_reason = (
                f"walk classification is {transience_result['classification']};"
                " the stationary pair integral needs a transient surrogate")
        if skip_reason:
            payload["stationary"] = {"skipped": skip_reason}
            payload["passed"] = False
        else:
            try:
                stat = hierarchy.stationary_pair(
                    space, rho, T_max=spec["stationary_T_max"],
                    tol=spec["stationary_tol"], dt=spec["dt"])
            except NonConvergenceError as exc:
                artifacts.append(write_csv(
                    outdir / "decay.csv", ("t", "sup_norm"), exc.curve))
                payload["stationary"] = {"error": str(exc),
                                         "decay_curve": exc.curve}
                payload["passed"] = False
            else:
                rows = [(x, y, stat.k2[x, y]) for x in range(space.n_sites)
                        for y in range(space.n_sites)]
                artifacts.append(write_csv(outdir / "stationary_k2.csv",
                                           ("x", "y", "k2"), rows))
                artifacts.append(write_csv(outdir / "decay.csv",
                                           ("t", "sup_norm"),
                                           stat.decay_curve))
                payload["stationary"] = {
                    "T_star": stat.T_star,
                    "residual_interior": stat.residual_interior,
                    "residual_full": stat.residual_full,
                    "f2_norm": stat.f2_norm,
                    "k2_min": float(stat.k2.min()),
                    "ode_error": stat.ode_error,
                }
                if config.output["figures"]:
                    from . import figures
                    artifacts.append(figures.decay_curve_figure(
                        stat.decay_curve, outdir / "decay.png",
                        tol=spec["stationary_tol"]))
                    artifacts.append(figures.k2_figure(
                        stat.k2, outdir / "stationary_k2.png", rho=rho))
    artifacts.append(write_json(outdir / "hierarchy.json", payload))
    payload["artifacts"] = artifacts
    return payload


def run_validate(space, config: ExperimentConfig, outdir: Path) -> dict:
    spec = config.analysis["validate"]
    checks = {}
    crit = verify_criticality(space, tol=spec["criticality_tol"])
    checks["criticality"] = {
        "max_deviation": crit.max_deviation,
        "interior_sites": crit.interior_count,
        "boundary_max_deviation": crit.boundary_max_deviation,
        "passed": crit.passed,
    }
    ones = np.ones(space.n_sites)
    scale = space.metadata.get("scale", 1.0)
    if crit.passed and scale == 1.0:
        harm1 = float(np.abs(hierarchy.apply_L_hat(space, 1, ones)).max())
        harm2 = float(np.abs(hierarchy.apply_L_hat(
            space, 2, np.ones((space.n_sites, space.n_sites)))).max())
        checks["constants_harmonic"] = {"order1": harm1, "order2": harm2,
                                        "passed": max(harm1, harm2) <= 1e-12}
    for n in (1, 2):
        rep = hierarchy.check_semigroup_positivity(
            space, n, trials=spec["positivity_trials"],
            t_grid=spec["t_grid"], seed=config.seed)
        checks[f"positivity_n{n}"] = {"min_entry": rep.min_entry,
                                      "violations": rep.violations,
                                      "passed": rep.passed}
    if space.n_sites <= 64:
        est = walk.estimate_pair_kernel(space, spec["t_grid"],
                                        spec["duality_replicas"], config.seed)
        dual = hierarchy.duality_check(space, spec["t_grid"], est)
        checks["duality"] = {"max_z": dual.max_z, "max_z_raw": dual.max_z_raw,
                             "cells": dual.cells, "passed": dual.passed}
    else:
        checks["duality"] = {"skipped": f"N={space.n_sites} > 64"}
    passed = all(c.get("passed", True) for c in checks.values())
    payload = {"pipeline": "validate", "checks": checks, "passed": passed}
    write_json(outdir / "validate.json", payload)
    payload["artifacts"] = [str(outdir / "validate.json")]
    return payload


def emit_report(outdir: Path, render_figures: bool = True) -> dict:
    """Aggregate pipeline JSON artifacts; never recomputes anything."""
    outdir = Path(outdir)
    reports = {}
    for path in sorted(outdir.glob("*.json")):
        if path.name in ("manifest.json", "report.json"):
            continue
        with open(path) as fh:
            data = json.load(fh)
        if isinstance(data, dict) and "pipeline" in data:
            reports[data["pipeline"]] = data
    if not reports:
        payload = {"pipeline": "report", "checks": {}, "passed": True,
                   "note": "empty result set"}
    else:
        payload = {"pipeline": "report",
                   "checks": {name: rep.get("passed", True)
                              for name, rep in reports.items()},
                   "passed": all(rep.get("passed", True)
                                 for rep in reports.values())}
        if "transience" in reports:
            payload["q_hat"] = reports["transience"].get("q_hat")
            payload["classification"] = reports["transience"].get(
                "classification")
            if payload.get("q_hat") and "hierarchy" in reports:
                from .hierarchy import bound_ledger
                stat = reports["hierarchy"].get("stationary") or {}
                observed = {}
                if "k2_min" in stat:
                    observed = {1: reports["hierarchy"].get("k1_max", 0.0)}
                ledger = bound_ledger(payload["q_hat"], observed=observed)
                payload["bound_ledger"] = {"Q": ledger.Q, "D": ledger.D,
                                           "table": ledger.table,
                                           "passed": ledger.passed}
    write_json(outdir / "report.json", payload)
    lines = ["experiment report", "=" * 40]
    for name, ok in sorted(payload.get("checks", {}).items()):
        lines.append(f"{'PASS' if ok else 'FAIL':4}  {name}")
    lines.append("-" * 40)
    lines.append(f"overall: {'PASS' if payload['passed'] else 'FAIL'}")
    with open(outdir / "report.txt", "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return payload


# ---------------------------------------------------------------------------
# orchestration


def run_experiment(config: ExperimentConfig, which=None, threads: int = 1) -> int:
    """Execute the requested pipelines in dependency order."""
    which = list(which or ["simulate"])
    outdir = Path(config.output["dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    write_manifest(config, outdir)
    space, _env = build_model(config)
    if isinstance(space, ContinuumKernel) and \
            any(w in ("hierarchy", "transience", "heatkernel", "validate")
                for w in which):
        raise ConfigError("this pipeline needs a discrete model",
                          path="config.model.kind")
    status = 0
    transience_result = None
    order = [w for w in ("validate", "transience", "heatkernel", "simulate",
                         "hierarchy") if w in which]
    for name in order:
        if name == "simulate":
            rep = run_simulate(space, config, outdir, threads=threads)
        elif name == "transience":
            rep = run_transience(space, config, outdir)
            transience_result = rep
        elif name == "heatkernel":
            rep = run_heatkernel(space, config, outdir)
        elif name == "hierarchy":
            rep = run_hierarchy(space, config, outdir,
                                transience_result=transience_result)
        elif name == "validate":
            rep = run_validate(space, config, outdir)
        if not rep.get("passed", True):
            status = 1
        summary = {k: v for k, v in rep.items()
                   if k in ("classification", "q_hat", "passed")}
        print(f"[{name}] {json.dumps(_jsonable(summary), sort_keys=True)}")
    return status


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cplab",
        description="critical contact-process laboratory")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", type=str, default=None,
                        help="path to the JSON experiment config")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the master seed")
    parser.add_argument("--out", type=str, default=None,
                        help="override the output directory")
    parser.add_argument("--replicas", type=int, default=None,
                        help="override replica counts everywhere")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker processes for ensemble replicas")
    args = parser.parse_args(argv)

    try:
        if args.subcommand == "report":
            outdir = args.out
            if outdir is None and args.config:
                cfg = parse_config(Path(args.config).read_text())
                outdir = cfg.output["dir"]
            if outdir is None:
                print("report needs --out or --config", file=sys.stderr)
                return 2
            payload = emit_report(Path(outdir))
            return 0 if payload["passed"] else 1
        if args.config is None:
            print("--config is required", file=sys.stderr)
            return 2
        cfg = parse_config(Path(args.config).read_text())
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.output["dir"] = args.out
        if args.replicas is not None:
            cfg.dynamics["replicas"] = args.replicas
            cfg.analysis["transience"]["replicas"] = args.replicas
            cfg.analysis["heatkernel"]["replicas"] = args.replicas
        return run_experiment(cfg, [args.subcommand], threads=args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CplabError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
