"""Figure rendering for the report path.

Each function takes the already-computed result object and a target path
and writes one PNG.  Figures are a convenience layer over the CSV/JSON
artifacts; nothing downstream depends on them.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return str(path)


def transience_figure(report, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    for p, pair in enumerate(report.pairs):
        ax.errorbar(report.horizons, report.I_mean[p], yerr=3 * report.I_se[p],
                    marker="o", capsize=3, label=f"pair {pair}")
    ax.plot(report.horizons, report.max_curve, "k--", lw=1,
            label="max over pairs")
    if report.q_hat is not None:
        ax.axhline(report.q_hat, color="gray", ls=":", label=f"Q̂={report.q_hat:.3g}")
    ax.set_xlabel("horizon T")
    ax.set_ylabel("partial integral Î(T)")
    label = report.tail_fit.label if report.tail_fit else "unclassified"
    ax.set_title(f"two-walker contact integral ({label})")
    ax.legend(fontsize=8)
    return _save(fig, path)


def heatkernel_figure(estimate, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    mask = estimate.p_hat > 0
    t = estimate.times[mask]
    ax.errorbar(t, estimate.p_hat[mask], yerr=3 * estimate.se[mask],
                fmt="o", ms=4, capsize=3, label="estimate")
    if "exponential" in estimate.fits:
        fe = estimate.fits["exponential"]
        ax.plot(t, np.exp(fe["c"] - fe["kappa"] * t), "-",
                label=f"exp fit κ={fe['kappa']:.3g}")
        fp = estimate.fits["polynomial"]
        ax.plot(t, np.exp(fp["c"]) * t ** (-fp["exponent"]), "--",
                label=f"power fit s={fp['exponent']:.3g}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("t")
    ax.set_ylabel(f"p̂ ({estimate.statistic})")
    ax.set_title(f"heat-kernel decay (better: {estimate.better})")
    ax.legend(fontsize=8)
    return _save(fig, path)


def density_figure(ensemble, path, oracle=None):
    fig, ax = plt.subplots(figsize=(6, 4))
    t = np.asarray(ensemble.series_times)
    ax.errorbar(t, ensemble.density_mean, yerr=3 * ensemble.density_se,
                marker="o", capsize=3, label="ensemble mean ±3se")
    if oracle is not None:
        ax.plot(t, oracle, "k--", label="hierarchy oracle")
    ax.set_xlabel("t")
    ax.set_ylabel("mean density")
    ax.set_title("population density")
    ax.legend(fontsize=8)
    return _save(fig, path)


def decay_curve_figure(curve, path, tol=None):
    fig, ax = plt.subplots(figsize=(6, 4))
    ts = [t for t, _ in curve]
    vals = [v for _, v in curve]
    ax.semilogy(ts, vals, "o-")
    if tol is not None:
        ax.axhline(tol, color="gray", ls=":", label=f"tol={tol:g}")
        ax.legend(fontsize=8)
    ax.set_xlabel("t")
    ax.set_ylabel("sup |e^{tL}f|")
    ax.set_title("propagated source decay")
    return _save(fig, path)


def k2_figure(k2, path, rho=None):
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    im = axes[0].imshow(k2, origin="lower", cmap="viridis")
    fig.colorbar(im, ax=axes[0], shrink=0.8)
    axes[0].set_title("pair correlation k2(x, y)")
    axes[0].set_xlabel("y")
    axes[0].set_ylabel("x")
    n = k2.shape[0]
    axes[1].plot(np.arange(n), k2[0], label="k2(0, ·)")
    if rho is not None:
        axes[1].axhline(rho ** 2, color="gray", ls=":", label="ρ²")
    axes[1].set_xlabel("y")
    axes[1].set_title("slice through x = 0")
    axes[1].legend(fontsize=8)
    return _save(fig, path)


def clustering_figure(curve, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    ts = [c["time"] for c in curve]
    ratios = [c["ratio"] for c in curve]
    ses = [3 * c["se"] for c in curve]
    ax.errorbar(ts, ratios, yerr=ses, marker="o", capsize=3)
    ax.axhline(1.0, color="gray", ls=":", label="Poisson level")
    ax.set_xlabel("t")
    ax.set_ylabel("max_x k2(x,x) / k1(x)²")
    ax.set_title("clustering diagnostic")
    ax.legend(fontsize=8)
    return _save(fig, path)
