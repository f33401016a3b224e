"""Finite state spaces carrying birth kernels for critical contact dynamics.

A :class:`KernelSpace` is a finite window of one of the model spaces: a
(possibly perturbed) lattice torus or box, a truncated regular tree, a
random-conductance lattice, the largest cluster of a Bernoulli bond
percolation sample, or their rescaled variants.  It stores per-site
measure weights ``m(x)`` and the sparse birth kernel ``a(x, y)`` (row
index = first argument) and precomputes the samplers the simulators rely
on.

Criticality here means weighted row sums equal one on interior sites,
which balances unit per-particle death against the total birth rate and
conserves the mean density.  Truncation of the infinite spaces uses
either a periodic closure (exactly critical everywhere) or an absorbing
window whose boundary rows are deliberately substochastic; the resulting
offspring-rate deficit is kept in ``metadata`` as per-site leak rates.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np
from scipy import sparse

from .errors import ConstructionError, CriticalityError, EnvironmentRejectionError
from .rng import make_rng
from .sampling import RowSampler

PERIODIC = "periodic"
ABSORBING = "absorbing"


class KernelSpace:
    """Immutable finite state space with measure weights and birth kernel.

    Parameters
    ----------
    sites:
        Labels for the N sites (lattice coordinates, tree nodes, ...).
    measure:
        Per-site weights m(x) > 0; counting measure is all ones.
    kernel:
        Sparse nonnegative matrix of a(x, y) entries.
    boundary_mode:
        ``"periodic"`` or ``"absorbing"``.
    interior:
        Boolean mask of sites whose full kernel support lies inside the
        window; criticality is asserted only there.
    jump_kernel:
        Optional sparse matrix J(x, y) of particle jump rates.
    metadata:
        Construction parameters (kind, sizes, seeds, leak rates...).
    """

    def __init__(self, sites, measure, kernel, boundary_mode=PERIODIC,
                 interior=None, jump_kernel=None, metadata=None):
        self.sites = list(sites)
        self.measure = np.asarray(measure, dtype=float)
        csr = sparse.csr_matrix(kernel, copy=True)
        csr.eliminate_zeros()
        self.kernel = csr
        self.boundary_mode = boundary_mode
        n = len(self.sites)
        if self.measure.shape != (n,) or np.any(self.measure <= 0):
            raise ConstructionError("measure must be positive with one weight per site")
        if csr.shape != (n, n):
            raise ConstructionError("kernel shape does not match site count")
        if csr.nnz:
            if not np.all(np.isfinite(csr.data)):
                raise ConstructionError("kernel entries must be finite")
            if csr.data.min() < 0:
                x, y = self._first_negative(csr)
                raise ConstructionError(f"negative kernel entry at (x={x}, y={y})")
        if interior is None:
            interior = np.ones(n, dtype=bool)
        self.interior = np.asarray(interior, dtype=bool)
        if jump_kernel is not None:
            jump_kernel = sparse.csr_matrix(jump_kernel)
            jump_kernel.eliminate_zeros()
            if jump_kernel.nnz and jump_kernel.data.min() < 0:
                raise ConstructionError("negative jump-kernel entry")
        self.jump_kernel = jump_kernel
        self.metadata = dict(metadata or {})

    @staticmethod
    def _first_negative(csr):
        coo = csr.tocoo()
        i = int(np.argmin(coo.data))
        return int(coo.row[i]), int(coo.col[i])

    # -- derived structure (cached; the space itself is never mutated) --

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @cached_property
    def site_index(self) -> dict:
        return {label: i for i, label in enumerate(self.sites)}

    @cached_property
    def weighted_kernel(self) -> sparse.csr_matrix:
        """a(x, y) m(y): the operator A acting on functions of y."""
        return self.kernel @ sparse.diags(self.measure)

    @cached_property
    def birth_row_sums(self) -> np.ndarray:
        """Row sums of the weighted kernel; 1 on critical interior sites."""
        return np.asarray(self.weighted_kernel.sum(axis=1)).ravel()

    @cached_property
    def offspring_rates(self) -> np.ndarray:
        """Total offspring rate of a particle at x: weighted column sums."""
        return np.asarray(
            (sparse.diags(self.measure) @ self.kernel).sum(axis=0)
        ).ravel()

    @cached_property
    def walk_matrix(self) -> sparse.csr_matrix:
        """(a + J)(x, y) m(y): jump rates of the associated walk."""
        if self.jump_kernel is None:
            return self.weighted_kernel
        return (self.kernel + self.jump_kernel) @ sparse.diags(self.measure)

    @cached_property
    def walk_rates(self) -> np.ndarray:
        return np.asarray(self.walk_matrix.sum(axis=1)).ravel()

    @cached_property
    def walk_sampler(self) -> RowSampler:
        return RowSampler(self.walk_matrix)

    @cached_property
    def birth_sampler(self) -> RowSampler:
        """Row r = parent site; draws the offspring site ∝ a(y, r) m(y)."""
        return RowSampler((sparse.diags(self.measure) @ self.kernel).T)

    @cached_property
    def max_kernel_entry(self) -> float:
        return float(self.kernel.data.max()) if self.kernel.nnz else 0.0

    @cached_property
    def leak_rates(self) -> np.ndarray:
        """Birth rate lost to the truncated exterior, per parent site."""
        leak = self.metadata.get("leak_rates")
        if leak is None:
            return np.zeros(self.n_sites)
        return np.asarray(leak, dtype=float)

    def criticality_sums(self) -> np.ndarray:
        """Weighted row sums of a (+ J - J^T when jumps are present)."""
        if self.jump_kernel is None:
            return self.birth_row_sums
        eff = self.kernel + self.jump_kernel - self.jump_kernel.T
        return np.asarray((eff @ sparse.diags(self.measure)).sum(axis=1)).ravel()

    def dense_kernel(self) -> np.ndarray:
        return self.kernel.toarray()

    def __repr__(self):
        kind = self.metadata.get("kind", "custom")
        return (f"KernelSpace({kind}, N={self.n_sites}, "
                f"boundary={self.boundary_mode})")


@dataclass
class Environment:
    """Frozen random environment (conductances or percolation sample)."""

    seed: int
    conductances: np.ndarray | None = None   # shape (N_box, d), bond (x, x+e_i)
    open_bonds: np.ndarray | None = None     # same layout, booleans
    cluster_labels: np.ndarray | None = None  # per-box-site component id
    box_shape: tuple = ()

    def verify(self) -> bool:
        """Re-derive components from open_bonds and compare labels."""
        if self.open_bonds is None or self.cluster_labels is None:
            return True
        labels = _bond_components(self.open_bonds, self.box_shape)
        # component ids are arbitrary; require identical partitions
        ours = self.cluster_labels
        pairs = set(zip(labels.tolist(), ours.tolist()))
        return len(pairs) == len(set(labels.tolist())) == len(set(ours.tolist()))


@dataclass
class CriticalityReport:
    """Result of checking the critical normalization on interior sites."""

    max_deviation: float
    offending: list
    tol: float
    interior_count: int
    boundary_max_deviation: float = 0.0
    jump_rate_bound: float | None = None

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tol


@dataclass
class ContinuumKernel:
    """Normalized dispersal law on the torus [0, L)^d.

    ``sample_displacements`` draws offspring displacements; the density
    integrates to one over R^d, so each particle births at unit rate.
    """

    dimension: int
    side: float
    kind: str
    params: dict = field(default_factory=dict)

    @property
    def scale(self) -> float:
        if self.kind == "uniform":
            return self.params["radius"]
        if self.kind == "gaussian":
            return self.params["sigma"]
        if self.kind == "nn_lattice":
            return self.params["step"]
        return 1.0  # power-law core scale

    def sample_displacements(self, n: int, rng: np.random.Generator) -> np.ndarray:
        d = self.dimension
        if self.kind == "uniform":
            r = self.params["radius"]
            if d == 1:
                return rng.uniform(-r, r, size=(n, 1))
            g = rng.normal(size=(n, d))
            g /= np.linalg.norm(g, axis=1, keepdims=True)
            radius = r * rng.random(n) ** (1.0 / d)
            return g * radius[:, None]
        if self.kind == "gaussian":
            return rng.normal(scale=self.params["sigma"], size=(n, d))
        if self.kind == "nn_lattice":
            step = self.params["step"]
            axis = rng.integers(0, d, size=n)
            sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
            out = np.zeros((n, d))
            out[np.arange(n), axis] = sign * step
            return out
        if self.kind == "power_law":
            alpha = self.params["alpha"]
            if d == 1:
                radius = rng.random(n) ** (-1.0 / alpha) - 1.0
                sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
                return (sign * radius)[:, None]
            # radial pdf ∝ r (1+r)^(-alpha-2); propose 1+r ~ Pareto(alpha),
            # accept with probability 1 - 1/s (acceptance rate 1/(alpha+1))
            radius = np.empty(n)
            filled = 0
            while filled < n:
                todo = n - filled
                s = rng.random(todo) ** (-1.0 / alpha)
                keep = rng.random(todo) < (1.0 - 1.0 / s)
                got = s[keep] - 1.0
                radius[filled:filled + got.size] = got
                filled += got.size
            theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
            return np.column_stack([radius * np.cos(theta), radius * np.sin(theta)])
        raise ConstructionError(f"unknown dispersal kind {self.kind!r}")

    def radial_density(self, r: np.ndarray) -> np.ndarray:
        """Density value a(x) at |x| = r (zero outside support)."""
        r = np.asarray(r, dtype=float)
        d = self.dimension
        if self.kind == "uniform":
            rad = self.params["radius"]
            if d == 1:
                vol = 2.0 * rad
            elif d == 2:
                vol = np.pi * rad ** 2
            else:
                vol = 4.0 / 3.0 * np.pi * rad ** 3
            return np.where(r <= rad, 1.0 / vol, 0.0)
        if self.kind == "gaussian":
            s = self.params["sigma"]
            norm = (2.0 * np.pi * s * s) ** (d / 2.0)
            return np.exp(-0.5 * (r / s) ** 2) / norm
        if self.kind == "power_law":
            alpha = self.params["alpha"]
            if d == 1:
                return 0.5 * alpha * (1.0 + r) ** (-(alpha + 1.0))
            return alpha * (alpha + 1.0) / (2.0 * np.pi) * (1.0 + r) ** (-(alpha + 2.0))
        raise ConstructionError(f"no pointwise density for dispersal {self.kind!r}")

    def normalization_check(self, tol: float = 1e-3) -> float:
        """|∫ a - 1| via radial quadrature (0 for the atomic lattice law)."""
        if self.kind == "nn_lattice":
            return 0.0
        from scipy.integrate import quad

        d = self.dimension
        if d == 1:
            surface = lambda r: 2.0
        elif d == 2:
            surface = lambda r: 2.0 * np.pi * r
        else:
            surface = lambda r: 4.0 * np.pi * r * r
        upper = np.inf
        if self.kind == "uniform":
            upper = self.params["radius"]
        total, _ = quad(lambda r: surface(r) * float(self.radial_density(r)),
                        0.0, upper, limit=200)
        dev = abs(total - 1.0)
        if dev > tol:
            raise ConstructionError(f"dispersal not normalized: integral {total}")
        return dev


# ---------------------------------------------------------------------------
# lattice builders


def _lattice_coords(d: int, side: int) -> list:
    return list(itertools.product(range(side), repeat=d))


def _centered(coord: tuple, side: int) -> tuple:
    half = side // 2
    return tuple(((c + half) % side) - half for c in coord)


def _nn_offsets(d: int) -> dict:
    offs = {}
    for axis in range(d):
        for s in (-1, 1):
            u = tuple(s if i == axis else 0 for i in range(d))
            offs[u] = 1.0 / (2 * d)
    return offs


def build_lattice_kernel(d: int, side: int, perturbation: Mapping | None = None,
                         boundary_mode: str = PERIODIC,
                         jump_rate: float = 0.0,
                         jump_bound: float | None = None,
                         tol: float = 1e-9) -> KernelSpace:
    """Nearest-neighbour walk kernel on Z^d, optionally locally perturbed.

    ``perturbation`` maps ``(offset, site)`` pairs of integer tuples to
    additive rate changes V(u, x); it must vanish outside a finite radius
    and keep every row nonnegative and (for periodic windows) summing to
    one.  Site coordinates in the table refer to the centered window, so
    ``(0, ..., 0)`` is the origin.  Offsets that wrap onto the same torus
    site are merged.

    ``jump_rate`` attaches a symmetric nearest-neighbour jump component
    J = jump_rate * pi, leaving the criticality balance intact.
    """
    if side < 2:
        raise ConstructionError("side must be at least 2")
    if d < 1:
        raise ConstructionError("dimension must be at least 1")
    pert = {}
    radius = 0
    for (u, x), v in (perturbation or {}).items():
        u, x = tuple(u), tuple(x)
        if len(u) != d or len(x) != d:
            raise ConstructionError(f"perturbation key ({u}, {x}) has wrong dimension")
        if v != 0.0:
            pert[(u, x)] = float(v)
            radius = max(radius, max(abs(c) for c in u), max(abs(c) for c in x))
    base = _nn_offsets(d)
    coords = _lattice_coords(d, side)
    index = {c: i for i, c in enumerate(coords)}
    n = len(coords)

    rows, cols, vals = [], [], []
    support_radius = 1 if not pert else max(1, max(
        max(abs(c) for c in u) for (u, _x) in pert))
    for i, x in enumerate(coords):
        xc = _centered(x, side)
        row = {}
        offsets = dict(base)
        for (u, site), v in pert.items():
            if site == xc:
                offsets[u] = offsets.get(u, 0.0) + v
        for u, rate in offsets.items():
            if rate == 0.0:
                continue
            if rate < 0.0:
                raise ConstructionError(
                    f"negative rate {rate} at (x={x}, offset={u})")
            if boundary_mode == PERIODIC:
                y = tuple((xi + ui) % side for xi, ui in zip(x, u))
            else:
                y = tuple(xi + ui for xi, ui in zip(x, u))
                if any(c < 0 or c >= side for c in y):
                    continue  # absorbing: mass leaves the window
            row[index[y]] = row.get(index[y], 0.0) + rate
        for j, v in row.items():
            rows.append(i)
            cols.append(j)
            vals.append(v)
    kernel = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))

    if boundary_mode == PERIODIC:
        interior = np.ones(n, dtype=bool)
        sums = np.asarray(kernel.sum(axis=1)).ravel()
        dev = float(np.abs(sums - 1.0).max())
        if dev > tol:
            worst = int(np.argmax(np.abs(sums - 1.0)))
            raise CriticalityError(
                f"row sums deviate from 1 by {dev:.3e} (site {coords[worst]}); "
                "the perturbation must be mass-neutral")
        leak = None
    else:
        interior = np.array(
            [all(support_radius <= c <= side - 1 - support_radius for c in x)
             for x in coords])
        # offspring rate of the untruncated model: 1 + sum_u V(u, p - u)
        full_beta = np.ones(n)
        for i, x in enumerate(coords):
            xc = _centered(x, side)
            extra = sum(v for (u, site), v in pert.items()
                        if tuple(s + ui for s, ui in zip(site, u)) == xc)
            full_beta[i] += extra
        truncated = np.asarray(kernel.sum(axis=0)).ravel()
        leak = np.clip(full_beta - truncated, 0.0, None)

    jump = None
    if jump_rate:
        if jump_rate < 0.0:
            raise ConstructionError("jump_rate must be nonnegative")
        jrows, jcols, jvals = [], [], []
        for i, x in enumerate(coords):
            for u, rate in _nn_offsets(d).items():
                if boundary_mode == PERIODIC:
                    y = tuple((xi + ui) % side for xi, ui in zip(x, u))
                else:
                    y = tuple(xi + ui for xi, ui in zip(x, u))
                    if any(c < 0 or c >= side for c in y):
                        continue
                jrows.append(i)
                jcols.append(index[y])
                jvals.append(jump_rate * rate)
        jump = sparse.csr_matrix((jvals, (jrows, jcols)), shape=(n, n))
        total = float(np.asarray(jump.sum(axis=1)).ravel().max())
        if jump_bound is not None and total >= jump_bound:
            raise ConstructionError(
                f"total jump rate {total} exceeds the configured bound {jump_bound}")

    meta = {"kind": "lattice", "d": d, "side": side, "radius": support_radius,
            "perturbed": bool(pert), "jump_rate": jump_rate}
    if leak is not None:
        meta["leak_rates"] = leak
    return KernelSpace(coords, np.ones(n), kernel, boundary_mode,
                       interior=interior, jump_kernel=jump, metadata=meta)


def build_ring_kernel(side: int, **kwargs) -> KernelSpace:
    """Convenience wrapper: one-dimensional periodic lattice."""
    return build_lattice_kernel(1, side, **kwargs)


# ---------------------------------------------------------------------------
# trees


def _tree_nodes(k: int, depth: int):
    """Nodes of T_k to graph distance ``depth`` from the root.

    Labels are tuples of child indices along the path from the root; the
    root has k children, every other node k - 1.
    """
    levels = [[()]]
    for g in range(1, depth + 1):
        prev = levels[-1]
        level = []
        for node in prev:
            width = k if node == () else k - 1
            level.extend(node + (j,) for j in range(width))
        levels.append(level)
    return levels


def build_tree_kernel(k: int, depth: int, boundary_mode: str = ABSORBING) -> KernelSpace:
    """Truncated regular tree with a(x, y) = 1/k on edges.

    Interior rows sum to one; under the default absorbing truncation a
    leaf keeps only its parent edge (row sum 1/k), which is flagged in
    ``metadata``.  The periodic closure instead wires the missing leaf
    slots together in a circulant pattern over the leaf layer, giving a
    k-regular graph that is exactly critical at every site.
    """
    if k < 3:
        raise ConstructionError("vertex degree k must be at least 3")
    if depth < 1:
        raise ConstructionError("depth must be at least 1")
    levels = _tree_nodes(k, depth)
    nodes = [n for level in levels for n in level]
    index = {n: i for i, n in enumerate(nodes)}
    n = len(nodes)
    rows, cols = [], []
    for node in nodes:
        if node == ():
            continue
        parent = node[:-1]
        i, j = index[node], index[parent]
        rows.extend((i, j))
        cols.extend((j, i))
    if boundary_mode == PERIODIC:
        leaves = [index[nd] for nd in levels[depth]]
        m = len(leaves)
        need = k - 1
        offsets = []
        for step in range(1, need // 2 + 1):
            offsets.extend((step, -step))
        if need % 2 == 1:
            if m % 2 != 0:
                raise ConstructionError(
                    "periodic tree closure needs an even leaf count for even k")
            offsets.append(m // 2)
        if m <= max(abs(o) for o in offsets):
            raise ConstructionError("leaf layer too small for periodic closure")
        seen = set()
        for pos, i in enumerate(leaves):
            for off in offsets:
                j = leaves[(pos + off) % m]
                if (i, j) not in seen:
                    rows.append(i)
                    cols.append(j)
                    seen.add((i, j))
    vals = np.full(len(rows), 1.0 / k)
    kernel = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))

    depth_of = np.array([len(nd) for nd in nodes])
    if boundary_mode == PERIODIC:
        interior = np.ones(n, dtype=bool)
        leak = None
    else:
        interior = depth_of < depth
        leak = np.where(depth_of == depth, (k - 1.0) / k, 0.0)
    meta = {"kind": "tree", "k": k, "depth": depth,
            "leaf_row_sum": 1.0 / k if boundary_mode == ABSORBING else 1.0,
            "truncation": ("absorbing leaves" if boundary_mode == ABSORBING
                           else "circulant leaf closure")}
    if leak is not None:
        meta["leak_rates"] = leak
    return KernelSpace(nodes, np.ones(n), kernel, boundary_mode,
                       interior=interior, metadata=meta)


# ---------------------------------------------------------------------------
# random environments


def _box_sites(shape: tuple) -> list:
    return list(itertools.product(*(range(s) for s in shape)))


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, i: int, j: int):
        ri, rj = self.find(i), self.find(j)
        if ri == rj:
            return
        if self.size[ri] < self.size[rj]:
            ri, rj = rj, ri
        self.parent[rj] = ri
        self.size[ri] += self.size[rj]


def _bond_components(open_bonds: np.ndarray, shape: tuple) -> np.ndarray:
    """Component label per box site from open (site, +axis) bonds."""
    d = len(shape)
    sites = _box_sites(shape)
    index = {c: i for i, c in enumerate(sites)}
    uf = _UnionFind(len(sites))
    for i, x in enumerate(sites):
        for axis in range(d):
            if x[axis] + 1 >= shape[axis]:
                continue
            if open_bonds[i, axis]:
                y = tuple(c + 1 if a == axis else c for a, c in enumerate(x))
                uf.union(i, index[y])
    return np.array([uf.find(i) for i in range(len(sites))])


def build_conductance_kernel(d: int, side: int, c: float, seed: int):
    """Random conductance walk: a(x, y) = mu_xy / mu_x on the torus.

    Bond weights are i.i.d. uniform on [1/c, c]; rows sum to one by the
    ratio construction, so the kernel is critical at every site.
    """
    if c < 1.0:
        raise ConstructionError("conductance bound c must be >= 1")
    if side < 3:
        raise ConstructionError("side must be at least 3 for distinct torus bonds")
    coords = _lattice_coords(d, side)
    index = {x: i for i, x in enumerate(coords)}
    n = len(coords)
    rng = make_rng(seed, "conductance-env")
    mu = rng.uniform(1.0 / c, c, size=(n, d))  # bond (x, x + e_axis)

    def bond(i, x, axis, s):
        if s > 0:
            return mu[i, axis]
        y = tuple((ci - 1) % side if a == axis else ci for a, ci in enumerate(x))
        return mu[index[y], axis]

    rows, cols, vals = [], [], []
    for i, x in enumerate(coords):
        weights, targets = [], []
        for axis in range(d):
            for s in (-1, 1):
                y = tuple((ci + s) % side if a == axis else ci
                          for a, ci in enumerate(x))
                weights.append(bond(i, x, axis, s))
                targets.append(index[y])
        mu_x = sum(weights)
        for w, j in zip(weights, targets):
            rows.append(i)
            cols.append(j)
            vals.append(w / mu_x)
    kernel = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    env = Environment(seed=seed, conductances=mu, box_shape=(side,) * d)
    meta = {"kind": "conductance", "d": d, "side": side, "c": c, "seed": seed}
    space = KernelSpace(coords, np.ones(n), kernel, PERIODIC, metadata=meta)
    return space, env


def build_percolation_kernel(d: int, side: int, p: float, seed: int,
                             min_p: float = 0.5,
                             min_cluster_fraction: float = 0.5):
    """Simple random walk on the largest open cluster of bond percolation.

    Bonds of the ``side**d`` box open independently with probability
    ``p``; the kernel lives on the largest connected cluster with
    a(x, y) = 1/deg(x) on open bonds, hence stochastic rows.  Samples
    whose largest cluster covers less than ``min_cluster_fraction`` of
    the box are rejected so the caller may reseed, as are ``p`` below the
    ``min_p`` guard (lower it explicitly for small-p experiments).
    """
    if d < 2:
        raise ConstructionError("percolation builder requires d >= 2")
    if not 0.0 <= p <= 1.0:
        raise ConstructionError("p must be a probability")
    if p < min_p:
        raise EnvironmentRejectionError(
            f"p={p} below the threshold guard {min_p}; pass min_p to override")
    shape = (side,) * d
    sites = _box_sites(shape)
    index = {x: i for i, x in enumerate(sites)}
    n_box = len(sites)
    rng = make_rng(seed, "percolation-env")
    open_bonds = rng.random((n_box, d)) < p
    # bonds crossing the box edge do not exist
    for i, x in enumerate(sites):
        for axis in range(d):
            if x[axis] + 1 >= side:
                open_bonds[i, axis] = False
    labels = _bond_components(open_bonds, shape)
    counts = np.bincount(labels, minlength=n_box)
    root = int(np.argmax(counts))
    cluster = np.flatnonzero(labels == root)
    if counts[root] < min_cluster_fraction * n_box:
        raise EnvironmentRejectionError(
            f"largest cluster covers {counts[root]}/{n_box} sites "
            f"(< {min_cluster_fraction:.0%}); reseed or lower the fraction")
    sub = {int(b): i for i, b in enumerate(cluster)}
    rows, cols = [], []
    for b in cluster:
        x = sites[int(b)]
        for axis in range(d):
            if open_bonds[b, axis]:
                y = tuple(c + 1 if a == axis else c for a, c in enumerate(x))
                j = index[y]
                rows.extend((sub[int(b)], sub[j]))
                cols.extend((sub[j], sub[int(b)]))
    deg = np.bincount(rows, minlength=len(cluster)).astype(float)
    vals = 1.0 / deg[np.array(rows)]
    kernel = sparse.csr_matrix((vals, (rows, cols)),
                               shape=(len(cluster), len(cluster)))
    env = Environment(seed=seed, open_bonds=open_bonds,
                      cluster_labels=labels, box_shape=shape)
    meta = {"kind": "percolation", "d": d, "side": side, "p": p, "seed": seed,
            "cluster_fraction": counts[root] / n_box}
    labels_kept = [sites[int(b)] for b in cluster]
    space = KernelSpace(labels_kept, np.ones(len(cluster)), kernel, ABSORBING,
                        metadata=meta)
    return space, env


# ---------------------------------------------------------------------------
# continuum


_POWER_LAW_RANGES = {1: (0.0, 1.0), 2: (0.0, 2.0)}


def build_continuum_kernel(d: int, L: float, dispersal: Mapping) -> ContinuumKernel:
    """Normalized dispersal sampler and density on the torus [0, L)^d."""
    spec = dict(dispersal)
    kind = spec.pop("kind", None)
    if kind not in ("uniform", "gaussian", "power_law", "nn_lattice"):
        raise ConstructionError(f"unknown dispersal kind {kind!r}")
    if kind == "power_law":
        alpha = float(spec.get("alpha", 0.0))
        if d not in _POWER_LAW_RANGES:
            raise ConstructionError(
                "power-law dispersal is admissible only in dimensions 1 and 2")
        lo, hi = _POWER_LAW_RANGES[d]
        if not (lo < alpha < hi):
            raise ConstructionError(
                f"power-law exponent {alpha} outside the admissible range "
                f"({lo}, {hi}) for d={d}")
        spec["alpha"] = alpha
    ck = ContinuumKernel(dimension=d, side=float(L), kind=kind, params=spec)
    if L < 4.0 * ck.scale:
        raise ConstructionError(
            f"torus side {L} too small for dispersal scale {ck.scale}")
    ck.normalization_check()
    return ck


# ---------------------------------------------------------------------------
# verification and rescaling


def verify_criticality(space: KernelSpace, tol: float = 1e-9) -> CriticalityReport:
    """Max deviation of weighted row sums from 1 over interior sites."""
    sums = space.criticality_sums()
    dev = np.abs(sums - 1.0)
    interior = space.interior
    max_dev = float(dev[interior].max()) if interior.any() else 0.0
    offending = [(int(i), float(dev[i]))
                 for i in np.flatnonzero(interior & (dev > tol))]
    boundary_max = float(dev[~interior].max()) if (~interior).any() else 0.0
    jump_bound = None
    if space.jump_kernel is not None:
        jump_bound = float(np.asarray(
            (space.jump_kernel @ sparse.diags(space.measure)).sum(axis=1)
        ).ravel().max())
    return CriticalityReport(max_deviation=max_dev, offending=offending,
                             tol=tol, interior_count=int(interior.sum()),
                             boundary_max_deviation=boundary_max,
                             jump_rate_bound=jump_bound)


def scale_kernel(space: KernelSpace, factor: float) -> KernelSpace:
    """All a entries multiplied by ``factor`` (sub/supercritical sweeps)."""
    if factor <= 0:
        raise ConstructionError("scale factor must be positive")
    meta = dict(space.metadata)
    meta["scale"] = meta.get("scale", 1.0) * factor
    if "leak_rates" in meta:
        meta["leak_rates"] = np.asarray(meta["leak_rates"], dtype=float) * factor
    return KernelSpace(space.sites, space.measure, space.kernel * factor,
                       space.boundary_mode, interior=space.interior,
                       jump_kernel=space.jump_kernel, metadata=meta)
