"""Alias-table sampling over the rows of a sparse nonnegative matrix.

Each row gets a Vose alias table so that drawing a column index
proportionally to the row's weights costs O(1) (two uniforms, two array
lookups).  Tables are laid out flat so draws vectorize across many
walkers at once; a list-backed view serves scalar event loops.
"""
from __future__ import annotations

import numpy as np
from scipy import sparse


def _build_row(weights: np.ndarray, targets: np.ndarray):
    """Vose construction for one row; returns (prob, primary, alias)."""
    n = len(weights)
    total = float(weights.sum())
    prob = np.empty(n)
    alias = np.empty(n, dtype=np.int64)
    scaled = weights * (n / total)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    while small and large:
        s = small.pop()
        g = large.pop()
        prob[s] = scaled[s]
        alias[s] = g
        scaled[g] = (scaled[g] + scaled[s]) - 1.0
        if scaled[g] < 1.0:
            small.append(g)
        else:
            large.append(g)
    for leftover in (large, small):
        while leftover:
            g = leftover.pop()
            prob[g] = 1.0
            alias[g] = g
    return prob, targets[alias]


class RowSampler:
    """O(1) per-draw sampler over rows of a CSR matrix.

    ``row_weight[r]`` is the total weight of row ``r`` (its rate); empty
    rows have weight 0 and must not be drawn from.
    """

    def __init__(self, matrix: sparse.spmatrix):
        csr = sparse.csr_matrix(matrix, copy=True)
        csr.eliminate_zeros()
        if csr.nnz and csr.data.min() < 0.0:
            raise ValueError("negative weights in sampler matrix")
        self.n_rows = csr.shape[0]
        self.indptr = csr.indptr.astype(np.int64)
        self.row_weight = np.asarray(csr.sum(axis=1)).ravel().astype(float)
        self.targets = csr.indices.astype(np.int64)
        self.prob = np.empty(csr.nnz)
        self.alias = np.empty(csr.nnz, dtype=np.int64)
        for r in range(self.n_rows):
            lo, hi = self.indptr[r], self.indptr[r + 1]
            if hi > lo:
                p, a = _build_row(csr.data[lo:hi].astype(float), self.targets[lo:hi])
                self.prob[lo:hi] = p
                self.alias[lo:hi] = a
        self.row_nnz = np.diff(self.indptr)
        # list views for scalar hot loops
        self._indptr_l = self.indptr.tolist()
        self._targets_l = self.targets.tolist()
        self._prob_l = self.prob.tolist()
        self._alias_l = self.alias.tolist()

    def draw(self, rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Vectorized draw of one column per entry of ``rows``."""
        rows = np.asarray(rows, dtype=np.int64)
        nnz = self.row_nnz[rows]
        if np.any(nnz == 0):
            raise ValueError("draw from empty row")
        slot = (rng.random(rows.shape) * nnz).astype(np.int64)
        np.minimum(slot, nnz - 1, out=slot)
        idx = self.indptr[rows] + slot
        take = rng.random(rows.shape) < self.prob[idx]
        return np.where(take, self.targets[idx], self.alias[idx])

    def draw_one(self, row: int, u1: float, u2: float) -> int:
        """Scalar draw using two externally supplied uniforms."""
        lo = self._indptr_l[row]
        nnz = self._indptr_l[row + 1] - lo
        slot = lo + int(u1 * nnz)
        if slot >= lo + nnz:  # u1 == 1.0 guard
            slot = lo + nnz - 1
        if u2 < self._prob_l[slot]:
            return self._targets_l[slot]
        return self._alias_l[slot]
