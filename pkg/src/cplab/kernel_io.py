"""Sparse-triplet text format for kernels.

Layout: comment header (``# key value``) carrying the site count, measure
weights, boundary mode, interior mask, labels and metadata, followed by
one ``x_index y_index value`` triplet per nonzero kernel entry.  An
optional ``# section jump`` line introduces jump-kernel triplets.  Floats
are written with ``repr`` so a round trip is bit-exact.
"""
from __future__ import annotations

import json

import numpy as np
from scipy import sparse

from .errors import ConstructionError
from .spaces import KernelSpace

FORMAT_TAG = "cplab-kernel"
FORMAT_VERSION = 1


def _meta_jsonable(meta: dict) -> dict:
    out = {}
    for key, value in meta.items():
        if isinstance(value, np.ndarray):
            out[key] = value.tolist()
        elif isinstance(value, (np.floating, np.integer)):
            out[key] = value.item()
        else:
            out[key] = value
    return out


def write_kernel(space: KernelSpace, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# {FORMAT_TAG} {FORMAT_VERSION}\n")
        fh.write(f"# n_sites {space.n_sites}\n")
        fh.write(f"# boundary_mode {space.boundary_mode}\n")
        fh.write("# measure " + " ".join(repr(float(m)) for m in space.measure) + "\n")
        fh.write("# interior " + "".join("1" if b else "0" for b in space.interior) + "\n")
        fh.write("# sites " + json.dumps([list(s) if isinstance(s, tuple) else s
                                          for s in space.sites]) + "\n")
        fh.write("# metadata " + json.dumps(_meta_jsonable(space.metadata)) + "\n")
        coo = space.kernel.tocoo()
        for x, y, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{x} {y} {float(v)!r}\n")
        if space.jump_kernel is not None:
            fh.write("# section jump\n")
            coo = space.jump_kernel.tocoo()
            for x, y, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"{x} {y} {float(v)!r}\n")


def read_kernel(path) -> KernelSpace:
    header = {}
    a_trip, j_trip = [], []
    current = a_trip
    with open(path) as fh:
        first = fh.readline().split()
        if len(first) < 3 or first[1] != FORMAT_TAG:
            raise ConstructionError(f"{path}: not a {FORMAT_TAG} file")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, rest = line[1:].strip().partition(" ")
                if key == "section":
                    current = j_trip if rest.strip() == "jump" else a_trip
                else:
                    header[key] = rest
                continue
            x, y, v = line.split()
            current.append((int(x), int(y), float(v)))
    try:
        n = int(header["n_sites"])
        boundary = header["boundary_mode"]
        measure = np.array([float(t) for t in header["measure"].split()])
    except KeyError as exc:
        raise ConstructionError(f"{path}: missing header field {exc}") from exc
    interior = None
    if "interior" in header:
        interior = np.array([ch == "1" for ch in header["interior"].strip()])
    sites = json.loads(header["sites"]) if "sites" in header else list(range(n))
    sites = [tuple(s) if isinstance(s, list) else s for s in sites]
    metadata = json.loads(header.get("metadata", "{}"))

    def to_csr(trip):
        if not trip:
            return sparse.csr_matrix((n, n))
        rows, cols, vals = zip(*trip)
        return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))

    jump = to_csr(j_trip) if j_trip else None
    return KernelSpace(sites, measure, to_csr(a_trip), boundary, interior=interior,
                       jump_kernel=jump, metadata=metadata)
