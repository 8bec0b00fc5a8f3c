import itertools

import numpy as np
import pytest

from czt3d.lattice import (
    SPECIES,
    GridSpec,
    MaterialMap,
    SpeciesCoefficients,
    build_drift_stencil,
    build_weighting_potential,
    on_axis_index,
)


def random_materials(rng, shape, n_centers=(1, 2), rec=(0.0, 0.1), trap=(0.0, 0.2), detrap=(0.0, 0.4)):
    sp = [
        SpeciesCoefficients(
            rng.uniform(0.2, 1.0, shape),
            rng.uniform(*rec, shape),
            rng.uniform(*trap, (C, *shape)),
            rng.uniform(*detrap, (C, *shape)),
        )
        for C in n_centers
    ]
    return MaterialMap(*sp)


def random_stencils(rng, grid, sparsity=0.5):
    out = {}
    for s in SPECIES:
        raw = rng.uniform(0, 1, (18, *grid.shape)) * (rng.uniform(0, 1, (18, *grid.shape)) > sparsity)
        raw[on_axis_index(s)] += 0.1  # keep every voxel's stencil non-empty
        out[s] = build_drift_stencil(raw, grid, s)
    return out


class NaiveOracle:
    """Packet-by-packet reference transport written with plain loops over voxels.

    Shares nothing with the library beyond the input arrays.  One step per
    voxel: recombine, trap/detrap, mobilize, then emit along the stencil;
    emitted packets land after every voxel has been processed.
    """

    def __init__(self, grid, materials, stencils, field_, boundary="closed-lateral", mode="conservative"):
        self.grid, self.mat, self.st, self.f = grid, materials, stencils, field_
        self.boundary, self.mode = boundary, mode

    def offsets(self, s):
        dzs = (1, 2) if s == "e" else (-2, -1)
        return list(itertools.product((-1, 0, 1), (-1, 0, 1), dzs))

    def run(self, voxel, T):
        """Trace of one unit e-h pair injected at ``voxel``."""
        M, N, P = self.grid.shape
        E = self.f.phi.shape[0]
        out = {"increments": np.zeros((T, E))}
        for s in SPECIES:
            sp = self.mat.electron if s == "e" else self.mat.hole
            sgn = 1.0 if s == "e" else -1.0
            C = sp.trap.shape[0]
            fr = self.st[s].fractions if self.st and s in self.st else None
            q = {voxel: 1.0}
            qt = {}
            lost = 0.0  # recombined + collected + escaped
            qs = np.zeros((T, M, N, P))
            qts = np.zeros((T, C, M, N, P))
            bal = np.zeros(T)
            for t in range(T):
                new_q = {}
                new_qt = {}
                for v in sorted(set(q) | set(qt)):
                    qv = q.get(v, 0.0)
                    tv = qt.get(v, np.zeros(C))
                    i, j, k = v
                    r = sp.rec[v]
                    q1 = qv - r * qv
                    lost += r * qv
                    new_qt[v] = np.array([tv[c] + sp.trap[c][v] * q1 - sp.detrap[c][v] * tv[c] for c in range(C)])
                    keep = 1.0 - sum(sp.trap[c][v] for c in range(C))
                    if self.mode == "literal":
                        keep -= r
                        lost += r * q1
                    qm = q1 * keep + sum(sp.detrap[c][v] * tv[c] for c in range(C))
                    emitted = sp.drift[v] * qm
                    new_q[v] = new_q.get(v, 0.0) + (qm - emitted)
                    for o, (dx, dy, dz) in enumerate(self.offsets(s)):
                        if fr is None:
                            frac = 1.0 if (dx, dy, dz) == (0, 0, int(sgn)) else 0.0
                        else:
                            frac = fr[(o, *v)]
                        pkt = emitted * frac
                        if pkt == 0.0:
                            continue
                        di, dj, dk = i + dx, j + dy, k + dz
                        inside_lat = 0 <= di < M and 0 <= dj < N
                        ci, cj = min(max(di, 0), M - 1), min(max(dj, 0), N - 1)
                        if not inside_lat and self.boundary == "closed-lateral":
                            di, dj, inside_lat = ci, cj, True
                        if not inside_lat:
                            # escapes through the virtual boundary
                            if dk >= P:
                                dst_phi = self.f.anode_plane[:, ci, cj]
                            elif dk < 0:
                                dst_phi = self.f.cathode_plane[:, ci, cj]
                            else:
                                dst_phi = self.f.phi[:, ci, cj, dk]
                            lost += pkt
                        elif dk >= P or dk < 0:
                            # collected by the electrode facing the source column
                            dst_phi = (self.f.anode_plane if dk >= P else self.f.cathode_plane)[:, i, j]
                            lost += pkt
                        else:
                            dst_phi = self.f.phi[:, di, dj, dk]
                            new_q[(di, dj, dk)] = new_q.get((di, dj, dk), 0.0) + pkt
                        out["increments"][t] += sgn * pkt * (dst_phi - self.f.phi[:, i, j, k])
                q, qt = new_q, new_qt
                for v, x in q.items():
                    qs[(t, *v)] = x
                for v, x in qt.items():
                    qts[(t, slice(None), *v)] = x
                bal[t] = qs[t].sum() + qts[t].sum() + lost
            out[f"q_{s}"] = qs
            out[f"qt_{s}"] = qts
            out[f"balance_{s}"] = bal
        out["signals"] = np.cumsum(out["increments"], axis=0)
        return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_grid():
    return GridSpec(2, 2, 10, T=8)


@pytest.fixture
def planar_field():
    def make(grid, layout="subpixel"):
        return build_weighting_potential(layout, grid, "planar")

    return make
