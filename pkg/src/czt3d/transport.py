"""Per-step charge transport for electrons and holes, with Shockley-Ramo signals.

One step advances every voxel in two phases.  First each voxel loses a
fraction of its free charge to recombination, exchanges charge with its trap
centers and emits the drifting fraction of what is left, all computed from
the previous state for every voxel at once.  Then each voxel gathers what its
neighbours sent.  The stored free charge is the post-gather value, so an
injection is recombined and trapped in its own voxel before it first moves.
The update is linear in the charge and independent of voxel ordering.

Cumulative induced charge on an electrode is ``sigma * q * (phi(dst) - phi(src))``
summed over all moves, with ``sigma = +1`` for electrons and ``-1`` for holes,
so a unit electron crossing the whole gap induces ``+1`` on the anode.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConstraintViolation, DomainError, TransportFault
from .lattice import (
    DRIFT_SIGN,
    ELECTRON,
    HOLE,
    INDUCED_SIGN,
    SPECIES,
    DriftStencil,
    GridSpec,
    MaterialMap,
    WeightingPotentialField,
    build_drift_stencil,
    on_axis_index,
    stencil_offsets,
)

BOUNDARIES = ("closed-lateral", "virtual-boundary")
MOB_MODES = ("conservative", "literal")


# ---------------------------------------------------------------------------
# elementary per-voxel operations (broadcast over arrays)


def emit(q_mob, w_drift):
    """Split mobile charge into the part that leaves and the part that stays."""
    q_out = w_drift * q_mob
    return q_out, q_mob - q_out


def recombine(q_int, w_rec):
    q_rec = w_rec * q_int
    return q_rec, q_int - q_rec


def trap_update(qt_prev, q_int1, w_T, w_D):
    """Occupancy of each trap center after one step; centers on the leading axis."""
    return qt_prev + w_T * q_int1 - w_D * qt_prev


def mobile(q_int1, qt_prev, w_rec, w_T, w_D, mode: str = "conservative"):
    """Free charge left after trapping and detrapping.

    ``conservative`` does not subtract recombination a second time.
    ``literal`` keeps the ``w_rec`` term inside the bracket, which removes an
    extra ``w_rec * q_int1``.
    """
    w_T = np.asarray(w_T)
    sum_T = w_T.sum(axis=0)
    if mode == "conservative":
        if np.any(np.asarray(w_rec) + sum_T > 1 + 1e-12):
            raise ConstraintViolation("w_rec + sum(w_T) exceeds 1")
        keep = 1.0 - sum_T
    elif mode == "literal":
        keep = 1.0 - w_rec - sum_T
    else:
        raise DomainError(f"unknown mobility mode {mode!r}")
    return q_int1 * keep + (np.asarray(w_D) * qt_prev).sum(axis=0)


# ---------------------------------------------------------------------------
# routing of emitted charge


class Routing:
    """Where each (offset, source voxel) pair sends its charge.

    Rows of the routing matrices are ordered ``offset * V + voxel``.
    """

    def __init__(self, grid: GridSpec, species: str, field_: WeightingPotentialField, boundary: str = "closed-lateral"):
        if boundary not in BOUNDARIES:
            raise DomainError(f"unknown boundary {boundary!r}")
        self.grid = grid
        self.species = species
        self.boundary = boundary
        self.sigma = INDUCED_SIGN[species]
        M, N, P = grid.shape
        V = grid.n_voxels
        E = field_.n_electrodes
        self.V, self.E = V, E
        self.offsets = stencil_offsets(species)
        O = len(self.offsets)

        ii, jj, kk = np.meshgrid(np.arange(M), np.arange(N), np.arange(P), indexing="ij")
        ii, jj, kk = ii.ravel(), jj.ravel(), kk.ravel()
        src = np.arange(V)
        phi_flat = field_.phi.reshape(E, V)
        footprint = field_.footprint
        cathode = field_.cathode_index

        g_rows, g_cols = [], []
        x_rows, x_cols, x_vals = [], [], []
        c_rows, c_cols = [], []
        escape = np.zeros(O * V)
        dst_index = np.full((O, V), -1, dtype=np.int64)
        for o, (dx, dy, dz) in enumerate(self.offsets):
            di, dj, dk = ii + dx, jj + dy, kk + dz
            lateral_out = (di < 0) | (di >= M) | (dj < 0) | (dj >= N)
            ci = np.clip(di, 0, M - 1)
            cj = np.clip(dj, 0, N - 1)
            if boundary == "closed-lateral":
                di, dj = ci, cj
                lateral_out = np.zeros(V, dtype=bool)
            z_out = (dk < 0) | (dk >= P)
            rows = o * V + src
            inside = ~lateral_out & ~z_out
            dst = (di * N + dj) * P + dk
            dst_index[o, inside] = dst[inside]
            g_rows.append(rows[inside])
            g_cols.append(dst[inside])

            esc = lateral_out
            escape[rows[esc]] = 1.0
            # potential at an escape destination: nearest in-grid node, or the plane beyond it
            ck = np.clip(dk, 0, P - 1)
            phi_dst = phi_flat[:, (ci * N + cj) * P + ck]  # (E, V)
            beyond_anode = dk >= P
            beyond_cathode = dk < 0
            phi_dst = np.where(beyond_anode, field_.anode_plane[:, ci, cj], phi_dst)
            phi_dst = np.where(beyond_cathode, field_.cathode_plane[:, ci, cj], phi_dst)

            col = ~lateral_out & z_out
            # collected charge goes to the electrode above/below the source subpixel
            phi_col = np.where(
                beyond_anode, field_.anode_plane[:, ii, jj], field_.cathode_plane[:, ii, jj]
            )
            phi_exit = np.where(col, phi_col, phi_dst)
            exits = esc | col
            for e in range(E):
                nz = exits & (phi_exit[e] != 0)
                x_rows.append(rows[nz])
                x_cols.append(np.full(nz.sum(), e))
                x_vals.append(phi_exit[e][nz])
            who = np.where(beyond_anode, footprint[ii, jj], cathode)
            c_rows.append(rows[col])
            c_cols.append(who[col])

        def csr(r, c, v, shape):
            r = np.concatenate(r)
            c = np.concatenate(c)
            v = np.ones(r.size) if v is None else np.concatenate(v)
            return sp.csr_matrix((v, (r, c)), shape=shape)

        self.gather_matrix = csr(g_rows, g_cols, None, (O * V, V))
        self.exit_phi = csr(x_rows, x_cols, x_vals, (O * V, E))
        self.collect = csr(c_rows, c_cols, None, (O * V, E))
        self.escape = escape
        self.dst_index = dst_index
        self.phi_T = np.ascontiguousarray(phi_flat.T)  # (V, E)
        self._blocks: dict[tuple[int, ...], tuple] = {}

    def blocks(self, active: tuple[int, ...]):
        """Transposed routing matrices restricted to the active offsets.

        Returns ``(gather_T, exit_phi_T, collect_T, escape, gather, exit_phi)``
        with shapes ``(V, A*V)``, ``(E, A*V)``, ``(E, A*V)``, ``(A*V,)``,
        ``(A*V, V)`` and ``(A*V, E)``.
        """
        if active not in self._blocks:
            V = self.V
            rows = np.concatenate([np.arange(o * V, (o + 1) * V) for o in active])
            g = self.gather_matrix[rows].tocsr()
            x = self.exit_phi[rows].tocsr()
            self._blocks[active] = (
                g.T.tocsr(), x.T.tocsr(), self.collect[rows].T.tocsr(), self.escape[rows], g, x,
            )
        return self._blocks[active]


def gather(stay, out, fractions, routing: Routing):
    """Charge in each voxel after neighbours' emissions arrive.

    ``stay`` and ``out`` are ``(M, N, P)`` or batched ``(B, M, N, P)``;
    ``fractions`` is the stencil ``(18, M, N, P)``.  Charge routed off the
    grid is not returned here (see :meth:`Transport.step`).
    """
    stay = np.asarray(stay, dtype=float)
    V = routing.V
    s2 = stay.reshape(-1, V)
    o2 = np.asarray(out, dtype=float).reshape(-1, V)
    fr = np.asarray(fractions).reshape(18, V)
    active = tuple(range(18))
    gT = routing.blocks(active)[0]
    flux = (fr[None] * o2[:, None, :]).reshape(o2.shape[0], -1)
    q_int = s2 + (gT @ flux.T).T
    return q_int.reshape(stay.shape)


# ---------------------------------------------------------------------------
# state, injections, traces


@dataclass(frozen=True)
class Injection:
    voxel: tuple[int, int, int]
    magnitude: float = 1.0


def injection_field(groups: Sequence, grid: GridSpec) -> np.ndarray:
    """Initial charge ``(B, M, N, P)``; each group is an Injection or a sequence superposed."""
    q0 = np.zeros((len(groups), *grid.shape))
    for b, g in enumerate(groups):
        for inj in ([g] if isinstance(g, Injection) else g):
            if not grid.contains(inj.voxel):
                raise DomainError(f"injection voxel {inj.voxel} outside grid {grid.shape}")
            q0[(b, *inj.voxel)] += inj.magnitude
    return q0


@dataclass
class SpeciesState:
    q: np.ndarray  # (B, V)
    qt: np.ndarray  # (B, C, V)
    recombined: np.ndarray  # (B,)
    collected: np.ndarray  # (B, E)
    escaped: np.ndarray  # (B,)
    injected: np.ndarray  # (B,)

    def copy(self) -> "SpeciesState":
        return SpeciesState(*(a.copy() for a in (self.q, self.qt, self.recombined, self.collected, self.escaped, self.injected)))


@dataclass
class ChargeState:
    """Free and trapped charge of both species plus loss tallies, batched over injections."""

    grid: GridSpec
    electron: SpeciesState
    hole: SpeciesState

    def species(self, s: str) -> SpeciesState:
        return self.electron if s == ELECTRON else self.hole

    def free(self, s: str) -> np.ndarray:
        return self.species(s).q.reshape(-1, *self.grid.shape)

    def trapped(self, s: str) -> np.ndarray:
        st = self.species(s)
        return st.qt.reshape(st.qt.shape[0], st.qt.shape[1], *self.grid.shape)

    def copy(self) -> "ChargeState":
        return ChargeState(self.grid, self.electron.copy(), self.hole.copy())

    @classmethod
    def initial(cls, q0: np.ndarray, grid: GridSpec, n_centers=(1, 2), n_electrodes: int = 2) -> "ChargeState":
        q0 = np.asarray(q0, dtype=float)
        if q0.ndim == 3:
            q0 = q0[None]
        B = q0.shape[0]
        V = grid.n_voxels

        def make(C):
            return SpeciesState(
                q0.reshape(B, V).copy(), np.zeros((B, C, V)), np.zeros(B), np.zeros((B, n_electrodes)), np.zeros(B),
                q0.reshape(B, V).sum(axis=1),
            )

        return cls(grid, make(n_centers[0]), make(n_centers[1]))


def conservation_report(state: ChargeState, injected=None) -> dict:
    """Per-species balance ``free + trapped + recombined + collected + escaped`` vs injected."""
    report = {}
    for s in SPECIES:
        st = state.species(s)
        inj = st.injected if injected is None else np.broadcast_to(np.asarray(injected, float), st.injected.shape)
        free = st.q.sum(axis=1)
        trapped = st.qt.sum(axis=(1, 2))
        collected = st.collected.sum(axis=1)
        total = free + trapped + st.recombined + collected + st.escaped
        scale = np.maximum(np.abs(inj), 1e-300)
        report[s] = {
            "free": free,
            "trapped": trapped,
            "recombined": st.recombined.copy(),
            "collected": collected,
            "escaped": st.escaped.copy(),
            "total": total,
            "injected": inj,
            "deviation": total - inj,
            "relative_deviation": float(np.max(np.abs(total - inj) / scale)) if inj.size else 0.0,
        }
    return report


@dataclass
class SimulationTrace:
    """Snapshots after each of the ``T`` steps, batched over injections.

    ``signals`` hold cumulative induced charge per electrode.  Tallies are
    cumulative and recorded per step so conservation can be checked at
    every step.
    """

    grid: GridSpec
    electrodes: tuple[str, ...]
    q0: np.ndarray  # (B, M, N, P)
    q_e: np.ndarray  # (B, T, M, N, P)
    qt_e: np.ndarray  # (B, T, Z, M, N, P)
    q_h: np.ndarray
    qt_h: np.ndarray  # (B, T, R, M, N, P)
    signals: np.ndarray  # (B, T, E)
    tallies: dict = field(default_factory=dict)  # name -> (B, T) or (B, T, E)
    consistency: np.ndarray | None = None  # (B, T, E) signals recomputed from positions

    def free(self, s):
        return self.q_e if s == ELECTRON else self.q_h

    def trapped(self, s):
        return self.qt_e if s == ELECTRON else self.qt_h

    @property
    def n_samples(self) -> int:
        return self.q0.shape[0]

    def balance(self, s: str) -> np.ndarray:
        """Relative balance deviation per (sample, step) for one species."""
        q = self.free(s).reshape(self.n_samples, self.grid.T, -1).sum(-1)
        qt = self.trapped(s).reshape(self.n_samples, self.grid.T, -1).sum(-1)
        tot = q + qt + self.tallies[f"recombined_{s}"] + self.tallies[f"collected_{s}"].sum(-1) + self.tallies[f"escaped_{s}"]
        inj = self.q0.reshape(self.n_samples, -1).sum(-1)[:, None]
        return (tot - inj) / np.maximum(inj, 1e-300)


# ---------------------------------------------------------------------------
# the recurrence


@dataclass
class LocalParams:
    """Coefficients of one species laid out for the kernel.

    The leading axis is 1 (shared by the whole batch) or the batch size.
    ``stencil`` is ``None`` when all drifting charge moves one layer along OZ.
    """

    drift: np.ndarray  # (b, V)
    rec: np.ndarray  # (b, V)
    trap: np.ndarray  # (b, C, V)
    detrap: np.ndarray  # (b, C, V)
    stencil: np.ndarray | None = None  # (b, 18, V)


def species_params(coeffs, stencil: DriftStencil | np.ndarray | None, V: int, keep_stencil: bool = False) -> LocalParams:
    """Flatten one species' coefficients; a stencil with no off-axis mass becomes ``None``
    unless ``keep_stencil`` is set."""
    fr = None
    if stencil is not None:
        arr = stencil.fractions if isinstance(stencil, DriftStencil) else np.asarray(stencil)
        species = stencil.species if isinstance(stencil, DriftStencil) else None
        arr = arr.reshape(18, V)
        total = arr.sum(axis=0)
        fr = arr / total
        if not keep_stencil and species is not None:
            if np.all(fr[on_axis_index(species)] == 1.0):
                fr = None
        if fr is not None:
            fr = fr[None]
    return LocalParams(
        coeffs.drift.reshape(1, V), coeffs.rec.reshape(1, V),
        coeffs.trap.reshape(1, -1, V), coeffs.detrap.reshape(1, -1, V), fr,
    )


class GridMover:
    """Moves emitted charge over the whole grid with a sparse routing."""

    def __init__(self, routing: Routing, active):
        self.routing = routing
        self.active = tuple(active)
        self.sigma = routing.sigma
        self.gT, self.xT, self.cT, self.esc, self.g, self.x = routing.blocks(self.active)
        self.phi_T = routing.phi_T

    def fluxes(self, out, stencil):
        if stencil is None:
            return out
        return (stencil[:, self.active] * out[:, None, :]).reshape(out.shape[0], -1)

    def forward(self, out, stencil):
        flux = self.fluxes(out, stencil)
        fT = flux.T
        inc = (self.gT @ fT).T
        exit_sig = self.sigma * (self.xT @ fT).T
        return {
            "inc": inc,
            "signal": self.sigma * ((inc - out) @ self.phi_T) + exit_sig,
            "exit_signal": exit_sig,
            "collected": (self.cT @ fT).T,
            "escaped": flux @ self.esc,
        }

    def potential(self, x):
        return x @ self.phi_T

    def adjoint(self, a_inc, a_sig, out, stencil, need_stencil_grad=False):
        """Pull adjoints of ``inc`` and of the signal increment back onto ``out``.

        Also returns the stencil gradient ``(B, 18, V)`` when requested.
        """
        psi = self.sigma * (a_sig @ self.phi_T.T)
        a_flux = (self.g @ (a_inc + psi).T).T + self.sigma * (self.x @ a_sig.T).T
        if stencil is None:
            return a_flux - psi, None
        B, V = out.shape
        af = a_flux.reshape(B, len(self.active), V)
        a_out = (stencil[:, self.active] * af).sum(axis=1) - psi
        d_st = None
        if need_stencil_grad:
            d_st = np.zeros((B, 18, V))
            d_st[:, self.active] = af * out[:, None, :]
        return a_out, d_st


class ColumnMover:
    """On-axis drift inside independent columns of ``P`` voxels.

    Each row of the batch is one (sample, subpixel column) pair with its own
    slice of the weighting potential.
    """

    def __init__(self, species: str, phi, exit_phi, collect):
        self.up = DRIFT_SIGN[species] > 0
        self.sigma = INDUCED_SIGN[species]
        self.phi = phi  # (L, P, E)
        self.exit_phi = exit_phi  # (L, E)
        self.collect = collect  # (L, E) one-hot of the collecting electrode

    def forward(self, out, stencil=None):
        inc = np.zeros_like(out)
        if self.up:
            inc[:, 1:] = out[:, :-1]
            leaving = out[:, -1]
        else:
            inc[:, :-1] = out[:, 1:]
            leaving = out[:, 0]
        exit_sig = self.sigma * leaving[:, None] * self.exit_phi
        return {
            "inc": inc,
            "signal": self.sigma * self.potential(inc - out) + exit_sig,
            "exit_signal": exit_sig,
            "collected": leaving[:, None] * self.collect,
            "escaped": np.zeros(out.shape[0]),
        }

    def potential(self, x):
        return np.matmul(x[:, None, :], self.phi)[:, 0]

    def adjoint(self, a_inc, a_sig, out, stencil=None, need_stencil_grad=False):
        psi = self.sigma * np.matmul(self.phi, a_sig[:, :, None])[:, :, 0]
        a = a_inc + psi
        a_out = -psi
        leave = self.sigma * (a_sig * self.exit_phi).sum(axis=1)
        if self.up:
            a_out[:, :-1] += a[:, 1:]
            a_out[:, -1] += leave
        else:
            a_out[:, 1:] += a[:, :-1]
            a_out[:, 0] += leave
        return a_out, None


def advance(q, qt, p: LocalParams, mover, mode: str = "conservative"):
    """One step of one species on flattened ``(B, V)`` arrays.

    ``q`` is the free charge sitting in each voxel (injections enter here at
    t=0).  Returns ``(q_new, qt_new, info)``; ``info`` carries the signal and
    tally increments plus the intermediates the adjoint reuses.
    """
    rec, q1 = recombine(q, p.rec)
    released = p.detrap * qt
    qt_new = qt + p.trap * q1[:, None, :] - released
    keep = 1.0 - p.trap.sum(axis=1)
    removed = rec
    if mode == "literal":
        keep = keep - p.rec
        removed = rec + p.rec * q1
    qm = q1 * keep + released.sum(axis=1)
    out, stay = emit(qm, p.drift)
    mv = mover.forward(out, p.stencil)
    q_new = stay + mv["inc"]
    mv.update(out=out, qm=qm, q1=q1, removed=removed, recombined=removed.sum(axis=1))
    return q_new, qt_new, mv


class Plan:
    """Batched layout of a simulation.

    ``grid`` layout runs every sample over the full grid.  ``columns``
    layout (only for on-axis drift) runs each (sample, occupied column) pair
    as an independent column, which is much cheaper when few columns carry
    charge.
    """

    def __init__(self, transport: "Transport", q0, layout: str = "auto", all_offsets: bool = False):
        grid = transport.grid
        M, N, P = grid.shape
        V = grid.n_voxels
        q0 = np.asarray(q0, dtype=float)
        if q0.ndim == 3:
            q0 = q0[None]
        if q0.shape[1:] != grid.shape:
            raise DomainError(f"initial charge shape {q0.shape[1:]} does not match {grid.shape}")
        B = q0.shape[0]
        on_axis = all(transport.params[s].stencil is None for s in SPECIES) and not all_offsets
        if layout == "auto":
            layout = "columns" if on_axis else "grid"
        if layout == "columns" and not on_axis:
            raise DomainError("column layout needs on-axis drift for both species")
        if layout not in ("grid", "columns"):
            raise DomainError(f"unknown layout {layout!r}")
        self.transport = transport
        self.grid = grid
        self.layout = layout
        self.B = B
        self.all_offsets = all_offsets
        self.injected = q0.reshape(B, -1).sum(axis=1)
        E = transport.field.n_electrodes
        if layout == "grid":
            self.L, self.Vl = B, V
            self.q0 = q0.reshape(B, V).copy()
            self.movers = {}
            for s in SPECIES:
                st = transport.params[s].stencil
                if all_offsets:
                    active = tuple(range(18))
                elif st is None:
                    active = (on_axis_index(s),)
                else:
                    active = tuple(int(o) for o in np.flatnonzero(np.any(st[0] != 0, axis=1)))
                self.movers[s] = GridMover(transport.routings[s], active)
        else:
            cols = q0.reshape(B, M * N, P)
            nz = np.argwhere(np.any(cols != 0, axis=2))
            self.sample = nz[:, 0]
            self.column = nz[:, 1]
            self.L, self.Vl = len(nz), P
            self.q0 = cols[self.sample, self.column].copy()
            fld = transport.field
            phi = fld.phi.reshape(E, M * N, P)[:, self.column].transpose(1, 2, 0).copy()
            fp = fld.footprint.ravel()[self.column]
            self.movers = {}
            for s in SPECIES:
                if DRIFT_SIGN[s] > 0:
                    plane = fld.anode_plane.reshape(E, M * N)[:, self.column].T.copy()
                    who = fp
                else:
                    plane = fld.cathode_plane.reshape(E, M * N)[:, self.column].T.copy()
                    who = np.full(self.L, fld.cathode_index)
                onehot = np.zeros((self.L, E))
                onehot[np.arange(self.L), who] = 1.0
                self.movers[s] = ColumnMover(s, phi, plane, onehot)
            self._assign = sp.csr_matrix((np.ones(self.L), (self.sample, np.arange(self.L))), shape=(B, self.L))
        self.load(transport.params)

    # -- parameters -------------------------------------------------------

    def load(self, params: dict) -> None:
        """Take global (shared, ``b = 1``) species parameters into the plan's layout."""
        if self.layout == "grid":
            self.params = dict(params)
            return
        M, N, P = self.grid.shape
        col = self.column
        self.params = {}
        for s in SPECIES:
            g = params[s]
            self.params[s] = LocalParams(
                g.drift.reshape(M * N, P)[col],
                g.rec.reshape(M * N, P)[col],
                g.trap.reshape(-1, M * N, P)[:, col].transpose(1, 0, 2),
                g.detrap.reshape(-1, M * N, P)[:, col].transpose(1, 0, 2),
                None,
            )

    def param_to_global(self, g: np.ndarray) -> np.ndarray:
        """Sum a per-row parameter gradient ``(L, ..., Vl)`` into a grid array ``(..., M, N, P)``."""
        M, N, P = self.grid.shape
        if self.layout == "grid":
            return g.sum(axis=0).reshape(*g.shape[1:-1], M, N, P)
        mid = g.shape[1:-1]
        out = np.zeros((M * N, *mid, P))
        np.add.at(out, self.column, g)
        return np.moveaxis(out, 0, -2).reshape(*mid, M, N, P)

    # -- layout conversions --------------------------------------------------

    def to_grid(self, local: np.ndarray) -> np.ndarray:
        """``(L, *mid, Vl)`` -> ``(B, *mid, M, N, P)``."""
        M, N, P = self.grid.shape
        mid = local.shape[1:-1]
        if self.layout == "grid":
            return local.reshape(self.B, *mid, M, N, P)
        out = np.zeros((self.B, M * N, *mid, P))
        out[self.sample, self.column] = local
        return np.moveaxis(out, 1, -2).reshape(self.B, *mid, M, N, P)

    def from_grid(self, full: np.ndarray) -> np.ndarray:
        """``(B, *mid, M, N, P)`` -> ``(L, *mid, Vl)``."""
        M, N, P = self.grid.shape
        mid = full.shape[1:-3]
        if self.layout == "grid":
            return full.reshape(self.B, *mid, M * N * P)
        f = np.moveaxis(full.reshape(self.B, *mid, M * N, P), -2, 1)
        return f[self.sample, self.column]

    def to_samples(self, x: np.ndarray) -> np.ndarray:
        """Sum rows belonging to the same sample: ``(L, ...)`` -> ``(B, ...)``."""
        if self.layout == "grid":
            return x
        return np.asarray(self._assign @ x.reshape(self.L, -1)).reshape(self.B, *x.shape[1:])

    def from_samples(self, x: np.ndarray) -> np.ndarray:
        if self.layout == "grid":
            return x
        return x[self.sample]

    # -- running ---------------------------------------------------------------

    def forward(self, T: int, consistency: bool = False, intermediates: bool = False) -> dict:
        """Run ``T`` steps; returns per-row snapshots and cumulative tallies.

        ``intermediates`` also keeps the mobile charge ``qm_<s>`` of every
        step, which the adjoint needs.
        """
        tp = self.transport
        L, Vl = self.L, self.Vl
        E = tp.field.n_electrodes
        res = {"q0": self.q0}
        q = {}
        qt = {}
        for s, C in zip(SPECIES, tp.n_centers):
            q[s] = self.q0.copy()
            qt[s] = np.zeros((L, C, Vl))
            res[f"q_{s}"] = np.empty((L, T, Vl))
            res[f"qt_{s}"] = np.empty((L, T, C, Vl))
            res[f"recombined_{s}"] = np.empty((L, T))
            res[f"collected_{s}"] = np.empty((L, T, E))
            res[f"escaped_{s}"] = np.empty((L, T))
            if intermediates:
                res[f"qm_{s}"] = np.empty((L, T, Vl))
        res["signals"] = np.empty((L, T, E))
        if consistency:
            res["consistency"] = np.empty((L, T, E))
            frozen = np.zeros((L, E))
            start = self.movers[ELECTRON].potential(self.q0)
        tally = {s: [np.zeros(L), np.zeros((L, E)), np.zeros(L)] for s in SPECIES}
        sig = np.zeros((L, E))
        for t in range(T):
            recomputed = 0.0
            for s in SPECIES:
                mover = self.movers[s]
                qn, qtn, info = advance(q[s], qt[s], self.params[s], mover, tp.mode)
                if tp.check and not (qn.min(initial=0.0) >= 0 and qtn.min(initial=0.0) >= 0):
                    raise TransportFault(f"negative {s} charge at step {t + 1}")
                q[s], qt[s] = qn, qtn
                sig = sig + info["signal"]
                tl = tally[s]
                tl[0] = tl[0] + info["recombined"]
                tl[1] = tl[1] + info["collected"]
                tl[2] = tl[2] + info["escaped"]
                res[f"q_{s}"][:, t] = qn
                res[f"qt_{s}"][:, t] = qtn
                if intermediates:
                    res[f"qm_{s}"][:, t] = info["qm"]
                res[f"recombined_{s}"][:, t] = tl[0]
                res[f"collected_{s}"][:, t] = tl[1]
                res[f"escaped_{s}"][:, t] = tl[2]
                if consistency:
                    sg = INDUCED_SIGN[s]
                    frozen = frozen + sg * mover.potential(info["removed"]) + info["exit_signal"]
                    recomputed = recomputed + sg * (mover.potential(qn + qtn.sum(axis=1)) - start)
            res["signals"][:, t] = sig
            if consistency:
                res["consistency"][:, t] = recomputed + frozen
        return res


class Transport:
    """Coefficients, routing and weighting potential bundled for repeated simulation."""

    def __init__(
        self,
        grid: GridSpec,
        materials: MaterialMap,
        stencils: dict | None,
        field_: WeightingPotentialField,
        boundary: str = "closed-lateral",
        mode: str = "conservative",
        routings: dict | None = None,
        check: bool = True,
    ):
        if mode not in MOB_MODES:
            raise DomainError(f"unknown mobility mode {mode!r}")
        if boundary not in BOUNDARIES:
            raise DomainError(f"unknown boundary {boundary!r}")
        if materials.shape != grid.shape:
            raise DomainError(f"material grid {materials.shape} does not match {grid.shape}")
        if field_.phi.shape[1:] != grid.shape:
            raise DomainError("weighting potential grid does not match")
        if mode == "conservative":
            for s in SPECIES:
                c = materials.species(s)
                if np.any(c.rec + c.trap.sum(axis=0) > 1 + 1e-12):
                    raise ConstraintViolation(f"{s}: rec + sum(trap) exceeds 1")
        self.grid = grid
        self.field = field_
        self.boundary = boundary
        self.mode = mode
        self.check = check
        self._routings = routings
        stencils = stencils or {}
        V = grid.n_voxels
        self.params = {s: species_params(materials.species(s), stencils.get(s), V) for s in SPECIES}
        self.n_centers = (materials.electron.n_centers, materials.hole.n_centers)

    @property
    def routings(self) -> dict:
        if self._routings is None:
            self._routings = {s: Routing(self.grid, s, self.field, self.boundary) for s in SPECIES}
        return self._routings

    def initial_state(self, q0) -> ChargeState:
        return ChargeState.initial(q0, self.grid, self.n_centers, self.field.n_electrodes)

    def step(self, state: ChargeState) -> tuple[ChargeState, np.ndarray]:
        """Advance both species one step on the full grid.

        Returns the new state and the per-electrode signal increments ``(B, E)``.
        """
        new = {}
        signal = 0.0
        for s in SPECIES:
            st = state.species(s)
            p = self.params[s]
            active = (on_axis_index(s),) if p.stencil is None else tuple(
                int(o) for o in np.flatnonzero(np.any(p.stencil[0] != 0, axis=1)))
            q, qt, info = advance(st.q, st.qt, p, GridMover(self.routings[s], active), self.mode)
            if self.check and not (q.min(initial=0.0) >= 0 and qt.min(initial=0.0) >= 0):
                raise TransportFault(f"negative {s} charge in transport step")
            new[s] = SpeciesState(
                q, qt, st.recombined + info["recombined"], st.collected + info["collected"],
                st.escaped + info["escaped"], st.injected,
            )
            signal = signal + info["signal"]
        return ChargeState(state.grid, new[ELECTRON], new[HOLE]), signal

    def plan(self, q0, layout: str = "auto", all_offsets: bool = False) -> Plan:
        return Plan(self, q0, layout, all_offsets)

    def run(self, q0, T: int | None = None, consistency: bool = False, layout: str = "auto") -> SimulationTrace:
        """Simulate ``T`` steps (default ``grid.T``) from initial charge ``(B, M, N, P)``."""
        T = self.grid.T if T is None else int(T)
        q0 = np.asarray(q0, dtype=float)
        if q0.ndim == 3:
            q0 = q0[None]
        if self.check and q0.min(initial=0.0) < 0:
            raise TransportFault("negative injected charge")
        plan = self.plan(q0, layout)
        res = plan.forward(T, consistency)
        tallies = {}
        for s in SPECIES:
            for name in ("recombined", "collected", "escaped"):
                tallies[f"{name}_{s}"] = plan.to_samples(res[f"{name}_{s}"])
        return SimulationTrace(
            self.grid.with_(T=T), tuple(self.field.names), q0.copy(),
            plan.to_grid(res[f"q_{ELECTRON}"]), plan.to_grid(res[f"qt_{ELECTRON}"]),
            plan.to_grid(res[f"q_{HOLE}"]), plan.to_grid(res[f"qt_{HOLE}"]),
            plan.to_samples(res["signals"]), tallies,
            plan.to_samples(res["consistency"]) if consistency else None,
        )

def induce_signals(moves: Iterable, field_: WeightingPotentialField) -> np.ndarray:
    """Induced-charge increments per electrode for a list of moves.

    Each move is ``(q, species, src, dst)``.  ``src`` and ``dst`` are voxel
    tuples ``(i, j, k)``; ``k == P`` denotes the anode plane and ``k == -1``
    the cathode plane above/below subpixel ``(i, j)``.
    """
    P = field_.phi.shape[-1]

    def phi_at(loc):
        i, j, k = loc
        if k >= P:
            return field_.anode_plane[:, i, j]
        if k < 0:
            return field_.cathode_plane[:, i, j]
        return field_.phi[:, i, j, k]

    total = np.zeros(field_.n_electrodes)
    for q, s, src, dst in moves:
        total += INDUCED_SIGN[s] * q * (phi_at(dst) - phi_at(src))
    return total


def step(state: ChargeState, materials: MaterialMap, stencils, field_: WeightingPotentialField,
         boundary: str = "closed-lateral", mode: str = "conservative"):
    """Functional form of :meth:`Transport.step`."""
    return Transport(state.grid, materials, stencils, field_, boundary, mode).step(state)


def simulate(injections: Sequence, materials: MaterialMap, stencils, field_: WeightingPotentialField,
             grid: GridSpec, boundary: str = "closed-lateral", mode: str = "conservative",
             consistency: bool = False) -> SimulationTrace:
    """Simulate each injection (or group of superposed injections) for ``grid.T`` steps."""
    if isinstance(injections, Injection):
        injections = [injections]
    q0 = injection_field(injections, grid)
    return Transport(grid, materials, stencils, field_, boundary, mode).run(q0, consistency=consistency)


def uniform_stencils(grid: GridSpec) -> dict:
    return {s: build_drift_stencil("uniform", grid, s) for s in SPECIES}
