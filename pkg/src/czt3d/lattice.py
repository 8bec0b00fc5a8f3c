"""Voxel grid, material coefficient maps, drift stencils and weighting potentials.

Conventions used throughout the package:

* Voxel arrays are shaped ``(M, N, P)``: ``M`` subpixels along OX, ``N``
  along OY and ``P`` layers along OZ.  Layer ``k = 0`` adjoins the cathode
  and ``k = P - 1`` adjoins the anode.
* Electrons drift towards increasing ``k``, holes towards decreasing ``k``.
* Every coefficient is a per-time-step transition probability in ``[0, 1]``.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DomainError, FormatError, ValidationError

ELECTRON = "e"
HOLE = "h"
SPECIES = (ELECTRON, HOLE)

# z direction of drift and sign of the induced charge per unit move
DRIFT_SIGN = {ELECTRON: +1, HOLE: -1}
INDUCED_SIGN = {ELECTRON: +1.0, HOLE: -1.0}

DEFAULT_DT = 10e-9


@dataclass(frozen=True)
class GridSpec:
    M: int
    N: int
    P: int
    dt: float = DEFAULT_DT
    T: int = 300

    def __post_init__(self):
        for name in ("M", "N", "P", "T"):
            if int(getattr(self, name)) < 1:
                raise DomainError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.dt > 0:
            raise DomainError(f"dt must be positive, got {self.dt}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.M, self.N, self.P)

    @property
    def n_voxels(self) -> int:
        return self.M * self.N * self.P

    def contains(self, voxel: Sequence[int]) -> bool:
        return all(0 <= int(c) < n for c, n in zip(voxel, self.shape))

    def with_(self, **changes) -> "GridSpec":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {"M": self.M, "N": self.N, "P": self.P, "dt": self.dt, "T": self.T}

    @classmethod
    def from_dict(cls, d: Mapping) -> "GridSpec":
        return cls(int(d["M"]), int(d["N"]), int(d["P"]), float(d.get("dt", DEFAULT_DT)), int(d.get("T", 300)))


# ---------------------------------------------------------------------------
# lifetimes <-> per-step probabilities


def lifetime_to_weight(tau, dt=DEFAULT_DT):
    """Fraction of a population that transitions during one step of length ``dt``.

    ``tau`` may be ``inf`` (no transitions).  Works elementwise on arrays.
    """
    tau = np.asarray(tau, dtype=float)
    if np.any(~(tau > 0)) or not dt > 0:
        raise DomainError("lifetime and time step must be positive")
    w = -np.expm1(-dt / tau)
    return float(w) if w.ndim == 0 else w


def weight_to_lifetime(w, dt=DEFAULT_DT):
    """Inverse of :func:`lifetime_to_weight`.

    Returns ``inf`` when ``w`` is so small that the lifetime is not representable.
    """
    w = np.asarray(w, dtype=float)
    if np.any(~((w > 0) & (w < 1))) or not dt > 0:
        raise DomainError("weight must lie strictly inside (0, 1)")
    with np.errstate(divide="ignore", over="ignore"):
        tau = -dt / np.log1p(-w)
    tau = np.where(np.isfinite(tau), tau, np.inf)
    return float(tau) if tau.ndim == 0 else tau


# ---------------------------------------------------------------------------
# material coefficients


@dataclass
class SpeciesCoefficients:
    """Per-voxel coefficients of one carrier species.

    ``trap`` and ``detrap`` have a leading trap-center axis.
    """

    drift: np.ndarray
    rec: np.ndarray
    trap: np.ndarray
    detrap: np.ndarray

    @property
    def n_centers(self) -> int:
        return self.trap.shape[0]

    def copy(self) -> "SpeciesCoefficients":
        return SpeciesCoefficients(self.drift.copy(), self.rec.copy(), self.trap.copy(), self.detrap.copy())

    def arrays(self) -> dict[str, np.ndarray]:
        return {"drift": self.drift, "rec": self.rec, "trap": self.trap, "detrap": self.detrap}

    def map(self, fn) -> "SpeciesCoefficients":
        return SpeciesCoefficients(*(fn(a) for a in (self.drift, self.rec, self.trap, self.detrap)))

    @classmethod
    def uniform(cls, shape, drift, rec, trap: Sequence[float], detrap: Sequence[float]) -> "SpeciesCoefficients":
        if len(trap) != len(detrap):
            raise DomainError("trap and detrap need one value per trap center")
        return cls(
            np.full(shape, float(drift)),
            np.full(shape, float(rec)),
            np.stack([np.full(shape, float(x)) for x in trap]) if trap else np.zeros((0, *shape)),
            np.stack([np.full(shape, float(x)) for x in detrap]) if detrap else np.zeros((0, *shape)),
        )


@dataclass
class MaterialMap:
    electron: SpeciesCoefficients
    hole: SpeciesCoefficients

    def species(self, s: str) -> SpeciesCoefficients:
        return self.electron if s == ELECTRON else self.hole

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.electron.drift.shape

    def copy(self) -> "MaterialMap":
        return MaterialMap(self.electron.copy(), self.hole.copy())

    def map(self, fn) -> "MaterialMap":
        return MaterialMap(self.electron.map(fn), self.hole.map(fn))

    def kinds(self) -> list[str]:
        return coefficient_kinds(self.electron.n_centers, self.hole.n_centers)

    def kind(self, name: str) -> np.ndarray:
        """Array for a coefficient kind name such as ``"eDrift"`` or ``"hT2"``."""
        sp = self.species(name[0])
        rest = name[1:]
        if rest == "Drift":
            return sp.drift
        if rest == "Rec":
            return sp.rec
        if rest[0] in "TD":
            idx = int(rest[1:]) - 1 if len(rest) > 1 else 0
            arr = sp.trap if rest[0] == "T" else sp.detrap
            if not 0 <= idx < arr.shape[0]:
                raise KeyError(name)
            return arr[idx]
        raise KeyError(name)

    def validate(self, tol: float = 1e-12) -> None:
        for s in SPECIES:
            sp = self.species(s)
            for name, arr in sp.arrays().items():
                if arr.shape[-3:] != self.shape:
                    raise ValidationError(f"{s}.{name} has shape {arr.shape}, grid is {self.shape}")
                if not np.all(np.isfinite(arr)):
                    raise ValidationError(f"{s}.{name} is not finite")
                if arr.size and (arr.min() < -tol or arr.max() > 1 + tol):
                    raise ValidationError(f"{s}.{name} outside [0, 1]")
            budget = sp.rec + sp.trap.sum(axis=0)
            if budget.max(initial=0.0) > 1 + tol:
                raise ValidationError(f"{s}: rec + sum(trap) exceeds 1")

    @classmethod
    def uniform(cls, shape, lifetimes: "LifetimeSet", dt: float = DEFAULT_DT) -> "MaterialMap":
        w = lifetimes.weights(dt)
        return cls(
            SpeciesCoefficients.uniform(shape, w["eDrift"], w["eRec"], w["eT"], w["eD"]),
            SpeciesCoefficients.uniform(shape, w["hDrift"], w["hRec"], w["hT"], w["hD"]),
        )


def coefficient_kinds(n_e_centers: int = 1, n_h_centers: int = 2) -> list[str]:
    out = []
    for s, n in ((ELECTRON, n_e_centers), (HOLE, n_h_centers)):
        out += [f"{s}Drift", f"{s}Rec"]
        if n == 1:
            out += [f"{s}T", f"{s}D"]
        else:
            for c in range(1, n + 1):
                out += [f"{s}T{c}", f"{s}D{c}"]
    return out


@dataclass(frozen=True)
class LifetimeSet:
    """Lifetimes in seconds plus drift fractions (already per-step)."""

    mu_e: float = 0.9
    mu_h: float = 0.3
    tau_eT: float = 0.5e-6
    tau_eD: float = 1.0e-6
    tau_hT: tuple[float, ...] = (0.2e-6, 1.0e-6)
    tau_hD: tuple[float, ...] = (0.5e-6, 2.0e-6)
    tau_e: float = 5e-6
    tau_h: float = 5e-6

    def __post_init__(self):
        taus = [self.tau_eT, self.tau_eD, *self.tau_hT, *self.tau_hD, self.tau_e, self.tau_h]
        if any(not t > 0 for t in taus):
            raise DomainError("all lifetimes must be positive")
        if len(self.tau_hT) != len(self.tau_hD):
            raise DomainError("hole trap and detrap lifetimes must pair up")

    def weights(self, dt: float = DEFAULT_DT) -> dict:
        return {
            "eDrift": self.mu_e,
            "hDrift": self.mu_h,
            "eRec": lifetime_to_weight(self.tau_e, dt),
            "hRec": lifetime_to_weight(self.tau_h, dt),
            "eT": [lifetime_to_weight(self.tau_eT, dt)],
            "eD": [lifetime_to_weight(self.tau_eD, dt)],
            "hT": [lifetime_to_weight(t, dt) for t in self.tau_hT],
            "hD": [lifetime_to_weight(t, dt) for t in self.tau_hD],
        }


# ---------------------------------------------------------------------------
# drift stencils


def stencil_offsets(species: str) -> np.ndarray:
    """The 18 (dx, dy, dz) offsets of a species in lexicographic order."""
    dzs = (1, 2) if DRIFT_SIGN[species] > 0 else (-2, -1)
    return np.array(list(itertools.product((-1, 0, 1), (-1, 0, 1), dzs)), dtype=np.int64)


def on_axis_index(species: str) -> int:
    target = (0, 0, DRIFT_SIGN[species])
    return [tuple(o) for o in stencil_offsets(species)].index(target)


@dataclass
class DriftStencil:
    """Fractions of the drifting charge sent to each offset, per voxel.

    ``fractions`` is shaped ``(18, M, N, P)`` and sums to one over axis 0.
    """

    species: str
    fractions: np.ndarray

    @property
    def offsets(self) -> np.ndarray:
        return stencil_offsets(self.species)

    def copy(self) -> "DriftStencil":
        return DriftStencil(self.species, self.fractions.copy())

    def off_axis_mass(self) -> np.ndarray:
        """Per-voxel mass not sent straight along OZ by one layer."""
        return 1.0 - self.fractions[on_axis_index(self.species)]

    def is_uniform(self) -> bool:
        return bool(np.all(self.off_axis_mass() == 0.0))

    def validate(self, tol: float = 1e-12) -> None:
        if self.fractions.shape[0] != 18:
            raise ValidationError("stencil needs 18 offsets")
        if self.fractions.min() < 0:
            raise ValidationError("negative stencil fraction")
        if np.abs(self.fractions.sum(axis=0) - 1).max() > tol:
            raise ValidationError("stencil fractions do not sum to 1")


def build_drift_stencil(field_config, grid: GridSpec, species: str) -> DriftStencil:
    """Build a stencil.

    ``field_config`` is ``"uniform"`` (all mass one layer along the field), a
    mapping ``{(dx, dy, dz): weight}`` applied to every voxel, or an array of
    shape ``(18,)`` or ``(18, M, N, P)`` in lexicographic offset order.
    Configured weights are normalized per voxel.
    """
    offsets = [tuple(int(c) for c in o) for o in stencil_offsets(species)]
    if isinstance(field_config, str):
        if field_config != "uniform":
            raise DomainError(f"unknown field configuration {field_config!r}")
        fr = np.zeros((18, *grid.shape))
        fr[on_axis_index(species)] = 1.0
        return DriftStencil(species, fr)
    if isinstance(field_config, Mapping):
        raw = np.zeros(18)
        for off, val in field_config.items():
            off = tuple(int(c) for c in off)
            if off not in offsets:
                raise ValidationError(f"offset {off} not allowed for species {species!r}")
            raw[offsets.index(off)] = float(val)
    else:
        raw = np.asarray(field_config, dtype=float)
    if raw.shape == (18,):
        raw = np.broadcast_to(raw[:, None, None, None], (18, *grid.shape))
    if raw.shape != (18, *grid.shape):
        raise FormatError(f"stencil array shape {raw.shape} does not match grid {grid.shape}")
    if np.any(raw < 0):
        raise ValidationError("negative configured stencil fraction")
    total = raw.sum(axis=0)
    if np.any(total <= 0):
        raise ValidationError("stencil with no mass at some voxel")
    return DriftStencil(species, np.array(raw / total))


# ---------------------------------------------------------------------------
# weighting potentials


@dataclass(frozen=True)
class WeightingPotentialField:
    """Per-electrode weighting potential over voxels and on the two electrode planes.

    ``phi`` is ``(E, M, N, P)``; ``anode_plane`` and ``cathode_plane`` are
    ``(E, M, N)`` and hold the potential of each electrode on the plane beyond
    layer ``P - 1`` and before layer ``0`` respectively.
    """

    names: tuple[str, ...]
    phi: np.ndarray
    anode_plane: np.ndarray
    cathode_plane: np.ndarray
    mode: str = "planar"

    @property
    def n_electrodes(self) -> int:
        return len(self.names)

    @property
    def cathode_index(self) -> int:
        return self.names.index("cathode")

    @property
    def footprint(self) -> np.ndarray:
        """Index of the anode electrode covering each subpixel, ``(M, N)``."""
        return np.argmax(self.anode_plane, axis=0)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def validate(self, tol: float = 1e-10) -> None:
        E = len(self.names)
        if self.phi.shape[0] != E or self.anode_plane.shape[0] != E or self.cathode_plane.shape[0] != E:
            raise FormatError("electrode axis does not match names")
        if E < 2:
            raise ValidationError("need at least two electrodes")
        for label, arr in (("phi", self.phi), ("anode_plane", self.anode_plane), ("cathode_plane", self.cathode_plane)):
            if arr.min() < -tol or arr.max() > 1 + tol:
                raise ValidationError(f"{label} outside [0, 1]")
            if np.abs(arr.sum(axis=0) - 1).max() > tol:
                raise ValidationError(f"{label} violates partition of unity")
        c = self.cathode_index
        if not np.allclose(self.cathode_plane[c], 1, atol=tol):
            raise ValidationError("cathode potential must be 1 on the cathode plane")
        if np.abs(self.anode_plane.max(axis=0) - 1).max() > tol:
            raise ValidationError("every anode subpixel must belong to one electrode")


def _corner_term(a, b, h):
    return np.arctan2(a * b, h * np.sqrt(a * a + b * b + h * h))


def _rectangle_potential(x1, x2, y1, y2, z, images: int = 16):
    """Weighting potential of a rectangular anode electrode in a slab of unit thickness.

    ``x1..y2`` are rectangle edges relative to the evaluation point and ``z``
    is the distance from the anode plane (cathode at ``z = 1``).  The
    half-space solid-angle solution is made to vanish on the cathode with
    image charges.
    """

    def half_space(zz):
        h = np.abs(zz)
        omega = _corner_term(x2, y2, h) - _corner_term(x1, y2, h) - _corner_term(x2, y1, h) + _corner_term(x1, y1, h)
        return np.where(zz >= 0, 1.0, -1.0) * omega / (2 * np.pi)

    total = half_space(z)
    for n in range(1, images + 1):
        total = total + half_space(z - 2 * n) + half_space(z + 2 * n)
    return total


def build_weighting_potential(
    layout: str,
    grid: GridSpec,
    mode: str = "planar",
    *,
    pitch: float = 0.25,
    images: int = 16,
    path: str | Path | None = None,
) -> WeightingPotentialField:
    """Weighting potentials for the central anode pixel and the cathode.

    ``layout`` is ``"pixel"`` (one anode electrode) or ``"subpixel"`` (one
    anode electrode per subpixel, named ``anode_i_j``).  ``mode`` selects
    the model:

    planar
        Parallel-plate potentials, ``(k + 1) / P`` for the anode under its own
        footprint and zero elsewhere.
    small-pixel-analytic
        Closed-form potential of rectangular electrodes of lateral size
        ``pitch`` (in units of detector thickness), sampled at voxel centres
        ``(k + 0.5) / P`` so the anode-adjacent voxel still induces signal
        when its charge is collected.  The rest of the pixel array is lumped
        into a ``surround`` electrode.
    file
        Load from a manifest written by :func:`save_weighting_potential`.
    """
    if mode == "file":
        if path is None:
            raise DomainError("file mode needs a path")
        return load_weighting_potential(path, grid)
    if layout not in ("pixel", "subpixel"):
        raise DomainError(f"unknown electrode layout {layout!r}")
    M, N, P = grid.shape
    if layout == "pixel":
        anodes = ["anode"]
        footprint = np.zeros((M, N), dtype=int)
    else:
        anodes = [f"anode_{i}_{j}" for i in range(M) for j in range(N)]
        footprint = np.arange(M * N).reshape(M, N)
    k = np.arange(P)
    z_anode = (k + 1) / P  # planar anode potential; distance from anode is 1 - this

    if mode == "planar":
        names = ("cathode", *anodes)
        E = len(names)
        phi = np.zeros((E, M, N, P))
        phi[0] = 1.0 - z_anode
        for a in range(len(anodes)):
            mask = footprint == a
            phi[1 + a][mask] = z_anode
    elif mode == "small-pixel-analytic":
        names = ("cathode", *anodes, "surround")
        E = len(names)
        phi = np.zeros((E, M, N, P))
        depth = 1.0 - (k + 0.5) / P
        phi[0] = depth
        sub_x = pitch / M
        sub_y = pitch / N
        xc = -pitch / 2 + (np.arange(M) + 0.5) * sub_x
        yc = -pitch / 2 + (np.arange(N) + 0.5) * sub_y
        if layout == "pixel":
            X = xc[:, None, None]
            Y = yc[None, :, None]
            Z = depth[None, None, :]
            phi[1] = _rectangle_potential(-pitch / 2 - X, pitch / 2 - X, -pitch / 2 - Y, pitch / 2 - Y, Z, images)
        else:
            # all subpixel rectangles are translates of one another: evaluate once on relative offsets
            di = np.arange(-(M - 1), M)[:, None, None]
            dj = np.arange(-(N - 1), N)[None, :, None]
            Z = depth[None, None, :]
            rel = _rectangle_potential(
                di * sub_x - sub_x / 2, di * sub_x + sub_x / 2, dj * sub_y - sub_y / 2, dj * sub_y + sub_y / 2, Z, images
            )
            ii = np.arange(M)
            jj = np.arange(N)
            for a in range(M):
                for b in range(N):
                    phi[1 + a * N + b] = rel[(a - ii + M - 1)[:, None], (b - jj + N - 1)[None, :], :]
        phi[1:-1] = np.clip(phi[1:-1], 0.0, 1.0)
        anode_sum = phi[1:-1].sum(axis=0)
        room = 1.0 - phi[0]
        over = anode_sum > room
        if np.any(over):
            phi[1:-1] *= np.where(over, room / np.where(anode_sum > 0, anode_sum, 1.0), 1.0)
        phi[-1] = np.clip(1.0 - phi[0] - phi[1:-1].sum(axis=0), 0.0, 1.0)
    else:
        raise DomainError(f"unknown weighting potential mode {mode!r}")

    anode_plane = np.zeros((E, M, N))
    for a in range(len(anodes)):
        anode_plane[1 + a][footprint == a] = 1.0
    cathode_plane = np.zeros((E, M, N))
    cathode_plane[0] = 1.0
    wp = WeightingPotentialField(tuple(names), phi, anode_plane, cathode_plane, mode)
    wp.validate()
    return wp


def _write_array(path: Path, arr: np.ndarray) -> None:
    np.ascontiguousarray(arr, dtype="<f8").tofile(path)


def _read_array(path: Path, shape: Sequence[int]) -> np.ndarray:
    raw = np.fromfile(path, dtype="<f8")
    if raw.size != int(np.prod(shape)):
        raise FormatError(f"{path.name}: {raw.size} values, expected shape {tuple(shape)}")
    return raw.reshape(shape).astype(float)


def save_weighting_potential(field_: WeightingPotentialField, directory: str | Path, stem: str = "weighting") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    fname = f"{stem}.f64"
    _write_array(directory / fname, field_.phi)
    manifest = {
        "electrodes": list(field_.names),
        "shape": list(field_.phi.shape[1:]),
        "file": fname,
        "footprint": field_.footprint.tolist(),
        "mode": field_.mode,
    }
    path = directory / f"{stem}.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_weighting_potential(path: str | Path, grid: GridSpec | None = None) -> WeightingPotentialField:
    """Load potentials; array layout is little-endian f64, row-major (electrode, i, j, k)."""
    path = Path(path)
    manifest = json.loads(path.read_text())
    names = tuple(manifest["electrodes"])
    shape = tuple(int(s) for s in manifest["shape"])
    if grid is not None and shape != grid.shape:
        raise FormatError(f"weighting potential grid {shape} does not match {grid.shape}")
    phi = _read_array(path.parent / manifest["file"], (len(names), *shape))
    if "cathode" not in names:
        raise ValidationError("weighting potential file has no cathode electrode")
    if np.abs(phi.sum(axis=0) - 1).max() > 1e-6:
        raise ValidationError("loaded weighting potential violates partition of unity")
    if phi.min() < -1e-6 or phi.max() > 1 + 1e-6:
        raise ValidationError("loaded weighting potential outside [0, 1]")
    E = len(names)
    c = names.index("cathode")
    if "footprint" in manifest:
        footprint = np.asarray(manifest["footprint"], dtype=int)
    else:
        near = phi[:, :, :, -1].copy()
        near[c] = -np.inf
        footprint = np.argmax(near, axis=0)
    anode_plane = np.zeros((E, shape[0], shape[1]))
    np.put_along_axis(anode_plane, footprint[None], 1.0, axis=0)
    cathode_plane = np.zeros((E, shape[0], shape[1]))
    cathode_plane[c] = 1.0
    return WeightingPotentialField(names, phi, anode_plane, cathode_plane, "file")


def save_stencil(stencil: DriftStencil, directory: str | Path, stem: str | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = stem or f"stencil_{stencil.species}"
    fname = f"{stem}.f64"
    _write_array(directory / fname, stencil.fractions)
    manifest = {
        "species": stencil.species,
        "shape": list(stencil.fractions.shape[1:]),
        "offsets": stencil.offsets.tolist(),
        "file": fname,
    }
    path = directory / f"{stem}.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_stencil(path: str | Path, grid: GridSpec | None = None) -> DriftStencil:
    path = Path(path)
    manifest = json.loads(path.read_text())
    species = manifest["species"]
    shape = tuple(manifest["shape"])
    if grid is not None and shape != grid.shape:
        raise FormatError(f"stencil grid {shape} does not match {grid.shape}")
    if [list(o) for o in stencil_offsets(species)] != [list(o) for o in manifest["offsets"]]:
        raise FormatError("stencil offsets are not in lexicographic (dx, dy, dz) order")
    fr = _read_array(path.parent / manifest["file"], (18, *shape))
    st = DriftStencil(species, fr)
    st.validate(tol=1e-9)
    return st


# ---------------------------------------------------------------------------
# lateral block averaging


def downsample(data, factor: int, axes: tuple[int, int] = (0, 1)) -> np.ndarray:
    """Replace non-overlapping ``factor x factor`` lateral blocks by their mean."""
    data = np.asarray(data, dtype=float)
    factor = int(factor)
    if factor < 1:
        raise DomainError("factor must be >= 1")
    ax0, ax1 = (a % data.ndim for a in axes)
    if data.shape[ax0] % factor or data.shape[ax1] % factor:
        raise FormatError(f"lateral shape {data.shape[ax0]}x{data.shape[ax1]} not divisible by {factor}")
    if factor == 1:
        return data.copy()
    moved = np.moveaxis(data, (ax0, ax1), (0, 1))
    m, n = moved.shape[:2]
    blocks = moved.reshape(m // factor, factor, n // factor, factor, *moved.shape[2:])
    out = blocks.mean(axis=(1, 3))
    return np.moveaxis(out, (0, 1), (ax0, ax1))


def electrode_groups(field_: WeightingPotentialField, factor: int) -> list[list[int]]:
    """Fine electrodes that merge into one electrode after lateral downsampling.

    Anode electrodes sharing a coarse block merge; electrodes that are not
    anode footprints stay on their own.  Groups keep the order of their first
    member.
    """
    parent = list(range(field_.n_electrodes))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    fp = field_.footprint
    M, N = fp.shape
    for I in range(M // factor):
        for J in range(N // factor):
            members = np.unique(fp[I * factor:(I + 1) * factor, J * factor:(J + 1) * factor])
            for m in members[1:]:
                ra, rb = find(int(members[0])), find(int(m))
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, list[int]] = {}
    for e in range(field_.n_electrodes):
        groups.setdefault(find(e), []).append(e)
    return sorted(groups.values(), key=lambda g: g[0])


def downsample_field(field_: WeightingPotentialField, factor: int) -> tuple[WeightingPotentialField, list[list[int]]]:
    """Block-average potentials over voxels; merged electrodes add their potentials."""
    groups = electrode_groups(field_, factor)
    phi = downsample(field_.phi, factor, axes=(1, 2))
    ap = downsample(field_.anode_plane, factor, axes=(1, 2))
    cp = downsample(field_.cathode_plane, factor, axes=(1, 2))
    fp = field_.footprint
    names = []
    for g in groups:
        if len(g) == 1:
            names.append(field_.names[g[0]])
            continue
        cells = np.argwhere(np.isin(fp, g))
        blocks = {(int(i) // factor, int(j) // factor) for i, j in cells}
        if len(blocks) == 1:
            (I, J), = blocks
            names.append(f"anode_{I}_{J}")
        else:
            names.append("+".join(field_.names[e] for e in g))
    merge = lambda a: np.stack([a[g].sum(axis=0) for g in groups])
    out = WeightingPotentialField(tuple(names), merge(phi), merge(ap), merge(cp), field_.mode)
    return out, groups
