"""Synthetic ground truth, dataset generation, on-disk format and subsets.

A dataset holds one sample per injection group: the initial charge, the
cumulative electrode signals and the per-voxel free and trapped charge of
both species after every step.  On disk it is a directory with one raw
little-endian f64 file per array and a ``manifest.json`` written last.
"""
from __future__ import annotations

import csv
import json
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .errors import ConfigError, DomainError, FormatError, ValidationError, VersionError
from .lattice import (
    ELECTRON,
    HOLE,
    SPECIES,
    DriftStencil,
    GridSpec,
    MaterialMap,
    SpeciesCoefficients,
    WeightingPotentialField,
    build_drift_stencil,
    build_weighting_potential,
    downsample,
    downsample_field,
    lifetime_to_weight,
    load_weighting_potential,
    save_weighting_potential,
)
from .transport import Injection, Transport, injection_field

FORMAT_VERSION = 1
TRACE_ARRAYS = ("signals", "q_e", "qt_e", "q_h", "qt_h")

# Ranges for per-voxel sampling.  Drift entries are per-step fractions,
# lifetimes are in seconds and are sampled log-uniformly.
PROFILES = {
    "wide": {
        "eDrift": (0.8, 1.0),
        "hDrift": (0.2, 0.4),
        "trap_tau": (0.1e-6, 10e-6),
        "detrap_tau": (0.1e-6, 10e-6),
        "rec_tau": (1e-6, 100e-6),
    },
    "desk": {
        "eDrift": (0.8, 1.0),
        "hDrift": (0.2, 0.4),
        "trap_tau": (0.1e-6, 2e-6),
        "detrap_tau": (0.1e-6, 2e-6),
        "rec_tau": (1e-6, 10e-6),
    },
    "zero": {
        "eDrift": (0.0, 0.0),
        "hDrift": (0.0, 0.0),
        "trap_tau": (np.inf, np.inf),
        "detrap_tau": (np.inf, np.inf),
        "rec_tau": (np.inf, np.inf),
    },
}


# ---------------------------------------------------------------------------
# ground truth


def _as_groups(injections) -> list[list[Injection]]:
    groups = []
    for g in injections:
        if isinstance(g, Injection):
            groups.append([g])
            continue
        g = list(g)
        if g and isinstance(g[0], (int, np.integer)):
            g = [g]
        items = []
        for it in g:
            if isinstance(it, Injection):
                items.append(it)
            else:
                it = list(it)
                items.append(Injection(tuple(int(v) for v in it[:3]), float(it[3]) if len(it) > 3 else 1.0))
        groups.append(items)
    return groups


def _groups_to_json(groups) -> list:
    return [[[*inj.voxel, inj.magnitude] for inj in g] for g in groups]


def column_injections(columns: Sequence[tuple[int, int]], depths: Sequence[int]) -> list[list[Injection]]:
    """One unit e-h pair per (column, depth), ordered by column then depth."""
    return [[Injection((int(i), int(j), int(k)))] for i, j in columns for k in depths]


@dataclass
class GroundTruthConfig:
    """How to build a synthetic dataset.

    ``profile`` is a name in ``PROFILES`` or a mapping with the same keys.
    With ``block > 1`` coefficients are drawn on a grid coarsened laterally
    by ``block`` and repeated, so every block of subpixels shares them.
    """

    grid: GridSpec
    injections: list
    profile: str | dict = "desk"
    truth_file: str | None = None
    stencil: object = "uniform"
    layout: str = "subpixel"
    field_mode: str = "small-pixel-analytic"
    field_file: str | None = None
    boundary: str = "closed-lateral"
    mode: str = "conservative"
    seed: int = 0
    block: int = 1
    n_centers: tuple[int, int] = (1, 2)

    def __post_init__(self):
        self.injections = _as_groups(self.injections)
        if not self.injections:
            raise ConfigError("at least one injection is needed")
        for g in self.injections:
            for inj in g:
                if not self.grid.contains(inj.voxel):
                    raise ConfigError(f"injection {inj.voxel} outside grid {self.grid.shape}")
        if self.block < 1 or self.grid.M % self.block or self.grid.N % self.block:
            raise ConfigError(f"block {self.block} does not tile {self.grid.M}x{self.grid.N}")

    def ranges(self) -> dict:
        if isinstance(self.profile, str):
            if self.profile not in PROFILES:
                raise ConfigError(f"unknown profile {self.profile!r}; known: {sorted(PROFILES)}")
            return dict(PROFILES[self.profile])
        out = dict(PROFILES["desk"])
        out.update({k: tuple(v) for k, v in self.profile.items()})
        return out

    def to_dict(self) -> dict:
        d = {
            "grid": self.grid.to_dict(),
            "injections": _groups_to_json(self.injections),
            "profile": self.profile,
            "truth_file": self.truth_file,
            "stencil": _stencil_config_json(self.stencil),
            "layout": self.layout,
            "field_mode": self.field_mode,
            "field_file": self.field_file,
            "boundary": self.boundary,
            "mode": self.mode,
            "seed": self.seed,
            "block": self.block,
            "n_centers": list(self.n_centers),
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "grid" not in d or "injections" not in d:
            raise ConfigError("config needs 'grid' and 'injections'")
        try:
            d["grid"] = GridSpec.from_dict(d["grid"])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad grid: {exc}") from exc
        if "n_centers" in d:
            d["n_centers"] = tuple(d["n_centers"])
        if "stencil" in d:
            d["stencil"] = _stencil_config_parse(d["stencil"])
        return cls(**d)


def _stencil_config_json(cfg):
    if isinstance(cfg, dict) and set(cfg) <= set(SPECIES):
        return {s: _stencil_config_json(v) for s, v in cfg.items()}
    if isinstance(cfg, dict):
        return [[*k, v] for k, v in cfg.items()]
    return cfg


def _stencil_config_parse(cfg):
    if isinstance(cfg, dict):
        return {s: _stencil_config_parse(v) for s, v in cfg.items()}
    if isinstance(cfg, list):
        return {tuple(int(x) for x in item[:3]): float(item[3]) for item in cfg}
    return cfg


def _log_uniform(rng, lo, hi, size):
    if lo <= 0 or hi < lo:
        raise ValidationError(f"bad lifetime range ({lo}, {hi})")
    if np.isinf(lo):
        return np.full(size, np.inf)
    return np.exp(rng.uniform(np.log(lo), np.log(hi), size))


def sample_materials(config: GroundTruthConfig) -> MaterialMap:
    """Draw a ground-truth map; the same seed always gives the same map."""
    r = config.ranges()
    M, N, P = config.grid.shape
    b = config.block
    shape = (M // b, N // b, P)
    rng = np.random.default_rng(config.seed)
    dt = config.grid.dt

    def drift(key):
        lo, hi = r[key]
        if not (0 <= lo <= hi <= 1):
            raise ValidationError(f"{key} range ({lo}, {hi}) outside [0, 1]")
        return rng.uniform(lo, hi, shape)

    def weights(key, n=None):
        size = shape if n is None else (n, *shape)
        return lifetime_to_weight(_log_uniform(rng, *r[key], size), dt)

    species = []
    for key, C in ((ELECTRON, config.n_centers[0]), (HOLE, config.n_centers[1])):
        d = drift(f"{key}Drift")
        rec = weights("rec_tau")
        trap = weights("trap_tau", C)
        detrap = weights("detrap_tau", C)
        species.append(SpeciesCoefficients(d, rec, trap, detrap))
    mat = MaterialMap(*species)
    if b > 1:
        mat = mat.map(lambda a: np.repeat(np.repeat(a, b, axis=-3), b, axis=-2))
    mat.validate()
    return mat


def ground_truth(config: GroundTruthConfig) -> MaterialMap:
    if config.truth_file:
        mat = load_materials(config.truth_file)
        if mat.shape != config.grid.shape:
            raise FormatError(f"truth file grid {mat.shape} does not match {config.grid.shape}")
        return mat
    return sample_materials(config)


def config_stencils(config: GroundTruthConfig) -> dict:
    cfg = config.stencil
    per = cfg if isinstance(cfg, dict) and set(cfg) <= set(SPECIES) and cfg else {s: cfg for s in SPECIES}
    return {s: build_drift_stencil(per.get(s, "uniform"), config.grid, s) for s in SPECIES}


def config_field(config: GroundTruthConfig) -> WeightingPotentialField:
    if config.field_mode == "file":
        if not config.field_file:
            raise ConfigError("field_mode 'file' needs field_file")
        return load_weighting_potential(config.field_file, config.grid)
    return build_weighting_potential(config.layout, config.grid, config.field_mode)


# ---------------------------------------------------------------------------
# the dataset


@dataclass
class TrainingSample:
    injection: list[Injection]
    signals: np.ndarray  # (T, E)
    q_e: np.ndarray  # (T, M, N, P)
    qt_e: np.ndarray  # (T, Z, M, N, P)
    q_h: np.ndarray
    qt_h: np.ndarray  # (T, R, M, N, P)


@dataclass
class Dataset:
    grid: GridSpec
    field: WeightingPotentialField
    injections: list[list[Injection]]
    q0: np.ndarray  # (B, M, N, P)
    signals: np.ndarray  # (B, T, E)
    q_e: np.ndarray  # (B, T, M, N, P)
    qt_e: np.ndarray  # (B, T, Z, M, N, P)
    q_h: np.ndarray
    qt_h: np.ndarray  # (B, T, R, M, N, P)
    boundary: str = "closed-lateral"
    mode: str = "conservative"
    truth: MaterialMap | None = None
    truth_stencils: dict | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.q0.shape[0]

    @property
    def n_centers(self) -> tuple[int, int]:
        return self.qt_e.shape[2], self.qt_h.shape[2]

    @property
    def has_truth(self) -> bool:
        return self.truth is not None

    def traces(self) -> dict:
        return {k: getattr(self, k) for k in TRACE_ARRAYS}

    def sample(self, b: int) -> TrainingSample:
        return TrainingSample(self.injections[b], *(getattr(self, k)[b] for k in TRACE_ARRAYS))

    def __len__(self):
        return self.n_samples

    def injection_depths(self) -> list[int]:
        return sorted({inj.voxel[2] for g in self.injections for inj in g})

    def injected_columns(self) -> list[tuple[int, int]]:
        cols = np.argwhere(np.any(self.q0 != 0, axis=(0, 3)))
        return [tuple(int(v) for v in c) for c in cols]

    def validate(self, tol: float = 1e-9) -> None:
        B = self.n_samples
        T = self.grid.T
        shape = self.grid.shape
        E = self.field.n_electrodes
        expect = {
            "q0": (B, *shape),
            "signals": (B, T, E),
            "q_e": (B, T, *shape),
            "qt_e": (B, T, self.qt_e.shape[2], *shape),
            "q_h": (B, T, *shape),
            "qt_h": (B, T, self.qt_h.shape[2], *shape),
        }
        for name, shp in expect.items():
            if getattr(self, name).shape != shp:
                raise FormatError(f"{name} has shape {getattr(self, name).shape}, expected {shp}")
        if len(self.injections) != B:
            raise FormatError("injection list does not match the number of samples")
        total = self.q0.reshape(B, -1).sum(axis=1)
        bound = np.maximum(total, 1.0)
        for name in ("q_e", "qt_e", "q_h", "qt_h"):
            a = getattr(self, name).reshape(B, -1)
            if a.size and (a.min() < -tol or np.any(a.max(axis=1) > bound + tol)):
                raise ValidationError(f"{name} outside [0, injected charge]")
        s = np.abs(self.signals).reshape(B, -1)
        if s.size and np.any(s.max(axis=1) > bound + tol):
            raise ValidationError("signals exceed the injected charge in magnitude")
        self.field.validate(tol=1e-6)
        if self.truth is not None:
            if self.truth.shape != shape:
                raise FormatError("ground truth grid does not match the dataset grid")
            self.truth.validate(tol=1e-9)
        if self.truth_stencils:
            for st in self.truth_stencils.values():
                st.validate(tol=1e-9)


def _simulate_chunk(args):
    grid, materials, stencils, field_, boundary, mode, q0 = args
    tp = Transport(grid, materials, stencils, field_, boundary, mode)
    tr = tp.run(q0)
    return {"signals": tr.signals, "q_e": tr.q_e, "qt_e": tr.qt_e, "q_h": tr.q_h, "qt_h": tr.qt_h}


def _chunks(B: int, per_sample: int, budget: int = 8_000_000) -> list[slice]:
    size = max(1, budget // max(per_sample, 1))
    return [slice(a, min(a + size, B)) for a in range(0, B, size)]


def generate(
    config: GroundTruthConfig,
    workers: int = 1,
    out: str | Path | None = None,
    factor: int = 1,
    fine_out: str | Path | None = None,
) -> Dataset:
    """Simulate every injection with the ground-truth model.

    With ``factor > 1`` each chunk of samples is block-averaged as soon as it
    is simulated, so the full-resolution traces never sit in memory at once;
    ``fine_out`` additionally streams them to disk.  Returns the (possibly
    downsampled) dataset, also saved to ``out`` when given.
    """
    grid = config.grid
    truth = ground_truth(config)
    stencils = config_stencils(config)
    field_ = config_field(config)
    q0 = injection_field(config.injections, grid)
    B = q0.shape[0]
    C = sum(config.n_centers) + 2
    per_sample = grid.T * grid.n_voxels * C
    slices = _chunks(B, per_sample)
    tasks = [(grid, truth, stencils, field_, config.boundary, config.mode, q0[s]) for s in slices]
    provenance = {"seed": config.seed, "generator": f"czt3d {__version__}", "config": config.to_dict()}
    fine_stub = Dataset(grid, field_, config.injections, q0, *(np.empty((0,)),) * 5, config.boundary, config.mode,
                        truth, _nonuniform(stencils), provenance)
    coarse_field, groups = (downsample_field(field_, factor) if factor > 1 else (field_, None))

    writer = _StreamWriter(fine_out, fine_stub) if fine_out is not None else None
    parts = {k: [] for k in TRACE_ARRAYS}
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 and len(tasks) > 1 else None
    try:
        results = pool.map(_simulate_chunk, tasks) if pool else map(_simulate_chunk, tasks)
        for res in results:
            if writer is not None:
                writer.append(res)
            if factor > 1:
                res = _downsample_traces(res, factor, groups)
            for k in TRACE_ARRAYS:
                parts[k].append(res[k])
    finally:
        if pool:
            pool.shutdown()
    if writer is not None:
        writer.commit()
    arrays = {k: np.concatenate(v) for k, v in parts.items()}
    ds = Dataset(grid, field_, config.injections, q0, **arrays, boundary=config.boundary, mode=config.mode,
                 truth=truth, truth_stencils=_nonuniform(stencils), provenance=provenance)
    if factor > 1:
        ds = _downsample_meta(ds, factor, coarse_field)
    if out is not None:
        save(ds, out)
    return ds


def _nonuniform(stencils: dict) -> dict | None:
    keep = {s: st for s, st in stencils.items() if not st.is_uniform()}
    return keep or None


# ---------------------------------------------------------------------------
# downsampling and subsets


def _downsample_traces(arrays: dict, factor: int, groups) -> dict:
    f2 = factor * factor
    out = {}
    for k in ("q_e", "qt_e", "q_h", "qt_h"):
        out[k] = downsample(arrays[k], factor, axes=(-3, -2))
    sig = arrays["signals"]
    out["signals"] = np.stack([sig[..., g].sum(axis=-1) for g in groups], axis=-1) / f2
    return out


def _downsample_meta(ds: Dataset, factor: int, coarse_field: WeightingPotentialField) -> Dataset:
    """Everything except the traces: grid, q0, injections, ground truth."""
    grid = ds.grid.with_(M=ds.grid.M // factor, N=ds.grid.N // factor)
    f2 = factor * factor
    injections = []
    for g in ds.injections:
        merged: dict[tuple, float] = {}
        for inj in g:
            i, j, k = inj.voxel
            key = (i // factor, j // factor, k)
            merged[key] = merged.get(key, 0.0) + inj.magnitude / f2
        injections.append([Injection(v, m) for v, m in merged.items()])
    truth = ds.truth.map(lambda a: downsample(a, factor, axes=(-3, -2))) if ds.truth is not None else None
    st = None
    if ds.truth_stencils:
        st = {s: DriftStencil(s, downsample(x.fractions, factor, axes=(-3, -2))) for s, x in ds.truth_stencils.items()}
    prov = dict(ds.provenance)
    prov["downsampled"] = {"factor": factor, "from": list(ds.grid.shape)}
    return replace(ds, grid=grid, field=coarse_field, injections=injections,
                   q0=downsample(ds.q0, factor, axes=(-3, -2)), truth=truth, truth_stencils=st, provenance=prov)


def downsample_dataset(ds: Dataset, factor: int) -> Dataset:
    """Block-average every per-subpixel array by ``factor`` along OX and OY.

    Charges, initial charge, potentials and ground truth are block means.
    Anode subpixels falling in one block merge into one electrode whose
    potential is the sum of theirs; signals are summed over merged electrodes
    and divided by ``factor**2``, which keeps them equal to what the coarse
    model induces from the block-mean charge.
    """
    factor = int(factor)
    if factor == 1:
        return replace(ds, **{k: getattr(ds, k).copy() for k in ("q0", *TRACE_ARRAYS)})
    if ds.grid.M % factor or ds.grid.N % factor:
        raise FormatError(f"grid {ds.grid.M}x{ds.grid.N} not divisible by {factor}")
    coarse_field, groups = downsample_field(ds.field, factor)
    arrays = _downsample_traces(ds.traces(), factor, groups)
    return _downsample_meta(replace(ds, **arrays), factor, coarse_field)


def _contiguous(idx, n, what) -> slice:
    idx = sorted(int(i) for i in idx)
    if not idx:
        raise DomainError(f"empty {what} selection")
    if idx[0] < 0 or idx[-1] >= n:
        raise DomainError(f"{what} {idx} outside 0..{n - 1}")
    if idx != list(range(idx[0], idx[-1] + 1)):
        raise DomainError(f"{what} {idx} do not form a rectangle")
    return slice(idx[0], idx[-1] + 1)


def subset_region(ds: Dataset, rows: Sequence[int], cols: Sequence[int]) -> Dataset:
    """Keep the OX-OY rectangle ``rows x cols`` over all OZ, with a virtual boundary.

    Electrodes keep their identity; their potentials are restricted to the
    region.  Injections outside the region are dropped from their samples.
    """
    si = _contiguous(rows, ds.grid.M, "rows")
    sj = _contiguous(cols, ds.grid.N, "cols")
    lat = (Ellipsis, si, sj, slice(None))
    grid = ds.grid.with_(M=si.stop - si.start, N=sj.stop - sj.start)
    fld = ds.field
    field_ = WeightingPotentialField(fld.names, fld.phi[lat].copy(), fld.anode_plane[:, si, sj].copy(),
                                     fld.cathode_plane[:, si, sj].copy(), fld.mode)
    injections = [[Injection((i - si.start, j - sj.start, k), inj.magnitude)
                   for inj in g for (i, j, k) in [inj.voxel] if si.start <= i < si.stop and sj.start <= j < sj.stop]
                  for g in ds.injections]
    arrays = {k: getattr(ds, k)[lat].copy() for k in ("q0", "q_e", "qt_e", "q_h", "qt_h")}
    truth = ds.truth.map(lambda a: a[lat].copy()) if ds.truth is not None else None
    st = None
    if ds.truth_stencils:
        st = {s: DriftStencil(s, x.fractions[lat].copy()) for s, x in ds.truth_stencils.items()}
    prov = dict(ds.provenance)
    prov["region"] = {"rows": [si.start, si.stop - 1], "cols": [sj.start, sj.stop - 1]}
    return replace(ds, grid=grid, field=field_, injections=injections, signals=ds.signals.copy(), **arrays,
                   boundary="virtual-boundary", truth=truth, truth_stencils=st, provenance=prov)


# ---------------------------------------------------------------------------
# disk format


def _write(path: Path, arr) -> None:
    np.ascontiguousarray(arr, dtype="<f8").tofile(path)


def _entry(name: str, shape) -> dict:
    return {"name": name, "file": f"{name}.f64", "shape": [int(s) for s in shape], "dtype": "<f8"}


def _read(directory: Path, entry: dict) -> np.ndarray:
    if entry.get("dtype", "<f8") != "<f8":
        raise FormatError(f"{entry['name']}: unsupported element type {entry['dtype']}")
    path = directory / entry["file"]
    if not path.exists():
        raise FormatError(f"missing array file {entry['file']}")
    shape = tuple(entry["shape"])
    expected = int(np.prod(shape)) * 8
    size = path.stat().st_size
    if size != expected:
        raise FormatError(f"{entry['file']}: {size} bytes, expected {expected} for shape {shape}")
    return np.fromfile(path, dtype="<f8").reshape(shape).astype(float)


def _material_arrays(mat: MaterialMap) -> dict:
    out = {}
    for s in SPECIES:
        for k, a in mat.species(s).arrays().items():
            out[f"{s}_{k}"] = a
    return out


def save_materials(mat: MaterialMap, directory: str | Path, stem: str = "truth", stencils: dict | None = None) -> Path:
    """Write a coefficient map as ``<stem>.json`` plus one array file per coefficient."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    arrays = _material_arrays(mat)
    for s, st in (stencils or {}).items():
        arrays[f"{s}_stencil"] = st.fractions
    for name, a in arrays.items():
        e = _entry(f"{stem}_{name}", a.shape)
        _write(directory / e["file"], a)
        entries.append(e)
    manifest = {"version": FORMAT_VERSION, "shape": list(mat.shape), "arrays": entries}
    path = directory / f"{stem}.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def _load_material_bundle(path: str | Path) -> tuple[MaterialMap, dict | None]:
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("version") != FORMAT_VERSION:
        raise VersionError(f"{path.name}: version {manifest.get('version')}, expected {FORMAT_VERSION}")
    arrays = {}
    for e in manifest["arrays"]:
        key = e["name"].split("_", 1)[1]
        arrays[key] = _read(path.parent, e)
    try:
        species = [SpeciesCoefficients(arrays[f"{s}_drift"], arrays[f"{s}_rec"], arrays[f"{s}_trap"], arrays[f"{s}_detrap"])
                   for s in SPECIES]
    except KeyError as exc:
        raise FormatError(f"{path.name}: missing coefficient {exc}") from exc
    mat = MaterialMap(*species)
    mat.validate(tol=1e-9)
    stencils = {s: DriftStencil(s, arrays[f"{s}_stencil"]) for s in SPECIES if f"{s}_stencil" in arrays}
    for st in stencils.values():
        st.validate(tol=1e-9)
    return mat, stencils or None


def load_materials(path: str | Path) -> MaterialMap:
    return _load_material_bundle(path)[0]


def _trace_entries(ds: Dataset) -> list[dict]:
    return [_entry(k, getattr(ds, k).shape) for k in ("q0", *TRACE_ARRAYS)]


def _manifest(ds: Dataset, entries: list[dict], truth_ref) -> dict:
    return {
        "version": FORMAT_VERSION,
        "grid": ds.grid.to_dict(),
        "electrodes": list(ds.field.names),
        "boundary": ds.boundary,
        "mode": ds.mode,
        "injections": _groups_to_json(ds.injections),
        "arrays": entries,
        "weighting": "weighting.json",
        "ground_truth": truth_ref,
        "provenance": ds.provenance,
    }


def _commit(directory: Path, manifest: dict) -> Path:
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, default=_json_default))
    path = directory / "manifest.json"
    os.replace(tmp, path)
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o))


def save(ds: Dataset, directory: str | Path) -> Path:
    """Write arrays first and ``manifest.json`` last."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = _trace_entries(ds)
    for e in entries:
        _write(directory / e["file"], getattr(ds, e["name"]))
    save_weighting_potential(ds.field, directory, "weighting")
    truth_ref = None
    if ds.truth is not None:
        save_materials(ds.truth, directory, "truth", ds.truth_stencils)
        truth_ref = "truth.json"
    return _commit(directory, _manifest(ds, entries, truth_ref))


class _StreamWriter:
    """Appends chunks of samples to the array files, then commits the manifest."""

    def __init__(self, directory, stub: Dataset):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.stub = stub
        self.count = 0
        self.shapes = {}
        for k in TRACE_ARRAYS:
            (self.dir / f"{k}.f64").write_bytes(b"")

    def append(self, res: dict) -> None:
        for k in TRACE_ARRAYS:
            with open(self.dir / f"{k}.f64", "ab") as fh:
                np.ascontiguousarray(res[k], dtype="<f8").tofile(fh)
            self.shapes[k] = res[k].shape[1:]
        self.count += res["signals"].shape[0]

    def commit(self) -> Path:
        ds = self.stub
        _write(self.dir / "q0.f64", ds.q0)
        entries = [_entry("q0", ds.q0.shape)] + [_entry(k, (self.count, *self.shapes[k])) for k in TRACE_ARRAYS]
        save_weighting_potential(ds.field, self.dir, "weighting")
        truth_ref = None
        if ds.truth is not None:
            save_materials(ds.truth, self.dir, "truth", ds.truth_stencils)
            truth_ref = "truth.json"
        return _commit(self.dir, _manifest(ds, entries, truth_ref))


def load(path: str | Path, validate: bool = True) -> Dataset:
    """Load a dataset from its directory or ``manifest.json``.

    Raises VersionError, FormatError or ValidationError (distinct exit
    codes).  A ground-truth reference whose file is missing only warns and
    leaves ``truth`` unset.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FormatError(f"no manifest at {path}")
    directory = path.parent
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    if manifest.get("version") != FORMAT_VERSION:
        raise VersionError(f"dataset version {manifest.get('version')}, this reader handles {FORMAT_VERSION}")
    try:
        grid = GridSpec.from_dict(manifest["grid"])
        entries = {e["name"]: e for e in manifest["arrays"]}
        arrays = {k: _read(directory, entries[k]) for k in ("q0", *TRACE_ARRAYS)}
    except KeyError as exc:
        raise FormatError(f"manifest lacks {exc}") from exc
    field_ = load_weighting_potential(directory / manifest.get("weighting", "weighting.json"), grid)
    if list(field_.names) != list(manifest["electrodes"]):
        raise FormatError("electrode list differs from the weighting potential file")
    truth = stencils = None
    ref = manifest.get("ground_truth")
    if ref:
        tpath = directory / ref
        if tpath.exists():
            truth, stencils = _load_material_bundle(tpath)
        else:
            warnings.warn(f"ground truth {ref} not found; dataset is evaluation-only", stacklevel=2)
    ds = Dataset(grid, field_, _as_groups(manifest["injections"]), arrays["q0"],
                 *(arrays[k] for k in TRACE_ARRAYS), boundary=manifest.get("boundary", "closed-lateral"),
                 mode=manifest.get("mode", "conservative"), truth=truth, truth_stencils=stencils,
                 provenance=manifest.get("provenance", {}))
    if validate:
        ds.validate()
    return ds


def export_csv(ds: Dataset, directory: str | Path) -> list[Path]:
    """Human-readable copies: ``charges.csv`` (one row per sample, step, voxel) and ``signals.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    Z, R = ds.n_centers
    B, T = ds.n_samples, ds.grid.T
    M, N, P = ds.grid.shape
    charges = directory / "charges.csv"
    with open(charges, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "t", "i", "j", "k", "q_e", *[f"qt_e{z + 1}" for z in range(Z)], "q_h",
                    *[f"qt_h{r + 1}" for r in range(R)]])
        ii, jj, kk = np.meshgrid(np.arange(M), np.arange(N), np.arange(P), indexing="ij")
        idx = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
        for b in range(B):
            for t in range(T):
                cols = [ds.q_e[b, t].ravel()[:, None], ds.qt_e[b, t].reshape(Z, -1).T,
                        ds.q_h[b, t].ravel()[:, None], ds.qt_h[b, t].reshape(R, -1).T]
                vals = np.concatenate(cols, axis=1)
                for (i, j, k), row in zip(idx, vals):
                    w.writerow([b, t + 1, i, j, k, *(repr(float(v)) for v in row)])
    signals = directory / "signals.csv"
    with open(signals, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "t", *ds.field.names])
        for b in range(B):
            for t in range(T):
                w.writerow([b, t + 1, *(repr(float(v)) for v in ds.signals[b, t])])
    return [charges, signals]


def direct_dataset(grid: GridSpec, materials: MaterialMap, field_: WeightingPotentialField, injections,
                   stencils: dict | None = None, boundary: str = "closed-lateral", mode: str = "conservative") -> Dataset:
    """Dataset simulated straight from a given coefficient map (no sampling)."""
    groups = _as_groups(injections)
    q0 = injection_field(groups, grid)
    st = stencils or {}
    res = _simulate_chunk((grid, materials, st, field_, boundary, mode, q0))
    return Dataset(grid, field_, groups, q0, **res, boundary=boundary, mode=mode, truth=materials.copy(),
                   truth_stencils=_nonuniform(st) if st else None,
                   provenance={"generator": f"czt3d {__version__}"})
