import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from czt3d.dataset import (
    PROFILES,
    GroundTruthConfig,
    column_injections,
    direct_dataset,
    downsample_dataset,
    export_csv,
    generate,
    ground_truth,
    load,
    load_materials,
    save,
    save_materials,
    subset_region,
)
from czt3d.errors import ConfigError, DomainError, FormatError, ValidationError, VersionError
from czt3d.lattice import GridSpec, downsample, lifetime_to_weight
from czt3d.transport import simulate


def small_config(**kw):
    g = GridSpec(3, 3, 12, T=8)
    base = dict(grid=g, injections=column_injections([(1, 1), (0, 2)], [6, 8]), seed=4)
    base.update(kw)
    return GroundTruthConfig(**base)


@pytest.fixture
def small_ds():
    return generate(small_config())


def test_generation_is_deterministic(small_ds):
    again = generate(small_config())
    for k in ("q0", "signals", "q_e", "qt_e", "q_h", "qt_h"):
        assert np.array_equal(getattr(small_ds, k), getattr(again, k))
    other = generate(small_config(seed=5))
    assert not np.array_equal(other.signals, small_ds.signals)


def test_workers_do_not_change_results(small_ds):
    par = generate(small_config(), workers=2)
    assert np.array_equal(par.q_e, small_ds.q_e)
    assert np.array_equal(par.signals, small_ds.signals)


def test_profile_ranges_respected():
    cfg = small_config(seed=9)
    m = ground_truth(cfg)
    lo, hi = PROFILES["desk"]["eDrift"]
    assert lo <= m.electron.drift.min() and m.electron.drift.max() <= hi
    lo, hi = PROFILES["desk"]["hDrift"]
    assert lo <= m.hole.drift.min() and m.hole.drift.max() <= hi
    tau_lo, tau_hi = PROFILES["desk"]["trap_tau"]
    w_hi, w_lo = lifetime_to_weight(tau_lo, cfg.grid.dt), lifetime_to_weight(tau_hi, cfg.grid.dt)
    assert w_lo - 1e-15 <= m.hole.trap.min() and m.hole.trap.max() <= w_hi + 1e-15
    m.validate()


def test_block_truth_is_constant_per_block():
    cfg = GroundTruthConfig(GridSpec(6, 6, 10, T=4), column_injections([(0, 0)], [5]), seed=2, block=3)
    m = ground_truth(cfg)
    d = m.electron.drift
    assert np.all(d[:3, :3] == d[0, 0])
    assert not np.all(d[:3, :3] == d[3, 3])


def test_config_validation():
    g = GridSpec(2, 2, 5)
    with pytest.raises(ConfigError):
        GroundTruthConfig(g, [])
    with pytest.raises(ConfigError):
        GroundTruthConfig(g, [(0, 0, 9)])
    with pytest.raises(ConfigError):
        GroundTruthConfig(g, [(0, 0, 1)], block=3)
    with pytest.raises(ConfigError):
        GroundTruthConfig.from_dict({"grid": g.to_dict(), "injections": [[[0, 0, 1]]], "colour": 1})
    with pytest.raises(ConfigError):
        generate(GroundTruthConfig(g, [(0, 0, 1)], profile="nope"))


def test_config_dict_round_trip():
    cfg = small_config(stencil={"e": {(0, 0, 1): 1.0, (1, 0, 1): 0.5}}, boundary="virtual-boundary")
    back = GroundTruthConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back.to_dict() == cfg.to_dict()


def test_trace_matches_direct_simulation(small_ds):
    cfg = small_config()
    m = ground_truth(cfg)
    tr = simulate(cfg.injections, m, None, small_ds.field, cfg.grid)
    assert np.array_equal(tr.q_h, small_ds.q_h)
    assert np.array_equal(tr.signals, small_ds.signals)


# --- disk format -------------------------------------------------------------


def test_save_load_round_trip(small_ds, tmp_path):
    save(small_ds, tmp_path / "d")
    back = load(tmp_path / "d")
    for k in ("q0", "signals", "q_e", "qt_e", "q_h", "qt_h"):
        assert np.array_equal(getattr(back, k), getattr(small_ds, k))
    assert np.array_equal(back.truth.hole.detrap, small_ds.truth.hole.detrap)
    assert back.injections == small_ds.injections
    assert back.provenance["seed"] == 4
    # manifest path works as well as the directory
    assert load(tmp_path / "d" / "manifest.json").n_samples == small_ds.n_samples


def test_generate_streams_to_disk(tmp_path):
    ds = generate(small_config(), out=tmp_path / "d")
    assert np.array_equal(load(tmp_path / "d").q_e, ds.q_e)


def test_truncated_array_is_format_error(small_ds, tmp_path):
    save(small_ds, tmp_path)
    raw = (tmp_path / "q_e.f64").read_bytes()
    (tmp_path / "q_e.f64").write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        load(tmp_path)


def test_missing_manifest_is_format_error(tmp_path):
    with pytest.raises(FormatError):
        load(tmp_path)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(FormatError):
        load(tmp_path)


def test_unknown_version(small_ds, tmp_path):
    save(small_ds, tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    man["version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(VersionError):
        load(tmp_path)


def test_missing_truth_warns(small_ds, tmp_path):
    save(small_ds, tmp_path)
    (tmp_path / "truth.json").unlink()
    with pytest.warns(UserWarning):
        ds = load(tmp_path)
    assert ds.truth is None and not ds.has_truth


def test_validation_catches_out_of_range_charge(small_ds):
    small_ds.validate()
    small_ds.q_e[0, 3, 1, 1, 6] = -0.1
    with pytest.raises(ValidationError):
        small_ds.validate()
    with pytest.raises(FormatError):
        replace(small_ds, signals=small_ds.signals[:, :-1]).validate()


def test_materials_round_trip(tmp_path):
    m = ground_truth(small_config())
    path = save_materials(m, tmp_path)
    back = load_materials(path)
    assert np.array_equal(back.electron.trap, m.electron.trap)
    assert back.kinds() == m.kinds()


def test_export_csv(tmp_path):
    g = GridSpec(1, 1, 4, T=2)
    cfg = GroundTruthConfig(g, [(0, 0, 1)], seed=1, layout="pixel")
    ds = generate(cfg)
    charges, signals = export_csv(ds, tmp_path)
    rows = list(csv.reader(open(charges)))
    assert len(rows) == 1 + 2 * 4
    assert float(rows[1][5]) == ds.q_e[0, 0, 0, 0, 0]
    sig = list(csv.reader(open(signals)))
    assert sig[0][2:] == list(ds.field.names)


# --- subsets and downsampling ------------------------------------------------


def test_subset_of_single_column_matches_isolated_simulation():
    # uniform stencils keep charge in its column, so a virtual-boundary subset
    # of one column evolves exactly like that column on its own
    cfg = GroundTruthConfig(GridSpec(3, 3, 12, T=10), column_injections([(1, 2)], [4, 7]), seed=3)
    full = generate(cfg)
    sub = subset_region(full, [1], [2])
    assert sub.boundary == "virtual-boundary" and sub.grid.shape == (1, 1, 12)
    alone = direct_dataset(sub.grid, sub.truth, sub.field, sub.injections, boundary="virtual-boundary")
    for k in ("q_e", "qt_e", "q_h", "qt_h", "signals"):
        assert np.abs(getattr(sub, k) - getattr(alone, k)).max() < 1e-14
    assert sub.injected_columns() == [(0, 0)]
    sub.validate()


def test_subset_drops_outside_injections_and_rejects_holes():
    cfg = GroundTruthConfig(GridSpec(3, 3, 6, T=3), column_injections([(0, 0), (2, 2)], [3]), seed=3)
    full = generate(cfg)
    sub = subset_region(full, [0, 1], [0, 1])
    assert [len(g) for g in sub.injections] == [1, 0]
    with pytest.raises(DomainError):
        subset_region(full, [0, 2], [0])
    with pytest.raises(DomainError):
        subset_region(full, [3], [0])


def test_downsample_factor_one_is_identity(small_ds):
    same = downsample_dataset(small_ds, 1)
    assert np.array_equal(same.signals, small_ds.signals)
    assert same.q_e is not small_ds.q_e


def test_downsample_indivisible(small_ds):
    with pytest.raises(FormatError):
        downsample_dataset(small_ds, 2)


def test_downsampled_traces_match_coarse_model():
    # block-constant truth, uniform stencils and block-uniform injections:
    # the block-averaged fine traces are exactly what the coarse model produces
    fine = GridSpec(6, 6, 12, T=10)
    inj = [[(3 * I + a, 3 * J + b, k) for a in range(3) for b in range(3)] for I in range(2) for J in range(2) for k in (5, 8)]
    cfg = GroundTruthConfig(fine, inj, seed=6, block=3)
    ds = generate(cfg, factor=3)
    assert ds.grid.shape == (2, 2, 12) and ds.n_samples == 8
    assert np.allclose(ds.q0.sum(axis=(1, 2, 3)), 1.0)
    coarse = direct_dataset(ds.grid, ds.truth, ds.field, ds.injections)
    for k in ("q_e", "qt_e", "q_h", "qt_h", "signals"):
        assert np.abs(getattr(ds, k) - getattr(coarse, k)).max() < 1e-13, k
    # the streaming path agrees with downsampling a full-resolution dataset
    full = generate(cfg)
    assert np.abs(downsample_dataset(full, 3).signals - ds.signals).max() < 1e-15
    assert np.array_equal(downsample(full.q_e, 3, axes=(-3, -2)), ds.q_e)


def test_keep_fine_copy(tmp_path):
    fine = GridSpec(6, 6, 8, T=4)
    cfg = GroundTruthConfig(fine, [[(i, j, 4) for i in range(3) for j in range(3)]], seed=1, block=3)
    ds = generate(cfg, factor=3, out=tmp_path / "c", fine_out=tmp_path / "f")
    f = load(tmp_path / "f")
    assert f.grid.shape == (6, 6, 8) and load(tmp_path / "c").grid.shape == (2, 2, 8)
    assert np.array_equal(downsample_dataset(f, 3).q_h, ds.q_h)


def test_nonuniform_truth_stencil_survives_round_trip(tmp_path):
    cfg = small_config(stencil={"e": {(0, 0, 1): 1.0, (1, 1, 1): 0.25}})
    ds = generate(cfg)
    assert ds.truth_stencils is not None and "e" in ds.truth_stencils
    save(ds, tmp_path)
    back = load(tmp_path)
    assert np.array_equal(back.truth_stencils["e"].fractions, ds.truth_stencils["e"].fractions)
