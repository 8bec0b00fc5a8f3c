import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from czt3d.dataset import GroundTruthConfig, column_injections, direct_dataset, generate
from czt3d.errors import ConfigError, FormatError, MissingGroundTruth, VersionError
from czt3d.lattice import GridSpec, MaterialMap, SpeciesCoefficients, build_weighting_potential
from czt3d.trainer import (
    AdamState,
    InitConfig,
    LossConfig,
    Objective,
    ScheduleConfig,
    TrainableWeights,
    TrainConfig,
    adam_step,
    dataset_err_report,
    default_ranges,
    err_metric,
    finite_diff_grad,
    gradient_check,
    initial_state,
    load_checkpoint,
    loss,
    lr_schedule,
    profiles,
    project_weights,
    random_problem,
    save_checkpoint,
    train,
    write_loss_csv,
    write_profiles,
)


@pytest.fixture(scope="module")
def column_ds():
    g = GridSpec(1, 1, 12, T=14)
    return generate(GroundTruthConfig(g, column_injections([(0, 0)], [3, 5]), seed=2))


# --- optimizer pieces --------------------------------------------------------


def test_first_adam_step_by_hand():
    w = TrainableWeights.initial((1, 1, 2))
    params = w.params()
    grads = {k: np.zeros_like(a) for k, a in params.items()}
    grads["e.drift"][0, 0, 0] = 2.0
    state = AdamState.zeros_like(params, lr=5e-4)
    new, st2 = adam_step(state, grads, w)
    # m = 0.2, v = 0.004; bias corrected mhat = 2, vhat = 4
    assert st2.m["e.drift"][0, 0, 0] == pytest.approx(0.2)
    assert st2.v["e.drift"][0, 0, 0] == pytest.approx(0.004)
    assert new.materials.electron.drift[0, 0, 0] == pytest.approx(0.5 - 5e-4 * 2 / (2 + 1e-8), abs=1e-15)
    assert new.materials.electron.drift[0, 0, 1] == 0.5
    assert st2.t == 1


def test_projection_examples():
    sp = SpeciesCoefficients(np.array([1.3]), np.array([0.4]), np.array([[0.9]]), np.array([[-0.2]]))
    h = SpeciesCoefficients(np.array([0.3]), np.array([0.0]), np.array([[0.2], [0.1]]), np.array([[0.1], [0.1]]))
    p = project_weights(TrainableWeights(MaterialMap(sp, h)))
    e = p.materials.electron
    assert e.drift[0] == 1.0 and e.detrap[0, 0] == 0.0
    assert e.rec[0] + e.trap[0, 0] == pytest.approx(1.0)
    assert e.rec[0] / e.trap[0, 0] == pytest.approx(0.4 / 0.9)
    assert np.array_equal(p.materials.hole.trap, h.trap)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 3.0))
def test_projection_idempotent_and_feasible(seed, spread):
    rng = np.random.default_rng(seed)
    shape = (2, 1, 3)
    sp = [SpeciesCoefficients(*(rng.normal(0.5, spread, s) for s in (shape, shape, (C, *shape), (C, *shape))))
          for C in (1, 2)]
    stn = {s: rng.normal(0.1, spread, (18, *shape)) for s in "eh"}
    p = project_weights(TrainableWeights(MaterialMap(*sp), stn))
    for s in (p.materials.electron, p.materials.hole):
        for a in (s.drift, s.rec, s.trap, s.detrap):
            assert a.min() >= 0 and a.max() <= 1
        assert np.all(s.rec + s.trap.sum(axis=0) <= 1 + 1e-12)
    for a in p.stencils.values():
        assert a.min() >= 0 and np.allclose(a.sum(axis=0), 1)
    again = project_weights(p)
    for k, a in p.params().items():
        assert np.allclose(again.params()[k], a, rtol=0, atol=1e-15)


def test_fixed_lr_schedule():
    cfg = ScheduleConfig(lr0=5e-4, lr1=1e-5, drop_epoch=10)
    assert lr_schedule(9, [], cfg) == (5e-4, None)
    assert lr_schedule(10, [], cfg) == (1e-5, 10)
    assert lr_schedule(3, [], cfg, dropped_at=2) == (1e-5, 2)


def test_oscillation_trigger():
    cfg = ScheduleConfig(trigger="oscillation", window=5, ratio=2.0)
    smooth = list(np.linspace(10, 9, 10))
    assert lr_schedule(10, smooth, cfg) == (5e-4, None)
    noisy = list(np.linspace(10, 9.9, 5)) + [9, 9.8, 8, 9.9, 7]
    assert lr_schedule(10, noisy, cfg) == (1e-5, 10)
    # a steep but monotone decrease never triggers
    steep = list(np.linspace(10, 9.9, 5)) + [9, 7, 4, 2, 1]
    assert lr_schedule(10, steep, cfg)[1] is None


def test_schedule_config_validation():
    with pytest.raises(ConfigError):
        ScheduleConfig(lr0=1e-5, lr1=5e-4)
    with pytest.raises(ConfigError):
        ScheduleConfig(trigger="cosine")
    with pytest.raises(ConfigError):
        LossConfig(k=-1)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 3, "momentum": 0.9})


def test_train_config_round_trip():
    cfg = TrainConfig(epochs=7, schedule=ScheduleConfig(drop_epoch=3), learn_stencil=True)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


# --- loss --------------------------------------------------------------------


def test_loss_weights_terms():
    z = {k: np.zeros((1, 2)) for k in ("signals", "q_e", "qt_e", "q_h", "qt_h")}
    m = dict(z, signals=np.array([[1.0, 0.0]]), q_e=np.array([[0.1, 0.0]]), qt_h=np.array([[0.0, 0.2]]))
    t = loss(m, z)
    assert t.signal == 1.0
    assert t.total == pytest.approx(1.0 + 1000 * 0.01 + 1000 * 0.04)
    with pytest.raises(FormatError):
        loss(dict(m, q_h=np.zeros(3)), z)


def test_loss_is_zero_at_truth(column_ds):
    obj = Objective(column_ds)
    t = obj(TrainableWeights.from_truth(column_ds), grad=False)[0]
    assert t.total < 1e-28


def test_consistency_term_contributes_nothing(column_ds):
    w = TrainableWeights.initial(column_ds.grid.shape)
    plain = Objective(column_ds)(w)
    cons = Objective(column_ds, LossConfig(voltage="signal-consistency"))(w)
    assert cons[0].voltage < 1e-25
    for k in plain[1]:
        assert np.allclose(plain[1][k], cons[1][k], rtol=1e-12, atol=0)


# --- gradient ----------------------------------------------------------------


def test_gradient_matches_full_finite_differences(column_ds):
    w = TrainableWeights.initial(column_ds.grid.shape, init=InitConfig(jitter=0.02))
    obj = Objective(column_ds)
    g = obj(w)[1]
    fd = finite_diff_grad(lambda x: obj(x, grad=False)[0].total, w, 1e-6)
    for k in g:
        scale = np.abs(g[k]).max() + 1e-12
        assert np.abs(g[k] - fd[k]).max() / scale < 1e-5, k


def test_gradient_check_passes_and_negative_control_fails():
    assert gradient_check((2, 2, 6), 8, draws=3, seed=1).passed
    bad = gradient_check((2, 2, 6), 8, draws=1, seed=1, corrupt=1e-3)
    assert not bad.passed and bad.max_rel > 5e-4


def test_zero_gradient_where_charge_never_goes():
    g = GridSpec(2, 1, 10, T=6)
    f = build_weighting_potential("subpixel", g, "small-pixel-analytic")
    truth = TrainableWeights.initial(g.shape, init=InitConfig(drift=0.7)).materials
    ds = direct_dataset(g, truth, f, [(0, 0, 4)])
    w = TrainableWeights.initial(g.shape, init=InitConfig(jitter=0.05), seed=3)
    grads = Objective(ds)(w)[1]
    # electrons start at 4 and move towards larger k within column 0
    assert np.all(grads["e.drift"][1] == 0)
    assert np.all(grads["e.drift"][0, 0, :4] == 0)
    assert np.all(grads["h.trap"][:, 0, 0, 5:] == 0)
    assert np.any(grads["e.drift"][0, 0, 4:] != 0)


def test_hole_center_relabel_symmetry():
    rng = np.random.default_rng(5)
    ds, w = random_problem(rng, (2, 2, 6), 8, learn_stencil=False)
    base_t, base_g = Objective(ds)(w)
    swapped_ds = type(ds)(**{**ds.__dict__, "qt_h": ds.qt_h[:, :, ::-1].copy()})
    hole = w.materials.hole
    sw = TrainableWeights(MaterialMap(w.materials.electron,
                                      SpeciesCoefficients(hole.drift, hole.rec, hole.trap[::-1].copy(),
                                                          hole.detrap[::-1].copy())))
    t, g = Objective(swapped_ds)(sw)
    assert t.total == pytest.approx(base_t.total, rel=1e-12)
    assert np.allclose(g["h.trap"], base_g["h.trap"][::-1], rtol=1e-10, atol=1e-300)
    assert np.allclose(g["e.drift"], base_g["e.drift"], rtol=1e-10, atol=1e-300)


# --- error metric ------------------------------------------------------------


def test_err_metric_examples():
    assert err_metric(np.full(5, 1.1), np.ones(5), (0, 4))[0] == pytest.approx(0.1)
    assert err_metric(np.ones(5), np.ones(5), (0, 4))[0] == 0.0
    # per-subpixel values are averaged, not pooled
    learned = np.ones((2, 1, 3))
    learned[1] = 1.3
    err, per = err_metric(learned, np.ones((2, 1, 3)), (0, 2))
    assert per[(1, 0)] == pytest.approx(0.3) and err == pytest.approx(0.15)


def test_err_metric_skips_zero_truth():
    truth = np.array([1.0, 0.0, 2.0])
    with pytest.warns(UserWarning):
        err, _ = err_metric(np.array([1.0, 5.0, 2.2]), truth, (0, 2))
    assert err == pytest.approx(math.sqrt(0.01 / 2))


def test_default_ranges():
    r = default_ranges(["eDrift", "eRec", "hT1", "hRec"], [77, 79], 100)
    assert r == {"eDrift": (77, 99), "eRec": (77, 92), "hT1": (69, 79), "hRec": (69, 79)}


def test_profiles_written(column_ds, tmp_path):
    w = TrainableWeights.from_truth(column_ds)
    rep = dataset_err_report(column_ds, w)
    assert rep.mean == 0.0
    prof = profiles(w, column_ds.truth, {"eDrift": (3, 5)}, [(0, 0)])
    paths = write_profiles(prof, tmp_path)
    assert paths[0].read_text().count("\n") == 4
    rep.write_csv(tmp_path / "err.csv")
    assert "mean" in (tmp_path / "err.csv").read_text()


# --- training loop -----------------------------------------------------------


def test_fixed_point_at_truth(column_ds):
    res = train(column_ds, TrainConfig(epochs=30), initial_state(column_ds, TrainConfig(),
                                                                 TrainableWeights.from_truth(column_ds)))
    assert max(r[2] for r in res.history) < 1e-20
    assert res.err.mean == 0.0


def test_toy_drift_chain_recovers_drift():
    # drift-only truth on a single 10-voxel column; every coefficient is learned
    g = GridSpec(1, 1, 10, T=30)
    chain = {"trap_tau": (np.inf, np.inf), "detrap_tau": (np.inf, np.inf), "rec_tau": (np.inf, np.inf)}
    ds = generate(GroundTruthConfig(g, column_injections([(0, 0)], [2]), profile=chain, seed=8))
    cfg = TrainConfig(epochs=4999, schedule=ScheduleConfig(drop_epoch=4500),
                      err_ranges={"eDrift": (2, 9), "hDrift": (0, 2)})
    res = train(ds, cfg)
    assert res.err.values["eDrift"].err < 1e-3
    assert res.err.values["hDrift"].err < 1e-2


def test_training_is_deterministic(column_ds):
    cfg = TrainConfig(epochs=20, init=InitConfig(jitter=0.01), seed=4)
    a, b = train(column_ds, cfg), train(column_ds, cfg)
    assert a.history == b.history
    assert np.array_equal(a.weights.materials.hole.trap, b.weights.materials.hole.trap)


def test_epochs_zero_records_initial_loss(column_ds):
    res = train(column_ds, TrainConfig(epochs=0))
    assert len(res.history) == 1 and res.history[0][0] == 0


def test_resume_equals_uninterrupted(column_ds, tmp_path):
    cfg = TrainConfig(epochs=12, schedule=ScheduleConfig(drop_epoch=6))
    full = train(column_ds, cfg)
    half = train(column_ds, TrainConfig(epochs=5, schedule=cfg.schedule))
    save_checkpoint(half.state, tmp_path, cfg)
    state, saved = load_checkpoint(tmp_path)
    assert saved == cfg
    rest = train(column_ds, cfg, state)
    assert np.array_equal(rest.weights.materials.electron.drift, full.weights.materials.electron.drift)
    assert [r[2] for r in rest.history] == [r[2] for r in full.history]


def test_checkpoint_errors(tmp_path, column_ds):
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path)
    save_checkpoint(initial_state(column_ds, TrainConfig()), tmp_path)
    meta = json.loads((tmp_path / "checkpoint.json").read_text())
    meta["version"] = 7
    (tmp_path / "checkpoint.json").write_text(json.dumps(meta))
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path)


def test_plateau_stop_only_after_drop(column_ds):
    cfg = TrainConfig(epochs=400, schedule=ScheduleConfig(drop_epoch=50), plateau_window=20, plateau_tol=0.5)
    res = train(column_ds, cfg)
    assert res.stopped == "plateau"
    assert 70 <= res.state.epoch < 400


def test_loss_csv(tmp_path, column_ds):
    res = train(column_ds, TrainConfig(epochs=3))
    p = write_loss_csv(res.history, tmp_path / "loss.csv")
    lines = p.read_text().splitlines()
    assert lines[0] == "epoch,lr,loss,signal,voltage,electron,hole" and len(lines) == 5


def test_missing_truth_report():
    g = GridSpec(1, 1, 4, T=2)
    ds = generate(GroundTruthConfig(g, [(0, 0, 1)]))
    ds.truth = None
    with pytest.raises(MissingGroundTruth):
        dataset_err_report(ds, TrainableWeights.initial(g.shape))
    with pytest.raises(MissingGroundTruth):
        TrainableWeights.from_truth(ds)
