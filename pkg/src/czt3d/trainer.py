"""Recovering per-voxel coefficients by gradient descent through the recurrence.

The loss compares model traces with the dataset's traces.  Gradients come
from a hand-written reverse pass over the stored forward states (exact
backpropagation through time), the optimizer is ADAM followed by a
projection onto feasible coefficients, and recovery is scored with an RMS
relative error along OZ.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .dataset import Dataset, save_materials, _load_material_bundle, _entry, _read, _write
from .errors import ConfigError, DivergenceError, FormatError, GradientFault, MissingGroundTruth, VersionError
from .lattice import (
    ELECTRON,
    HOLE,
    SPECIES,
    DriftStencil,
    MaterialMap,
    SpeciesCoefficients,
    on_axis_index,
)
from .transport import LocalParams, Transport

COEFFS = ("drift", "rec", "trap", "detrap")
VOLTAGE_MODES = ("disabled", "signal-consistency")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class LossConfig:
    k: float = 1.0
    l: float = 1000.0
    n: float = 1000.0
    voltage: str = "disabled"

    def __post_init__(self):
        if min(self.k, self.l, self.n) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.voltage not in VOLTAGE_MODES:
            raise ConfigError(f"voltage mode must be one of {VOLTAGE_MODES}")


@dataclass
class ScheduleConfig:
    """Learning-rate drop, either at a fixed epoch or when the loss starts oscillating."""

    lr0: float = 5e-4
    lr1: float = 1e-5
    trigger: str = "fixed"  # or "oscillation"
    drop_epoch: int = 1000
    window: int = 50
    ratio: float = 2.0

    def __post_init__(self):
        if not self.lr1 < self.lr0:
            raise ConfigError("drop learning rate must be below the initial one")
        if self.trigger not in ("fixed", "oscillation"):
            raise ConfigError(f"unknown schedule trigger {self.trigger!r}")


@dataclass
class InitConfig:
    drift: float = 0.5
    rec: float = 0.05
    trap: float = 0.05
    detrap: float = 0.05
    off_axis: float = 0.0  # stencil mass spread over the 17 off-axis offsets
    jitter: float = 0.0


@dataclass
class TrainConfig:
    epochs: int = 3000
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    init: InitConfig = field(default_factory=InitConfig)
    learn_stencil: bool = False
    plateau_window: int = 200
    plateau_tol: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    err_ranges: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        try:
            for key, sub in (("loss", LossConfig), ("schedule", ScheduleConfig), ("init", InitConfig)):
                if key in d and isinstance(d[key], dict):
                    d[key] = sub(**d[key])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# weights


@dataclass
class TrainableWeights:
    """Coefficient maps being learned, plus optional stencil fractions ``(18, M, N, P)``."""

    materials: MaterialMap
    stencils: dict | None = None

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for s in SPECIES:
            sp = self.materials.species(s)
            for c in COEFFS:
                out[f"{s}.{c}"] = getattr(sp, c)
            if self.stencils is not None:
                out[f"{s}.stencil"] = self.stencils[s]
        return out

    def copy(self) -> "TrainableWeights":
        st = None if self.stencils is None else {s: a.copy() for s, a in self.stencils.items()}
        return TrainableWeights(self.materials.copy(), st)

    def drift_stencils(self) -> dict | None:
        if self.stencils is None:
            return None
        return {s: DriftStencil(s, a / a.sum(axis=0)) for s, a in self.stencils.items()}

    @classmethod
    def initial(cls, shape, n_centers=(1, 2), init: InitConfig | None = None, learn_stencil: bool = False,
                seed: int = 0) -> "TrainableWeights":
        init = init or InitConfig()
        rng = np.random.default_rng(seed)

        def const(v, s=()):
            a = np.full((*s, *shape), float(v))
            if init.jitter:
                a = a + rng.uniform(-init.jitter, init.jitter, a.shape)
            return a

        sp = [SpeciesCoefficients(const(init.drift), const(init.rec), const(init.trap, (C,)), const(init.detrap, (C,)))
              for C in n_centers]
        st = None
        if learn_stencil:
            st = {}
            for s in SPECIES:
                a = np.full((18, *shape), init.off_axis / 17)
                a[on_axis_index(s)] = 1.0 - init.off_axis
                st[s] = a
        return project_weights(cls(MaterialMap(*sp), st))

    @classmethod
    def from_truth(cls, ds: Dataset, learn_stencil: bool = False) -> "TrainableWeights":
        if ds.truth is None:
            raise MissingGroundTruth("dataset has no ground truth")
        st = None
        if learn_stencil:
            st = {}
            for s in SPECIES:
                if ds.truth_stencils and s in ds.truth_stencils:
                    st[s] = ds.truth_stencils[s].fractions.copy()
                else:
                    a = np.zeros((18, *ds.grid.shape))
                    a[on_axis_index(s)] = 1.0
                    st[s] = a
        return cls(ds.truth.copy(), st)


def project_weights(w: TrainableWeights) -> TrainableWeights:
    """Clamp into [0, 1], rescale ``rec + sum(trap)`` down to 1, renormalize stencils."""
    mats = []
    for s in SPECIES:
        sp = w.materials.species(s)
        drift, rec, trap, detrap = (np.clip(a, 0.0, 1.0) for a in (sp.drift, sp.rec, sp.trap, sp.detrap))
        budget = rec + trap.sum(axis=0)
        scale = np.where(budget > 1.0, 1.0 / np.where(budget > 1.0, budget, 1.0), 1.0)
        mats.append(SpeciesCoefficients(drift, rec * scale, trap * scale, detrap))
    st = None
    if w.stencils is not None:
        st = {}
        for s, a in w.stencils.items():
            a = np.clip(a, 0.0, None)
            tot = a.sum(axis=0)
            empty = tot <= 0
            if np.any(empty):
                a[on_axis_index(s)][empty] = 1.0
                tot = a.sum(axis=0)
            st[s] = a / tot
    return TrainableWeights(MaterialMap(*mats), st)


# ---------------------------------------------------------------------------
# ADAM


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict, lr: float = 5e-4) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.items()}, {k: np.zeros_like(a) for k, a in params.items()},
                   0, lr)


def adam_step(state: AdamState, grads: dict, weights: TrainableWeights) -> tuple[TrainableWeights, AdamState]:
    """Bias-corrected ADAM update at ``state.lr`` followed by projection."""
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new = weights.copy()
    params = new.params()
    m, v = {}, {}
    for k, g in grads.items():
        m[k] = b1 * state.m[k] + (1 - b1) * g
        v[k] = b2 * state.v[k] + (1 - b2) * g * g
        mhat = m[k] / (1 - b1 ** t)
        vhat = v[k] / (1 - b2 ** t)
        params[k] -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return project_weights(new), AdamState(m, v, t, state.lr, b1, b2, state.eps)


def lr_schedule(epoch: int, history, config: ScheduleConfig, dropped_at: int | None = None) -> tuple[float, int | None]:
    """Learning rate for ``epoch`` and the epoch the drop happened (``None`` before it).

    ``history`` holds the losses of the epochs before ``epoch``.  In
    oscillation mode the drop fires when the last ``window`` losses contain
    at least one increase and their variance exceeds ``ratio`` times the
    variance of the window before.
    """
    if dropped_at is not None and epoch >= dropped_at:
        return config.lr1, dropped_at
    if config.trigger == "fixed":
        if epoch >= config.drop_epoch:
            return config.lr1, config.drop_epoch
        return config.lr0, None
    W = config.window
    h = np.asarray(history, dtype=float)
    if len(h) >= 2 * W:
        cur, prev = h[-W:], h[-2 * W:-W]
        if np.any(np.diff(cur) > 0) and np.var(cur) > config.ratio * np.var(prev):
            return config.lr1, epoch
    return config.lr0, None


# ---------------------------------------------------------------------------
# loss and gradient


@dataclass
class LossTerms:
    total: float
    signal: float
    voltage: float
    electron: float
    hole: float


def loss(model: dict, truth: dict, config: LossConfig | None = None, consistency: np.ndarray | None = None) -> LossTerms:
    """Weighted sum of squared trace mismatches.

    ``model`` and ``truth`` map ``signals``, ``q_e``, ``qt_e``, ``q_h`` and
    ``qt_h`` to arrays of equal shape.  ``consistency`` (signals recomputed
    from the model's own charge) enters only in signal-consistency mode.
    """
    cfg = config or LossConfig()
    for k in ("signals", "q_e", "qt_e", "q_h", "qt_h"):
        if np.shape(model[k]) != np.shape(truth[k]):
            raise FormatError(f"{k}: model shape {np.shape(model[k])} vs truth {np.shape(truth[k])}")
    sq = lambda k: float(np.sum((np.asarray(model[k]) - np.asarray(truth[k])) ** 2))
    sig = sq("signals")
    volt = 0.0
    if cfg.voltage == "signal-consistency" and consistency is not None:
        volt = float(np.sum((consistency - model["signals"]) ** 2))
    e = sq("q_e") + sq("qt_e")
    h = sq("q_h") + sq("qt_h")
    total = cfg.k * (sig + volt) + cfg.l * e + cfg.n * h
    return LossTerms(total, sig, volt, e, h)


class Objective:
    """Loss and exact gradient of a dataset as a function of the weights.

    Rows of the batch are laid out once (columns when drift is on-axis and
    the stencil is not learned, the full grid otherwise) and reused across
    evaluations.
    """

    def __init__(self, ds: Dataset, loss_config: LossConfig | None = None, learn_stencil: bool = False,
                 layout: str = "auto", check: bool = True):
        self.ds = ds
        self.cfg = loss_config or LossConfig()
        self.learn_stencil = learn_stencil
        init = TrainableWeights.initial(ds.grid.shape, ds.n_centers, learn_stencil=learn_stencil)
        self.transport = Transport(ds.grid, init.materials, init.drift_stencils(), ds.field, ds.boundary, ds.mode,
                                   check=check)
        self.plan = self.transport.plan(ds.q0, layout, all_offsets=learn_stencil)
        plan = self.plan
        self.gt = {k: plan.from_grid(getattr(ds, k)) for k in ("q_e", "qt_e", "q_h", "qt_h")}
        self.gt_signals = ds.signals
        # squared truth left outside the simulated rows (the model has no charge there)
        self.outside = {k: 0.0 for k in self.gt}
        if plan.layout != "grid":
            M, N, P = ds.grid.shape
            covered = np.zeros((ds.n_samples, M * N), dtype=bool)
            covered[plan.sample, plan.column] = True
            for k in self.gt:
                a = getattr(ds, k)
                cols = np.moveaxis(a.reshape(*a.shape[:-3], M * N, P), -2, 1)  # (B, M*N, ...)
                self.outside[k] = float(np.sum(cols[~covered] ** 2))
        self.T = ds.grid.T

    def _global_params(self, w: TrainableWeights) -> dict:
        V = self.ds.grid.n_voxels
        out = {}
        for s in SPECIES:
            sp = w.materials.species(s)
            st = None
            if self.learn_stencil:
                raw = w.stencils[s].reshape(18, V)
                st = (raw / raw.sum(axis=0))[None]
            out[s] = LocalParams(sp.drift.reshape(1, V), sp.rec.reshape(1, V), sp.trap.reshape(1, -1, V),
                                 sp.detrap.reshape(1, -1, V), st)
        return out

    def forward(self, w: TrainableWeights, intermediates: bool = False) -> dict:
        self.plan.load(self._global_params(w))
        voltage = self.cfg.voltage == "signal-consistency"
        res = self.plan.forward(self.T, consistency=voltage, intermediates=intermediates)
        res["sample_signals"] = self.plan.to_samples(res["signals"])
        if voltage:
            res["sample_consistency"] = self.plan.to_samples(res["consistency"])
        return res

    def terms(self, res: dict) -> LossTerms:
        cfg = self.cfg
        sq = lambda a, b: float(np.sum((a - b) ** 2))
        sig = sq(res["sample_signals"], self.gt_signals)
        volt = 0.0
        if "sample_consistency" in res:
            volt = sq(res["sample_consistency"], res["sample_signals"])
        e = sq(res["q_e"], self.gt["q_e"]) + sq(res["qt_e"], self.gt["qt_e"]) + self.outside["q_e"] + self.outside["qt_e"]
        h = sq(res["q_h"], self.gt["q_h"]) + sq(res["qt_h"], self.gt["qt_h"]) + self.outside["q_h"] + self.outside["qt_h"]
        return LossTerms(cfg.k * (sig + volt) + cfg.l * e + cfg.n * h, sig, volt, e, h)

    def value(self, w: TrainableWeights) -> float:
        return self.terms(self.forward(w)).total

    def __call__(self, w: TrainableWeights, grad: bool = True):
        res = self.forward(w, intermediates=grad)
        terms = self.terms(res)
        if not grad:
            return terms, None
        return terms, self.backward(res, w)

    def backward(self, res: dict, w: TrainableWeights) -> dict:
        """Reverse pass over the stored forward states.

        The signal-consistency term is identically zero in exact arithmetic
        (both traces telescope to the same sum), so it contributes no gradient.
        """
        plan = self.plan
        cfg = self.cfg
        r_sig = 2 * cfg.k * (res["sample_signals"] - self.gt_signals)
        a_inc = np.cumsum(r_sig[:, ::-1], axis=1)[:, ::-1]  # adjoint of each step's signal increment
        a_sig = plan.from_samples(a_inc)
        grads = {}
        for s, weight in ((ELECTRON, cfg.l), (HOLE, cfg.n)):
            g = self._species_backward(s, weight, res, a_sig)
            for c in COEFFS:
                grads[f"{s}.{c}"] = plan.param_to_global(g[c])
            if self.learn_stencil:
                dS = g["stencil"].sum(axis=0).reshape(18, *self.ds.grid.shape)
                raw = w.stencils[s]
                tot = raw.sum(axis=0)
                S = raw / tot
                grads[f"{s}.stencil"] = (dS - (S * dS).sum(axis=0)) / tot
        for k, a in grads.items():
            if not np.all(np.isfinite(a)):
                bad = np.argwhere(~np.isfinite(a))[0]
                raise GradientFault(f"non-finite gradient for {k} at index {tuple(int(i) for i in bad)}")
        return grads

    def _species_backward(self, s: str, weight: float, res: dict, a_sig: np.ndarray) -> dict:
        p = self.plan.params[s]
        mover = self.plan.movers[s]
        lam = 1.0 if self.ds.mode == "literal" else 0.0
        q, qt, qm_all = res[f"q_{s}"], res[f"qt_{s}"], res[f"qm_{s}"]
        L, T, Vl = q.shape
        C = qt.shape[2]
        r_q = 2 * weight * (q - self.gt[f"q_{s}"])
        r_qt = 2 * weight * (qt - self.gt[f"qt_{s}"])
        keep = 1.0 - p.trap.sum(axis=1) - lam * p.rec
        a_q = np.zeros((L, Vl))
        a_qt = np.zeros((L, C, Vl))
        gd = np.zeros((L, Vl))
        gr = np.zeros((L, Vl))
        gT = np.zeros((L, C, Vl))
        gD = np.zeros((L, C, Vl))
        gS = np.zeros((L, 18, Vl)) if p.stencil is not None and self.learn_stencil else None
        zero_qt = np.zeros((L, C, Vl))
        for t in range(T - 1, -1, -1):
            a_q = a_q + r_q[:, t]
            a_qt = a_qt + r_qt[:, t]
            q_prev = q[:, t - 1] if t > 0 else res["q0"]
            qt_prev = qt[:, t - 1] if t > 0 else zero_qt
            qm = qm_all[:, t]
            q1 = q_prev * (1.0 - p.rec)
            # q' = stay + G out, out = d qm ; qm = q1 keep + sum D qt ; qt' = qt + T q1 - D qt
            a_out, dS = mover.adjoint(a_q, a_sig[:, t], p.drift * qm, p.stencil, gS is not None)
            a_out = a_out - a_q
            gd += a_out * qm
            if gS is not None:
                gS += dS
            a_qm = a_q + p.drift * a_out
            a_q1 = a_qm * keep + (a_qt * p.trap).sum(axis=1)
            diff = a_qt - a_qm[:, None, :]
            gT += diff * q1[:, None, :]
            gD -= diff * qt_prev
            a_qt = a_qt - diff * p.detrap
            gr -= a_q1 * q_prev + lam * a_qm * q1
            a_q = a_q1 * (1.0 - p.rec)
        out = {"drift": gd, "rec": gr, "trap": gT, "detrap": gD}
        if gS is not None:
            out["stencil"] = gS
        return out


def backward(ds: Dataset, weights: TrainableWeights, loss_config: LossConfig | None = None,
             learn_stencil: bool | None = None) -> dict:
    """Exact gradient of the loss with respect to every trainable array."""
    learn = weights.stencils is not None if learn_stencil is None else learn_stencil
    return Objective(ds, loss_config, learn)(weights)[1]


def finite_diff_grad(fn: Callable[[TrainableWeights], float], weights: TrainableWeights, eps: float = 1e-6,
                     coords: dict | None = None) -> dict:
    """Central differences ``(f(w + eps) - f(w - eps)) / 2 eps`` per coordinate.

    ``coords`` maps parameter names to lists of flat indices; by default
    every coordinate of every parameter is perturbed.  No projection is
    applied to the perturbed weights.
    """
    if eps <= 0:
        raise ConfigError("eps must be positive")
    names = list(weights.params())
    out = {}
    for name in names:
        base = weights.params()[name]
        idx = range(base.size) if coords is None else coords.get(name, [])
        g = np.full(base.size, np.nan) if coords is not None else np.zeros(base.size)
        for i in idx:
            vals = []
            for sgn in (1, -1):
                w = weights.copy()
                w.params()[name].reshape(-1)[i] += sgn * eps
                vals.append(fn(w))
            g[i] = (vals[0] - vals[1]) / (2 * eps)
        out[name] = g.reshape(base.shape)
    return out


def directional_fd(fn, weights: TrainableWeights, direction: dict, eps: float = 1e-6) -> float:
    """Central difference of ``fn`` along ``direction`` (a dict like the gradient)."""
    vals = []
    for sgn in (1, -1):
        w = weights.copy()
        p = w.params()
        for k, d in direction.items():
            p[k] += sgn * eps * d
        vals.append(fn(w))
    return (vals[0] - vals[1]) / (2 * eps)


# ---------------------------------------------------------------------------
# error metric


@dataclass
class ErrValue:
    kind: str
    range: tuple[int, int]
    per_subpixel: dict
    err: float


@dataclass
class ErrReport:
    values: dict  # kind -> ErrValue
    mean: float

    def table(self) -> list[tuple[str, int, int, float]]:
        return [(k, v.range[0], v.range[1], v.err) for k, v in self.values.items()]

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "n_inj", "n_fin", "subpixel", "err"])
            for k, v in self.values.items():
                for (i, j), e in v.per_subpixel.items():
                    w.writerow([k, v.range[0], v.range[1], f"{i}_{j}", repr(e)])
                w.writerow([k, v.range[0], v.range[1], "mean", repr(v.err)])
            w.writerow(["all", "", "", "mean", repr(self.mean)])
        return path


def err_metric(learned, truth, oz_range: tuple[int, int], subpixels=None) -> tuple[float, dict]:
    """RMS relative error along OZ on ``[n_inj, n_fin]``, averaged over subpixels.

    ``learned`` and ``truth`` are ``(M, N, P)`` arrays (a 1-D profile is
    treated as a single subpixel).  Positions where the truth is zero are
    left out with a warning.
    """
    learned = np.asarray(learned, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if learned.ndim == 1:
        learned, truth = learned[None, None], truth[None, None]
    lo, hi = int(oz_range[0]), int(oz_range[1])
    if subpixels is None:
        subpixels = [(i, j) for i in range(truth.shape[0]) for j in range(truth.shape[1])]
    per = {}
    for i, j in subpixels:
        wl = learned[i, j, lo:hi + 1]
        wg = truth[i, j, lo:hi + 1]
        ok = wg != 0
        if not np.all(ok):
            warnings.warn(f"subpixel {(i, j)}: {int((~ok).sum())} zero ground-truth positions left out", stacklevel=2)
        if not np.any(ok):
            continue
        per[(i, j)] = float(np.sqrt(np.mean(((wl[ok] - wg[ok]) / wg[ok]) ** 2)))
    err = float(np.mean(list(per.values()))) if per else float("nan")
    return err, per


def default_ranges(kinds, depths, P: int) -> dict:
    """OZ ranges per kind: electrons from the shallowest injection to the anode
    (recombination stopping 7 layers short), holes from 8 layers below the
    shallowest injection up to the deepest."""
    lo, hi = min(depths), max(depths)
    out = {}
    for k in kinds:
        if k.startswith("e"):
            out[k] = (lo, min(P - 8, P - 1) if k == "eRec" else P - 1)
        else:
            out[k] = (max(lo - 8, 0), hi)
    return out


def err_report(learned: MaterialMap, truth: MaterialMap, ranges: dict, subpixels=None) -> ErrReport:
    values = {}
    for kind, rg in ranges.items():
        err, per = err_metric(learned.kind(kind), truth.kind(kind), rg, subpixels)
        values[kind] = ErrValue(kind, tuple(rg), per, err)
    errs = [v.err for v in values.values() if not math.isnan(v.err)]
    return ErrReport(values, float(np.mean(errs)) if errs else float("nan"))


def dataset_err_report(ds: Dataset, weights: TrainableWeights, ranges: dict | None = None) -> ErrReport:
    if ds.truth is None:
        raise MissingGroundTruth("dataset carries no ground truth")
    ranges = ranges or default_ranges(ds.truth.kinds(), ds.injection_depths(), ds.grid.P)
    return err_report(weights.materials, ds.truth, ranges, ds.injected_columns())


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainState:
    weights: TrainableWeights
    adam: AdamState
    epoch: int = 0
    dropped_at: int | None = None
    history: list = field(default_factory=list)  # rows: epoch, lr, loss, signal, voltage, electron, hole


@dataclass
class TrainResult:
    weights: TrainableWeights
    history: list
    err: ErrReport | None
    state: TrainState
    stopped: str


LOSS_COLUMNS = ("epoch", "lr", "loss", "signal", "voltage", "electron", "hole")


def initial_state(ds: Dataset, config: TrainConfig, weights: TrainableWeights | None = None) -> TrainState:
    w = weights or TrainableWeights.initial(ds.grid.shape, ds.n_centers, config.init, config.learn_stencil, config.seed)
    return TrainState(w, AdamState.zeros_like(w.params(), config.schedule.lr0))


def _plateaued(history, since: int, window: int, tol: float) -> bool:
    losses = [row[2] for row in history if row[0] >= since]
    if len(losses) <= window:
        return False
    best = np.minimum.accumulate(losses)
    before, now = best[-window - 1], best[-1]
    if before <= 0:
        return True
    return (before - now) / before < tol


def train(ds: Dataset, config: TrainConfig | None = None, state: TrainState | None = None,
          callback: Callable | None = None, checkpoint_dir: str | Path | None = None) -> TrainResult:
    """Full-batch training for ``config.epochs`` epochs (counted from zero, so a
    resumed state continues where it stopped).

    Each epoch evaluates the loss at the current weights, records it, and
    takes one ADAM step.  The loss of the final weights is recorded as a last
    row.  Stops early when, after the learning-rate drop, the best loss has
    improved by less than ``plateau_tol`` (relative) over ``plateau_window``
    epochs.
    """
    config = config or TrainConfig()
    state = state or initial_state(ds, config)
    obj = Objective(ds, config.loss, config.learn_stencil)
    stopped = "epochs"
    while True:
        epoch = state.epoch
        state.history = [row for row in state.history if row[0] < epoch]
        final = epoch >= config.epochs
        losses = [row[2] for row in state.history]
        lr, dropped = lr_schedule(epoch, losses, config.schedule, state.dropped_at)
        terms, grads = obj(state.weights, grad=not final)
        if not math.isfinite(terms.total):
            last = next((r for r in reversed(state.history) if math.isfinite(r[2])), None)
            raise DivergenceError(f"loss became {terms.total} at epoch {epoch}; last finite row {last}")
        state.history.append([epoch, lr, terms.total, terms.signal, terms.voltage, terms.electron, terms.hole])
        if callback:
            callback(state, terms)
        if final:
            break
        state.dropped_at = dropped
        state.adam.lr = lr
        state.weights, state.adam = adam_step(state.adam, grads, state.weights)
        state.epoch = epoch + 1
        if checkpoint_dir and config.checkpoint_every and state.epoch % config.checkpoint_every == 0:
            save_checkpoint(state, checkpoint_dir, config)
        if state.dropped_at is not None and _plateaued(state.history, state.dropped_at, config.plateau_window,
                                                        config.plateau_tol):
            stopped = "plateau"
            state.history.append([state.epoch, lr, *_row_terms(obj, state.weights)])
            break
    err = None
    if ds.truth is not None:
        err = dataset_err_report(ds, state.weights, config.err_ranges)
    return TrainResult(state.weights, state.history, err, state, stopped)


def _row_terms(obj: Objective, w: TrainableWeights) -> list:
    t = obj(w, grad=False)[0]
    return [t.total, t.signal, t.voltage, t.electron, t.hole]


def write_loss_csv(history, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for row in history:
            w.writerow([int(row[0]), *(repr(float(v)) for v in row[1:])])
    return path


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(state: TrainState, directory: str | Path, config: TrainConfig | None = None) -> Path:
    """Weights, optimizer moments and schedule state, same array convention as datasets."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stencils = None
    if state.weights.stencils is not None:
        stencils = {s: DriftStencil(s, a) for s, a in state.weights.stencils.items()}
    save_materials(state.weights.materials, directory, "weights", stencils)
    entries = []
    for which, d in (("m", state.adam.m), ("v", state.adam.v)):
        for k, a in d.items():
            e = _entry(f"adam_{which}_{k.replace('.', '_')}", a.shape)
            e["param"] = k
            e["moment"] = which
            _write(directory / e["file"], a)
            entries.append(e)
    a = state.adam
    meta = {
        "version": CHECKPOINT_VERSION,
        "epoch": state.epoch,
        "dropped_at": state.dropped_at,
        "adam": {"t": a.t, "lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "arrays": entries},
        "weights": "weights.json",
        "history": state.history,
        "config": config.to_dict() if config else None,
    }
    path = directory / "checkpoint.json"
    tmp = directory / "checkpoint.json.tmp"
    tmp.write_text(json.dumps(meta))
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> tuple[TrainState, TrainConfig | None]:
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.json"
    if not path.exists():
        raise FormatError(f"no checkpoint at {path}")
    meta = json.loads(path.read_text())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {meta.get('version')}, expected {CHECKPOINT_VERSION}")
    mats, stencils = _load_material_bundle(path.parent / meta["weights"])
    st = {s: x.fractions for s, x in stencils.items()} if stencils else None
    weights = TrainableWeights(mats, st)
    m, v = {}, {}
    for e in meta["adam"]["arrays"]:
        (m if e["moment"] == "m" else v)[e["param"]] = _read(path.parent, e)
    a = meta["adam"]
    adam = AdamState(m, v, a["t"], a["lr"], a["beta1"], a["beta2"], a["eps"])
    cfg = TrainConfig.from_dict(meta["config"]) if meta.get("config") else None
    return TrainState(weights, adam, meta["epoch"], meta["dropped_at"], [list(r) for r in meta["history"]]), cfg


def profiles(weights: TrainableWeights, truth: MaterialMap | None, ranges: dict, subpixels) -> dict:
    """Per kind, rows ``(subpixel, k, learned, truth)`` over the kind's OZ range."""
    out = {}
    for kind, (lo, hi) in ranges.items():
        lw = weights.materials.kind(kind)
        gt = truth.kind(kind) if truth is not None else None
        rows = []
        for i, j in subpixels:
            for k in range(lo, hi + 1):
                rows.append((f"{i}_{j}", k, float(lw[i, j, k]), float(gt[i, j, k]) if gt is not None else float("nan")))
        out[kind] = rows
    return out


def write_profiles(prof: dict, directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for kind, rows in prof.items():
        p = directory / f"{kind}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subpixel", "oz", "learned", "truth"])
            for r in rows:
                w.writerow([r[0], r[1], repr(r[2]), repr(r[3])])
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckResult:
    max_rel: float
    per_draw: list
    eps: float

    @property
    def passed(self) -> bool:
        return self.max_rel < 1e-4


def _random_materials(rng, shape, n_centers=(1, 2)) -> MaterialMap:
    sp = [SpeciesCoefficients(rng.uniform(0.3, 0.95, shape), rng.uniform(0.0, 0.1, shape),
                              rng.uniform(0.0, 0.2, (C, *shape)), rng.uniform(0.0, 0.4, (C, *shape)))
          for C in n_centers]
    return MaterialMap(*sp)


def random_problem(rng, shape=(3, 3, 10), T: int = 20, learn_stencil: bool = True):
    """A random small dataset (truth with random stencils) and random trial weights."""
    from .dataset import direct_dataset
    from .lattice import GridSpec, build_drift_stencil, build_weighting_potential

    grid = GridSpec(*shape, T=T)
    field_ = build_weighting_potential("subpixel", grid, "small-pixel-analytic")
    truth = _random_materials(rng, grid.shape)
    st = {s: build_drift_stencil(rng.uniform(0, 1, (18, *grid.shape)), grid, s) for s in SPECIES}
    B = int(rng.integers(1, 4))
    inj = [[tuple(int(rng.integers(0, n)) for n in grid.shape)] for _ in range(B)]
    boundary = ("closed-lateral", "virtual-boundary")[int(rng.integers(0, 2))]
    mode = ("conservative", "literal")[int(rng.integers(0, 2))]
    ds = direct_dataset(grid, truth, field_, inj, stencils=st, boundary=boundary, mode=mode)
    w = TrainableWeights(_random_materials(rng, grid.shape),
                         {s: rng.uniform(0.05, 1.0, (18, *grid.shape)) for s in SPECIES} if learn_stencil else None)
    return ds, w


def gradient_check(shape=(3, 3, 10), T: int = 20, draws: int = 100, seed: int = 0, eps: float = 1e-6,
                   coords_per_param: int = 4, directions: int = 2, learn_stencil: bool = True,
                   corrupt: float = 0.0) -> GradCheckResult:
    """Compare the adjoint gradient with central differences on random problems.

    Each draw checks ``coords_per_param`` random coordinates of every
    trainable array plus ``directions`` random directional derivatives.  The
    relative error of a component is ``|adjoint - fd| / max(|fd|, floor)``
    with ``floor = 1e-4 * max|adjoint|``, so components far below the
    gradient's scale are judged against that scale.  ``corrupt`` scales the
    adjoint by ``1 + corrupt`` (a negative control).
    """
    rng = np.random.default_rng(seed)
    per_draw = []
    for _ in range(draws):
        ds, w = random_problem(rng, shape, T, learn_stencil)
        obj = Objective(ds, LossConfig(), learn_stencil, check=False)
        grads = obj(w)[1]
        if corrupt:
            grads = {k: g * (1.0 + corrupt) for k, g in grads.items()}
        fn = lambda x: obj(x, grad=False)[0].total
        scale = max(float(np.max(np.abs(g))) for g in grads.values())
        floor = max(1e-4 * scale, 1e-300)
        coords = {k: list(rng.choice(a.size, min(coords_per_param, a.size), replace=False))
                  for k, a in w.params().items()}
        fd = finite_diff_grad(fn, w, eps, coords)
        worst = 0.0
        for k, f in fd.items():
            m = ~np.isnan(f)
            a = grads[k][m]
            worst = max(worst, float(np.max(np.abs(a - f[m]) / np.maximum(np.abs(f[m]), floor))))
        for _ in range(directions):
            d = {k: rng.standard_normal(a.shape) for k, a in w.params().items()}
            exact = sum(float(np.sum(grads[k] * d[k])) for k in d)
            approx = directional_fd(fn, w, d, eps)
            dscale = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())) * np.sqrt(
                sum(float(np.sum(x * x)) for x in d.values()))
            worst = max(worst, abs(exact - approx) / max(abs(approx), 1e-4 * dscale, 1e-300))
        per_draw.append(worst)
    return GradCheckResult(max(per_draw) if per_draw else 0.0, per_draw, eps)
