"""Command-line entry point: ``czt3d {gen,train,eval,gradcheck,experiment}``.

Exit codes: 0 success, 2 usage, and the ``code`` of each error class in
:mod:`czt3d.errors` (13 for I/O failures, 14 for a failed gradient check).
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import GroundTruthConfig, generate, load, save, subset_region
from .errors import GRADCHECK_FAILED, IO_ERROR, ConfigError, Czt3dError, MissingGroundTruth
from .presets import PRESETS, get_preset
from .trainer import (
    TrainConfig,
    TrainableWeights,
    dataset_err_report,
    default_ranges,
    gradient_check,
    initial_state,
    load_checkpoint,
    profiles,
    save_checkpoint,
    train,
    write_loss_csv,
    write_profiles,
)


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_summary(out: Path, lines: list[str]) -> None:
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    print(text, end="")


def _err_lines(report, reference: float | None = None) -> list[str]:
    lines = [f"{'kind':<8} {'OZ range':<10} {'Err':>10}"]
    for kind, lo, hi, err in report.table():
        lines.append(f"{kind:<8} {f'[{lo},{hi}]':<10} {err:>10.4f}")
    ref = f"  (reference {reference})" if reference is not None else ""
    lines.append(f"{'mean':<8} {'':<10} {report.mean:>10.4f}{ref}")
    return lines


# ---------------------------------------------------------------------------
# gen


def _gen_config(args):
    """Config file (a GroundTruthConfig plus optional 'factor' and 'region') or preset."""
    if args.config:
        d = _read_json(args.config)
        factor = int(d.pop("factor", 1))
        region = d.pop("region", None)
        cfg = GroundTruthConfig.from_dict(d)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        return cfg, factor, region
    preset = get_preset(args.preset or "all-subpixels", full_scale=args.paper_scale, seed=args.seed)
    return preset.gen, preset.factor, preset.region


def cmd_gen(args) -> int:
    cfg, factor, region = _gen_config(args)
    out = _out(args, "dataset")
    fine_out = out / "fine" if args.keep_fine else None
    if region is not None:
        full = generate(cfg, workers=args.workers, out=fine_out)
        ds = subset_region(full, *region)
        save(ds, out)
    else:
        ds = generate(cfg, workers=args.workers, out=out, factor=factor, fine_out=fine_out)
    lines = [
        f"czt3d {__version__} gen",
        f"injections: {ds.n_samples}",
        f"grid: {ds.grid.M}x{ds.grid.N}x{ds.grid.P}, T={ds.grid.T}, dt={ds.grid.dt}",
        f"generated on: {cfg.grid.M}x{cfg.grid.N}x{cfg.grid.P}" + (f", downsampled by {factor}" if factor > 1 else ""),
        f"electrodes: {ds.field.n_electrodes}",
        f"boundary: {ds.boundary}",
        f"seed: {cfg.seed}",
        f"q_e shape: {ds.q_e.shape}",
    ]
    if fine_out is not None:
        lines.append(f"full-resolution copy: {fine_out}")
    _write_summary(out, lines)
    return 0


# ---------------------------------------------------------------------------
# train / eval


def _train_config(args, fallback: TrainConfig | None = None) -> TrainConfig:
    if args.config:
        cfg = TrainConfig.from_dict(_read_json(args.config))
    else:
        cfg = fallback or TrainConfig()
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _run_training(ds, cfg: TrainConfig, out: Path, resume=None, reference=None) -> list[str]:
    state = None
    if resume:
        state, saved = load_checkpoint(resume)
    state = state or initial_state(ds, cfg)
    t0 = time.time()
    res = train(ds, cfg, state, checkpoint_dir=out / "checkpoint")
    elapsed = time.time() - t0
    write_loss_csv(res.history, out / "loss.csv")
    save_checkpoint(res.state, out / "checkpoint", cfg)
    lines = [
        f"epochs run: {res.state.epoch} ({res.stopped}), {elapsed:.1f} s",
        f"final loss: {res.history[-1][2]:.6e}",
        f"learning-rate drop at epoch: {res.state.dropped_at}",
    ]
    if res.err is not None:
        res.err.write_csv(out / "err_report.csv")
        ranges = {k: v.range for k, v in res.err.values.items()}
        write_profiles(profiles(res.weights, ds.truth, ranges, ds.injected_columns()), out / "profiles")
        lines += _err_lines(res.err, reference)
    if res.weights.stencils is not None:
        lines += _stencil_lines(ds, res.weights, cfg)
    return lines


def _stencil_lines(ds, weights, cfg) -> list[str]:
    from .lattice import on_axis_index

    ranges = cfg.err_ranges or default_ranges(ds.truth.kinds() if ds.truth else ["eDrift", "hDrift"],
                                              ds.injection_depths(), ds.grid.P)
    lines = ["off-axis stencil mass over traversed voxels:"]
    for s, kind in (("e", "eDrift"), ("h", "hDrift")):
        lo, hi = ranges[kind]
        st = weights.stencils[s]
        off = 1.0 - st[on_axis_index(s)] / st.sum(axis=0)
        vals = [off[i, j, lo:hi + 1] for i, j in ds.injected_columns()]
        lines.append(f"  {s}: max {max(float(v.max()) for v in vals):.4g}, mean {float(np.mean(vals)):.4g}")
    return lines


def cmd_train(args) -> int:
    ds = load(args.dataset)
    cfg = _train_config(args)
    out = _out(args, "run")
    lines = [f"czt3d {__version__} train", f"dataset: {args.dataset}"]
    lines += _run_training(ds, cfg, out, resume=args.resume)
    _write_summary(out, lines)
    return 0


def cmd_eval(args) -> int:
    ds = load(args.dataset)
    if ds.truth is None:
        raise MissingGroundTruth(f"{args.dataset} carries no ground truth; nothing to evaluate against")
    state, cfg = load_checkpoint(args.checkpoint)
    ranges = cfg.err_ranges if cfg and cfg.err_ranges else None
    report = dataset_err_report(ds, state.weights, ranges)
    out = _out(args, "eval")
    report.write_csv(out / "err_report.csv")
    rg = {k: v.range for k, v in report.values.items()}
    write_profiles(profiles(state.weights, ds.truth, rg, ds.injected_columns()), out / "profiles")
    _write_summary(out, [f"czt3d {__version__} eval", f"checkpoint epoch: {state.epoch}", *_err_lines(report)])
    return 0


# ---------------------------------------------------------------------------
# gradcheck / experiment


def cmd_gradcheck(args) -> int:
    shape = tuple(args.size)
    res = gradient_check(shape, args.steps, args.draws, args.seed or 0, args.eps, corrupt=args.corrupt_adjoint)
    lines = [
        f"czt3d {__version__} gradcheck",
        f"grid {shape[0]}x{shape[1]}x{shape[2]}, T={args.steps}, draws={args.draws}, eps={args.eps}",
        f"max relative deviation: {res.max_rel:.3e}",
    ]
    if args.sweep:
        lines.append("eps sweep (first draw):")
        for eps in (0.5, 1e-4, 1e-6, 1e-8):
            r = gradient_check(shape, args.steps, 1, args.seed or 0, eps, corrupt=args.corrupt_adjoint)
            lines.append(f"  eps={eps:<8g} max relative deviation {r.max_rel:.3e}")
    lines.append("PASS" if res.passed else "FAIL")
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        _write_summary(out, lines)
    else:
        print("\n".join(lines))
    return 0 if res.passed else GRADCHECK_FAILED


def cmd_experiment(args) -> int:
    preset = get_preset(args.name, full_scale=args.paper_scale, seed=args.seed)
    out = _out(args, args.name)
    cfg = _train_config(args, preset.train)
    t0 = time.time()
    ds = preset.dataset(workers=args.workers, out=out / "dataset")
    lines = [
        f"czt3d {__version__} experiment {preset.name}",
        preset.description,
        f"dataset: {ds.n_samples} injections on {ds.grid.M}x{ds.grid.N}x{ds.grid.P}, T={ds.grid.T}, "
        f"generated in {time.time() - t0:.1f} s",
    ]
    lines += _run_training(ds, cfg, out, reference=preset.reference_mean_err)
    _write_summary(out, lines)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--epochs", type=int, default=None)
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--out", help="output directory")
    common.add_argument("--paper-scale", action="store_true", help="full schedules and T instead of desk-scale defaults")

    p = argparse.ArgumentParser(prog="czt3d", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--preset", choices=sorted(PRESETS), help="use a preset's data configuration")
    g.add_argument("--keep-fine", action="store_true", help="also write the full-resolution dataset under OUT/fine")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train on a dataset")
    t.add_argument("dataset", help="dataset directory or manifest.json")
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint against a dataset's ground truth")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", parents=[common], help="adjoint vs finite differences on random problems")
    c.add_argument("--size", type=int, nargs=3, default=[3, 3, 10], metavar=("M", "N", "P"))
    c.add_argument("--steps", type=int, default=20)
    c.add_argument("--draws", type=int, default=5)
    c.add_argument("--eps", type=float, default=1e-6)
    c.add_argument("--sweep", action="store_true", help="print an eps sweep table")
    c.add_argument("--corrupt-adjoint", type=float, default=0.0, help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("experiment", parents=[common], help="gen, train and eval one preset")
    x.add_argument("name", choices=sorted(PRESETS))
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Czt3dError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error (I/O): {exc}", file=sys.stderr)
        return IO_ERROR


if __name__ == "__main__":
    sys.exit(main())
