"""Recover drift coefficients of a short column from its traces.

A single 1x1x10 column with no trapping or recombination, one pair injected
at depth 2.  Every coefficient is learned from a flat guess; electrons cross
voxels 2..9 and holes 0..2, which is where drift is scored.
Run: python demos/toy_recovery.py  (about a minute)
"""
import numpy as np

from czt3d.dataset import GroundTruthConfig, column_injections, generate
from czt3d.lattice import GridSpec
from czt3d.trainer import ScheduleConfig, TrainConfig, train

chain = {"trap_tau": (np.inf, np.inf), "detrap_tau": (np.inf, np.inf), "rec_tau": (np.inf, np.inf)}
grid = GridSpec(1, 1, 10, T=30)
ds = generate(GroundTruthConfig(grid, column_injections([(0, 0)], [2]), profile=chain, seed=8))

cfg = TrainConfig(epochs=4999, schedule=ScheduleConfig(lr0=5e-4, lr1=1e-5, drop_epoch=4500),
                  err_ranges={"eDrift": (2, 9), "hDrift": (0, 2)})


def progress(state, terms):
    if state.epoch % 1000 == 0:
        print(f"epoch {state.epoch:5d}  loss {terms.total:.3e}  lr {state.adam.lr:g}")


res = train(ds, cfg, callback=progress)
for kind in ("eDrift", "hDrift"):
    v = res.err.values[kind]
    print(f"{kind}: Err {v.err:.2e} on OZ {v.range}")
