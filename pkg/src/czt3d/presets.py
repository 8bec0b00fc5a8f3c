"""Bundled experiment configurations."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from .dataset import Dataset, GroundTruthConfig, generate, subset_region
from .lattice import GridSpec
from .trainer import InitConfig, LossConfig, ScheduleConfig, TrainConfig

DEPTHS = (77, 79)


@dataclass
class ExperimentPreset:
    name: str
    gen: GroundTruthConfig
    train: TrainConfig
    factor: int = 1
    region: tuple | None = None  # (rows, cols)
    reference_mean_err: float | None = None
    description: str = ""
    full_train: TrainConfig | None = None
    full_T: int | None = None

    def scaled(self, full_scale: bool) -> "ExperimentPreset":
        if not full_scale:
            return self
        gen = self.gen
        if self.full_T:
            gen = replace(gen, grid=gen.grid.with_(T=self.full_T))
        return replace(self, gen=gen, train=self.full_train or self.train)

    def with_seed(self, seed: int) -> "ExperimentPreset":
        return replace(self, gen=replace(self.gen, seed=seed), train=replace(self.train, seed=seed))

    def dataset(self, workers: int = 1, out=None, fine_out=None) -> Dataset:
        """Generate the training dataset: simulate, then downsample or cut the region."""
        if self.region is None:
            return generate(self.gen, workers=workers, out=out, factor=self.factor, fine_out=fine_out)
        full = generate(self.gen, workers=workers, out=fine_out)
        ds = subset_region(full, *self.region)
        if out is not None:
            from .dataset import save

            save(ds, out)
        return ds


def _block_injections(factor: int, coarse: int, depths) -> list:
    """One coarse unit injection per (coarse subpixel, depth), spread as unit
    packets over the ``factor x factor`` fine subpixels it covers."""
    groups = []
    for I in range(coarse):
        for J in range(coarse):
            for k in depths:
                groups.append([(factor * I + a, factor * J + b, k) for a in range(factor) for b in range(factor)])
    return groups


def _schedule(drop: int) -> ScheduleConfig:
    return ScheduleConfig(lr0=5e-4, lr1=1e-5, trigger="fixed", drop_epoch=drop)


def subset_subpixels() -> ExperimentPreset:
    grid = GridSpec(12, 12, 100, T=60)
    rows = cols = (4, 5)
    inj = [[(i, j, k)] for i in rows for j in cols for k in DEPTHS]
    gen = GroundTruthConfig(grid, inj, profile="desk", seed=1)
    return ExperimentPreset(
        "subset-subpixels", gen,
        TrainConfig(epochs=16000, schedule=_schedule(13000)),
        region=(rows, cols), reference_mean_err=0.0617,
        description="2x2 subpixels (rows and cols 4, 5) of a 12x12 grid behind a virtual boundary",
        full_train=TrainConfig(epochs=6000, schedule=_schedule(2500)), full_T=300,
    )


def all_subpixels() -> ExperimentPreset:
    grid = GridSpec(12, 12, 100, T=60)
    gen = GroundTruthConfig(grid, _block_injections(3, 4, DEPTHS), profile="desk", seed=1, block=3)
    return ExperimentPreset(
        "all-subpixels", gen,
        TrainConfig(epochs=9000, schedule=_schedule(7000)),
        factor=3, reference_mean_err=0.0333,
        description="12x12 ground truth block-averaged to 4x4 subpixels, every subpixel injected",
        full_train=TrainConfig(epochs=4000, schedule=_schedule(1000)), full_T=300,
    )


def uniform_field_robustness() -> ExperimentPreset:
    grid = GridSpec(3, 3, 100, T=60)
    inj = [[(1, 1, k)] for k in DEPTHS]
    gen = GroundTruthConfig(grid, inj, profile="desk", seed=1)
    return ExperimentPreset(
        "uniform-field-robustness", gen,
        TrainConfig(epochs=10000, schedule=_schedule(9000), learn_stencil=True, init=InitConfig()),
        description="uniform-field truth with learnable lateral stencil fractions",
        full_train=TrainConfig(epochs=6000, schedule=_schedule(2500), learn_stencil=True), full_T=300,
    )


PRESETS = {
    "subset-subpixels": subset_subpixels,
    "all-subpixels": all_subpixels,
    "uniform-field-robustness": uniform_field_robustness,
}


def get_preset(name: str, full_scale: bool = False, seed: int | None = None) -> ExperimentPreset:
    from .errors import ConfigError

    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[name]().scaled(full_scale)
    if seed is not None:
        p = p.with_seed(seed)
    return p
