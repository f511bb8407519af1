"""Desk-scale experiment protocols shared by ``scripts/`` and the acceptance suite.

The default setting is a 30-node synthetic grid (average degree 2.5, limit
scale 1.5, grid seed 7) with 5000 scenarios split 4000/500/500 and the
default three-layer GNN (hidden width 32, filter order 2).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

from .dataset import DataConfig, make_splits
from .grid import Grid, generate_synthetic_grid
from .nn import build_model
from .training import ConstantPredictor, MetricsReport, Regressor, TrainConfig, evaluate, train
from .transfer import run_transfer_experiment

GRID_N = 30
GRID_AVG_DEGREE = 2.5
GRID_LIMIT_SCALE = 1.5
GRID_SEED = 7
PROBLEM_SEED = 7
COUNT = 5000
DIMS = (4, 32, 32, 1)
K = 2


def default_grid() -> Grid:
    return generate_synthetic_grid(GRID_N, GRID_AVG_DEGREE, GRID_LIMIT_SCALE, seed=GRID_SEED)


def default_data(seed: int, count: int = COUNT) -> DataConfig:
    return DataConfig(count=count, seed=seed, problem_seed=PROBLEM_SEED)


@dataclass
class LearningRun:
    """One seed of the learning experiment: FR and plain-MSE GNNs plus the mean baseline."""
    seed: int
    congested_fraction: float
    fr: MetricsReport
    mse: MetricsReport
    baseline: MetricsReport
    fr_history: list
    mse_history: list
    regressor: Regressor = field(repr=False)
    fr_seconds: float = 0.0
    mse_seconds: float = 0.0

    def numbers(self) -> dict:
        """Every reported number, for reproducibility comparisons (timings excluded)."""
        return {"congested_fraction": self.congested_fraction, "fr": self.fr.to_dict(per_sample=True),
                "mse": self.mse.to_dict(per_sample=True), "baseline": self.baseline.to_dict(per_sample=True),
                "fr_history": self.fr_history, "mse_history": self.mse_history,
                "theta": self.regressor.model.theta.tolist()}


def learning_run(seed: int, grid: Grid | None = None, count: int = COUNT, with_mse: bool = True) -> LearningRun:
    """Generate data, train GNN+FR (lambda 1) and, optionally, GNN (lambda 0) with ``seed``.

    ``fr_seconds`` covers data generation plus FR training, the end-to-end
    cost of producing the default model.
    """
    grid = grid or default_grid()
    t0 = time.perf_counter()
    train_ds, val_ds, test_ds = make_splits(grid, default_data(seed, count))
    model = build_model("gnn", grid, DIMS, K=K, seed=seed)
    reg, fr_hist = train(model, train_ds, val_ds, TrainConfig(lambda_reg=1.0, seed=seed), grid)
    fr_seconds = time.perf_counter() - t0
    fr = evaluate(reg, test_ds, grid)
    baseline = evaluate(ConstantPredictor.fit(train_ds), test_ds, grid)
    mse, mse_hist, mse_seconds = fr, [], 0.0
    if with_mse:
        t1 = time.perf_counter()
        mse_reg, mse_hist = train(model, train_ds, val_ds, TrainConfig(lambda_reg=0.0, seed=seed), grid)
        mse_seconds = time.perf_counter() - t1
        mse = evaluate(mse_reg, test_ds, grid)
    return LearningRun(seed, test_ds.congested_fraction, fr, mse, baseline, fr_hist, mse_hist, reg,
                       fr_seconds, mse_seconds)


def transfer_runs(regressor: Regressor, seeds=(0, 1, 2, 3, 4), grid: Grid | None = None, data_seed: int = 100,
                  count: int = COUNT, finetune_epochs: int = 5, max_lines: int = 2):
    """Topology experiments for each perturbation seed; returns ``(experiments, seconds)``."""
    grid = grid or default_grid()
    t0 = time.perf_counter()
    exps = [run_transfer_experiment(regressor, grid, s, default_data(data_seed + s, count), finetune_epochs,
                                    TrainConfig(seed=s), max_lines=max_lines)
            for s in seeds]
    return exps, time.perf_counter() - t0


LEARNING_SEEDS = (0, 1, 2)
TRANSFER_SEEDS = (0, 1, 2, 3, 4)


@dataclass
class Protocol:
    """Learning runs for several seeds plus topology experiments on the first seed's FR model."""
    runs: list
    experiments: list
    transfer_seconds: float

    def numbers(self) -> dict:
        return {"runs": [r.numbers() for r in self.runs],
                "transfer": [e.to_dict(per_sample=True) for e in self.experiments]}


def run_protocol(seeds=LEARNING_SEEDS, transfer_seeds=TRANSFER_SEEDS, count: int = COUNT) -> Protocol:
    grid = default_grid()
    runs = [learning_run(s, grid, count) for s in seeds]
    exps, secs = transfer_runs(runs[0].regressor, transfer_seeds, grid, count=count)
    return Protocol(runs, exps, secs)


if __name__ == "__main__":
    # python -m lmplab.experiments OUT.json [count]: dump every protocol number
    import sys
    from pathlib import Path

    from . import jsonio

    count = int(sys.argv[2]) if len(sys.argv) > 2 else COUNT
    Path(sys.argv[1]).write_text(jsonio.dumps(run_protocol(count=count).numbers()) + "\n", encoding="utf-8")
