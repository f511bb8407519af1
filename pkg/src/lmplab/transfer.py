"""Topology adaptivity: reuse a trained GNN after removing transmission lines.

A GNN's filter has one value per node and two per edge, so a model trained
on one grid can be moved to the same grid minus some lines by dropping the
filter entries of the removed lines. :func:`run_transfer_experiment`
measures the moved model untouched, after a short fine-tune, and against a
model trained from scratch on the new grid, all on one shared test set.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import DataConfig, make_splits
from .errors import IncompatibleTopology, InvalidConfig, NoValidPerturbation, WouldDisconnect
from .grid import Grid, is_bridge, remove_lines
from .nn import Kind, Model, build_model, filter_pattern
from .training import MetricsReport, Regressor, TrainConfig, evaluate, train

log = logging.getLogger(__name__)

MAX_TRIES = 100


def perturb_topology(grid: Grid, max_lines: int, seed: int) -> tuple[Grid, list[int]]:
    """Remove between 1 and ``max_lines`` random lines without disconnecting the grid.

    Draws a count uniformly from ``1..max_lines``, then that many distinct
    edges uniformly; rejected draws are retried up to 100 times.
    """
    if max_lines not in (1, 2):
        raise InvalidConfig(f"max_lines must be 1 or 2, got {max_lines}")
    if all(is_bridge(grid, k) for k in range(grid.n_edges)):
        raise NoValidPerturbation("every line is a bridge; removing any would disconnect the grid")
    rng = np.random.default_rng(seed)
    for _ in range(MAX_TRIES):
        k = int(rng.integers(1, max_lines + 1))
        removed = sorted(int(e) for e in rng.choice(grid.n_edges, size=min(k, grid.n_edges), replace=False))
        try:
            return remove_lines(grid, removed), removed
        except WouldDisconnect:
            continue
    raise NoValidPerturbation(f"no connected perturbation found in {MAX_TRIES} draws")


def _model_edges(model: Model) -> list[tuple[int, int]]:
    n = model.n_nodes
    return list(zip(model.rows[n::2].tolist(), model.cols[n::2].tolist()))


def adapt_model(model: Model, new_grid: Grid) -> Model:
    """Copy of a GNN ``model`` moved to ``new_grid``, a subset of its original lines.

    Filter values of surviving lines, self loops, feature maps, and biases
    are copied exactly; entries of removed lines are dropped.
    """
    if model.kind is not Kind.GNN:
        raise InvalidConfig("only GNN models can move between topologies")
    if new_grid.n_nodes != model.n_nodes:
        raise IncompatibleTopology(f"model has {model.n_nodes} nodes, grid has {new_grid.n_nodes}")
    position = {e: k for k, e in enumerate(_model_edges(model))}
    missing = [(e.i, e.j) for e in new_grid.edges if (e.i, e.j) not in position]
    if missing:
        raise IncompatibleTopology(f"grid has lines the model never saw: {missing[:5]}")

    n = model.n_nodes
    old_filter = model.param("filter")
    keep = [position[(e.i, e.j)] for e in new_grid.edges]
    new_filter = np.concatenate([old_filter[:n]] + [old_filter[n + 2 * k:n + 2 * k + 2] for k in keep])
    rest = model.theta[old_filter.size:]
    rows, cols = filter_pattern(new_grid)
    return Model(model.kind, model.dims, model.K, n, rows, cols, new_grid.grid_hash(),
                 np.concatenate([new_filter, rest]), model.activation)


@dataclass
class TopologyExperiment:
    base_grid_hash: str
    grid_hash: str
    removed_edges: list
    perturb_seed: int
    finetune_epochs: int
    test_digest: str
    pretrained_metrics: MetricsReport
    finetuned_metrics: MetricsReport
    scratch_metrics: MetricsReport
    wall_time: float = field(default=0.0, compare=False)

    VARIANTS = ("pretrained", "finetuned", "scratch")

    def metrics(self, variant: str) -> MetricsReport:
        return getattr(self, f"{variant}_metrics")

    def to_dict(self, timing: bool = False, per_sample: bool = False) -> dict:
        d = {"base_grid_hash": self.base_grid_hash, "grid_hash": self.grid_hash,
             "removed_edges": list(self.removed_edges), "perturb_seed": self.perturb_seed,
             "finetune_epochs": self.finetune_epochs, "test_digest": self.test_digest}
        for v in self.VARIANTS:
            d[f"{v}_metrics"] = self.metrics(v).to_dict(per_sample=per_sample, timing=timing)
        if timing:
            d["wall_time"] = self.wall_time
        return d


def run_transfer_experiment(regressor: Regressor, base_grid: Grid, perturb_seed: int,
                            data_config: DataConfig, finetune_epochs: int = 5,
                            train_config: TrainConfig | None = None, max_lines: int = 2,
                            threads: int = 1) -> TopologyExperiment:
    """Pre-trained, fine-tuned, and from-scratch metrics on one perturbed grid.

    ``max_lines=0`` is the control run: the grid is left unchanged.
    Fine-tuning keeps the pre-trained normalization and runs exactly
    ``finetune_epochs`` epochs; the scratch model uses ``train_config`` as is.
    """
    if not 1 <= finetune_epochs <= 10:
        raise InvalidConfig("finetune_epochs must lie in [1, 10]")
    if regressor.model.grid_hash != base_grid.grid_hash():
        raise IncompatibleTopology("model was not trained on the base grid")
    config = train_config or TrainConfig()
    t0 = time.perf_counter()
    if max_lines == 0:
        grid, removed = base_grid, []
    else:
        grid, removed = perturb_topology(base_grid, max_lines, perturb_seed)
    log.info("perturb seed %d: removed lines %s", perturb_seed, removed)
    train_ds, val_ds, test_ds = make_splits(grid, data_config, threads)

    adapted = adapt_model(regressor.model, grid)
    pretrained = evaluate(Regressor(adapted, regressor.stats), test_ds, grid)

    ft_config = replace(config, max_epochs=finetune_epochs, early_stopping=False)
    finetuned_reg, _ = train(adapted, train_ds, val_ds, ft_config, grid, stats=regressor.stats)
    finetuned = evaluate(finetuned_reg, test_ds, grid)

    m = regressor.model
    fresh = build_model(m.kind, grid, m.dims, K=m.K, seed=config.seed, activation=m.activation)
    scratch_reg, _ = train(fresh, train_ds, val_ds, config, grid)
    scratch = evaluate(scratch_reg, test_ds, grid)

    return TopologyExperiment(base_grid.grid_hash(), grid.grid_hash(), removed, perturb_seed,
                              finetune_epochs, test_ds.digest(), pretrained, finetuned, scratch,
                              wall_time=time.perf_counter() - t0)


def summarize(experiments) -> dict:
    """Median of every headline metric per variant."""
    out = {}
    for v in TopologyExperiment.VARIANTS:
        out[v] = {k: float(np.median([getattr(e.metrics(v), k) for e in experiments]))
                  for k in ("normalized_l2", "violation_rate", "feasibility_ratio", "sample_feasible_fraction")}
    return out


def write_per_sample_tsv(experiments, path) -> None:
    """Per-sample normalized L2 errors, one row per (seed, variant, sample)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["perturb_seed", "variant", "sample", "normalized_l2"])
        for e in experiments:
            for v in TopologyExperiment.VARIANTS:
                for k, err in enumerate(e.metrics(v).per_sample_l2):
                    w.writerow([e.perturb_seed, v, k, format(err, ".17g")])
