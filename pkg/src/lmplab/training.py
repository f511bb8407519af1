"""Feasibility-regularized training of price predictors and their evaluation.

Predicted prices are mapped back to dispatch by solving each node's
single-variable problem ``min c_i(p) - pi_i p`` over its bounds, then to line
flows through the ISF matrix. The loss adds the total flow-limit violation
of that recovered dispatch to the squared price error.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import Dataset, NormStats, check_grid, compute_stats
from .dcopf import DcOpfProblem
from .errors import DimensionMismatch, InvalidConfig, NonFinite, SchemaMismatch
from .grid import Grid, build_isf
from .nn import Model

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 300
    patience: int = 10
    lambda_reg: float = 1.0
    seed: int = 0
    early_stopping: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidConfig("lr must be positive")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be at least 1")
        if self.lambda_reg < 0:
            raise InvalidConfig("lambda_reg must be nonnegative")
        if self.max_epochs < 1 or self.patience < 1:
            raise InvalidConfig("max_epochs and patience must be positive")


@dataclass
class MetricsReport:
    normalized_l2: float
    violation_rate: float
    feasibility_ratio: float
    sample_feasible_fraction: float
    epochs_run: int = 0
    wall_time: float = 0.0
    violation_clipped: bool = False
    per_sample_l2: list = field(default_factory=list, repr=False)

    def to_dict(self, per_sample: bool = False, timing: bool = False) -> dict:
        """Plain dict; wall time is left out unless asked for so reports stay reproducible."""
        d = asdict(self)
        if not per_sample:
            d.pop("per_sample_l2")
        if not timing:
            d.pop("wall_time")
        return d


# -- recovery chain -------------------------------------------------------------

def recover_batch(pi_hat, a, b, lo, hi, tie_eps: float = 1e-9):
    """Vectorized dispatch recovery.

    Returns ``(p, dp_dpi, degenerate)``; all arrays share ``pi_hat``'s shape.
    ``dp_dpi`` is ``1/(2a)`` where the quadratic minimizer is strictly inside
    its bounds and zero elsewhere.
    """
    pi_hat = np.asarray(pi_hat, dtype=float)
    quad = a > 0
    safe_a = np.where(quad, a, 1.0)
    unclamped = (pi_hat - b) / (2.0 * safe_a)
    p_quad = np.clip(unclamped, lo, hi)
    p_lin = np.where(pi_hat > b + tie_eps, hi, np.where(pi_hat < b - tie_eps, lo, 0.5 * (lo + hi)))
    p = np.where(quad, p_quad, p_lin)
    fixed = lo == hi
    p = np.where(fixed, lo, p)
    interior = quad & ~fixed & (unclamped > lo) & (unclamped < hi)
    dp = np.where(interior, 1.0 / (2.0 * safe_a), 0.0)
    degenerate = ~quad & ~fixed & (np.abs(pi_hat - b) <= tie_eps)
    return p, dp, degenerate


def recover_injections(pi_hat, problem: DcOpfProblem, tie_eps: float = 1e-9, return_flags: bool = False):
    """Per-node minimizer of ``c_i(p) - pi_i p`` over ``[p_min_i, p_max_i]``.

    Linear-cost nodes whose price ties their marginal cost (within
    ``tie_eps``) get the interval midpoint and are flagged degenerate.
    """
    pi_hat = np.asarray(pi_hat, dtype=float)
    if pi_hat.shape != (problem.grid.n_nodes,):
        raise DimensionMismatch(f"price vector shape {pi_hat.shape} != ({problem.grid.n_nodes},)")
    p, _, degenerate = recover_batch(pi_hat, problem.cost_a, problem.cost_b, problem.p_min,
                                     problem.p_max, tie_eps)
    return (p, degenerate) if return_flags else p


def _violation_terms(f, fmax):
    excess = np.abs(f) - fmax
    active = excess > 0
    return np.where(active, excess, 0.0), np.where(active, np.sign(f), 0.0)


def fr_loss(pi_hat, pi, problem: DcOpfProblem, isf=None, lambda_reg: float = 1.0):
    """``||pi - pi_hat||^2 + lambda_reg * ||relu(|S p(pi_hat)| - f_max)||_1`` and its gradient."""
    pi_hat = np.asarray(pi_hat, dtype=float)
    pi = np.asarray(pi, dtype=float)
    S = problem.isf if isf is None else np.asarray(isf, dtype=float)
    n = problem.grid.n_nodes
    if pi_hat.shape != (n,) or pi.shape != (n,) or S.shape != (problem.grid.n_edges, n):
        raise DimensionMismatch("price vectors and ISF must match the grid")
    diff = pi_hat - pi
    loss = float(diff @ diff)
    grad = 2.0 * diff
    if lambda_reg:
        p, dp, _ = recover_batch(pi_hat, problem.cost_a, problem.cost_b, problem.p_min, problem.p_max)
        excess, sign = _violation_terms(S @ p, problem.grid.flow_limits)
        loss += lambda_reg * float(excess.sum())
        grad = grad + lambda_reg * dp * (S.T @ sign)
    return loss, grad


# -- predictors -----------------------------------------------------------------

@dataclass
class Regressor:
    """A model plus the normalization that maps raw features to physical prices."""
    model: Model
    stats: NormStats
    epochs_run: int = 0
    wall_time: float = 0.0

    def predict(self, features) -> np.ndarray:
        X = self.stats.features(np.asarray(features, dtype=float))
        return self.stats.unlabel(self.model.predict(X))

    @property
    def grid_hash(self) -> str:
        return self.model.grid_hash


@dataclass
class ConstantPredictor:
    """Predicts the per-node mean training price for every input."""
    mean_price: np.ndarray
    grid_hash: str

    @classmethod
    def fit(cls, dataset: Dataset) -> "ConstantPredictor":
        return cls(dataset.labels.mean(axis=0), dataset.grid_hash)

    def predict(self, features) -> np.ndarray:
        features = np.asarray(features)
        if features.ndim == 2:
            return self.mean_price.copy()
        return np.broadcast_to(self.mean_price, features.shape[:2]).copy()


# -- batched problem data -------------------------------------------------------

@dataclass
class _Arrays:
    X: np.ndarray      # standardized features (B, N, d)
    Y: np.ndarray      # standardized labels (B, N)
    pi: np.ndarray     # physical labels (B, N)
    a: np.ndarray
    b: np.ndarray
    lo: np.ndarray
    hi: np.ndarray


def _arrays(ds: Dataset, stats: NormStats) -> _Arrays:
    if ds.normalized:
        raise SchemaMismatch("pass raw datasets; normalization happens inside training")
    F = ds.features
    col = lambda c: F[:, :, ds.schema.index(c)]
    pi = ds.labels
    return _Arrays(stats.features(F), stats.labels(pi), pi, col("cost_a"), col("cost_b"),
                   col("p_min"), col("p_max"))


def _batch_loss(model, arr: _Arrays, idx, stats, S, fmax, lambda_reg, need_grad=True):
    X = arr.X[idx]
    out, cache = model.forward(X)
    diff = out - arr.Y[idx]
    per_sample = np.sum(diff * diff, axis=1)
    g_out = 2.0 * diff
    if lambda_reg:
        pi_hat = stats.unlabel(out)
        p, dp, _ = recover_batch(pi_hat, arr.a[idx], arr.b[idx], arr.lo[idx], arr.hi[idx])
        excess, sign = _violation_terms(p @ S.T, fmax)
        per_sample = per_sample + lambda_reg * excess.sum(axis=1)
        g_out = g_out + lambda_reg * stats.label_std * dp * (sign @ S)
    loss = float(per_sample.mean())
    if not need_grad:
        return loss, None
    grad = model.backward(cache, g_out / len(idx))
    return loss, grad


class Adam:
    def __init__(self, size, lr, beta1, beta2, eps):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        theta -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _dataset_loss(model, arr, stats, S, fmax, lambda_reg, batch=512):
    total = 0.0
    n = arr.X.shape[0]
    for start in range(0, n, batch):
        idx = np.arange(start, min(n, start + batch))
        loss, _ = _batch_loss(model, arr, idx, stats, S, fmax, lambda_reg, need_grad=False)
        total += loss * len(idx)
    return total / n


def train(model: Model, train_ds: Dataset, val_ds: Dataset, config: TrainConfig, grid: Grid,
          stats: NormStats | None = None):
    """Mini-batch Adam on the feasibility-regularized loss.

    The squared error is taken on standardized prices; the violation penalty
    is computed on de-standardized (physical) prices and flows. With early
    stopping enabled the parameters with the best validation loss are kept.
    Returns ``(Regressor, history)``.
    """
    for ds in (train_ds, val_ds):
        if ds.grid_hash != model.grid_hash:
            raise SchemaMismatch("dataset and model were built for different grids")
    check_grid(train_ds, grid)
    stats = stats or compute_stats(train_ds)
    S = build_isf(grid)
    fmax = grid.flow_limits
    tr = _arrays(train_ds, stats)
    va = _arrays(val_ds, stats)
    model = model.copy()
    reg = Regressor(model, stats)
    opt = Adam(model.n_params, config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)
    n = len(train_ds)

    history = []
    best_val, best_theta, stale = np.inf, model.theta.copy(), 0
    t0 = time.perf_counter()
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            try:
                loss, grad = _batch_loss(model, tr, idx, stats, S, fmax, config.lambda_reg)
            except NonFinite as exc:
                raise NonFinite("training diverged", epoch=epoch) from exc
            if not np.isfinite(loss):
                raise NonFinite("training loss is not finite", epoch=epoch)
            opt.step(model.theta, grad)
            total += loss * len(idx)
        val_loss = _dataset_loss(model, va, stats, S, fmax, config.lambda_reg)
        if not np.isfinite(val_loss):
            raise NonFinite("validation loss is not finite", epoch=epoch)
        m = evaluate(reg, val_ds, grid)
        history.append({"epoch": epoch, "train_loss": total / n, "val_loss": val_loss,
                        "val_normalized_l2": m.normalized_l2, "val_violation_rate": m.violation_rate})
        log.debug("epoch %d train %.6g val %.6g", epoch, total / n, val_loss)
        if val_loss < best_val:
            best_val, best_theta, stale = val_loss, model.theta.copy(), 0
        else:
            stale += 1
        if config.early_stopping and stale >= config.patience:
            break
    if config.early_stopping:
        model.theta[:] = best_theta
    reg.epochs_run = len(history)
    reg.wall_time = time.perf_counter() - t0
    return reg, history


# -- evaluation -----------------------------------------------------------------

def evaluate(predictor, test_ds: Dataset, grid: Grid, problems=None) -> MetricsReport:
    """Accuracy and line-limit feasibility of ``predictor`` on ``test_ds``, in physical units."""
    if getattr(predictor, "grid_hash", test_ds.grid_hash) != test_ds.grid_hash:
        raise SchemaMismatch("predictor and dataset were built for different grids")
    check_grid(test_ds, grid)
    if len(test_ds) == 0:
        raise InvalidConfig("cannot evaluate on an empty dataset")
    F = test_ds.features
    pi = test_ds.labels
    pi_hat = np.asarray(predictor.predict(F), dtype=float)
    if problems is None:
        col = lambda c: F[:, :, test_ds.schema.index(c)]
        a, b, lo, hi = col("cost_a"), col("cost_b"), col("p_min"), col("p_max")
    else:
        a, b, lo, hi = (np.stack([getattr(p, k) for p in problems]) for k in ("cost_a", "cost_b", "p_min", "p_max"))
    S = build_isf(grid)
    fmax = grid.flow_limits
    p, _, _ = recover_batch(pi_hat, a, b, lo, hi)
    excess, _ = _violation_terms(p @ S.T, fmax)
    per_l2 = np.linalg.norm(pi_hat - pi, axis=1) / np.linalg.norm(pi, axis=1)
    per_viol = excess.sum(axis=1) / fmax.sum()
    violation = float(per_viol.mean())
    clipped = violation > 1.0
    violation = min(violation, 1.0)
    return MetricsReport(normalized_l2=float(per_l2.mean()), violation_rate=violation,
                         feasibility_ratio=1.0 - violation,
                         sample_feasible_fraction=float(np.mean(excess.sum(axis=1) <= 0.0)),
                         epochs_run=int(getattr(predictor, "epochs_run", 0)),
                         wall_time=float(getattr(predictor, "wall_time", 0.0)),
                         violation_clipped=bool(clipped), per_sample_l2=per_l2.tolist())


def write_history(history, path) -> None:
    cols = ["epoch", "train_loss", "val_loss", "val_normalized_l2", "val_violation_rate"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in history:
            w.writerow([row["epoch"]] + [format(float(row[c]), ".17g") for c in cols[1:]])
