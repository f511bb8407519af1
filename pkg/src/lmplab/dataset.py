"""Labelled dc-OPF scenarios: sampling, splitting, normalization, and JSONL files."""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import jsonio
from .dcopf import DcOpfProblem, solve_dcopf
from .errors import (DimensionMismatch, InvalidConfig, InvalidFractions, ParseError, SchemaMismatch,
                     TooManyInfeasible)
from .grid import Grid, build_isf

log = logging.getLogger(__name__)

ALL_COLUMNS = ("p_max", "p_min", "q_max", "q_min", "cost_a", "cost_b")
DC_COLUMNS = ("p_max", "p_min", "cost_a", "cost_b")
MAX_ATTEMPTS = 20
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class FeatureSchema:
    columns: tuple = DC_COLUMNS

    def __post_init__(self):
        cols = tuple(self.columns)
        object.__setattr__(self, "columns", cols)
        unknown = [c for c in cols if c not in ALL_COLUMNS]
        if unknown:
            raise InvalidConfig(f"unknown feature columns {unknown}")
        if len(set(cols)) != len(cols):
            raise InvalidConfig(f"duplicate feature columns in {cols}")
        missing = [c for c in DC_COLUMNS if c not in cols]
        if missing:
            # The recovery chain rebuilds each problem from its features.
            raise InvalidConfig(f"schema must include the dc columns; missing {missing}")

    @property
    def d(self) -> int:
        return len(self.columns)

    def index(self, name: str) -> int:
        return self.columns.index(name)

    def features(self, problem: DcOpfProblem) -> np.ndarray:
        source = {"p_max": problem.p_max, "p_min": problem.p_min,
                  "cost_a": problem.cost_a, "cost_b": problem.cost_b}
        zeros = np.zeros(problem.grid.n_nodes)
        return np.column_stack([source.get(c, zeros) for c in self.columns]).astype(float)

    def problem(self, features: np.ndarray, grid: Grid, isf=None) -> DcOpfProblem:
        col = lambda name: features[:, self.index(name)]
        return DcOpfProblem(grid, col("cost_a"), col("cost_b"), col("p_min"), col("p_max"), isf_matrix=isf)


@dataclass(eq=False)
class Scenario:
    features: np.ndarray
    pi: np.ndarray
    p_star: np.ndarray
    f_star: np.ndarray
    lam: float
    congested: tuple
    mu_upper: np.ndarray
    mu_lower: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return (all(np.array_equal(getattr(self, k), getattr(other, k))
                    for k in ("features", "pi", "p_star", "f_star", "mu_upper", "mu_lower"))
                and self.lam == other.lam and tuple(self.congested) == tuple(other.congested))


@dataclass(frozen=True)
class NormStats:
    feature_mean: np.ndarray
    feature_std: np.ndarray
    label_mean: float
    label_std: float

    def features(self, X):
        return (np.asarray(X) - self.feature_mean) / self.feature_std

    def labels(self, y):
        return (np.asarray(y) - self.label_mean) / self.label_std

    def unlabel(self, z):
        return np.asarray(z) * self.label_std + self.label_mean

    def to_dict(self) -> dict:
        return {"feature_mean": self.feature_mean.tolist(), "feature_std": self.feature_std.tolist(),
                "label_mean": self.label_mean, "label_std": self.label_std}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(np.asarray(d["feature_mean"], float), np.asarray(d["feature_std"], float),
                   float(d["label_mean"]), float(d["label_std"]))


@dataclass(eq=False)
class Dataset:
    grid_hash: str
    schema: FeatureSchema
    scenarios: list
    n_nodes: int
    normalization_stats: NormStats | None = None
    normalized: bool = False

    def __len__(self):
        return len(self.scenarios)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.grid_hash == other.grid_hash and self.schema == other.schema
                and self.n_nodes == other.n_nodes and self.normalized == other.normalized
                and len(self) == len(other)
                and all(a == b for a, b in zip(self.scenarios, other.scenarios)))

    @property
    def features(self) -> np.ndarray:
        return np.stack([s.features for s in self.scenarios]) if self.scenarios else \
            np.zeros((0, self.n_nodes, self.schema.d))

    @property
    def labels(self) -> np.ndarray:
        return np.stack([s.pi for s in self.scenarios]) if self.scenarios else np.zeros((0, self.n_nodes))

    @property
    def congested_fraction(self) -> float:
        if not self.scenarios:
            return 0.0
        return sum(1 for s in self.scenarios if s.congested) / len(self.scenarios)

    def subset(self, indices) -> "Dataset":
        return replace(self, scenarios=[self.scenarios[i] for i in indices])

    def problems(self, grid: Grid) -> list[DcOpfProblem]:
        """Rebuild each scenario's dc-OPF instance from its raw features."""
        if self.normalized:
            raise SchemaMismatch("problems can only be rebuilt from physical (unnormalized) features")
        check_grid(self, grid)
        isf = build_isf(grid)
        return [self.schema.problem(s.features, grid, isf) for s in self.scenarios]

    def digest(self) -> str:
        return hashlib.sha256(format_dataset(self).encode("utf-8")).hexdigest()


def check_grid(dataset: Dataset, grid: Grid) -> None:
    if grid.grid_hash() != dataset.grid_hash:
        raise SchemaMismatch(f"dataset was generated on grid {dataset.grid_hash[:12]}, "
                             f"not {grid.grid_hash()[:12]}")


# -- operating conditions -------------------------------------------------------

def synthetic_problem(grid: Grid, seed: int = 0, gen_fraction: float = 0.4,
                      fixed_loads: bool = False) -> DcOpfProblem:
    """Base operating point: quadratic-cost generators and price-responsive demand.

    Demand nodes bid a high value ``b`` with a small quadratic term, so they
    are served in full unless congestion drives the local price up; this
    keeps every perturbed draw feasible. ``fixed_loads=True`` makes demand
    inelastic instead (``p_min == p_max < 0``).

    Depends only on ``grid.n_nodes`` and ``seed`` so that the same nodal data
    can be re-used after topology edits.
    """
    n = grid.n_nodes
    rng = np.random.default_rng(seed)
    n_gen = min(n - 1, max(1, int(round(gen_fraction * n)))) if n > 1 else 1
    gens = np.zeros(n, dtype=bool)
    gens[rng.choice(n, size=n_gen, replace=False)] = True
    load = rng.uniform(0.5, 1.5, size=n)
    gen_a = rng.uniform(0.5, 2.0, size=n)
    gen_b = rng.uniform(5.0, 40.0, size=n)
    dem_a = rng.uniform(0.5, 2.0, size=n)
    dem_b = rng.uniform(60.0, 100.0, size=n)
    cap = rng.uniform(0.5, 1.5, size=n)
    cap = np.where(gens, cap / cap[gens].sum() * 2.0 * load[~gens].sum(), 0.0)
    if fixed_loads:
        cost_a = np.where(gens, gen_a, 0.0)
        cost_b = np.where(gens, gen_b, 0.0)
        p_max = np.where(gens, cap, -load)
    else:
        cost_a = np.where(gens, gen_a, dem_a)
        cost_b = np.where(gens, gen_b, dem_b)
        p_max = np.where(gens, cap, 0.0)
    p_min = np.where(gens, 0.0, -load)
    return DcOpfProblem(grid, cost_a, cost_b, p_min, p_max)


def perturb_problem(problem: DcOpfProblem, rng: np.random.Generator, bound_jitter: float,
                    cost_jitter: float) -> DcOpfProblem:
    """Scale every bound and cost coefficient by an independent uniform factor."""
    n = problem.grid.n_nodes
    f_lo = rng.uniform(1 - bound_jitter, 1 + bound_jitter, size=n)
    f_hi = rng.uniform(1 - bound_jitter, 1 + bound_jitter, size=n)
    f_a = rng.uniform(1 - cost_jitter, 1 + cost_jitter, size=n)
    f_b = rng.uniform(1 - cost_jitter, 1 + cost_jitter, size=n)
    fixed = problem.fixed
    f_hi = np.where(fixed, f_lo, f_hi)
    lo = problem.p_min * f_lo
    hi = problem.p_max * f_hi
    return problem.replace(cost_a=problem.cost_a * f_a, cost_b=problem.cost_b * f_b,
                           p_min=np.minimum(lo, hi), p_max=np.maximum(lo, hi))


def _scenario(problem: DcOpfProblem, schema: FeatureSchema, solution) -> Scenario:
    return Scenario(features=schema.features(problem), pi=solution.pi, p_star=solution.p_star,
                    f_star=solution.f_star, lam=float(solution.lam),
                    congested=tuple(solution.congested_lines(limits=problem.grid.flow_limits)),
                    mu_upper=solution.mu_upper, mu_lower=solution.mu_lower)


def sample_one(base: DcOpfProblem, schema: FeatureSchema, bound_jitter: float, cost_jitter: float,
               seed: int, index: int) -> Scenario:
    """Scenario ``index``; depends only on ``(seed, index)``, never on call order."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))
    for _ in range(MAX_ATTEMPTS):
        problem = perturb_problem(base, rng, bound_jitter, cost_jitter)
        solution = solve_dcopf(problem)
        if solution.optimal:
            return _scenario(problem, schema, solution)
    raise TooManyInfeasible(f"scenario {index}: {MAX_ATTEMPTS} consecutive infeasible draws")


def sample_scenarios(grid: Grid, base_problem: DcOpfProblem, bound_jitter: float = 0.2,
                     cost_jitter: float = 0.2, count: int = 1, seed: int = 0,
                     schema: FeatureSchema = FeatureSchema(), threads: int = 1) -> Dataset:
    if not (0 <= bound_jitter < 1 and 0 <= cost_jitter < 1):
        raise InvalidConfig("jitters must lie in [0, 1)")
    if count < 1:
        raise InvalidConfig("count must be at least 1")
    if base_problem.grid != grid:
        base_problem = base_problem.replace(grid=grid)
    base = base_problem.replace(isf_matrix=build_isf(grid))
    job = lambda k: sample_one(base, schema, bound_jitter, cost_jitter, seed, k)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scenarios = list(pool.map(job, range(count)))
    else:
        scenarios = [job(k) for k in range(count)]
    ds = Dataset(grid.grid_hash(), schema, scenarios, grid.n_nodes)
    log.info("sampled %d scenarios, congested fraction %.3f", count, ds.congested_fraction)
    return ds


@dataclass(frozen=True)
class DataConfig:
    """How to build a labelled train/val/test triple on a grid."""
    count: int = 5000
    bound_jitter: float = 0.2
    cost_jitter: float = 0.2
    splits: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    problem_seed: int = 0

    def __post_init__(self):
        if self.count < 3:
            raise InvalidConfig("count must be at least 3 so every split is non-empty")
        split_sizes(self.count, self.splits)


def make_splits(grid: Grid, config: DataConfig, threads: int = 1):
    """Sample ``config.count`` scenarios on ``grid`` and split them."""
    base = synthetic_problem(grid, seed=config.problem_seed)
    ds = sample_scenarios(grid, base, config.bound_jitter, config.cost_jitter, config.count,
                          seed=config.seed, threads=threads)
    return split(ds, config.splits, seed=config.seed)


# -- split / normalize ----------------------------------------------------------

def split_sizes(count: int, fractions) -> list[int]:
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or min(fractions) <= 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidFractions(f"need three positive fractions summing to 1, got {fractions}")
    raw = [count * f for f in fractions]
    sizes = [int(np.floor(r)) for r in raw]
    order = sorted(range(3), key=lambda k: (-(raw[k] - sizes[k]), k))
    for k in order[:count - sum(sizes)]:
        sizes[k] += 1
    return sizes


def split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    sizes = split_sizes(len(dataset), fractions)
    perm = np.random.default_rng(seed).permutation(len(dataset))
    a, b = sizes[0], sizes[0] + sizes[1]
    return dataset.subset(perm[:a]), dataset.subset(perm[a:b]), dataset.subset(perm[b:])


def compute_stats(dataset: Dataset) -> NormStats:
    X = dataset.features.reshape(-1, dataset.schema.d)
    y = dataset.labels
    return NormStats(X.mean(axis=0), np.maximum(X.std(axis=0), STD_FLOOR),
                     float(y.mean()), float(max(y.std(), STD_FLOOR)))


def normalize(dataset: Dataset, stats: NormStats | None = None):
    """Standardized copy of ``dataset`` and the stats used.

    Features are standardized per column, labels by one scalar mean/stdev.
    Pass the training stats to normalize validation and test sets.
    """
    if dataset.normalized:
        raise InvalidConfig("dataset is already normalized")
    if stats is None:
        stats = compute_stats(dataset)
    elif stats.feature_mean.shape != (dataset.schema.d,):
        raise DimensionMismatch(f"stats cover {stats.feature_mean.shape[0]} columns, dataset has {dataset.schema.d}")
    scen = [replace(s, features=stats.features(s.features), pi=stats.labels(s.pi)) for s in dataset.scenarios]
    return replace(dataset, scenarios=scen, normalization_stats=stats, normalized=True), stats


def denormalize(dataset: Dataset, stats: NormStats | None = None) -> Dataset:
    stats = stats or dataset.normalization_stats
    scen = [replace(s, features=s.features * stats.feature_std + stats.feature_mean, pi=stats.unlabel(s.pi))
            for s in dataset.scenarios]
    return replace(dataset, scenarios=scen, normalization_stats=None, normalized=False)


# -- files ----------------------------------------------------------------------

def format_dataset(dataset: Dataset) -> str:
    if dataset.normalized:
        raise InvalidConfig("stored datasets hold raw values; denormalize first")
    header = {"format": "lmpds", "version": 1, "grid_hash": dataset.grid_hash, "n": dataset.n_nodes,
              "d": dataset.schema.d, "columns": list(dataset.schema.columns), "count": len(dataset)}
    lines = [jsonio.dumps(header)]
    for s in dataset.scenarios:
        lines.append(jsonio.dumps({"x": s.features, "pi": s.pi, "p": s.p_star, "f": s.f_star,
                                   "lambda": s.lam, "congested": list(s.congested),
                                   "mu_upper": s.mu_upper, "mu_lower": s.mu_lower}))
    return "\n".join(lines) + "\n"


def write_dataset(dataset: Dataset, path) -> None:
    Path(path).write_text(format_dataset(dataset), encoding="utf-8")


def read_dataset(path, grid: Grid | None = None) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty dataset file")
    header = _json_line(lines[0], 1)
    for key in ("format", "version", "grid_hash", "n", "d", "columns", "count"):
        if key not in header:
            raise ParseError("missing header key", line=1, field=key)
    if header["format"] != "lmpds" or header["version"] != 1:
        raise ParseError("not an lmpds version 1 file", line=1, field="format")
    try:
        schema = FeatureSchema(tuple(header["columns"]))
    except InvalidConfig as exc:
        raise ParseError(str(exc), line=1, field="columns") from exc
    n, d, count = int(header["n"]), int(header["d"]), int(header["count"])
    if schema.d != d:
        raise ParseError("column list disagrees with d", line=1, field="d")
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != count:
        raise ParseError(f"header declares {count} scenarios, found {len(body)} (truncated?)", field="count")
    n_edges = None
    scenarios = []
    for k, raw in enumerate(body, start=2):
        obj = _json_line(raw, k)
        try:
            x = np.asarray(obj["x"], dtype=float)
            arrays = {key: np.asarray(obj[key], dtype=float) for key in ("pi", "p", "f")}
            mu_u = np.asarray(obj.get("mu_upper", np.zeros_like(arrays["f"])), dtype=float)
            mu_l = np.asarray(obj.get("mu_lower", np.zeros_like(arrays["f"])), dtype=float)
            lam = float(obj["lambda"])
            congested = tuple(int(e) for e in obj["congested"])
        except KeyError as exc:
            raise ParseError("missing scenario key", line=k, field=exc.args[0]) from None
        except (TypeError, ValueError) as exc:
            raise ParseError(f"bad scenario values: {exc}", line=k) from None
        if x.shape != (n, d):
            raise ParseError(f"x has shape {x.shape}, expected {(n, d)}", line=k, field="x")
        for key in ("pi", "p"):
            if arrays[key].shape != (n,):
                raise ParseError(f"{key} must have {n} entries", line=k, field=key)
        n_edges = arrays["f"].size if n_edges is None else n_edges
        if arrays["f"].shape != (n_edges,) or mu_u.shape != (n_edges,) or mu_l.shape != (n_edges,):
            raise ParseError("flow-sized arrays disagree in length", line=k, field="f")
        scenarios.append(Scenario(x, arrays["pi"], arrays["p"], arrays["f"], lam, congested, mu_u, mu_l))
    ds = Dataset(header["grid_hash"], schema, scenarios, n)
    if grid is not None:
        check_grid(ds, grid)
        if grid.n_nodes != n:
            raise SchemaMismatch("grid node count differs from dataset")
    return ds


def _json_line(raw, line):
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", line=line) from None
