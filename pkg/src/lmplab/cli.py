"""Command-line entry point: ``lmplab <command> [options]``.

Commands: grid-gen, data-gen, train, eval, transfer, report. Every command
accepts --config (INI file), --seed, --threads and --out; flags win over the
config file. Exit codes: 2 config, 3 data, 4 training, 5 integrity, 6 transfer.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__, jsonio
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .dataset import read_dataset, sample_scenarios, split, synthetic_problem, write_dataset
from .errors import (DimensionMismatch, IncompatibleTopology, Infeasible, InvalidBlocking, InvalidConfig,
                     InvalidFractions, InvalidGrid, NoConvergence, NonFinite, NoValidPerturbation,
                     ParseError, SchemaMismatch, SingularLaplacian, TooManyInfeasible, WouldDisconnect)
from .grid import Grid, generate_synthetic_grid, read_case, write_case
from .nn import build_model, count_parameters
from .training import ConstantPredictor, evaluate, train, write_history
from .transfer import run_transfer_experiment, summarize, write_per_sample_tsv

log = logging.getLogger("lmplab")

EXIT_CODES = (
    ((InvalidConfig, InvalidGrid, InvalidFractions, InvalidBlocking, DimensionMismatch), 2),
    ((ParseError, TooManyInfeasible, NoConvergence, Infeasible, SingularLaplacian, OSError), 3),
    ((NonFinite,), 4),
    ((SchemaMismatch,), 5),
    ((NoValidPerturbation, IncompatibleTopology, WouldDisconnect), 6),
)

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# -- helpers --------------------------------------------------------------------

def _provenance(cfg: RunConfig) -> dict:
    return {"tool_version": __version__, "config_digest": cfg.digest()}


def _write_json(path: Path, obj) -> None:
    path.write_text(jsonio.dumps(obj) + "\n", encoding="utf-8")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _grid(args, cfg: RunConfig) -> Grid:
    """The grid from --grid, else grid.case_path, else generated from [grid]."""
    path = getattr(args, "grid", None) or cfg.grid.case_path
    if path:
        return read_case(path)
    if cfg.grid.seed is None:
        raise InvalidConfig("grid.seed is required to generate a grid (--seed or [grid] seed)")
    g = cfg.grid
    return generate_synthetic_grid(g.n, g.avg_degree, g.limit_scale, seed=g.seed)


# -- commands -------------------------------------------------------------------

def cmd_grid_gen(args, cfg: RunConfig) -> None:
    if cfg.grid.seed is None:
        raise InvalidConfig("grid.seed is required (pass --seed)")
    g = cfg.grid
    grid = generate_synthetic_grid(g.n, g.avg_degree, g.limit_scale, seed=g.seed)
    path = Path(args.output) if args.output else _out_dir(args) / "grid.case"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_case(grid, path)
    print(f"N={grid.n_nodes} E={grid.n_edges} connected={'yes' if grid.is_connected() else 'no'} -> {path}")


def cmd_data_gen(args, cfg: RunConfig) -> None:
    grid = _grid(args, cfg)
    d = cfg.data
    base = synthetic_problem(grid, seed=d.problem_seed)
    ds = sample_scenarios(grid, base, d.bound_jitter, d.cost_jitter, d.count, seed=d.seed, threads=args.threads)
    parts = split(ds, d.splits, seed=d.seed)
    out = _out_dir(args)
    manifest = dict(_provenance(cfg), grid_hash=grid.grid_hash(), count=len(ds),
                    congested_fraction=ds.congested_fraction, files={})
    for name, part in zip(("train", "val", "test"), parts):
        write_dataset(part, out / f"{name}.jsonl")
        manifest["files"][name] = {"count": len(part), "digest": part.digest()}
    _write_json(out / "data.json", manifest)
    print(f"scenarios={len(ds)} congested_fraction={ds.congested_fraction!r}")


def _load_splits(data_dir, grid):
    data_dir = Path(data_dir)
    return [read_dataset(data_dir / f"{name}.jsonl", grid) for name in ("train", "val", "test")]


def cmd_train(args, cfg: RunConfig) -> None:
    grid = _grid(args, cfg)
    train_ds, val_ds, test_ds = _load_splits(args.data, grid)
    m, t = cfg.model, cfg.train
    dims = m.resolved_dims(train_ds.schema.d)
    model = build_model(m.kind, grid, dims, K=m.K, seed=t.seed, activation=m.activation)
    reg, history = train(model, train_ds, val_ds, t, grid)
    fr = t.lambda_reg > 0
    name = args.name or (m.kind + ("_fr" if fr else ""))
    out = _out_dir(args)
    prov = _provenance(cfg)
    save_checkpoint(reg, out / f"{name}.ckpt.json", epochs_run=reg.epochs_run, **prov)
    write_history(history, out / f"{name}.history.csv")
    test = evaluate(reg, test_ds, grid)
    baseline = evaluate(ConstantPredictor.fit(train_ds), test_ds, grid)
    report = dict(prov, kind=m.kind, fr=fr, lambda_reg=t.lambda_reg, dims=list(dims), K=m.K,
                  grid_hash=grid.grid_hash(), n_params=count_parameters(m.kind, dims, grid, K=m.K),
                  epochs_run=reg.epochs_run, test=test.to_dict(), val=evaluate(reg, val_ds, grid).to_dict(),
                  baseline=baseline.to_dict())
    _write_json(out / f"{name}.metrics.json", report)
    log.info("training took %.1f s", reg.wall_time)
    print(f"{name}: epochs={reg.epochs_run} test_normalized_l2={test.normalized_l2:.6g} "
          f"violation_rate={test.violation_rate:.6g} baseline_normalized_l2={baseline.normalized_l2:.6g}")


def cmd_eval(args, cfg: RunConfig) -> None:
    grid = _grid(args, cfg)
    reg = load_checkpoint(args.checkpoint, grid)
    ds = read_dataset(args.data, grid)
    report = evaluate(reg, ds, grid)
    out = _out_dir(args)
    _write_json(out / f"{args.name}.metrics.json",
                dict(_provenance(cfg), checkpoint=str(args.checkpoint), dataset=str(args.data),
                     grid_hash=grid.grid_hash(), test=report.to_dict()))
    print(f"normalized_l2={report.normalized_l2:.6g} violation_rate={report.violation_rate:.6g} "
          f"feasibility_ratio={report.feasibility_ratio:.6g}")


def cmd_transfer(args, cfg: RunConfig) -> None:
    grid = _grid(args, cfg)
    reg = load_checkpoint(args.checkpoint, grid)
    tr = cfg.transfer
    experiments = []
    for seed in tr.seeds:
        exp = run_transfer_experiment(reg, grid, seed, cfg.data.to_config(), tr.finetune_epochs, cfg.train,
                                      max_lines=tr.max_lines, threads=args.threads)
        log.info("perturb seed %d took %.1f s", seed, exp.wall_time)
        experiments.append(exp)
        print(f"seed={seed} removed={exp.removed_edges} "
              + " ".join(f"{v}={exp.metrics(v).normalized_l2:.6g}" for v in exp.VARIANTS))
    out = _out_dir(args)
    _write_json(out / "transfer.json", dict(_provenance(cfg), experiments=[e.to_dict() for e in experiments],
                                             summary=summarize(experiments)))
    if args.per_sample_tsv:
        write_per_sample_tsv(experiments, out / "transfer_per_sample.tsv")


REPORT_COLUMNS = ("normalized_l2", "violation_rate", "feasibility_ratio", "sample_feasible_fraction")


def cmd_report(args, cfg: RunConfig) -> None:
    """Flatten metrics and transfer JSON files into one TSV table."""
    rows = []
    for path in args.files:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON ({exc.msg})", line=exc.lineno) from None
        if "experiments" in doc:
            for e in doc["experiments"]:
                for v in ("pretrained", "finetuned", "scratch"):
                    rows.append([path, f"transfer:{v}", e["perturb_seed"]] + [e[f"{v}_metrics"][c] for c in REPORT_COLUMNS])
        elif "test" in doc:
            label = doc.get("kind", "eval") + ("+fr" if doc.get("fr") else "")
            rows.append([path, label, ""] + [doc["test"][c] for c in REPORT_COLUMNS])
            if "baseline" in doc:
                rows.append([path, "mean-baseline", ""] + [doc["baseline"][c] for c in REPORT_COLUMNS])
        else:
            raise ParseError(f"{path}: not a metrics or transfer report")
    header = ["file", "model", "seed"] + list(REPORT_COLUMNS)
    out = _out_dir(args) / "report.tsv"
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([x if isinstance(x, (str, int)) else format(x, ".6g") for x in r])
    sys.stdout.write(out.read_text(encoding="utf-8"))


# -- argument parsing -----------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="INI config file")
    p.add_argument("--seed", type=int, help="seed for this command's random choices")
    p.add_argument("--threads", type=int, default=1, help="worker threads for data generation")
    p.add_argument("--out", default=".", help="output directory")
    return p


def _data_flags(p):
    p.add_argument("--count", type=int)
    p.add_argument("--bound-jitter", type=float)
    p.add_argument("--cost-jitter", type=float)
    p.add_argument("--splits", help="train,val,test fractions")
    p.add_argument("--problem-seed", type=int, help="seed of the base operating point")


def _train_flags(p):
    p.add_argument("--kind", choices=["gnn", "fcnn", "gidnn"])
    p.add_argument("--dims", help="per-node layer widths, e.g. 4,32,32,1")
    p.add_argument("-K", "--K", dest="K", type=int, help="graph filter order")
    p.add_argument("--lambda-reg", type=float, help="feasibility penalty weight (0 = plain MSE)")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="lmplab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"lmplab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("grid-gen", parents=[common], help="generate a synthetic grid case file")
    p.add_argument("--n", type=int)
    p.add_argument("--avg-degree", type=float)
    p.add_argument("--limit-scale", type=float)
    p.add_argument("-o", "--output", help="case file path (default OUT/grid.case)")

    p = sub.add_parser("data-gen", parents=[common], help="sample and label scenarios")
    p.add_argument("--grid", help="case file")
    _data_flags(p)

    p = sub.add_parser("train", parents=[common], help="train a price predictor")
    p.add_argument("--grid", help="case file")
    p.add_argument("--data", required=True, help="directory holding train/val/test.jsonl")
    p.add_argument("--name", help="artifact name prefix")
    _train_flags(p)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset .jsonl file")
    p.add_argument("--grid", help="case file")
    p.add_argument("--name", default="eval", help="artifact name prefix")

    p = sub.add_parser("transfer", parents=[common], help="topology-change experiments")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grid", help="case file of the base grid")
    p.add_argument("--max-lines", type=int)
    p.add_argument("--finetune-epochs", type=int)
    p.add_argument("--seeds", help="comma-separated perturbation seeds")
    p.add_argument("--per-sample-tsv", action="store_true", help="also dump per-sample errors")
    _data_flags(p)
    _train_flags(p)

    p = sub.add_parser("report", parents=[common], help="tabulate metrics/transfer JSON files")
    p.add_argument("files", nargs="+")
    return parser


def _overrides(args) -> list:
    """Map parsed flags onto (section, key, value) config overrides."""
    seed_target = {"grid-gen": "grid", "data-gen": "data", "train": "train", "transfer": "train"}
    flags = [
        ("n", "grid", "n"), ("avg_degree", "grid", "avg_degree"), ("limit_scale", "grid", "limit_scale"),
        ("count", "data", "count"), ("bound_jitter", "data", "bound_jitter"),
        ("cost_jitter", "data", "cost_jitter"), ("splits", "data", "splits"),
        ("problem_seed", "data", "problem_seed"),
        ("kind", "model", "kind"), ("dims", "model", "dims"), ("K", "model", "K"),
        ("lambda_reg", "train", "lambda_reg"), ("lr", "train", "lr"), ("batch_size", "train", "batch_size"),
        ("max_epochs", "train", "max_epochs"), ("patience", "train", "patience"),
        ("max_lines", "transfer", "max_lines"), ("finetune_epochs", "transfer", "finetune_epochs"),
        ("seeds", "transfer", "seeds"),
    ]
    out = [(section, key, getattr(args, attr)) for attr, section, key in flags if hasattr(args, attr)]
    if args.seed is not None and args.command in seed_target:
        out.append((seed_target[args.command], "seed", args.seed))
    return out


COMMANDS = {"grid-gen": cmd_grid_gen, "data-gen": cmd_data_gen, "train": cmd_train, "eval": cmd_eval,
            "transfer": cmd_transfer, "report": cmd_report}


def _setup_logging() -> None:
    level = os.environ.get("LMPLAB_LOG", "warn").lower()
    if level not in LOG_LEVELS:
        raise CliError(f"LMPLAB_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}", 2)
    logging.basicConfig(level=LOG_LEVELS[level], stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        if args.threads < 1:
            raise InvalidConfig("--threads must be at least 1")
        cfg = load_config(args.config, _overrides(args))
        COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(f"lmplab: error: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:
        for types, code in EXIT_CODES:
            if isinstance(exc, types):
                print(f"lmplab: error: {type(exc).__name__}: {exc}", file=sys.stderr)
                return code
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
