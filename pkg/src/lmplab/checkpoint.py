"""Model checkpoints: one JSON object with 17-digit parameters and normalization."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import jsonio
from .dataset import NormStats
from .errors import ParseError, SchemaMismatch
from .grid import Grid
from .nn import Kind, Model, filter_pattern
from .training import Regressor

FORMAT = "lmpnn"
VERSION = 1


def checkpoint_dict(regressor: Regressor, **extra) -> dict:
    m = regressor.model
    d = {"format": FORMAT, "version": VERSION, "kind": m.kind.value, "grid_hash": m.grid_hash,
         "dims": list(m.dims), "K": m.K, "activation": m.activation, "n_nodes": m.n_nodes,
         "normalization": regressor.stats.to_dict(), "params": m.theta}
    d.update(extra)
    return d


def save_checkpoint(regressor: Regressor, path, **extra) -> None:
    Path(path).write_text(jsonio.dumps(checkpoint_dict(regressor, **extra)) + "\n", encoding="utf-8")


def load_checkpoint(path, grid: Grid) -> Regressor:
    """Rebuild a predictor; ``grid`` supplies the filter pattern.

    Raises ``SchemaMismatch`` when the checkpoint was trained on another grid
    and ``ParseError`` for malformed files. The hash covers the grid only,
    not the parameters.
    """
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid checkpoint JSON: {exc.msg}", line=exc.lineno) from None
    for key in ("format", "version", "kind", "grid_hash", "dims", "K", "activation", "params", "normalization"):
        if key not in d:
            raise ParseError("missing checkpoint key", field=key)
    if d["format"] != FORMAT or d["version"] != VERSION:
        raise ParseError(f"not an {FORMAT} version {VERSION} checkpoint", field="format")
    if d["grid_hash"] != grid.grid_hash():
        raise SchemaMismatch(f"checkpoint was trained on grid {d['grid_hash'][:12]}, "
                             f"not {grid.grid_hash()[:12]}")
    rows, cols = filter_pattern(grid)
    try:
        model = Model(Kind(d["kind"]), tuple(d["dims"]), int(d["K"]), grid.n_nodes, rows, cols,
                      d["grid_hash"], np.asarray(d["params"], dtype=float), d["activation"])
        stats = NormStats.from_dict(d["normalization"])
    except (ValueError, TypeError, KeyError) as exc:
        raise ParseError(f"bad checkpoint contents: {exc}") from None
    return Regressor(model, stats, epochs_run=int(d.get("epochs_run", 0)))
