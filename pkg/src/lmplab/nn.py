"""A small float64 neural-network engine with hand-written gradients.

Three model kinds share one flat parameter vector ``theta``:

* ``gnn``: bilinear graph-filter layers
  ``X_{t+1} = act(sum_k W^k X_t H_{t,k} + 1 b_t^T)`` with one trainable
  sparse filter ``W`` (graph adjacency plus self loops) shared by every
  layer and every power ``k``.
* ``fcnn``: dense layers on the flattened ``N*d`` input.
* ``gidnn``: the dense layers with weight blocks pruned to the grid pattern.

Inputs are batches shaped ``(B, N, d)``; outputs are ``(B, N)``. ``dims``
always lists per-node widths ``[d_0, ..., d_T]`` with ``d_T == 1``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import scipy.sparse

from .errors import DimensionMismatch, InvalidBlocking, InvalidConfig, NonFinite
from .grid import Grid


class Kind(str, enum.Enum):
    GNN = "gnn"
    FCNN = "fcnn"
    GIDNN = "gidnn"


def filter_pattern(grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    """Row/column indices of the adjacency-plus-diagonal pattern.

    Order: the N self loops, then ``(i, j)`` and ``(j, i)`` for each edge in
    edge-list order. Checkpoint parameters follow the same order.
    """
    n = grid.n_nodes
    ends = grid.endpoints
    rows = np.concatenate([np.arange(n), np.column_stack([ends[:, 0], ends[:, 1]]).ravel()])
    cols = np.concatenate([np.arange(n), np.column_stack([ends[:, 1], ends[:, 0]]).ravel()])
    return rows.astype(np.int64), cols.astype(np.int64)


def normalized_adjacency_values(grid: Grid) -> np.ndarray:
    """``D^{-1/2} (A + I) D^{-1/2}`` evaluated on :func:`filter_pattern`."""
    rows, cols = filter_pattern(grid)
    deg = np.ones(grid.n_nodes)
    np.add.at(deg, grid.endpoints.ravel(), 1.0)
    return 1.0 / np.sqrt(deg[rows] * deg[cols])


def count_parameters(kind, dims, grid: Grid, K: int = 1) -> int:
    kind = Kind(kind)
    n, nnz = grid.n_nodes, grid.n_nodes + 2 * grid.n_edges
    pairs = list(zip(dims[:-1], dims[1:]))
    if kind is Kind.GNN:
        return nnz + sum((K + 1) * a * b + b for a, b in pairs)
    if kind is Kind.FCNN:
        return sum((n * a) * (n * b) + n * b for a, b in pairs)
    return sum(nnz * a * b + n * b for a, b in pairs)


def gidnn_mask(grid: Grid, layer_dims) -> list[np.ndarray]:
    """Boolean weight masks for a GiDNN whose layer widths are ``layer_dims``.

    Every width is split into N equal node blocks; block ``(i, j)`` is
    trainable iff ``i == j`` or ``(i, j)`` is an edge.
    """
    n = grid.n_nodes
    for w in layer_dims:
        if w <= 0 or w % n:
            raise InvalidBlocking(f"layer width {w} is not divisible into {n} node blocks")
    block = np.eye(n, dtype=bool)
    for e in grid.edges:
        block[e.i, e.j] = block[e.j, e.i] = True
    masks = []
    for w_in, w_out in zip(layer_dims[:-1], layer_dims[1:]):
        masks.append(np.kron(block, np.ones((w_out // n, w_in // n), dtype=bool)))
    return masks


@dataclass
class Model:
    kind: Kind
    dims: tuple
    K: int
    n_nodes: int
    rows: np.ndarray
    cols: np.ndarray
    grid_hash: str
    theta: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.kind = Kind(self.kind)
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) < 2 or self.dims[-1] != 1 or min(self.dims) < 1:
            raise InvalidConfig(f"dims must have length >= 2, positive entries and end in 1: {self.dims}")
        if self.kind is Kind.GNN and self.K < 1:
            raise InvalidConfig("filter order K must be at least 1")
        if self.activation not in ("relu", "identity"):
            raise InvalidConfig(f"unknown activation {self.activation!r}")
        self.layout = _layout(self.kind, self.dims, self.K, self.n_nodes, self.rows.size)
        size = sum(int(np.prod(shape)) for _, shape in self.layout.values())
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape != (size,):
            raise DimensionMismatch(f"theta has {self.theta.size} entries, layout needs {size}")
        # Aggregation matrices for the pattern: node <- pattern entry.
        p = np.arange(self.rows.size)
        ones = np.ones(self.rows.size)
        self._gather_rows = scipy.sparse.csr_matrix((ones, (self.rows, p)), shape=(self.n_nodes, p.size))
        self._gather_cols = scipy.sparse.csr_matrix((ones, (self.cols, p)), shape=(self.n_nodes, p.size))

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    @property
    def n_params(self) -> int:
        return self.theta.size

    def param(self, name: str) -> np.ndarray:
        """Writable view of one named tensor inside ``theta``."""
        offset, shape = self.layout[name]
        return self.theta[offset:offset + int(np.prod(shape))].reshape(shape)

    def copy(self) -> "Model":
        return Model(self.kind, self.dims, self.K, self.n_nodes, self.rows.copy(), self.cols.copy(),
                     self.grid_hash, self.theta.copy(), self.activation)

    def filter_matrix(self) -> scipy.sparse.csr_matrix:
        return scipy.sparse.csr_matrix((self.param("filter"), (self.rows, self.cols)),
                                       shape=(self.n_nodes, self.n_nodes))

    def forward(self, X):
        X = self._check_input(X)
        with np.errstate(over="ignore", invalid="ignore"):
            if self.kind is Kind.GNN:
                out, cache = gnn_forward(self, X)
            elif self.kind is Kind.FCNN:
                out, cache = fcnn_forward(self, X)
            else:
                out, cache = gidnn_forward(self, X)
        if not np.all(np.isfinite(out)):
            raise NonFinite("non-finite model output")
        return out, cache

    def predict(self, X) -> np.ndarray:
        single = np.ndim(X) == 2
        out, _ = self.forward(X[None] if single else X)
        return out[0] if single else out

    def backward(self, cache, d_out) -> np.ndarray:
        d_out = np.asarray(d_out, dtype=float)
        if self.kind is Kind.GNN:
            grad = gnn_backward(self, cache, d_out)
        elif self.kind is Kind.FCNN:
            grad = fcnn_backward(self, cache, d_out)
        else:
            grad = gidnn_backward(self, cache, d_out)
        if not np.all(np.isfinite(grad)):
            raise NonFinite("non-finite gradient")
        return grad

    def _check_input(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            X = X[None]
        if X.ndim != 3 or X.shape[1:] != (self.n_nodes, self.dims[0]):
            raise DimensionMismatch(f"input shape {X.shape} does not match (B, {self.n_nodes}, {self.dims[0]})")
        return X

    def _act(self, t):
        return self.activation == "relu" and t < self.n_layers - 1


def _layout(kind, dims, K, n, nnz) -> dict:
    shapes = []
    if kind is Kind.GNN:
        shapes.append(("filter", (nnz,)))
        for t, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            shapes += [(f"H{t}_{k}", (a, b)) for k in range(K + 1)]
        shapes += [(f"b{t}", (b,)) for t, b in enumerate(dims[1:])]
    elif kind is Kind.FCNN:
        shapes += [(f"W{t}", (n * b, n * a)) for t, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
        shapes += [(f"b{t}", (n * b,)) for t, b in enumerate(dims[1:])]
    else:
        shapes += [(f"B{t}", (nnz, b, a)) for t, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
        shapes += [(f"b{t}", (n * b,)) for t, b in enumerate(dims[1:])]
    layout, offset = {}, 0
    for name, shape in shapes:
        layout[name] = (offset, shape)
        offset += int(np.prod(shape))
    return layout


def build_model(kind, grid: Grid, dims, K: int = 2, seed: int = 0, activation: str = "relu") -> Model:
    """Fresh model with fan-in scaled uniform weights and zero biases."""
    kind = Kind(kind)
    rows, cols = filter_pattern(grid)
    n = grid.n_nodes
    layout = _layout(kind, tuple(dims), K, n, rows.size)
    size = sum(int(np.prod(s)) for _, s in layout.values())
    model = Model(kind, tuple(dims), K, n, rows, cols, grid.grid_hash(), np.zeros(size), activation)
    rng = np.random.default_rng(seed)
    avg_blocks = rows.size / n
    for name, (_, shape) in layout.items():
        if name == "filter":
            model.param(name)[:] = normalized_adjacency_values(grid)
        elif name.startswith("H"):
            bound = np.sqrt(6.0 / ((K + 1) * shape[0]))
            model.param(name)[:] = rng.uniform(-bound, bound, size=shape)
        elif name.startswith("W"):
            bound = np.sqrt(6.0 / shape[1])
            model.param(name)[:] = rng.uniform(-bound, bound, size=shape)
        elif name.startswith("B"):
            bound = np.sqrt(6.0 / (avg_blocks * shape[2]))
            model.param(name)[:] = rng.uniform(-bound, bound, size=shape)
    return model


def _apply_sparse(W, Z):
    """``W @ Z[b]`` for every batch element of ``Z`` shaped (B, M, F)."""
    B, N, F = Z.shape
    flat = Z.transpose(1, 0, 2).reshape(N, B * F)
    return np.asarray(W @ flat).reshape(W.shape[0], B, F).transpose(1, 0, 2)


# -- GNN ------------------------------------------------------------------------

def gnn_forward(model: Model, X):
    # the filter is sparse as a parameter set; at desk scale a dense product is faster
    W = model.filter_matrix().toarray()
    cache = {"W": W, "layers": []}
    h = X
    for t in range(model.n_layers):
        Z = [h]
        for _ in range(model.K):
            Z.append(np.matmul(W, Z[-1]))
        y = Z[0] @ model.param(f"H{t}_0") + model.param(f"b{t}")
        for k in range(1, model.K + 1):
            y += Z[k] @ model.param(f"H{t}_{k}")
        cache["layers"].append((Z, y))
        h = np.maximum(y, 0.0) if model._act(t) else y
    return h[..., 0], cache


def gnn_backward(model: Model, cache, d_out):
    grad = np.zeros_like(model.theta)
    gview = lambda name: _view(grad, model.layout, name)
    W_T = cache["W"].T
    d_filter = gview("filter")
    g = d_out[..., None]
    for t in reversed(range(model.n_layers)):
        Z, y = cache["layers"][t]
        if model._act(t):
            g = g * (y > 0)
        gview(f"b{t}")[:] = g.sum(axis=(0, 1))
        dZ = []
        for k in range(model.K + 1):
            H = model.param(f"H{t}_{k}")
            gview(f"H{t}_{k}")[:] = Z[k].reshape(-1, H.shape[0]).T @ g.reshape(-1, H.shape[1])
            dZ.append(g @ H.T)
        for k in range(model.K, 0, -1):
            # dense N x N outer-product sum, then read off the pattern entries
            outer = np.tensordot(dZ[k], Z[k - 1], axes=([0, 2], [0, 2]))
            d_filter += outer[model.rows, model.cols]
            dZ[k - 1] = dZ[k - 1] + np.matmul(W_T, dZ[k])
        g = dZ[0]
    return grad


# -- FCNN -----------------------------------------------------------------------

def fcnn_forward(model: Model, X):
    B = X.shape[0]
    h = X.reshape(B, -1)
    cache = []
    for t in range(model.n_layers):
        y = h @ model.param(f"W{t}").T + model.param(f"b{t}")
        cache.append((h, y))
        h = np.maximum(y, 0.0) if model._act(t) else y
    return h.reshape(B, model.n_nodes), cache


def fcnn_backward(model: Model, cache, d_out):
    grad = np.zeros_like(model.theta)
    g = d_out.reshape(d_out.shape[0], -1)
    for t in reversed(range(model.n_layers)):
        h, y = cache[t]
        if model._act(t):
            g = g * (y > 0)
        _view(grad, model.layout, f"W{t}")[:] = g.T @ h
        _view(grad, model.layout, f"b{t}")[:] = g.sum(axis=0)
        g = g @ model.param(f"W{t}")
    return grad


# -- GiDNN ----------------------------------------------------------------------

def gidnn_forward(model: Model, X):
    B = X.shape[0]
    h = X
    cache = []
    for t in range(model.n_layers):
        blocks = model.param(f"B{t}")
        gathered = h[:, model.cols, :]
        msg = np.einsum("bpi,poi->bpo", gathered, blocks)
        y = _apply_sparse(model._gather_rows, msg) + model.param(f"b{t}").reshape(model.n_nodes, -1)
        cache.append((gathered, y))
        h = np.maximum(y, 0.0) if model._act(t) else y
    return h.reshape(B, model.n_nodes), cache


def gidnn_backward(model: Model, cache, d_out):
    grad = np.zeros_like(model.theta)
    g = d_out[..., None]
    for t in reversed(range(model.n_layers)):
        gathered, y = cache[t]
        if model._act(t):
            g = g * (y > 0)
        blocks = model.param(f"B{t}")
        d_msg = g[:, model.rows, :]
        _view(grad, model.layout, f"B{t}")[:] = np.einsum("bpo,bpi->poi", d_msg, gathered)
        _view(grad, model.layout, f"b{t}")[:] = g.sum(axis=0).ravel()
        g = _apply_sparse(model._gather_cols, np.einsum("bpo,poi->bpi", d_msg, blocks))
    return grad


def gidnn_dense_weights(model: Model) -> list[np.ndarray]:
    """Dense per-layer weight matrices equivalent to a GiDNN's blocks."""
    n = model.n_nodes
    out = []
    for t, (a, b) in enumerate(zip(model.dims[:-1], model.dims[1:])):
        W = np.zeros((n * b, n * a))
        for p, (r, c) in enumerate(zip(model.rows, model.cols)):
            W[r * b:(r + 1) * b, c * a:(c + 1) * a] = model.param(f"B{t}")[p]
        out.append(W)
    return out


def _view(vec, layout, name):
    offset, shape = layout[name]
    return vec[offset:offset + int(np.prod(shape))].reshape(shape)
