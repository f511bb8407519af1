"""Power-grid graphs and the matrices derived from them.

A :class:`Grid` is an undirected graph whose edges carry a reactance and a
flow limit. Every edge is stored with ``i < j``; a positive flow runs from
``i`` to ``j``. One node is the reference: it is eliminated from the
incidence matrix and Laplacian, and its column of the injection shift
factor (ISF) matrix is zero.
"""
from __future__ import annotations

import hashlib
import math
from collections import deque
from dataclasses import InitVar, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg

from .errors import InvalidConfig, InvalidGrid, ParseError, SingularLaplacian, WouldDisconnect


@dataclass(frozen=True)
class Edge:
    i: int
    j: int
    reactance: float
    flow_limit: float


@dataclass(frozen=True)
class Grid:
    n_nodes: int
    edges: tuple[Edge, ...]
    reference_node: int = 0
    check_connected: InitVar[bool] = True
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self, check_connected):
        edges = tuple(e if isinstance(e, Edge) else Edge(*e) for e in self.edges)
        object.__setattr__(self, "edges", edges)
        if self.n_nodes < 1:
            raise InvalidGrid(f"n_nodes must be positive, got {self.n_nodes}")
        if not 0 <= self.reference_node < self.n_nodes:
            raise InvalidGrid(f"reference node {self.reference_node} out of range")
        index = {}
        for k, e in enumerate(edges):
            if not (0 <= e.i < self.n_nodes and 0 <= e.j < self.n_nodes):
                raise InvalidGrid(f"edge {k} ({e.i}, {e.j}) has a node outside [0, {self.n_nodes})")
            if e.i == e.j:
                raise InvalidGrid(f"edge {k} is a self-loop at node {e.i}")
            if e.i > e.j:
                raise InvalidGrid(f"edge {k} ({e.i}, {e.j}) is not canonically oriented (need i < j)")
            if (e.i, e.j) in index:
                raise InvalidGrid(f"duplicate edge ({e.i}, {e.j})")
            if not (e.reactance > 0 and math.isfinite(e.reactance)):
                raise InvalidGrid(f"edge {k} reactance must be positive, got {e.reactance}")
            if not (e.flow_limit > 0 and math.isfinite(e.flow_limit)):
                raise InvalidGrid(f"edge {k} flow limit must be positive, got {e.flow_limit}")
            index[(e.i, e.j)] = k
        object.__setattr__(self, "_index", index)
        if check_connected and not self.is_connected():
            raise InvalidGrid("grid is not connected")

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def reactances(self) -> np.ndarray:
        return np.array([e.reactance for e in self.edges], dtype=float)

    @property
    def flow_limits(self) -> np.ndarray:
        return np.array([e.flow_limit for e in self.edges], dtype=float)

    @property
    def endpoints(self) -> np.ndarray:
        """``(|E|, 2)`` integer array of edge endpoints."""
        return np.array([(e.i, e.j) for e in self.edges], dtype=np.int64).reshape(-1, 2)

    def edge_index(self, i: int, j: int) -> int:
        a, b = (i, j) if i < j else (j, i)
        return self._index[(a, b)]

    def has_edge(self, i: int, j: int) -> bool:
        a, b = (i, j) if i < j else (j, i)
        return (a, b) in self._index

    def neighbors(self) -> list[list[int]]:
        adj = [[] for _ in range(self.n_nodes)]
        for e in self.edges:
            adj[e.i].append(e.j)
            adj[e.j].append(e.i)
        return adj

    def is_connected(self) -> bool:
        return _connected(self.n_nodes, ((e.i, e.j) for e in self.edges))

    def hop_distances(self, source: int) -> np.ndarray:
        """Unweighted graph distance from ``source``; ``-1`` if unreachable."""
        dist = np.full(self.n_nodes, -1, dtype=np.int64)
        dist[source] = 0
        adj = self.neighbors()
        queue = deque([source])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        return dist

    def grid_hash(self) -> str:
        return hashlib.sha256(format_case(self).encode("utf-8")).hexdigest()


def _connected(n: int, pairs: Iterable[tuple[int, int]]) -> bool:
    parent = list(range(n))

    def find(u):
        while parent[u] != u:
            parent[u] = parent[parent[u]]
            u = parent[u]
        return u

    components = n
    for i, j in pairs:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            components -= 1
    return components == 1


def build_incidence(grid: Grid, reduced: bool = True) -> np.ndarray:
    """Edge-node incidence matrix, +1 at the sending node and -1 at the receiving one.

    With ``reduced=True`` the reference column is dropped, giving ``A_r``.
    """
    A = np.zeros((grid.n_edges, grid.n_nodes))
    for k, e in enumerate(grid.edges):
        A[k, e.i] = 1.0
        A[k, e.j] = -1.0
    if reduced:
        A = np.delete(A, grid.reference_node, axis=1)
    return A


def reduced_laplacian(grid: Grid) -> np.ndarray:
    """``B_r = A_r^T X^{-1} A_r``, reference row and column removed."""
    A_r = build_incidence(grid)
    return A_r.T @ (A_r / grid.reactances[:, None])


def _factor(B_r: np.ndarray):
    if B_r.size == 0:
        return None
    try:
        return scipy.linalg.cho_factor(B_r, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise SingularLaplacian("reduced Laplacian is not positive definite; is the grid connected?") from exc


def build_isf(grid: Grid) -> np.ndarray:
    """Injection shift factor matrix ``S`` (|E| x N) with ``f = S p`` for balanced ``p``.

    Computed as ``S_r^T = B_r^{-1} A_r^T X^{-1}`` from one Cholesky factorization,
    then the zero reference column is inserted.
    """
    A_r = build_incidence(grid)
    rhs = A_r.T / grid.reactances[None, :]
    factor = _factor(A_r.T @ (A_r / grid.reactances[:, None]))
    S = np.zeros((grid.n_edges, grid.n_nodes))
    if factor is not None:
        S_r_T = scipy.linalg.cho_solve(factor, rhs)
        keep = [k for k in range(grid.n_nodes) if k != grid.reference_node]
        S[:, keep] = S_r_T.T
    return S


def generate_synthetic_grid(n: int, avg_degree: float = 2.5, limit_scale: float = 1.0,
                            seed: int = 0) -> Grid:
    """Random connected grid: a random spanning tree plus random chords.

    The edge count is ``ceil(avg_degree * n / 2)``, capped at the complete graph.
    """
    if n < 2:
        raise InvalidConfig(f"n must be at least 2, got {n}")
    if not 2.0 <= avg_degree <= 3.0:
        raise InvalidConfig(f"avg_degree must lie in [2, 3], got {avg_degree}")
    if not limit_scale > 0:
        raise InvalidConfig(f"limit_scale must be positive, got {limit_scale}")
    if avg_degree * n / 2 < n - 1:
        raise InvalidConfig("avg_degree too small to keep the grid connected")
    target = min(math.ceil(avg_degree * n / 2), n * (n - 1) // 2)

    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    pairs = set()
    for k in range(1, n):
        u = int(order[k])
        v = int(order[rng.integers(0, k)])
        pairs.add((min(u, v), max(u, v)))
    while len(pairs) < target:
        u, v = (int(t) for t in rng.choice(n, size=2, replace=False))
        pairs.add((min(u, v), max(u, v)))

    pairs = sorted(pairs)
    x = rng.uniform(0.5, 2.0, size=len(pairs))
    fmax = rng.uniform(0.5, 1.5, size=len(pairs)) * limit_scale
    edges = tuple(Edge(i, j, float(xe), float(fe)) for (i, j), xe, fe in zip(pairs, x, fmax))
    return Grid(n, edges, reference_node=0)


def remove_lines(grid: Grid, edge_indices: Sequence[int]) -> Grid:
    drop = [int(k) for k in edge_indices]
    if len(set(drop)) != len(drop):
        raise InvalidConfig(f"edge indices must be distinct: {drop}")
    for k in drop:
        if not 0 <= k < grid.n_edges:
            raise InvalidConfig(f"edge index {k} out of range for {grid.n_edges} edges")
    dropped = set(drop)
    kept = tuple(e for k, e in enumerate(grid.edges) if k not in dropped)
    if not _connected(grid.n_nodes, ((e.i, e.j) for e in kept)):
        raise WouldDisconnect(f"removing edges {sorted(dropped)} disconnects the grid")
    return Grid(grid.n_nodes, kept, grid.reference_node)


def is_bridge(grid: Grid, k: int) -> bool:
    return not _connected(grid.n_nodes, ((e.i, e.j) for m, e in enumerate(grid.edges) if m != k))


# -- case files ---------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def format_case(grid: Grid) -> str:
    lines = [f"gridcase 1 {grid.n_nodes} {grid.n_edges} {grid.reference_node}"]
    lines += [f"edge {e.i} {e.j} {_fmt(e.reactance)} {_fmt(e.flow_limit)}" for e in grid.edges]
    return "\n".join(lines) + "\n"


def write_case(grid: Grid, path) -> None:
    Path(path).write_text(format_case(grid), encoding="utf-8")


def parse_case(text: str) -> Grid:
    header = None
    edges = []
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if header is None:
            if tok[0] != "gridcase":
                raise ParseError("expected 'gridcase' header", line=lineno)
            if len(tok) != 5:
                raise ParseError("header needs: gridcase <version> <N> <E> <ref>", line=lineno)
            version, n, m, ref = (_int(t, lineno, name) for t, name in
                                  zip(tok[1:], ("version", "N", "E", "ref")))
            if version != 1:
                raise ParseError(f"unsupported version {version}", line=lineno, field="version")
            if n < 1:
                raise ParseError("N must be positive", line=lineno, field="N")
            if not 0 <= ref < n:
                raise ParseError("reference node out of range", line=lineno, field="ref")
            header = (n, m, ref)
            continue
        if tok[0] != "edge" or len(tok) != 5:
            raise ParseError("expected 'edge <i> <j> <x> <fmax>'", line=lineno)
        i, j = _int(tok[1], lineno, "i"), _int(tok[2], lineno, "j")
        x, fmax = _float(tok[3], lineno, "x"), _float(tok[4], lineno, "fmax")
        n = header[0]
        if not (0 <= i < n and 0 <= j < n):
            raise ParseError(f"node id out of range [0, {n})", line=lineno, field="i/j")
        if i >= j:
            raise ParseError("edges must satisfy i < j", line=lineno, field="i/j")
        if (i, j) in seen:
            raise ParseError(f"duplicate edge ({i}, {j})", line=lineno, field="i/j")
        if not (x > 0 and math.isfinite(x)):
            raise ParseError("reactance must be positive", line=lineno, field="x")
        if not (fmax > 0 and math.isfinite(fmax)):
            raise ParseError("flow limit must be positive", line=lineno, field="fmax")
        seen.add((i, j))
        edges.append(Edge(i, j, x, fmax))
    if header is None:
        raise ParseError("empty case file")
    n, m, ref = header
    if len(edges) != m:
        raise ParseError(f"header declares {m} edges, found {len(edges)}", field="E")
    try:
        return Grid(n, tuple(edges), ref)
    except InvalidGrid as exc:
        raise ParseError(str(exc)) from exc


def read_case(path) -> Grid:
    return parse_case(Path(path).read_text(encoding="utf-8"))


def _int(tok, line, name):
    try:
        return int(tok)
    except ValueError:
        raise ParseError(f"not an integer: {tok!r}", line=line, field=name) from None


def _float(tok, line, name):
    try:
        return float(tok)
    except ValueError:
        raise ParseError(f"not a number: {tok!r}", line=line, field=name) from None
