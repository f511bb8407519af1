"""DC optimal power flow with dual variables and locational marginal prices.

The problem solved is::

    min  sum_i a_i p_i^2 + b_i p_i
    s.t. 1^T p = 0
         p_min <= p <= p_max
         -f_max <= S p <= f_max

:func:`solve_dcopf` is a dense primal-dual interior-point method (Mehrotra
predictor-corrector). :func:`solve_dcopf_oracle` enumerates active sets and
is only meant for tiny instances in tests.
"""
from __future__ import annotations

import enum
import itertools
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg
import scipy.optimize

from .errors import DimensionMismatch, Infeasible, InvalidConfig, NoConvergence, TooLarge
from .grid import Grid, build_isf

FRACTION_TO_BOUNDARY = 0.995


class Status(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"


@dataclass(frozen=True, eq=False)
class DcOpfProblem:
    grid: Grid
    cost_a: np.ndarray
    cost_b: np.ndarray
    p_min: np.ndarray
    p_max: np.ndarray
    isf_matrix: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        n = self.grid.n_nodes
        for name in ("cost_a", "cost_b", "p_min", "p_max"):
            arr = np.asarray(getattr(self, name), dtype=float).copy()
            if arr.shape != (n,):
                raise DimensionMismatch(f"{name} has shape {arr.shape}, expected ({n},)")
            if not np.all(np.isfinite(arr)):
                raise InvalidConfig(f"{name} must be finite")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.p_min > self.p_max):
            raise InvalidConfig("p_min must not exceed p_max")
        if np.any(self.cost_a < 0):
            raise InvalidConfig("quadratic cost coefficients must be nonnegative")
        if self.isf_matrix is not None:
            isf = np.asarray(self.isf_matrix, dtype=float)
            if isf.shape != (self.grid.n_edges, n):
                raise DimensionMismatch(f"isf has shape {isf.shape}, expected {(self.grid.n_edges, n)}")
            object.__setattr__(self, "isf_matrix", isf)

    @cached_property
    def isf(self) -> np.ndarray:
        return self.isf_matrix if self.isf_matrix is not None else build_isf(self.grid)

    @property
    def fixed(self) -> np.ndarray:
        return self.p_min == self.p_max

    def cost(self, p) -> float:
        p = np.asarray(p, dtype=float)
        return float(np.sum(self.cost_a * p * p + self.cost_b * p))

    def marginal_cost(self, p) -> np.ndarray:
        return 2.0 * self.cost_a * np.asarray(p, dtype=float) + self.cost_b

    def replace(self, **changes) -> "DcOpfProblem":
        kw = dict(grid=self.grid, cost_a=self.cost_a, cost_b=self.cost_b,
                  p_min=self.p_min, p_max=self.p_max, isf_matrix=self.isf_matrix)
        if "grid" in changes and "isf_matrix" not in changes:
            kw["isf_matrix"] = None
        kw.update(changes)
        return DcOpfProblem(**kw)


@dataclass(frozen=True, eq=False)
class DcOpfSolution:
    status: Status
    p_star: np.ndarray | None = None
    f_star: np.ndarray | None = None
    lam: float = float("nan")
    mu_upper: np.ndarray | None = None
    mu_lower: np.ndarray | None = None
    pi: np.ndarray | None = None
    kkt_residual: float = float("nan")
    iterations: int = 0
    message: str = ""

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL

    def congested_lines(self, rel_tol: float = 1e-6, limits=None) -> list[int]:
        """Edges whose flow sits at its limit with a positive multiplier."""
        if not self.optimal:
            return []
        mu = np.maximum(self.mu_upper, self.mu_lower)
        active = mu > rel_tol * max(1.0, abs(self.lam))
        if limits is not None:
            active &= np.abs(self.f_star) >= np.asarray(limits) * (1 - 1e-6)
        return [int(k) for k in np.flatnonzero(active)]

    def require_optimal(self) -> "DcOpfSolution":
        if not self.optimal:
            raise Infeasible(self.message or "dc-OPF problem is infeasible")
        return self


@dataclass(frozen=True)
class KktReport:
    primal_feasibility: float
    dual_feasibility: float
    stationarity: float
    complementarity: float
    price_consistency: float
    tolerance: float

    @property
    def primal_ok(self) -> bool:
        return self.primal_feasibility <= self.tolerance

    @property
    def dual_ok(self) -> bool:
        return self.dual_feasibility <= self.tolerance

    @property
    def stationarity_ok(self) -> bool:
        return self.stationarity <= self.tolerance

    @property
    def complementarity_ok(self) -> bool:
        return self.complementarity <= self.tolerance

    @property
    def ok(self) -> bool:
        return (self.primal_ok and self.dual_ok and self.stationarity_ok
                and self.complementarity_ok and self.price_consistency <= self.tolerance)

    @property
    def worst(self) -> float:
        return max(self.primal_feasibility, self.dual_feasibility, self.stationarity,
                   self.complementarity, self.price_consistency)


def lmp_from_duals(lam, mu_upper, mu_lower, isf) -> np.ndarray:
    """Nodal prices ``lam * 1 - S^T (mu_upper - mu_lower)``."""
    isf = np.asarray(isf, dtype=float)
    mu_upper = np.asarray(mu_upper, dtype=float)
    mu_lower = np.asarray(mu_lower, dtype=float)
    if isf.ndim != 2:
        raise DimensionMismatch("isf must be a matrix")
    if mu_upper.shape != (isf.shape[0],) or mu_lower.shape != (isf.shape[0],):
        raise DimensionMismatch(
            f"flow duals have shapes {mu_upper.shape}, {mu_lower.shape}; isf has {isf.shape[0]} rows")
    return float(lam) * np.ones(isf.shape[1]) - isf.T @ (mu_upper - mu_lower)


# -- problem reduction ----------------------------------------------------------

@dataclass
class _Reduced:
    """The QP over free injections: min 1/2 x'Qx + c'x, 1'x = beq, Gx <= h."""
    free: np.ndarray
    p_fixed: np.ndarray
    q: np.ndarray
    c: np.ndarray
    beq: float
    G: np.ndarray
    h: np.ndarray
    kind: list          # per row: ("pmax", node) / ("pmin", node) / ("fup", edge) / ("flo", edge)
    constant_rows: list  # flow rows with no dependence on free injections: (kind, edge, slack)


def _reduce(problem: DcOpfProblem) -> _Reduced:
    fixed = problem.fixed
    free = np.flatnonzero(~fixed)
    fixed_idx = np.flatnonzero(fixed)
    p_fixed = problem.p_min[fixed_idx]
    S = problem.isf
    S_free = S[:, free]
    f_fixed = S[:, fixed_idx] @ p_fixed
    fmax = problem.grid.flow_limits
    n = free.size

    rows, h, kind, constant = [], [], [], []
    eye = np.eye(n)
    for k, node in enumerate(free):
        rows.append(eye[k]); h.append(problem.p_max[node]); kind.append(("pmax", int(node)))
    for k, node in enumerate(free):
        rows.append(-eye[k]); h.append(-problem.p_min[node]); kind.append(("pmin", int(node)))
    scale = np.abs(S_free).max() if S_free.size else 0.0
    for e in range(problem.grid.n_edges):
        g = S_free[e]
        if not np.any(np.abs(g) > 1e-13 * max(scale, 1.0)):
            constant.append(("fup", e, fmax[e] - f_fixed[e]))
            constant.append(("flo", e, fmax[e] + f_fixed[e]))
            continue
        rows.append(g); h.append(fmax[e] - f_fixed[e]); kind.append(("fup", e))
        rows.append(-g); h.append(fmax[e] + f_fixed[e]); kind.append(("flo", e))
    G = np.array(rows, dtype=float).reshape(len(rows), n)
    return _Reduced(free=free, p_fixed=p_fixed, q=2.0 * problem.cost_a[free], c=problem.cost_b[free].copy(),
                    beq=-float(p_fixed.sum()), G=G, h=np.array(h, dtype=float), kind=kind,
                    constant_rows=constant)


def _quick_infeasibility(problem: DcOpfProblem, red: _Reduced, tol: float) -> str | None:
    lo, hi = problem.p_min.sum(), problem.p_max.sum()
    if lo > tol:
        return f"balance impossible: total minimum injection {lo:.6g} > 0"
    if hi < -tol:
        return f"balance impossible: total maximum injection {hi:.6g} < 0 (demand exceeds capacity)"
    for kind, e, slack in red.constant_rows:
        if slack < -tol:
            return f"flow on edge {e} is fixed by loads and exceeds its limit by {-slack:.6g}"
    return None


def _assemble(problem: DcOpfProblem, red: _Reduced, x, y, z, iterations, residual) -> DcOpfSolution:
    p = np.empty(problem.grid.n_nodes)
    p[red.free] = x
    p[problem.fixed] = red.p_fixed
    mu_up = np.zeros(problem.grid.n_edges)
    mu_lo = np.zeros(problem.grid.n_edges)
    for (kind, idx), zr in zip(red.kind, z):
        if kind == "fup":
            mu_up[idx] = zr
        elif kind == "flo":
            mu_lo[idx] = zr
    lam = -float(y)
    S = problem.isf
    return DcOpfSolution(status=Status.OPTIMAL, p_star=p, f_star=S @ p, lam=lam,
                         mu_upper=mu_up, mu_lower=mu_lo, pi=lmp_from_duals(lam, mu_up, mu_lo, S),
                         kkt_residual=float(residual), iterations=iterations)


def _infeasible(message, iterations=0) -> DcOpfSolution:
    return DcOpfSolution(status=Status.INFEASIBLE, message=message, iterations=iterations)


def _feasibility_certificate(red: _Reduced, margin_tol: float = 1e-7) -> str | None:
    """Phase-one LP maximizing the smallest inequality slack.

    Returns a description when the constraint set is empty or has no interior
    (largest achievable slack below ``margin_tol``); ``None`` otherwise.
    """
    n = red.free.size
    m = red.G.shape[0]
    # variables (x, t): max t  s.t.  G x + t <= h, 1'x = beq, t <= 1
    cost = np.zeros(n + 1)
    cost[-1] = -1.0
    A_ub = np.hstack([red.G, np.ones((m, 1))])
    A_eq = np.concatenate([np.ones(n), [0.0]])[None, :]
    res = scipy.optimize.linprog(cost, A_ub=A_ub, b_ub=red.h, A_eq=A_eq, b_eq=[red.beq],
                                 bounds=[(None, None)] * n + [(None, 1.0)], method="highs")
    if res.status == 2:
        return "flow limits and injection bounds admit no balanced dispatch (phase-one LP infeasible)"
    if res.status == 0 and -res.fun < margin_tol:
        return (f"feasible set has no interior: best constraint margin {-res.fun:.3g} "
                f"(flow limits and bounds are infeasible or degenerate)")
    return None


def _all_fixed(problem: DcOpfProblem, red: _Reduced, tol: float) -> DcOpfSolution:
    imbalance = -red.beq
    if abs(imbalance) > tol:
        return _infeasible(f"all injections fixed and unbalanced by {imbalance:.6g}")
    return _assemble(problem, red, np.zeros(0), 0.0, np.zeros(0), 0, 0.0)


# -- interior point -------------------------------------------------------------

def solve_dcopf(problem: DcOpfProblem, tolerance: float = 1e-8, max_iter: int = 100) -> DcOpfSolution:
    """Solve the dc-OPF by a primal-dual interior-point method.

    Returns a solution whose status is ``OPTIMAL`` (with ``kkt_residual <=
    tolerance``) or ``INFEASIBLE``. Raises :class:`NoConvergence` when the
    iteration budget runs out on a feasible problem.
    """
    if not tolerance > 0:
        raise InvalidConfig("tolerance must be positive")
    red = _reduce(problem)
    reason = _quick_infeasibility(problem, red, tolerance)
    if reason:
        return _infeasible(reason)
    n = red.free.size
    if n == 0:
        return _all_fixed(problem, red, tolerance)

    G, h, q, c = red.G, red.h, red.q, red.c
    m = G.shape[0]
    ones = np.ones(n)

    lo = problem.p_min[red.free]
    hi = problem.p_max[red.free]
    x = 0.5 * (lo + hi)
    s = np.maximum(h - G @ x, 1.0)
    z = np.ones(m)
    y = 0.0

    best = (np.inf, None)
    worst = np.inf
    for it in range(1, max_iter + 1):
        r_d = q * x + c + y * ones + G.T @ z
        r_p = ones @ x - red.beq
        r_i = G @ x + s - h
        mu = s @ z / m
        worst = max(np.abs(r_d).max(), abs(r_p), np.abs(r_i).max(), np.max(s * z))
        if worst < best[0]:
            best = (worst, (x.copy(), y, z.copy(), s.copy()))
        if mu <= tolerance or worst <= tolerance:
            polished = _polish(red, x, z, s, tolerance)
            if polished is not None:
                return _assemble(problem, red, *polished[:3], it - 1, polished[3])
            if worst <= tolerance:
                return _assemble(problem, red, x, y, z, it - 1, worst)
        if not np.isfinite(worst) or z.max() > 1e12 or mu < 1e-3 * tolerance ** 2:
            break

        w = z / s
        K = np.zeros((n + 1, n + 1))
        K[:n, :n] = np.diag(q) + G.T @ (w[:, None] * G)
        K[:n, n] = 1.0
        K[n, :n] = 1.0
        try:
            lu = _lu(K)
        except np.linalg.LinAlgError:
            break

        def newton(r_c):
            rhs = np.empty(n + 1)
            rhs[:n] = -r_d - G.T @ ((z * r_i - r_c) / s)
            rhs[n] = -r_p
            sol = _lu_solve(lu, rhs)
            dx, dy = sol[:n], sol[n]
            dz = w * (G @ dx) + (z * r_i - r_c) / s
            ds = -r_i - G @ dx
            return dx, dy, dz, ds

        dx_a, dy_a, dz_a, ds_a = newton(s * z)
        alpha_a = min(_max_step(s, ds_a), _max_step(z, dz_a))
        mu_aff = (s + alpha_a * ds_a) @ (z + alpha_a * dz_a) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        dx, dy, dz, ds = newton(s * z + ds_a * dz_a - sigma * mu)
        alpha = min(1.0, FRACTION_TO_BOUNDARY * min(_max_step(s, ds), _max_step(z, dz)))
        x = x + alpha * dx
        y = y + alpha * dy
        z = z + alpha * dz
        s = s + alpha * ds

    if best[1] is not None:
        polished = _polish(red, best[1][0], best[1][2], best[1][3], tolerance)
        if polished is not None:
            return _assemble(problem, red, *polished[:3], it, polished[3])
    reason = _feasibility_certificate(red)
    if reason:
        return _infeasible(reason, iterations=it)
    raise NoConvergence(f"interior point stalled after {it} iterations, worst residual {best[0]:.3g}",
                        worst_residual=float(best[0]))


def _polish(red: _Reduced, x, z, s, tolerance):
    """Re-solve the equality QP on the active set guessed from ``s < z``.

    Returns ``(x, y, z, residual)`` when the polished point satisfies every
    KKT block within ``tolerance``, else ``None``.
    """
    G, h = red.G, red.h
    active = np.flatnonzero(s < z)
    n = red.free.size
    if active.size > n - 1:
        return None
    sol = _equality_qp(np.diag(red.q), red.c, G[active], h[active], red.beq)
    if sol is None:
        return None
    xp, yp, z_act = sol
    zp = np.zeros(G.shape[0])
    zp[active] = z_act
    slack = h - G @ xp
    r_d = red.q * xp + red.c + yp + G.T @ zp
    residual = max(np.abs(r_d).max(), abs(xp.sum() - red.beq), max(0.0, -slack.min()),
                   max(0.0, -zp.min()), np.abs(zp * slack).max())
    if residual > tolerance:
        return None
    return xp, yp, np.maximum(zp, 0.0), residual


def _max_step(v, dv) -> float:
    neg = dv < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-v[neg] / dv[neg]))


def _lu(K):
    # singular pivots are detected below; scipy's warning would only be noise
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu = scipy.linalg.lu_factor(K, check_finite=True)
    if np.any(np.abs(np.diag(lu[0])) < 1e-300):
        raise np.linalg.LinAlgError("singular KKT matrix")
    return lu


def _lu_solve(lu, rhs):
    return scipy.linalg.lu_solve(lu, rhs)


# -- KKT verification -----------------------------------------------------------

def verify_kkt(problem: DcOpfProblem, solution: DcOpfSolution, tolerance: float = 1e-8,
               bound_tol: float = 1e-6) -> KktReport:
    """Residuals of every optimality block for a reported solution.

    Nodes within ``bound_tol`` of a bound are treated as sitting on it: there
    only the sign of ``price - marginal cost`` is checked.
    """
    if not solution.optimal:
        raise Infeasible("cannot verify KKT conditions of a non-optimal solution")
    p = np.asarray(solution.p_star, dtype=float)
    f = np.asarray(solution.f_star, dtype=float)
    pi = np.asarray(solution.pi, dtype=float)
    mu_u = np.asarray(solution.mu_upper, dtype=float)
    mu_l = np.asarray(solution.mu_lower, dtype=float)
    S = problem.isf
    fmax = problem.grid.flow_limits

    primal = max(
        abs(p.sum()),
        float(np.max(np.maximum(problem.p_min - p, 0.0), initial=0.0)),
        float(np.max(np.maximum(p - problem.p_max, 0.0), initial=0.0)),
        float(np.max(np.maximum(np.abs(f) - fmax, 0.0), initial=0.0)),
        float(np.max(np.abs(f - S @ p), initial=0.0)),
    )
    dual = float(max(0.0, -mu_u.min(initial=0.0), -mu_l.min(initial=0.0)))

    gap = problem.marginal_cost(p) - pi
    at_hi = problem.p_max - p <= bound_tol
    at_lo = p - problem.p_min <= bound_tol
    interior = ~(at_hi | at_lo)
    stat = np.zeros_like(p)
    stat[interior] = np.abs(gap[interior])
    only_hi = at_hi & ~at_lo
    only_lo = at_lo & ~at_hi
    stat[only_hi] = np.maximum(gap[only_hi], 0.0)
    stat[only_lo] = np.maximum(-gap[only_lo], 0.0)

    comp = max(float(np.max(np.abs(mu_u * (fmax - f)), initial=0.0)),
               float(np.max(np.abs(mu_l * (f + fmax)), initial=0.0)))
    price = float(np.max(np.abs(pi - lmp_from_duals(solution.lam, mu_u, mu_l, S)), initial=0.0))
    return KktReport(primal_feasibility=float(primal), dual_feasibility=dual,
                     stationarity=float(stat.max(initial=0.0)), complementarity=comp,
                     price_consistency=price, tolerance=tolerance)


def dual_objective(problem: DcOpfProblem, solution: DcOpfSolution) -> float:
    """Lagrangian dual function at the reported multipliers (box kept implicit)."""
    pi = solution.pi
    a, b = problem.cost_a, problem.cost_b
    lo, hi = problem.p_min, problem.p_max
    p = np.where(a > 0, np.clip((pi - b) / np.where(a > 0, 2 * a, 1.0), lo, hi),
                 np.where(pi > b, hi, lo))
    inner = np.sum(a * p * p + b * p - pi * p)
    return float(inner - problem.grid.flow_limits @ (solution.mu_upper + solution.mu_lower))


# -- brute-force oracle ---------------------------------------------------------

ORACLE_MAX_NODES = 6
ORACLE_MAX_EDGES = 8


def solve_dcopf_oracle(problem: DcOpfProblem, tolerance: float = 1e-9) -> DcOpfSolution:
    """Exact solution by enumerating active sets of the box and flow constraints.

    Every candidate equality-constrained QP is solved directly; the cheapest
    candidate that is primal feasible with nonnegative multipliers wins.
    """
    grid = problem.grid
    if grid.n_nodes > ORACLE_MAX_NODES or grid.n_edges > ORACLE_MAX_EDGES:
        raise TooLarge(f"oracle limited to N <= {ORACLE_MAX_NODES}, |E| <= {ORACLE_MAX_EDGES}; "
                       f"got N={grid.n_nodes}, |E|={grid.n_edges}")
    red = _reduce(problem)
    reason = _quick_infeasibility(problem, red, tolerance)
    if reason:
        return _infeasible(reason)
    n = red.free.size
    if n == 0:
        return _all_fixed(problem, red, tolerance)

    G, h = red.G, red.h
    m = G.shape[0]
    partner = {}
    for r, (kind, idx) in enumerate(red.kind):
        partner.setdefault((kind[0] == "p", idx), []).append(r)
    conflicts = {frozenset(rs) for rs in partner.values() if len(rs) == 2}

    Q = np.diag(red.q)
    best = None
    best_cost = np.inf
    count = 0
    for k in range(0, min(n - 1, m) + 1):
        for active in itertools.combinations(range(m), k):
            if any(frozenset(pair) in conflicts for pair in itertools.combinations(active, 2)):
                continue
            count += 1
            sol = _equality_qp(Q, red.c, G[list(active)], h[list(active)], red.beq)
            if sol is None:
                continue
            x, y, z_act = sol
            if np.any(G @ x - h > 1e-9 * max(1.0, np.abs(h).max())):
                continue
            if np.any(z_act < -1e-9 * max(1.0, np.abs(z_act).max(initial=0.0))):
                continue
            cost = 0.5 * x @ (red.q * x) + red.c @ x
            if cost < best_cost - 1e-12:
                z = np.zeros(m)
                z[list(active)] = np.maximum(z_act, 0.0)
                best, best_cost = (x, y, z), cost
    if best is None:
        return _infeasible(f"no feasible active set among {count} candidates")
    return _assemble(problem, red, *best, iterations=count, residual=0.0)


def _equality_qp(Q, c, GA, hA, beq):
    n = Q.shape[0]
    k = GA.shape[0]
    A = np.vstack([np.ones((1, n)), GA])
    K = np.zeros((n + 1 + k, n + 1 + k))
    K[:n, :n] = Q
    K[:n, n:] = A.T
    K[n:, :n] = A
    rhs = np.concatenate([-c, [beq], hA])
    if np.linalg.cond(K) > 1e12:
        return None
    sol = np.linalg.solve(K, rhs)
    return sol[:n], sol[n], sol[n + 1:]
