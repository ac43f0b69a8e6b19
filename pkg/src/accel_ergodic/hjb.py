"""Semi-Lagrangian dynamic programming on the shared grid chain.

The finite-horizon recursion is::

    V_t(s) = min_a  h (|w_a|^2 / 2 + F_t(s)) + (P V_{t+1})(s, a),    V_N = g

and the discounted fixed point replaces ``P V`` by ``(1 - delta h) P V``.
Ties in the minimum go to the smallest control index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .core import PhaseGrid, ValueField
from .costs import CostField, truncate

CostLike = CostField | np.ndarray | Callable[[int], np.ndarray]


def step_count(T: float, h: float) -> int:
    """``T / h`` as an integer; raises if ``T`` is not a multiple of ``h``."""
    n = round(T / h)
    if n < 1 or abs(n * h - T) > 1e-9 * max(1.0, abs(T)):
        raise ValueError(f"horizon {T} is not a positive integer multiple of h={h}")
    return int(n)


def running_schedule(cost: CostLike, grid: PhaseGrid, n_steps: int) -> Callable[[int], np.ndarray]:
    """Normalize a cost description to ``t_index -> (S,)`` array."""
    if isinstance(cost, CostField):
        arr = cost.on_grid(grid)
        return lambda t: arr
    if callable(cost):
        return cost
    arr = np.asarray(cost, dtype=float)
    if arr.shape == (grid.n_states,):
        return lambda t: arr
    if arr.shape == (n_steps, grid.n_states):
        return lambda t: arr[t]
    raise ValueError(f"cost array has shape {arr.shape}; expected (S,) or ({n_steps}, S)")


def bellman_q(grid: PhaseGrid, running: np.ndarray, values: np.ndarray,
              factor: float = 1.0) -> np.ndarray:
    """``h L(s, a) + factor (P V)(s, a)``, with ``+inf`` on inadmissible pairs."""
    chain = grid.chain
    q = grid.h * (chain.kinetic[None, :] + running[:, None]) + factor * chain.expect(values)
    return np.where(chain.admissible, q, np.inf)


def _argmin(q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.argmin(q, axis=1)
    return q[np.arange(q.shape[0]), a], a


@dataclass(frozen=True, eq=False)
class FiniteHorizonResult:
    """Value at ``t = 0``, greedy policies per step and optionally the full slab."""

    value: ValueField
    policy: np.ndarray
    T: float
    slab: np.ndarray | None = None

    def value_at(self, t_index: int) -> ValueField:
        if self.slab is None:
            raise ValueError("slab was not retained; solve with keep_slab=True")
        return ValueField(self.value.grid, self.slab[t_index])


def _terminal_array(terminal, grid: PhaseGrid) -> np.ndarray:
    if terminal is None:
        return np.zeros(grid.n_states)
    if isinstance(terminal, ValueField):
        return terminal.values.copy()
    arr = np.asarray(terminal, dtype=float).reshape(-1)
    if arr.size != grid.n_states:
        raise ValueError("terminal field does not match the grid")
    return arr


def solve_finite_horizon(cost: CostLike, grid: PhaseGrid, T: float, terminal=None,
                         keep_slab: bool = False) -> FiniteHorizonResult:
    """Backward recursion from ``V_N = terminal`` (zero by default)."""
    n = step_count(T, grid.h)
    running = running_schedule(cost, grid, n)
    V = _terminal_array(terminal, grid)
    if not np.all(np.isfinite(V)):
        raise ValueError("terminal field must be finite")
    slab = np.empty((n + 1, grid.n_states)) if keep_slab else None
    if keep_slab:
        slab[n] = V
    policy = np.empty((n, grid.n_states), dtype=np.int64)
    for t in range(n - 1, -1, -1):
        V, policy[t] = _argmin(bellman_q(grid, running(t), V))
        if keep_slab:
            slab[t] = V
    return FiniteHorizonResult(ValueField(grid, V), policy, float(T), slab)


# --- discounted problem -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DiscountedSolveReport:
    field: ValueField
    delta: float
    iterations: int
    sup_residual: float
    min_delta_v: float
    policy: np.ndarray
    converged: bool
    residual_history: list[float] = field(default_factory=list)
    iteration_bound: int = 0


def _policy_value(grid: PhaseGrid, running: np.ndarray, policy: np.ndarray,
                  beta: float) -> np.ndarray:
    chain = grid.chain
    S = grid.n_states
    rows = np.arange(S)
    K = chain.idx.shape[2]
    P = sp.csr_matrix((chain.wts[rows, policy].ravel(),
                       (np.repeat(rows, K), chain.idx[rows, policy].ravel())), shape=(S, S))
    rhs = grid.h * (chain.kinetic[policy] + running)
    return spsolve((sp.identity(S, format="csc") - beta * P).tocsc(), rhs)


def solve_discounted(F: CostField | np.ndarray, delta: float, grid: PhaseGrid,
                     tol: float = 1e-10, max_iter: int | None = None,
                     polish: bool = True) -> DiscountedSolveReport:
    """Jacobi value iteration for ``V = min_a h L + (1 - delta h) P V`` from ``V = 0``.

    With ``polish`` the greedy policy of the last iterate is evaluated exactly
    by a sparse solve; the result replaces the iterate when its Bellman
    residual is no larger.
    """
    beta = 1.0 - delta * grid.h
    if not 0.0 < delta * grid.h < 1.0:
        raise ValueError(f"delta*h = {delta * grid.h} must lie in (0, 1)")
    running = F.on_grid(grid) if isinstance(F, CostField) else np.asarray(F, dtype=float)
    V = np.zeros(grid.n_states)
    V_new, policy = _argmin(bellman_q(grid, running, V, beta))
    initial = float(np.max(np.abs(V_new - V)))
    bound = 1 if initial <= tol else math.ceil(math.log(tol / initial) / math.log(beta)) + 10
    limit = bound if max_iter is None else max_iter
    history = [initial]
    V, it = V_new, 1
    while history[-1] > tol and it < limit:
        V_new, policy = _argmin(bellman_q(grid, running, V, beta))
        history.append(float(np.max(np.abs(V_new - V))))
        V, it = V_new, it + 1
    residual = history[-1]
    if polish:
        W = _policy_value(grid, running, policy, beta)
        TW, pol_w = _argmin(bellman_q(grid, running, W, beta))
        res_w = float(np.max(np.abs(TW - W)))
        if np.all(np.isfinite(W)) and res_w <= residual:
            V, policy, residual = W, pol_w, res_w
    return DiscountedSolveReport(ValueField(grid, V), float(delta), it, residual,
                                 float(np.min(delta * V)), policy, residual <= tol, history, bound)


def solve_discounted_truncated(F: CostField, R: float, delta: float, grid: PhaseGrid,
                               tol: float = 1e-10, **kwargs) -> DiscountedSolveReport:
    """The discounted solve with ``F`` replaced by ``min(F, R)``."""
    return solve_discounted(truncate(F, R), delta, grid, tol, **kwargs)


def ball_nodes(grid: PhaseGrid, R: float) -> np.ndarray:
    """Indices of nodes with ``|v| <= R``."""
    _, v = grid.states
    return np.flatnonzero(np.linalg.norm(v, axis=1) <= R + 1e-12)


def tauberian_gap(F: CostField, T: float, grid: PhaseGrid, probes=None,
                  tol: float = 1e-10) -> float:
    """``max |delta V_delta - V^T(0) / T|`` over probe nodes with ``delta = 1/T``.

    Probes default to all nodes with ``|v| <= 1``.
    """
    probes = ball_nodes(grid, 1.0) if probes is None else np.asarray(probes)
    vt = solve_finite_horizon(F, grid, T).value.values
    rep = solve_discounted(F, 1.0 / T, grid, tol)
    return float(np.max(np.abs(rep.field.values[probes] / T - vt[probes] / T)))


# --- growth-shape diagnostics ------------------------------------------------------

def oscillation(values: np.ndarray, grid: PhaseGrid, R: float) -> float:
    """``max - min`` of a nodal field over ``|v| <= R``."""
    sel = values[ball_nodes(grid, R)]
    return float(sel.max() - sel.min())


def fit_lower_shape(reports: list[DiscountedSolveReport], alpha: float) -> float:
    """Smallest ``C >= 1`` with ``V_delta >= |v|^a / C - C / delta`` on every node and report."""
    def holds(C: float) -> bool:
        for rep in reports:
            _, v = rep.field.grid.states
            p = np.linalg.norm(v, axis=1) ** alpha
            if np.any(rep.field.values < p / C - C / rep.delta - 1e-12):
                return False
        return True

    lo, hi = 1.0, 2.0
    if holds(lo):
        return lo
    while not holds(hi):
        hi *= 2.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if holds(mid) else (mid, hi)
    return hi


def fit_truncated_shape(report: DiscountedSolveReport, R: float, alpha: float,
                        c1: float) -> float:
    """Smallest ``c2`` with ``delta V^R >= c1 (1 + min(|v|^a, R)) - c2`` on every node."""
    _, v = report.field.grid.states
    shape = 1.0 + np.minimum(np.linalg.norm(v, axis=1) ** alpha, R)
    return float(np.max(c1 * shape - report.delta * report.field.values))
