"""Occupation-measure linear programs on the shared grid chain.

Ergodic LP over admissible pairs ``p = (s, a)``::

    min  sum_p mu_p L_p
    s.t. sum_a mu(s, a) - (P^T mu)(s) = 0   for every state s
         sum_p mu_p = 1,  mu >= 0

with ``L = |w|^2 / 2 + F``.  Any potential ``psi`` over states certifies the
lower bound ``min_p [L_p + (P psi)_p - psi_s]``; the reported dual value is
this certified bound evaluated at the solver's multipliers, and the corrector
is ``phi = h psi`` normalized to ``min phi = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .core import (HIGHS_OPTIONS, ControlMeasure, FlowMeasure, GridMeasure, GridMismatchError, PhaseGrid,
                   ValueField, second_moment)
from .costs import CostField
from .hjb import running_schedule, step_count
from .trajectory import connect_cubic, evaluate_cost


class LPError(RuntimeError):
    """The LP solver failed on an instance that should be feasible."""


@dataclass(frozen=True, eq=False)
class ErgodicLP:
    grid: PhaseGrid
    cost: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    pairs: tuple[np.ndarray, np.ndarray]

    @property
    def n_variables(self) -> int:
        return self.cost.size


def _running(F, grid: PhaseGrid) -> np.ndarray:
    if isinstance(F, CostField):
        return F.on_grid(grid)
    arr = np.asarray(F, dtype=float).reshape(-1)
    if arr.size != grid.n_states:
        raise ValueError("running cost does not match the grid")
    return arr


def build_ergodic_lp(F, grid: PhaseGrid) -> ErgodicLP:
    chain = grid.chain
    s, a = chain.pairs
    running = _running(F, grid)
    cost = chain.kinetic[a] + running[s]
    n = s.size
    out = sp.csr_matrix((np.ones(n), (s, np.arange(n))), shape=(grid.n_states, n))
    A = sp.vstack([out - chain.matrix.T, sp.csr_matrix(np.ones((1, n)))]).tocsr()
    b = np.zeros(grid.n_states + 1)
    b[-1] = 1.0
    return ErgodicLP(grid, cost, A, b, (s, a))


@dataclass(frozen=True, eq=False)
class ErgodicSolution:
    lambda_: float
    mu: ControlMeasure
    phi: ValueField
    duality_gap: float
    residual: float
    lambda_dual: float
    method: str
    iterations: int = 0

    @property
    def relative_gap(self) -> float:
        return self.duality_gap / max(1.0, abs(self.lambda_))


def certified_dual(lp: ErgodicLP, psi: np.ndarray) -> float:
    """``min_p [L_p + (P psi)_p - psi_s]``, a lower bound on the LP value."""
    s, _ = lp.pairs
    return float(np.min(lp.cost + lp.grid.chain.matrix @ psi - psi[s]))


def closedness_residual(mu: ControlMeasure, grid: PhaseGrid | None = None) -> float:
    """``max_s |inflow(s) - outflow(s)|`` under the grid chain.

    Inadmissible pairs are pushed with the landing velocity clamped to the box.
    """
    if grid is not None and grid != mu.grid:
        raise GridMismatchError("measure and grid differ")
    g = mu.grid
    inflow = g.chain.push(mu.weights)
    return float(np.max(np.abs(inflow - mu.weights.sum(axis=1))))


def _to_measure(lp: ErgodicLP, x: np.ndarray) -> ControlMeasure:
    grid = lp.grid
    x = np.clip(x, 0.0, None)
    x[x < 1e-15] = 0.0
    w = np.zeros((grid.n_states, grid.n_controls))
    s, a = lp.pairs
    w[s, a] = x / x.sum()
    return ControlMeasure(grid, w)


def _finish(lp: ErgodicLP, x: np.ndarray, potentials: list[np.ndarray], method: str,
            iters: int) -> ErgodicSolution:
    # the best certificate among the candidate potentials is kept
    mu = _to_measure(lp, x)
    s, a = lp.pairs
    lam = float(np.dot(mu.weights[s, a], lp.cost))
    bounds = [certified_dual(lp, p) for p in potentials]
    k = int(np.argmax(bounds))
    lam_dual, psi = bounds[k], potentials[k]
    phi = lp.grid.h * psi
    phi = phi - phi.min()
    return ErgodicSolution(lam, mu, ValueField(lp.grid, phi), lam - lam_dual,
                           closedness_residual(mu), lam_dual, method, iters)


def _highs(c, A, b, cols=None):
    res = linprog(c if cols is None else c[cols], A_eq=A if cols is None else A[:, cols],
                  b_eq=b, bounds=(0, None), method="highs", options=HIGHS_OPTIONS)
    if res.status != 0:
        raise LPError(f"HiGHS failed: {res.message}")
    return res


def solve_ergodic(F, grid: PhaseGrid, tol: float = 1e-9, method: str = "auto",
                  simplex_limit: int = 50_000, pdhg_iterations: int = 20_000) -> ErgodicSolution:
    """Solve the ergodic LP; ``method`` is ``"simplex"``, ``"pdhg"`` or ``"auto"``.

    ``"pdhg"`` runs restarted, averaged primal-dual iterations, then polishes
    by solving the LP exactly over pairs whose reduced cost under the
    first-order duals is small (plus the rest pairs, which keep it feasible).
    The restricted set is widened a few times while the certified gap exceeds
    ``tol``.  The certificate is the better of the first-order potential and
    the restricted solve's multipliers, each checked against every pair.
    """
    lp = build_ergodic_lp(F, grid)
    if method == "auto":
        method = "simplex" if lp.n_variables <= simplex_limit else "pdhg"
    if method == "simplex":
        res = _highs(lp.cost, lp.A_eq, lp.b_eq)
        return _finish(lp, res.x, [res.eqlin.marginals[:-1]], "simplex", int(res.nit))
    if method != "pdhg":
        raise ValueError(f"unknown method {method!r}")
    pd = pdhg(lp.cost, lp.A_eq, lp.b_eq, max_iter=pdhg_iterations, tol=max(tol, 1e-8))
    psi = pd.y[:-1]
    s, a = lp.pairs
    reduced = lp.cost - (psi[s] - lp.grid.chain.matrix @ psi + pd.y[-1])
    _, v = grid.states
    rest = (a == grid.rest_control) & np.all(v[s] == 0.0, axis=1)
    keep = rest | (pd.x > 1e-9 * max(pd.x.max(), 1e-300))
    threshold = max(1e-6, 10 * pd.gap)
    best = None
    for _ in range(6):
        cols = np.flatnonzero(keep | (reduced <= threshold))
        res = _highs(lp.cost, lp.A_eq, lp.b_eq, cols)
        x = np.zeros(lp.n_variables)
        x[cols] = res.x
        sol = _finish(lp, x, [res.eqlin.marginals[:-1], psi], "pdhg+polish", pd.iterations)
        if best is None or sol.duality_gap < best.duality_gap:
            best = sol
        if sol.relative_gap <= tol or cols.size == lp.n_variables:
            break
        threshold *= 8.0
    return best


# --- first-order solver -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PDHGResult:
    x: np.ndarray
    y: np.ndarray
    primal: float
    gap: float
    feasibility: float
    iterations: int


def pdhg(c: np.ndarray, A: sp.csr_matrix, b: np.ndarray, max_iter: int = 20_000,
         tol: float = 1e-8, restart_every: int = 64) -> PDHGResult:
    """Diagonally preconditioned primal-dual hybrid gradient for ``min c.x, Ax = b, x >= 0``.

    Iterates are averaged between restarts; a restart to the average happens
    when its KKT error falls below half the error at the previous restart.
    """
    A = sp.csr_matrix(A)
    AT = A.T.tocsr()
    absA = abs(A)
    tau = 1.0 / np.maximum(np.asarray(absA.sum(axis=0)).ravel(), 1e-12)
    sigma = 1.0 / np.maximum(np.asarray(absA.sum(axis=1)).ravel(), 1e-12)
    x = np.zeros(A.shape[1])
    y = np.zeros(A.shape[0])
    bnorm = 1.0 + np.linalg.norm(b)

    def kkt(xx, yy):
        feas = np.linalg.norm(A @ xx - b) / bnorm
        red = c - AT @ yy
        dual_inf = np.linalg.norm(np.minimum(red, 0.0)) / (1.0 + np.linalg.norm(c))
        pobj, dobj = float(c @ xx), float(b @ yy)
        gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
        return max(feas, dual_inf, gap), feas, gap

    xs, ys, count = np.zeros_like(x), np.zeros_like(y), 0
    last_err = kkt(x, y)[0]
    it = 0
    while it < max_iter:
        x_new = np.maximum(x - tau * (c - AT @ y), 0.0)
        y = y + sigma * (b - A @ (2.0 * x_new - x))
        x = x_new
        xs += x
        ys += y
        count += 1
        it += 1
        if count % restart_every == 0:
            xa, ya = xs / count, ys / count
            err, _, _ = kkt(xa, ya)
            if err <= tol:
                x, y = xa, ya
                break
            if err <= 0.5 * last_err:
                x, y, last_err = xa, ya, err
                xs[:] = 0.0
                ys[:] = 0.0
                count = 0
    err, feas, gap = kkt(x, y)
    return PDHGResult(x, y, float(c @ x), gap, feas, it)


# --- finite horizon ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FiniteHorizonLPResult:
    value: float
    flow: FlowMeasure
    status: str


def _terminal(terminal, grid: PhaseGrid) -> np.ndarray:
    if terminal is None:
        return np.zeros(grid.n_states)
    if isinstance(terminal, ValueField):
        return terminal.values
    return np.asarray(terminal, dtype=float).reshape(grid.n_states)


def build_finite_horizon_lp(cost, m0: GridMeasure, T: float, grid: PhaseGrid, terminal=None):
    """Block LP over ``mu_0 .. mu_{N-1}`` (admissible pairs) and the terminal marginal."""
    if m0.grid != grid:
        raise GridMismatchError("initial measure lives on another grid")
    n = step_count(T, grid.h)
    running = running_schedule(cost, grid, n)
    chain = grid.chain
    s, a = chain.pairs
    P, S = s.size, grid.n_states
    out = sp.csr_matrix((np.ones(P), (s, np.arange(P))), shape=(S, P))
    back = -chain.matrix.T.tocsr()
    blocks = [[None] * (n + 1) for _ in range(n + 1)]
    for t in range(n):
        blocks[t][t] = out
        if t > 0:
            blocks[t][t - 1] = back
    blocks[n][n - 1] = back
    blocks[n][n] = sp.identity(S, format="csr")
    A = sp.bmat(blocks, format="csr")
    b = np.concatenate([m0.weights, np.zeros(n * S)])
    c = np.concatenate([grid.h * (chain.kinetic[a] + running(t)[s]) for t in range(n)]
                       + [_terminal(terminal, grid)])
    return c, A, b, n


def solve_finite_horizon_lp(cost, m0: GridMeasure, T: float, grid: PhaseGrid, terminal=None
                            ) -> FiniteHorizonLPResult:
    """Minimize ``sum_t h <L_t, mu_t> + <g, m_T>`` over discrete T-closed flows from ``m0``."""
    c, A, b, n = build_finite_horizon_lp(cost, m0, T, grid, terminal)
    res = _highs(c, A, b)
    s, a = grid.chain.pairs
    P = s.size
    steps = []
    for t in range(n):
        w = np.zeros((grid.n_states, grid.n_controls))
        w[s, a] = np.clip(res.x[t * P:(t + 1) * P], 0.0, None)
        steps.append(ControlMeasure(grid, w / w.sum()))
    term = np.clip(res.x[n * P:], 0.0, None)
    flow = FlowMeasure(tuple(steps), grid.h, GridMeasure(grid, term / term.sum()))
    return FiniteHorizonLPResult(float(res.fun), flow, res.message)


def concat_flows(first: FlowMeasure, second: FlowMeasure | None, tol: float = 1e-10
                 ) -> FlowMeasure:
    """Join two flows; the terminal marginal of ``first`` must match the start of ``second``."""
    if second is None:
        return first
    if first.grid != second.grid:
        raise GridMismatchError("flows live on different grids")
    if abs(first.h - second.h) > 1e-15:
        raise ValueError("flows use different step lengths")
    gap = np.max(np.abs(first.terminal.weights - second.initial().weights))
    if gap > tol:
        raise ValueError(f"terminal and initial marginals differ by {gap:.3g}")
    return FlowMeasure(first.steps + second.steps, first.h, second.terminal)


@dataclass(frozen=True, eq=False)
class LinkResult:
    flow: FlowMeasure
    cost: float
    C2: float


def link_measures(m1: GridMeasure, m2: GridMeasure, F: CostField, theta: float = 1.0
                  ) -> LinkResult:
    """Flow of duration ``theta`` built from the product plan and cubic connectors.

    ``cost`` is the exact connector cost averaged over the plan;
    ``C2 = cost / (1 + M2(m1) + M2(m2))``.  The flow deposits each connector's
    state and acceleration at the step starts; its terminal marginal is ``m2``.
    """
    if m1.grid != m2.grid:
        raise GridMismatchError("measures live on different grids")
    grid = m1.grid
    n = step_count(theta, grid.h)
    x, v = grid.states
    src = np.flatnonzero(m1.weights)
    dst = np.flatnonzero(m2.weights)
    total = []
    acc = np.zeros((n, grid.n_states * grid.n_controls))
    for i in src:
        for j in dst:
            mass = m1.weights[i] * m2.weights[j]
            curve = connect_cubic(x[i], v[i], x[j], v[j], theta)
            total.append(mass * evaluate_cost(curve, F))
            seg = curve.segments[0]
            xs, vs, ws = seg.at(np.arange(n) * grid.h)
            si, sw = grid.stencil(xs, vs, clamp=True)
            ci, cw = grid.control_stencil(ws)
            flat = si[:, :, None] * grid.n_controls + ci[:, None, :]
            wts = mass * sw[:, :, None] * cw[:, None, :]
            for t in range(n):
                acc[t] += np.bincount(flat[t].ravel(), weights=wts[t].ravel(),
                                      minlength=acc.shape[1])
    steps = tuple(ControlMeasure(grid, (row / row.sum()).reshape(grid.n_states, grid.n_controls))
                  for row in acc)
    cost = math.fsum(total)
    C2 = cost / (1.0 + second_moment(m1) + second_moment(m2))
    return LinkResult(FlowMeasure(steps, grid.h, m2), cost, C2)


# --- export -----------------------------------------------------------------------

def write_mps(path, c: np.ndarray, A: sp.spmatrix, b: np.ndarray, name: str = "ERGODIC") -> None:
    """Write ``min c.x, Ax = b, x >= 0`` in free MPS format."""
    A = sp.csc_matrix(A)
    lines = [f"NAME {name}", "ROWS", " N COST"]
    lines += [f" E R{i}" for i in range(A.shape[0])]
    lines.append("COLUMNS")
    for j in range(A.shape[1]):
        if c[j] != 0.0:
            lines.append(f" X{j} COST {float(c[j])!r}")
        for k in range(A.indptr[j], A.indptr[j + 1]):
            lines.append(f" X{j} R{A.indices[k]} {float(A.data[k])!r}")
    lines.append("RHS")
    lines += [f" RHS R{i} {float(b[i])!r}" for i in np.flatnonzero(b)]
    lines.append("ENDATA")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def export_ergodic_lp(F, grid: PhaseGrid, path) -> ErgodicLP:
    lp = build_ergodic_lp(F, grid)
    write_mps(path, lp.cost, lp.A_eq, lp.b_eq)
    return lp
