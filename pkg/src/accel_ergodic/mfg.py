"""Ergodic and finite-horizon mean field games with a convolution coupling.

With ``F(x, v, m) = f0 + c (K * rho_m)`` and an even kernel the game is a
potential game: the population cost of a measure (or a measure flow) is

    Phi(mu) = <|w|^2/2 + f0, mu> + (c / 2) <rho, K rho>

summed over time steps for flows.  A best response to the population state
of ``mu`` is a Frank-Wolfe vertex for ``Phi``; the exploitability
``J(mu; m(mu)) - min J(.; m(mu))`` is the Frank-Wolfe gap.  All schedules
below average best responses; they differ only in the mixing weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog, minimize

from .core import (ControlMeasure, GridMeasure, PhaseGrid, ValueField, second_moment,
                   sup_wasserstein1, wasserstein1)
from .costs import MeanFieldCoupling, TerminalCost, ZERO_TERMINAL
from .hjb import ball_nodes, solve_finite_horizon, step_count
from .measure_lp import (HIGHS_OPTIONS, ErgodicSolution, build_ergodic_lp, closedness_residual,
                         solve_ergodic)

SCHEDULES = ("harmonic", "fixed", "line_search", "fully_corrective")


# --- shared averaging engine --------------------------------------------------------

@dataclass(eq=False)
class _Vertex:
    lin: float              # linear part of the potential
    rho: np.ndarray         # position marginals, one row per quadratic slot
    payload: np.ndarray     # measure data mixed linearly with the weights


class _Quadratic:
    """Bilinear form ``B(r1, r2) = sum_k w_k r1[k] . K_k r2[k]`` over slots.

    The potential is ``lin + B(rho, rho) / 2`` and the frozen cost of the
    mixture against itself is ``lin + B(rho, rho)``.
    """

    def __init__(self, weights: np.ndarray, kernels: list[np.ndarray]):
        self.weights = np.asarray(weights, dtype=float)
        self.kernels = kernels

    def __call__(self, r1: np.ndarray, r2: np.ndarray) -> float:
        total = 0.0
        for k, (w, K) in enumerate(zip(self.weights, self.kernels)):
            if w != 0.0:
                total += w * float(r1[k] @ K @ r2[k])
        return total


def _mix(vertices: list[_Vertex], theta: np.ndarray) -> _Vertex:
    lin = float(sum(t * v.lin for t, v in zip(theta, vertices)))
    rho = sum(t * v.rho for t, v in zip(theta, vertices))
    payload = sum(t * v.payload for t, v in zip(theta, vertices))
    return _Vertex(lin, rho, payload)


def _simplex_qp(q: np.ndarray, G: np.ndarray, start: np.ndarray) -> np.ndarray:
    """``argmin q.t + t.G.t / 2`` over the probability simplex."""
    n = q.size
    if n == 1:
        return np.ones(1)
    res = minimize(lambda t: q @ t + 0.5 * t @ G @ t, start, jac=lambda t: q + G @ t,
                   method="SLSQP", bounds=[(0.0, 1.0)] * n,
                   constraints=[{"type": "eq", "fun": lambda t: t.sum() - 1.0,
                                 "jac": lambda t: np.ones(n)}],
                   options={"ftol": 1e-15, "maxiter": 500})
    t = np.clip(res.x, 0.0, None)
    return t / t.sum()


@dataclass(eq=False)
class _Trace:
    gaps: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    residuals: list[float] = field(default_factory=list)


def _average(oracle: Callable, first_query, quad: _Quadratic, damping, beta: float,
             max_iter: int, stop: Callable, distance: Callable | None):
    """Run the averaging loop.

    ``oracle(payload_or_query) -> (vertex, value, extra)``.  Each pass
    evaluates the exploitability ``gap`` of the current mixture, proposes the
    next mixture and measures ``residual = distance(current, proposed)`` (the
    Picard residual; ``distance=None`` skips it).  ``stop(gap, residual)``
    ends the loop and the current mixture is returned.
    Returns ``(mixture, best_response_extra, value, gap, residual, iterations,
    converged, trace)``.
    """
    if damping not in SCHEDULES and not callable(damping):
        raise ValueError(f"unknown damping schedule {damping!r}")
    vertex, _, _ = oracle(first_query)
    vertices, theta = [vertex], np.ones(1)
    mix = vertex
    iterations = 1
    trace = _Trace()
    while True:
        br, value, extra = oracle(mix.payload)
        gap = mix.lin + quad(mix.rho, mix.rho) - value
        if damping == "fully_corrective":
            cand = vertices + [br]
            n = len(cand)
            G = np.array([[quad(cand[i].rho, cand[j].rho) for j in range(n)] for i in range(n)])
            q = np.array([v.lin for v in cand])
            weights = _simplex_qp(q, G, np.append(theta, 0.0))
            keep = weights > 1e-12
            next_vertices = [v for v, k in zip(cand, keep) if k]
            next_theta = weights[keep] / weights[keep].sum()
            proposed = _mix(next_vertices, next_theta)
        else:
            if damping == "harmonic":
                step = 1.0 / (iterations + 1)
            elif damping == "fixed":
                step = beta
            elif damping == "line_search":
                delta = br.rho - mix.rho
                curv = quad(delta, delta)
                step = 1.0 if curv <= 0 else min(1.0, max(0.0, gap / curv))
            else:
                step = float(damping(iterations))
            next_vertices, next_theta = vertices, theta
            proposed = _mix([mix, br], np.array([1.0 - step, step]))
        residual = np.nan if distance is None else distance(mix.payload, proposed.payload)
        trace.gaps.append(gap)
        trace.values.append(value)
        trace.residuals.append(residual)
        done = stop(gap, residual)
        if done or iterations >= max_iter:
            return mix, extra, value, gap, residual, iterations, done, trace
        mix, vertices, theta = proposed, next_vertices, next_theta
        iterations += 1


# --- ergodic game -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BestResponse:
    lambda_: float
    mu: ControlMeasure
    solution: ErgodicSolution


def best_response(m: GridMeasure, coupling: MeanFieldCoupling, grid: PhaseGrid | None = None,
                  tol: float = 1e-9) -> BestResponse:
    """Minimize the ergodic LP with the cost frozen at ``m``."""
    grid = m.grid if grid is None else grid
    sol = solve_ergodic(coupling.on_grid(grid, m), grid, tol)
    return BestResponse(sol.lambda_, sol.mu, sol)


@dataclass(frozen=True, eq=False)
class ErgodicMFGSolution:
    lambda_bar: float
    mu_bar: ControlMeasure
    m_bar: GridMeasure
    iterations: int
    fixed_point_residual: float
    exploitability: float
    converged: bool
    closedness: float
    lambda_history: list[float]
    gap_history: list[float]
    damping: str

    @property
    def cost_at_fixed_point(self) -> float:
        return self.lambda_bar + self.exploitability


def _initial_measure(init, grid: PhaseGrid) -> GridMeasure:
    if isinstance(init, GridMeasure):
        return init
    if isinstance(init, ControlMeasure):
        return init.marginal()
    if init == "uniform":
        return GridMeasure.uniform(grid)
    if init == "rest":
        return GridMeasure.dirac(grid, np.zeros(grid.d), np.zeros(grid.d))
    raise ValueError(f"unknown initialization {init!r}")


def best_response_distance(mu_bar: ControlMeasure, coupling: MeanFieldCoupling, slack: float
                           ) -> float:
    """``min d1(pi mu, m)`` over closed ``mu`` whose cost at ``m = pi mu_bar`` is within ``slack``
    of optimal.

    For ``d = 1`` this is one LP: the ergodic constraints plus a transport
    flow on the position-velocity lattice (whose path metric is the ground
    distance).  For ``d = 2`` it returns the upper bound obtained from
    ``mu_bar`` itself or the plain best response.
    """
    grid = mu_bar.grid
    m = mu_bar.marginal()
    running = coupling.on_grid(grid, m)
    lp = build_ergodic_lp(running, grid)
    base = solve_ergodic(running, grid)
    s, a = lp.pairs
    own = float(np.dot(mu_bar.weights[s, a], lp.cost))
    if grid.d != 1:
        if own - base.lambda_ <= slack:
            return 0.0
        return wasserstein1(base.mu.marginal(), m)
    n_x, n_v = grid.n_x, grid.n_v
    node = np.arange(grid.n_states).reshape(n_x, n_v)
    tails = np.concatenate([node.ravel(), node[:, :-1].ravel()])
    heads = np.concatenate([np.roll(node, -1, axis=0).ravel(), node[:, 1:].ravel()])
    length = np.concatenate([np.full(n_x * n_v, grid.dx), np.full(n_x * (n_v - 1), grid.dv)])
    t = np.concatenate([tails, heads])
    hd = np.concatenate([heads, tails])
    E = t.size
    inc = sp.csr_matrix((np.concatenate([np.ones(E), -np.ones(E)]),
                         (np.concatenate([t, hd]), np.tile(np.arange(E), 2))),
                        shape=(grid.n_states, E))
    P = s.size
    marg = sp.csr_matrix((np.ones(P), (s, np.arange(P))), shape=(grid.n_states, P))
    zeros_sp = sp.csr_matrix((lp.A_eq.shape[0], E))
    # flow divergence = marginal(mu) - m
    A_eq = sp.vstack([sp.hstack([lp.A_eq, zeros_sp]), sp.hstack([-marg, inc])]).tocsr()
    b_eq = np.concatenate([lp.b_eq, -m.weights])
    A_ub = sp.csr_matrix(np.concatenate([lp.cost, np.zeros(E)])[None, :])
    c = np.concatenate([np.zeros(P), np.concatenate([length, length])])
    res = linprog(c, A_ub=A_ub, b_ub=[base.lambda_ + slack], A_eq=A_eq, b_eq=b_eq,
                  bounds=(0, None), method="highs", options=HIGHS_OPTIONS)
    if res.status != 0:
        return wasserstein1(base.mu.marginal(), m)
    return max(0.0, float(res.fun))


def solve_ergodic_mfg(coupling: MeanFieldCoupling, grid: PhaseGrid, damping="harmonic",
                      tol: float = 1e-4, max_iter: int = 200, init="uniform",
                      beta: float = 0.5, lp_tol: float = 1e-9) -> ErgodicMFGSolution:
    """Averaged best-response iteration for the ergodic game.

    Stops once the exploitability is at most ``tol`` and the population state
    lies within ``d1``-distance ``tol`` of the set of ``tol``-optimal best
    responses.  Hitting ``max_iter`` returns the last iterate, flagged.
    """
    K = coupling.kernel.matrix(grid)
    f0 = coupling.base.on_grid(grid)
    kin = grid.chain.kinetic
    quad = _Quadratic(np.array([coupling.strength]), [K])

    def vertex_of(weights: np.ndarray) -> _Vertex:
        lin = float(np.sum(weights * (kin[None, :] + f0[:, None])))
        rho = weights.sum(axis=1).reshape(grid.n_x**grid.d, -1).sum(axis=1)
        return _Vertex(lin, rho[None, :], weights)

    def oracle(query):
        m = query if isinstance(query, GridMeasure) else GridMeasure(grid, query.sum(axis=1))
        br = best_response(m, coupling, grid, lp_tol)
        return vertex_of(br.mu.weights), br.lambda_, br

    mix, _, value, gap, _, iterations, _, trace = _average(
        oracle, _initial_measure(init, grid), quad, damping, beta, max_iter,
        lambda g, r: g <= tol, None)
    w = mix.payload / mix.payload.sum()
    mu_bar = ControlMeasure(grid, w)
    m_bar = mu_bar.marginal()
    residual = best_response_distance(mu_bar, coupling, tol) if gap <= tol else np.inf
    if not np.isfinite(residual):
        residual = best_response_distance(mu_bar, coupling, max(gap, tol))
    converged = gap <= tol and residual <= tol
    return ErgodicMFGSolution(float(value), mu_bar, m_bar, iterations, float(residual),
                              float(gap), bool(converged), closedness_residual(mu_bar),
                              trace.values, trace.gaps,
                              damping if isinstance(damping, str) else "custom")


def moment_safeguard(sol: ErgodicMFGSolution, coupling: MeanFieldCoupling) -> tuple[float, float]:
    """``(M2(m_bar), 2 c_F^2)``."""
    return second_moment(sol.m_bar), 2.0 * coupling.c_F**2


# --- finite-horizon game ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MFGTimeSolution:
    u: np.ndarray               # (N + 1, S) value slab
    m_flow: np.ndarray          # (N + 1, S) population flow
    policy: np.ndarray          # (N, S) best-response controls against m_flow
    running: np.ndarray         # (N, S) frozen running costs F(., ., m_t)
    terminal: np.ndarray        # (S,) frozen terminal cost g(., ., m_T)
    T: float
    grid: PhaseGrid
    value0: float
    picard_residual: float
    exploitability: float
    iterations: int
    converged: bool
    residual_history: list[float]
    gap_history: list[float]

    def value_field(self, t_index: int = 0) -> ValueField:
        return ValueField(self.grid, self.u[t_index])

    def measure(self, t_index: int) -> GridMeasure:
        w = self.m_flow[t_index]
        return GridMeasure(self.grid, w / w.sum())


def forward_transport(m0: GridMeasure, policy: np.ndarray) -> np.ndarray:
    """Push ``m0`` through per-step policies; returns the ``(N + 1, S)`` flow."""
    chain = m0.grid.chain
    flow = np.empty((policy.shape[0] + 1, m0.grid.n_states))
    flow[0] = m0.weights
    for t in range(policy.shape[0]):
        flow[t + 1] = chain.push_policy(flow[t], policy[t])
    return flow


def solve_mfg_time(coupling: MeanFieldCoupling, m0: GridMeasure, T: float, grid: PhaseGrid,
                   terminal: TerminalCost = ZERO_TERMINAL, tol: float = 1e-3,
                   max_iter: int = 200, damping="harmonic", beta: float = 0.5,
                   gap_tol: float | None = None) -> MFGTimeSolution:
    """Backward DP against the current flow, forward transport, then averaging.

    Converged when the Picard residual ``sup_t d1`` between successive
    averaged flows is at most ``tol`` and the exploitability divided by ``T``
    is at most ``gap_tol`` (default ``tol``).
    """
    if coupling.alpha != 2.0:
        raise ValueError("the time-dependent game requires alpha = 2")
    if m0.grid != grid:
        raise ValueError("initial measure lives on another grid")
    n = step_count(T, grid.h)
    gap_tol = tol if gap_tol is None else gap_tol
    n_pos = grid.n_x**grid.d
    K = coupling.kernel.matrix(grid)
    Kg = terminal.kernel.matrix(grid) if terminal.kernel is not None else np.zeros((n_pos, n_pos))
    f0 = coupling.base.on_grid(grid)
    g0 = terminal.on_grid(grid, None)
    kin = grid.chain.kinetic
    c = coupling.strength
    quad = _Quadratic(np.append(np.full(n, grid.h * c), terminal.strength),
                      [K] * n + [Kg])
    def positions(flow: np.ndarray) -> np.ndarray:
        return flow.reshape(n + 1, n_pos, -1).sum(axis=2)

    def frozen(flow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rho = positions(flow)
        running = f0[None, :] + c * np.repeat(rho[:n] @ K, grid.n_states // n_pos, axis=1)
        term = g0 + terminal.strength * np.repeat(Kg @ rho[n], grid.n_states // n_pos) \
            if terminal.kernel is not None else g0
        return running, term

    def oracle(flow: np.ndarray):
        running, term = frozen(flow)
        res = solve_finite_horizon(running, grid, T, term, keep_slab=True)
        path = forward_transport(m0, res.policy)
        lin = sum(grid.h * float(path[t] @ (kin[res.policy[t]] + f0)) for t in range(n))
        lin += float(path[n] @ g0)
        value = float(res.slab[0] @ m0.weights)
        return _Vertex(lin, positions(path), path), value, (res, running, term)

    start = np.tile(m0.weights, (n + 1, 1))
    distance = (lambda a, b: sup_wasserstein1(a, b, grid))
    mix, extra, value, gap, residual, iterations, _, trace = _average(
        oracle, start, quad, damping, beta, max_iter,
        lambda g, r: r <= tol and g / T <= gap_tol, distance)
    res, running, term = extra
    converged = residual <= tol and gap / T <= gap_tol
    return MFGTimeSolution(res.slab, mix.payload, res.policy, running, term, float(T), grid,
                           value, float(residual), float(gap), iterations, bool(converged),
                           trace.residuals, trace.gaps)


# --- diagnostics ------------------------------------------------------------------

def long_time_average_experiment(coupling: MeanFieldCoupling, m0: GridMeasure, horizons,
                                 grid: PhaseGrid, lambda_bar: float | None = None,
                                 terminal: TerminalCost = ZERO_TERMINAL, probe_radius: float = 1.0,
                                 **solve_kwargs) -> list[dict]:
    """Rows ``{T, value0_over_T, gap, sup_probe_gap, rest_probe_gap, ...}`` for increasing horizons.

    ``sup_probe_gap`` is taken over ``|v| <= probe_radius`` and
    ``rest_probe_gap`` over the ``v = 0`` nodes.
    """
    horizons = list(horizons)
    if any(b <= a for a, b in zip(horizons, horizons[1:])):
        raise ValueError("horizons must be increasing")
    if lambda_bar is None:
        lambda_bar = solve_ergodic_mfg(coupling, grid, damping="fully_corrective").lambda_bar
    probes = ball_nodes(grid, probe_radius)
    rest = ball_nodes(grid, 0.0)
    rows = []
    for T in horizons:
        sol = solve_mfg_time(coupling, m0, T, grid, terminal, **solve_kwargs)
        rows.append({"T": float(T), "value0_over_T": sol.value0 / T,
                     "gap": abs(sol.value0 / T - lambda_bar),
                     "sup_probe_gap": float(np.max(np.abs(sol.u[0][probes] / T - lambda_bar))),
                     "rest_probe_gap": float(np.max(np.abs(sol.u[0][rest] / T - lambda_bar))),
                     "converged": sol.converged, "iterations": sol.iterations,
                     "solution": sol})
    return rows


def energy_diagnostic(sol: MFGTimeSolution, m_bar: GridMeasure, coupling: MeanFieldCoupling
                      ) -> dict:
    """Time integrals of ``||F(m_t) - F(m_bar)||^2`` and of the weighted sup quantity."""
    grid = sol.grid
    d = grid.d
    n = sol.u.shape[0] - 1
    n_pos = grid.n_x**d
    K = coupling.kernel.matrix(grid)
    rho_bar = m_bar.x_marginal()
    _, v = grid.states
    weight = (1.0 + np.sum(v * v, axis=1)) ** (2 * d)
    cell = (grid.dx * grid.dv) ** d
    energy, weighted = 0.0, 0.0
    for t in range(n):
        rho = sol.m_flow[t].reshape(n_pos, -1).sum(axis=1)
        dF = np.repeat(coupling.strength * (K @ (rho - rho_bar)), grid.n_states // n_pos)
        energy += grid.h * float(np.sum(dF * dF)) * cell
        weighted += grid.h * float(np.max(np.abs(dF) ** (2 * d + 2) / weight))
    return {"E": energy, "weighted_sup_integral": weighted}


def oscillation_report(sol: MFGTimeSolution, R: float) -> float:
    """``max - min`` of ``u(0)`` over nodes with ``|v| <= R``."""
    vals = sol.u[0][ball_nodes(sol.grid, R)]
    return float(vals.max() - vals.min())
