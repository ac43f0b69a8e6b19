"""Phase-space grids, the shared transition chain, measures and the W1 distance.

Every solver in the package (finite-horizon and discounted dynamic
programming, the occupation-measure linear programs, forward transport in the
mean field game) runs on one discrete chain owned by :class:`PhaseGrid`.
A state is a node ``(x, v)`` of ``T^d x [-v_max, v_max]^d``; a control is a
node ``w`` of ``[-w_max, w_max]^d``.  One step of length ``h`` moves the state
by exact double integration of the constant acceleration ``w``::

    x' = x + h v + h^2 w / 2   (mod 1),     v' = v + h w

and the landing point is split onto the surrounding ``4^d`` nodes by
multilinear weights.  Controls that would push ``v'`` out of the velocity box
are inadmissible; ``w = 0`` is always admissible.

States are indexed row-major over ``(x_1, .., x_d, v_1, .., v_d)``, controls
row-major over ``(w_1, .., w_d)``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from functools import cached_property
from typing import Any

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

MASS_TOL = 1e-12
_BOX_TOL = 1e-9

MEASURE_SCHEMA = "accel_ergodic.measure/1"
FIELD_SCHEMA = "accel_ergodic.field/1"


# tight HiGHS tolerances; the defaults (1e-7) are visible in LP/DP comparisons
HIGHS_OPTIONS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


class GridMismatchError(ValueError):
    """Two objects that must live on the same grid do not."""


@dataclass(frozen=True)
class PhaseGrid:
    """Discretization of ``T^d x [-v_max, v_max]^d`` with a finite control set.

    Parameters are validated on construction; ``n_v`` and ``n_w`` must be odd
    so that ``v = 0`` and ``w = 0`` are nodes.
    """

    d: int = 1
    n_x: int = 32
    v_max: float = 2.0
    n_v: int = 33
    w_max: float = 4.0
    n_w: int = 17
    h: float = 0.125

    def __post_init__(self) -> None:
        if self.d not in (1, 2):
            raise ValueError(f"d must be 1 or 2, got {self.d}")
        if self.n_x < 2:
            raise ValueError("n_x must be >= 2")
        for name in ("n_v", "n_w"):
            n = getattr(self, name)
            if n < 3 or n % 2 == 0:
                raise ValueError(f"{name} must be odd and >= 3, got {n}")
        for name in ("v_max", "w_max", "h"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    # --- axes -------------------------------------------------------------
    @property
    def dx(self) -> float:
        return 1.0 / self.n_x

    @property
    def dv(self) -> float:
        return 2.0 * self.v_max / (self.n_v - 1)

    @property
    def dw(self) -> float:
        return 2.0 * self.w_max / (self.n_w - 1)

    @cached_property
    def x_axis(self) -> np.ndarray:
        return np.arange(self.n_x) / self.n_x

    @cached_property
    def v_axis(self) -> np.ndarray:
        half = (self.n_v - 1) // 2
        return np.arange(-half, half + 1) * self.dv

    @cached_property
    def w_axis(self) -> np.ndarray:
        half = (self.n_w - 1) // 2
        return np.arange(-half, half + 1) * self.dw

    @property
    def state_shape(self) -> tuple[int, ...]:
        return (self.n_x,) * self.d + (self.n_v,) * self.d

    @property
    def control_shape(self) -> tuple[int, ...]:
        return (self.n_w,) * self.d

    @property
    def n_states(self) -> int:
        return self.n_x**self.d * self.n_v**self.d

    @property
    def n_controls(self) -> int:
        return self.n_w**self.d

    @cached_property
    def states(self) -> tuple[np.ndarray, np.ndarray]:
        """Node coordinates ``(x, v)``, each of shape ``(n_states, d)``."""
        axes = [self.x_axis] * self.d + [self.v_axis] * self.d
        mesh = np.meshgrid(*axes, indexing="ij")
        flat = np.stack([m.ravel() for m in mesh], axis=-1)
        return flat[:, : self.d].copy(), flat[:, self.d :].copy()

    @cached_property
    def controls(self) -> np.ndarray:
        """Control node coordinates, shape ``(n_controls, d)``."""
        mesh = np.meshgrid(*([self.w_axis] * self.d), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @cached_property
    def rest_control(self) -> int:
        return int(np.flatnonzero(np.all(self.controls == 0.0, axis=1))[0])

    def node_index(self, x, v) -> int:
        """Index of the node at ``(x, v)``; raises if the point is not a node."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        v = np.atleast_1d(np.asarray(v, dtype=float))
        ix = np.rint(np.mod(x, 1.0) / self.dx).astype(int) % self.n_x
        iv = np.rint((v + self.v_max) / self.dv).astype(int)
        if not (np.allclose(np.mod(x - ix * self.dx + 0.5, 1.0) - 0.5, 0.0, atol=1e-9)
                and np.allclose(self.v_axis[np.clip(iv, 0, self.n_v - 1)], v, atol=1e-9)
                and np.all((iv >= 0) & (iv < self.n_v))):
            raise ValueError(f"({x}, {v}) is not a grid node")
        return int(np.ravel_multi_index(tuple(ix) + tuple(iv), self.state_shape))

    def control_index(self, w) -> int:
        w = np.atleast_1d(np.asarray(w, dtype=float))
        iw = np.rint((w + self.w_max) / self.dw).astype(int)
        if np.any((iw < 0) | (iw >= self.n_w)) or not np.allclose(self.w_axis[iw], w, atol=1e-9):
            raise ValueError(f"{w} is not a control node")
        return int(np.ravel_multi_index(tuple(iw), self.control_shape))

    def to_dict(self) -> dict[str, Any]:
        return {"d": self.d, "n_x": self.n_x, "v_max": self.v_max, "n_v": self.n_v,
                "w_max": self.w_max, "n_w": self.n_w, "h": self.h}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PhaseGrid:
        return cls(d=int(data["d"]), n_x=int(data["n_x"]), v_max=float(data["v_max"]),
                   n_v=int(data["n_v"]), w_max=float(data["w_max"]), n_w=int(data["n_w"]),
                   h=float(data["h"]))

    def with_step(self, h: float) -> PhaseGrid:
        return PhaseGrid(self.d, self.n_x, self.v_max, self.n_v, self.w_max, self.n_w, h)

    # --- interpolation stencils ---------------------------------------------
    def stencil(self, x: np.ndarray, v: np.ndarray, clamp: bool = False
                ) -> tuple[np.ndarray, np.ndarray]:
        """Multilinear stencil of points ``(x, v)`` (arrays of shape ``(M, d)``).

        Returns node indices and weights, both of shape ``(M, 4**d)``.
        Periodic in ``x``; velocities must lie in the box unless ``clamp``.
        """
        x = np.asarray(x, dtype=float).reshape(-1, self.d)
        v = np.asarray(v, dtype=float).reshape(-1, self.d)
        if clamp:
            v = np.clip(v, -self.v_max, self.v_max)
        elif np.any(np.abs(v) > self.v_max + _BOX_TOL):
            raise ValueError("velocity outside the grid box")
        u = np.mod(x, 1.0) * self.n_x
        i0 = np.floor(u).astype(np.int64)
        fx = u - i0
        i0 %= self.n_x
        i1 = (i0 + 1) % self.n_x
        s = np.clip((v + self.v_max) / self.dv, 0.0, self.n_v - 1)
        j0 = np.minimum(np.floor(s).astype(np.int64), self.n_v - 2)
        fv = s - j0
        lo = np.concatenate([i0, j0], axis=1)
        hi = np.concatenate([i1, j0 + 1], axis=1)
        frac = np.concatenate([fx, fv], axis=1)
        n_ax = 2 * self.d
        corners = list(itertools.product((0, 1), repeat=n_ax))
        idx = np.empty((x.shape[0], len(corners)), dtype=np.int64)
        wts = np.empty((x.shape[0], len(corners)))
        for k, bits in enumerate(corners):
            sel = np.array(bits, dtype=bool)
            multi = np.where(sel, hi, lo)
            idx[:, k] = np.ravel_multi_index(tuple(multi.T), self.state_shape)
            wts[:, k] = np.prod(np.where(sel, frac, 1.0 - frac), axis=1)
        return idx, wts

    def control_stencil(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Multilinear stencil on the control lattice; ``w`` is clamped to the box."""
        w = np.clip(np.asarray(w, dtype=float).reshape(-1, self.d), -self.w_max, self.w_max)
        s = (w + self.w_max) / self.dw
        j0 = np.minimum(np.floor(s).astype(np.int64), self.n_w - 2)
        f = s - j0
        corners = list(itertools.product((0, 1), repeat=self.d))
        idx = np.empty((w.shape[0], len(corners)), dtype=np.int64)
        wts = np.empty((w.shape[0], len(corners)))
        for k, bits in enumerate(corners):
            sel = np.array(bits, dtype=bool)
            multi = np.where(sel, j0 + 1, j0)
            idx[:, k] = np.ravel_multi_index(tuple(multi.T), self.control_shape)
            wts[:, k] = np.prod(np.where(sel, f, 1.0 - f), axis=1)
        return idx, wts

    @cached_property
    def chain(self) -> Chain:
        return Chain.build(self)


@dataclass(frozen=True, eq=False)
class Chain:
    """One-step transition structure shared by every solver.

    ``idx[s, a]`` / ``wts[s, a]`` hold the landing stencil of control ``a``
    applied at state ``s``.  For inadmissible pairs the landing velocity is
    clamped to the box; those entries are only used to score arbitrary
    measures (see :func:`accel_ergodic.measure_lp.closedness_residual`).
    """

    grid: PhaseGrid
    idx: np.ndarray
    wts: np.ndarray
    admissible: np.ndarray
    kinetic: np.ndarray

    @classmethod
    def build(cls, grid: PhaseGrid) -> Chain:
        x, v = grid.states
        w = grid.controls
        S, A, h = grid.n_states, grid.n_controls, grid.h
        xn = x[:, None, :] + h * v[:, None, :] + 0.5 * h * h * w[None, :, :]
        vn = v[:, None, :] + h * w[None, :, :]
        admissible = np.all(np.abs(vn) <= grid.v_max + _BOX_TOL, axis=-1)
        idx, wts = grid.stencil(xn.reshape(-1, grid.d), vn.reshape(-1, grid.d), clamp=True)
        wts[wts < 1e-14] = 0.0
        wts /= wts.sum(axis=1, keepdims=True)
        K = idx.shape[1]
        kinetic = 0.5 * np.sum(w * w, axis=1)
        return cls(grid, idx.reshape(S, A, K), wts.reshape(S, A, K), admissible, kinetic)

    def expect(self, values: np.ndarray) -> np.ndarray:
        """``(P V)(s, a)`` for a value vector over states."""
        return np.einsum("sak,sak->sa", self.wts, values[self.idx])

    def push(self, mu: np.ndarray) -> np.ndarray:
        """Mass arriving at each state after one step of ``mu`` (shape ``(S, A)``)."""
        return np.bincount(self.idx.ravel(), weights=(mu[:, :, None] * self.wts).ravel(),
                           minlength=self.grid.n_states)

    def push_policy(self, m: np.ndarray, policy: np.ndarray) -> np.ndarray:
        rows = np.arange(self.grid.n_states)
        idx = self.idx[rows, policy]
        wts = self.wts[rows, policy]
        return np.bincount(idx.ravel(), weights=(m[:, None] * wts).ravel(),
                           minlength=self.grid.n_states)

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        """Sparse transition matrix of admissible pairs, rows ordered as ``pairs``."""
        s, a = self.pairs
        K = self.idx.shape[2]
        rows = np.repeat(np.arange(s.size), K)
        return sp.csr_matrix((self.wts[s, a].ravel(), (rows, self.idx[s, a].ravel())),
                             shape=(s.size, self.grid.n_states))

    @cached_property
    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Admissible ``(state, control)`` pairs in row-major order."""
        s, a = np.nonzero(self.admissible)
        return s, a


# --- measures and fields ---------------------------------------------------------

def _check_weights(weights: np.ndarray) -> None:
    if not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite")
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    if abs(weights.sum() - 1.0) > MASS_TOL * max(1, weights.size) ** 0.5 * 10:
        raise ValueError(f"total mass {weights.sum()!r} is not 1")


@dataclass(frozen=True, eq=False)
class GridMeasure:
    """Probability weights over the ``(x, v)`` nodes."""

    grid: PhaseGrid
    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if w.size != self.grid.n_states:
            raise ValueError("weights do not match the grid")
        _check_weights(w)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def dirac(cls, grid: PhaseGrid, x, v) -> GridMeasure:
        w = np.zeros(grid.n_states)
        w[grid.node_index(x, v)] = 1.0
        return cls(grid, w)

    @classmethod
    def uniform(cls, grid: PhaseGrid) -> GridMeasure:
        return cls(grid, np.full(grid.n_states, 1.0 / grid.n_states))

    @classmethod
    def from_points(cls, grid: PhaseGrid, x, v, mass=None) -> GridMeasure:
        """Deposit weighted points onto nodes by multilinear splitting."""
        idx, wts = grid.stencil(x, v)
        mass = np.full(idx.shape[0], 1.0 / idx.shape[0]) if mass is None else np.asarray(mass)
        w = np.bincount(idx.ravel(), weights=(wts * mass[:, None]).ravel(), minlength=grid.n_states)
        return cls(grid, w / w.sum())

    def x_marginal(self) -> np.ndarray:
        """Weights over the ``n_x**d`` position nodes."""
        return self.weights.reshape(self.grid.n_x**self.grid.d, -1).sum(axis=1)

    def to_dict(self) -> dict[str, Any]:
        x, v = self.grid.states
        return {"schema": MEASURE_SCHEMA, "kind": "grid_measure", "grid": self.grid.to_dict(),
                "nodes": {"x": x.tolist(), "v": v.tolist()}, "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> GridMeasure:
        if data.get("schema") != MEASURE_SCHEMA or data.get("kind") != "grid_measure":
            raise ValueError("not a grid_measure document")
        return cls(PhaseGrid.from_dict(data["grid"]), np.array(data["weights"], dtype=float))


@dataclass(frozen=True, eq=False)
class ControlMeasure:
    """Probability weights over ``(x, v, w)`` nodes, stored as ``(n_states, n_controls)``."""

    grid: PhaseGrid
    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.grid.n_states, self.grid.n_controls):
            raise ValueError("weights do not match the grid")
        _check_weights(w)
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def rest(cls, grid: PhaseGrid, x, v=None) -> ControlMeasure:
        v = np.zeros(grid.d) if v is None else v
        w = np.zeros((grid.n_states, grid.n_controls))
        w[grid.node_index(x, v), grid.rest_control] = 1.0
        return cls(grid, w)

    @classmethod
    def from_policy(cls, m: GridMeasure, policy: np.ndarray) -> ControlMeasure:
        w = np.zeros((m.grid.n_states, m.grid.n_controls))
        w[np.arange(m.grid.n_states), policy] = m.weights
        return cls(m.grid, w)

    def marginal(self) -> GridMeasure:
        return GridMeasure(self.grid, self.weights.sum(axis=1))

    def cost(self, running: np.ndarray) -> float:
        """``<1/2|w|^2 + F, mu>`` for a running cost ``F`` over states."""
        g = self.grid.chain
        return float(np.sum(self.weights * (g.kinetic[None, :] + np.asarray(running)[:, None])))

    def to_dict(self) -> dict[str, Any]:
        s, a = np.nonzero(self.weights)
        x, v = self.grid.states
        return {"schema": MEASURE_SCHEMA, "kind": "control_measure", "grid": self.grid.to_dict(),
                "support": [{"x": x[i].tolist(), "v": v[i].tolist(),
                             "w": self.grid.controls[j].tolist(), "weight": float(self.weights[i, j])}
                            for i, j in zip(s, a)]}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ControlMeasure:
        if data.get("schema") != MEASURE_SCHEMA or data.get("kind") != "control_measure":
            raise ValueError("not a control_measure document")
        grid = PhaseGrid.from_dict(data["grid"])
        w = np.zeros((grid.n_states, grid.n_controls))
        for atom in data["support"]:
            w[grid.node_index(atom["x"], atom["v"]), grid.control_index(atom["w"])] += atom["weight"]
        return cls(grid, w)


@dataclass(frozen=True, eq=False)
class FlowMeasure:
    """Time-indexed control measures ``mu_0 .. mu_{N-1}`` plus the terminal marginal.

    If ``terminal`` is omitted it is the one-step push of the last step through
    the grid chain.
    """

    steps: tuple[ControlMeasure, ...]
    h: float
    terminal: GridMeasure | None = None

    def __post_init__(self) -> None:
        steps = tuple(self.steps)
        if not steps:
            raise ValueError("a flow needs at least one step")
        grid = steps[0].grid
        if any(s.grid != grid for s in steps):
            raise GridMismatchError("flow steps live on different grids")
        object.__setattr__(self, "steps", steps)
        if self.terminal is None:
            pushed = grid.chain.push(steps[-1].weights)
            object.__setattr__(self, "terminal", GridMeasure(grid, pushed / pushed.sum()))

    @property
    def grid(self) -> PhaseGrid:
        return self.steps[0].grid

    @property
    def horizon(self) -> float:
        return len(self.steps) * self.h

    def initial(self) -> GridMeasure:
        return self.steps[0].marginal()

    def cost(self, running, terminal_cost=None) -> float:
        """``sum_t h <L_t, mu_t> + <g, m_T>``; ``running`` is ``(S,)`` or ``(N, S)``."""
        running = np.asarray(running, dtype=float)
        if running.ndim == 1:
            running = np.broadcast_to(running, (len(self.steps), running.size))
        total = sum(self.h * mu.cost(running[t]) for t, mu in enumerate(self.steps))
        if terminal_cost is not None:
            total += float(np.dot(np.asarray(terminal_cost), self.terminal.weights))
        return float(total)


@dataclass(frozen=True, eq=False)
class ValueField:
    """One real value per ``(x, v)`` node."""

    grid: PhaseGrid
    values: np.ndarray

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=float).reshape(-1)
        if vals.size != self.grid.n_states:
            raise ValueError("values do not match the grid")
        if not np.all(np.isfinite(vals)):
            raise ValueError("value field has non-finite entries")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def at(self, x, v) -> float:
        return float(self.values[self.grid.node_index(x, v)])

    def to_csv(self, path) -> None:
        x, v = self.grid.states
        d = self.grid.d
        header = ",".join([f"x{i + 1}" for i in range(d)] + [f"v{i + 1}" for i in range(d)] + ["value"])
        rows = np.column_stack([x, v, self.values])
        np.savetxt(path, rows, delimiter=",", header=header, comments="", fmt="%.17g")

    def to_dict(self) -> dict[str, Any]:
        return {"schema": FIELD_SCHEMA, "grid": self.grid.to_dict(), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ValueField:
        if data.get("schema") != FIELD_SCHEMA:
            raise ValueError("not a value field document")
        return cls(PhaseGrid.from_dict(data["grid"]), np.array(data["values"], dtype=float))


def dumps(obj) -> str:
    """Canonical JSON text for grids, measures and fields."""
    return json.dumps(obj.to_dict(), sort_keys=True, separators=(",", ":"))


# --- operations ------------------------------------------------------------------

def interpolate(field: ValueField, x, v) -> float | np.ndarray:
    """Multilinear interpolation of ``field``, periodic in ``x``.

    ``x`` and ``v`` may be single points (length ``d``) or arrays ``(M, d)``.
    Raises ``ValueError`` for velocities strictly outside the box.
    """
    grid = field.grid
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    idx, wts = grid.stencil(np.atleast_2d(x.reshape(-1, grid.d)),
                            np.asarray(v, dtype=float).reshape(-1, grid.d))
    out = np.sum(wts * field.values[idx], axis=1)
    return float(out[0]) if single else out


def ground_distance(grid: PhaseGrid, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    """Torus distance in ``x`` plus Euclidean distance in ``v`` between node sets."""
    x, v = grid.states
    dx = np.abs(x[i][:, None, :] - x[j][None, :, :])
    dx = np.minimum(dx, 1.0 - dx)
    dv = v[i][:, None, :] - v[j][None, :, :]
    return np.sqrt(np.sum(dx * dx, axis=-1)) + np.sqrt(np.sum(dv * dv, axis=-1))


def _transport_lp(a: np.ndarray, b: np.ndarray, cost: np.ndarray) -> float:
    n, m = cost.shape
    rows = sp.kron(sp.eye(n), np.ones((1, m)))
    # the last column constraint is implied; dropping it avoids round-off infeasibility
    cols = sp.kron(np.ones((1, n)), sp.eye(m)).tocsr()[:-1]
    res = linprog(cost.ravel(), A_eq=sp.vstack([rows, cols]).tocsr(),
                  b_eq=np.concatenate([a, b[:-1]]), bounds=(0, None), method="highs",
                  options=HIGHS_OPTIONS)
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def _grid_flow_w1(grid: PhaseGrid, diff: np.ndarray) -> float:
    # d = 1: the ground metric is the geodesic of the cycle x path lattice graph
    n_x, n_v = grid.n_x, grid.n_v
    node = np.arange(grid.n_states).reshape(n_x, n_v)
    tails = [node.ravel(), node[:, :-1].ravel()]
    heads = [np.roll(node, -1, axis=0).ravel(), node[:, 1:].ravel()]
    lengths = [np.full(n_x * n_v, grid.dx), np.full(n_x * (n_v - 1), grid.dv)]
    t = np.concatenate(tails + heads)
    hd = np.concatenate(heads + tails)
    c = np.concatenate(lengths + lengths)
    E = t.size
    inc = sp.csr_matrix((np.concatenate([np.ones(E), -np.ones(E)]),
                         (np.concatenate([t, hd]), np.tile(np.arange(E), 2))),
                        shape=(grid.n_states, E))
    res = linprog(c, A_eq=inc, b_eq=diff, bounds=(0, None), method="highs",
                  options=HIGHS_OPTIONS)
    if res.status != 0:
        raise RuntimeError(f"network flow LP failed: {res.message}")
    return float(res.fun)


def wasserstein1(a: GridMeasure, b: GridMeasure, method: str = "auto",
                 dense_limit: int = 200_000) -> float:
    """Exact Wasserstein-1 distance between two grid measures.

    ``method="dense"`` solves the transport LP over support pairs.
    ``method="network"`` (``d = 1`` only) solves the equivalent min-cost flow
    on the lattice graph, whose shortest-path metric coincides with the ground
    distance.  ``"auto"`` picks dense when the support product is small.
    """
    if a.grid != b.grid:
        raise GridMismatchError("measures live on different grids")
    grid = a.grid
    diff = a.weights - b.weights
    if np.max(np.abs(diff)) == 0.0:
        return 0.0
    sa = np.flatnonzero(a.weights > 0)
    sb = np.flatnonzero(b.weights > 0)
    if method == "auto":
        method = "dense" if (sa.size * sb.size <= dense_limit or grid.d != 1) else "network"
    if method == "dense":
        return _transport_lp(a.weights[sa], b.weights[sb], ground_distance(grid, sa, sb))
    if method == "network":
        if grid.d != 1:
            raise ValueError("network W1 is exact only for d = 1")
        return _grid_flow_w1(grid, diff)
    raise ValueError(f"unknown method {method!r}")


def second_moment(m: GridMeasure) -> float:
    """``M_2(m) = sum m |v|^2``."""
    _, v = m.grid.states
    return float(np.dot(m.weights, np.sum(v * v, axis=1)))


def boundary_mass(m: GridMeasure, fraction: float = 0.1) -> float:
    """Mass within ``fraction * v_max`` of the velocity-box boundary (truncation warning)."""
    _, v = m.grid.states
    near = np.max(np.abs(v), axis=1) >= (1.0 - fraction) * m.grid.v_max - 1e-12
    return float(m.weights[near].sum())


def default_v_max(c_F: float, initial_speeds=(0.0,)) -> float:
    """Heuristic velocity radius ``c_F (1 + max initial speed)``."""
    return float(c_F * (1.0 + max(abs(s) for s in initial_speeds)))


def _circle_w1(r: np.ndarray, step: float) -> float:
    cum = np.cumsum(r)
    return float(step * np.sum(np.abs(cum - np.median(cum))))


def _line_w1(r: np.ndarray, step: float) -> float:
    return float(step * np.sum(np.abs(np.cumsum(r)[:-1])))


def w1_bounds(grid: PhaseGrid, diff: np.ndarray, profiles=()) -> tuple[float, float]:
    """Cheap ``(lower, upper)`` bounds on the ``d = 1`` transport cost of ``diff``.

    Lower: the larger of the two marginal distances (projections are
    1-Lipschitz).  Upper: the best of several feasible flows, each reshaping
    every position column to ``net * q`` for a velocity profile ``q`` and then
    moving the column nets around the circle row by row.  ``profiles`` adds
    candidate ``q`` to the default atom at ``v = 0``.
    """
    cols = diff.reshape(grid.n_x, grid.n_v)
    net = cols.sum(axis=1)
    circle = _circle_w1(net, grid.dx)
    lower = max(circle, _line_w1(cols.sum(axis=0), grid.dv))
    atom = np.zeros(grid.n_v)
    atom[grid.n_v // 2] = 1.0
    upper = np.inf
    for q in (atom, *profiles):
        rest = cols - net[:, None] * (q / q.sum())[None, :]
        cum = np.cumsum(rest, axis=1)[:, :-1]
        upper = min(upper, grid.dv * float(np.abs(cum).sum()) + circle)
    return lower, float(upper)


def sup_wasserstein1(a: np.ndarray, b: np.ndarray, grid: PhaseGrid) -> float:
    """``max_t d1(a[t], b[t])`` for stacks of weight vectors.

    For ``d = 1`` exact distances are computed only for slices whose upper
    bound exceeds the best value found so far.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    diffs = a - b
    if grid.d != 1:
        return max(wasserstein1(GridMeasure(grid, x / x.sum()), GridMeasure(grid, y / y.sum()))
                   for x, y in zip(a, b))
    bounds = []
    for x, y in zip(a, b):
        prof = (x.reshape(grid.n_x, grid.n_v).sum(axis=0), y.reshape(grid.n_x, grid.n_v).sum(axis=0))
        bounds.append(w1_bounds(grid, x - y, [q for q in prof if q.sum() > 0]))
    best = max(lo for lo, _ in bounds)
    for t in sorted(range(len(bounds)), key=lambda k: -bounds[k][1]):
        lo, hi = bounds[t]
        if hi <= best:
            break
        if hi - lo <= 1e-13 or np.max(np.abs(diffs[t])) == 0.0:
            best = max(best, hi)
            continue
        best = max(best, _grid_flow_w1(grid, diffs[t]))
    return float(best)
