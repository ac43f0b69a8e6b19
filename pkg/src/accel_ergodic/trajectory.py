"""Curves with controlled acceleration.

A :class:`Curve` is a chain of segments, each driven by an affine
acceleration ``a(s) = a0 + a1 s``.  Piecewise-constant controls use
``a1 = 0``; cubic connectors use one segment with ``a1 != 0``.  Position and
velocity are polynomials in time on each segment, so reconstruction and the
acceleration part of the cost are exact.  Positions are stored unwrapped;
the cost field is evaluated on ``x mod 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ControlMeasure, PhaseGrid, ValueField, interpolate
from .costs import CostField
from .hjb import solve_finite_horizon, step_count

_GAUSS_NODES = np.array([-math.sqrt(0.6), 0.0, math.sqrt(0.6)])
_GAUSS_WEIGHTS = np.array([5.0, 8.0, 5.0]) / 9.0


@dataclass(frozen=True, eq=False)
class Segment:
    tau: float
    x0: np.ndarray
    v0: np.ndarray
    a0: np.ndarray
    a1: np.ndarray

    def at(self, s) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        s = np.asarray(s, dtype=float)[..., None]
        x = self.x0 + self.v0 * s + self.a0 * s**2 / 2 + self.a1 * s**3 / 6
        v = self.v0 + self.a0 * s + self.a1 * s**2 / 2
        return x, v, self.a0 + self.a1 * s

    def end(self) -> tuple[np.ndarray, np.ndarray]:
        x, v, _ = self.at(self.tau)
        return x, v

    def split(self, s: float) -> tuple[Segment, Segment]:
        x, v, a = self.at(s)
        return (Segment(s, self.x0, self.v0, self.a0, self.a1),
                Segment(self.tau - s, x, v, a, self.a1))

    def kinetic(self) -> float:
        """Exact ``int_0^tau |a0 + a1 s|^2 / 2 ds``."""
        t = self.tau
        return 0.5 * float(self.a0 @ self.a0 * t + self.a0 @ self.a1 * t**2
                           + self.a1 @ self.a1 * t**3 / 3)


@dataclass(frozen=True, eq=False)
class Curve:
    """A continuous ``C^1`` curve on ``[t0, t0 + sum(tau)]``."""

    segments: tuple[Segment, ...]
    t0: float = 0.0

    def __post_init__(self) -> None:
        segs = tuple(self.segments)
        if not segs:
            raise ValueError("a curve needs at least one segment")
        if any(s.tau <= 0 for s in segs):
            raise ValueError("segment durations must be positive")
        object.__setattr__(self, "segments", segs)

    @classmethod
    def from_controls(cls, x0, v0, controls, h: float, t0: float = 0.0) -> Curve:
        """Exact double integration of piecewise-constant accelerations."""
        x = np.atleast_1d(np.asarray(x0, dtype=float))
        v = np.atleast_1d(np.asarray(v0, dtype=float))
        controls = np.asarray(controls, dtype=float).reshape(-1, x.size)
        zero = np.zeros_like(x)
        segs = []
        for w in controls:
            segs.append(Segment(h, x, v, w.copy(), zero))
            x = x + h * v + 0.5 * h * h * w
            v = v + h * w
        return cls(tuple(segs), t0)

    @property
    def d(self) -> int:
        return self.segments[0].x0.size

    @property
    def x0(self) -> np.ndarray:
        return self.segments[0].x0

    @property
    def v0(self) -> np.ndarray:
        return self.segments[0].v0

    @property
    def duration(self) -> float:
        return math.fsum(s.tau for s in self.segments)

    @property
    def t1(self) -> float:
        return self.t0 + self.duration

    def end_state(self) -> tuple[np.ndarray, np.ndarray]:
        return self.segments[-1].end()

    def _locate(self, t: float) -> tuple[int, float]:
        s = t - self.t0
        for k, seg in enumerate(self.segments):
            if s <= seg.tau or k == len(self.segments) - 1:
                return k, min(max(s, 0.0), seg.tau)
            s -= seg.tau
        raise AssertionError

    def state(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(gamma, gamma', gamma'')`` at time ``t``."""
        k, s = self._locate(t)
        return self.segments[k].at(s)

    def truncated(self, t: float) -> Curve:
        """The restriction to ``[t0, t]``."""
        if not self.t0 < t <= self.t1 + 1e-12:
            raise ValueError("truncation time outside the curve")
        k, s = self._locate(t)
        head = list(self.segments[:k])
        if s > 1e-14:
            head.append(self.segments[k].split(s)[0] if s < self.segments[k].tau else self.segments[k])
        return Curve(tuple(head), self.t0)

    def to_csv(self, path, samples_per_segment: int = 1) -> None:
        """Write ``t, x.., v.., w..`` rows; ``x`` is reduced mod 1."""
        rows, t = [], self.t0
        for seg in self.segments:
            for j in range(samples_per_segment):
                s = seg.tau * j / samples_per_segment
                x, v, w = seg.at(s)
                rows.append(np.concatenate([[t + s], np.mod(x, 1.0), v, w]))
            t += seg.tau
        x, v, w = self.segments[-1].at(self.segments[-1].tau)
        rows.append(np.concatenate([[t], np.mod(x, 1.0), v, w]))
        d = self.d
        header = ",".join(["t"] + [f"x{i + 1}" for i in range(d)] + [f"v{i + 1}" for i in range(d)]
                          + [f"w{i + 1}" for i in range(d)])
        np.savetxt(path, np.array(rows), delimiter=",", header=header, comments="", fmt="%.17g")


def concat(first: Curve, second: Curve, tol: float = 1e-9) -> Curve:
    """Join two curves; ``second`` must start where ``first`` ends (mod 1 in ``x``)."""
    x, v = first.end_state()
    gap = np.mod(second.x0 - x + 0.5, 1.0) - 0.5
    if np.max(np.abs(gap)) > tol or np.max(np.abs(second.v0 - v)) > tol:
        raise ValueError("curves do not join")
    return Curve(first.segments + second.segments, first.t0)


def torus_displacement(x0, x1, target=None) -> np.ndarray:
    """Representative of ``x1 - x0`` in ``R^d``.

    Without ``target`` this is the shortest one, ties toward the nonnegative
    direction; otherwise the one nearest ``target``.
    """
    raw = np.asarray(x1, dtype=float) - np.asarray(x0, dtype=float)
    if target is None:
        return -(np.mod(-raw + 0.5, 1.0) - 0.5)
    return raw + np.floor(np.asarray(target, dtype=float) - raw + 0.5)


def cubic_coefficients(x0, v0, x1, v1, theta: float, displacement=None
                       ) -> tuple[np.ndarray, np.ndarray]:
    """``B, C`` of ``sigma(t) = x0 + v0 t + B t^2 + C t^3``."""
    if not theta > 0:
        raise ValueError("theta must be positive")
    v0 = np.atleast_1d(np.asarray(v0, dtype=float))
    v1 = np.atleast_1d(np.asarray(v1, dtype=float))
    dx = torus_displacement(x0, x1) if displacement is None else np.asarray(displacement, float)
    B = (3.0 * dx - theta * v1 - 2.0 * theta * v0) / theta**2
    C = (-2.0 * dx + theta * (v1 + v0)) / theta**3
    return B, C


def connect_cubic(x0, v0, x1, v1, theta: float, displacement=None) -> Curve:
    """Cubic curve from ``(x0, v0)`` to ``(x1, v1)`` in time ``theta``."""
    B, C = cubic_coefficients(x0, v0, x1, v1, theta, displacement)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    v0 = np.atleast_1d(np.asarray(v0, dtype=float))
    return Curve((Segment(float(theta), x0, v0, 2.0 * B, 6.0 * C),))


def connector_bound_ratio(curve: Curve, F: CostField, R: float) -> float:
    """``J / (R^2 / theta + R^alpha theta)`` for a single connector."""
    theta = curve.duration
    return evaluate_cost(curve, F) / (R**2 / theta + R**F.alpha * theta)


def evaluate_cost(curve: Curve, F: CostField, max_panel: float = 0.125) -> float:
    """``int (|gamma''|^2 / 2 + F(gamma, gamma')) dt``.

    The acceleration term is exact; the ``F`` term uses 3-point Gauss
    quadrature on panels no longer than ``max_panel``.
    """
    parts = []
    for seg in curve.segments:
        parts.append(seg.kinetic())
        n = max(1, math.ceil(seg.tau / max_panel - 1e-12))
        width = seg.tau / n
        mids = (np.arange(n) + 0.5) * width
        s = (mids[:, None] + 0.5 * width * _GAUSS_NODES[None, :]).ravel()
        x, v, _ = seg.at(s)
        vals = F(np.mod(x, 1.0), v).reshape(n, 3)
        parts.append(0.5 * width * float(np.sum(vals @ _GAUSS_WEIGHTS)))
    return math.fsum(parts)


# --- direct minimization ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class HorizonResult:
    curve: Curve
    value: float
    controls: np.ndarray
    curve_cost: float | None


def minimize_horizon(x0, v0, T: float, F: CostField | np.ndarray, grid: PhaseGrid,
                     terminal=None) -> HorizonResult:
    """Dynamic programming on ``grid`` followed by greedy control read-out.

    ``value`` is the interpolated DP value at the start; the curve follows
    the argmin of the interpolated Q-values along the simulated path.
    """
    x = np.atleast_1d(np.asarray(x0, dtype=float))
    v = np.atleast_1d(np.asarray(v0, dtype=float))
    if x.size != grid.d or v.size != grid.d:
        raise ValueError("start state has the wrong dimension")
    if np.any(np.abs(v) > grid.v_max + 1e-9):
        raise ValueError("start velocity outside the grid box")
    n = step_count(T, grid.h)
    res = solve_finite_horizon(F, grid, T, terminal, keep_slab=True)
    value = interpolate(res.value, x, v)
    w = grid.controls
    h = grid.h
    kinetic = grid.chain.kinetic
    controls = np.empty((n, grid.d))
    for t in range(n):
        xn = x[None, :] + h * v[None, :] + 0.5 * h * h * w
        vn = v[None, :] + h * w
        ok = np.all(np.abs(vn) <= grid.v_max + 1e-9, axis=1)
        q = np.full(w.shape[0], np.inf)
        q[ok] = h * kinetic[ok] + interpolate(ValueField(grid, res.slab[t + 1]), xn[ok],
                                              np.clip(vn[ok], -grid.v_max, grid.v_max))
        a = int(np.argmin(q))
        controls[t] = w[a]
        x, v = xn[a], np.clip(vn[a], -grid.v_max, grid.v_max)
    curve = Curve.from_controls(x0, v0, controls, h)
    cost = evaluate_cost(curve, F) if isinstance(F, CostField) else None
    return HorizonResult(curve, float(value), controls, cost)


# --- surgery ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PeriodicResult:
    curve: Curve
    tau: float
    connectors: int
    added_cost: float
    C3: float
    R0: float


def _last_slow_time(curve: Curve, limit: float, samples: int = 64) -> float:
    t_end = 0.0
    t = 0.0
    for seg in curve.segments:
        s = np.linspace(0.0, seg.tau, samples + 1)
        _, v, _ = seg.at(s)
        slow = np.linalg.norm(v, axis=1) <= limit
        idx = np.flatnonzero(slow)
        if idx.size:
            k = idx[-1]
            if k == samples:
                t_end = t + seg.tau
            else:
                lo, hi = s[k], s[k + 1]
                for _ in range(50):
                    mid = 0.5 * (lo + hi)
                    if np.linalg.norm(seg.at(mid)[1]) <= limit:
                        lo = mid
                    else:
                        hi = mid
                t_end = t + lo
        t += seg.tau
    return t_end


def _winding_connector(x0, v0, x1, v1, theta):
    target = 0.5 * theta * (np.asarray(v0) + np.asarray(v1))
    return connect_cubic(x0, v0, x1, v1, theta, torus_displacement(x0, x1, target))


def make_periodic(curve: Curve, F: CostField, lambda_cut: float = 2.0,
                  R0: float | None = None) -> PeriodicResult:
    """Close ``curve`` so it ends at its own initial state.

    The curve is kept on ``[0, tau]`` and completed by one cubic connector
    (``tau >= T - 2``) or two (a unit-time connector back to the start state,
    then a loop).  Connectors use the displacement representative nearest
    the mean-velocity drift, which makes already closed motions cost nothing.
    ``C3`` is the added cost divided by ``lambda^2 R0^2 + R0^a lambda^-a T``.
    """
    T = curve.duration
    if T < 2:
        raise ValueError("make_periodic needs a horizon T >= 2")
    if lambda_cut < 2:
        raise ValueError("lambda_cut must be >= 2")
    x0, v0 = curve.x0, curve.v0
    alpha = F.alpha
    if R0 is None:
        R0 = max(float(np.linalg.norm(v0)), F.c_F ** (2.0 / alpha))
    limit = lambda_cut * R0
    _, v_late, _ = curve.state(curve.t0 + T - 1.0)
    tau = _last_slow_time(curve, limit) if np.linalg.norm(v_late) > limit else T - 1.0
    head = curve.truncated(curve.t0 + tau) if tau > 0 else None
    if head is None:
        xs, vs = x0, v0
    else:
        xs, vs = head.end_state()
    if tau >= T - 2:
        tail = _winding_connector(xs, vs, x0, v0, T - tau)
        pieces = 1
    else:
        first = _winding_connector(xs, vs, x0, v0, 1.0)
        tail = Curve(first.segments + _winding_connector(x0, v0, x0, v0, T - tau - 1.0).segments)
        pieces = 2
    closed = Curve(tail.segments if head is None else head.segments + tail.segments, curve.t0)
    added = evaluate_cost(closed, F) - evaluate_cost(curve, F)
    scale = lambda_cut**2 * R0**2 + R0**alpha * lambda_cut ** (-alpha) * T
    return PeriodicResult(closed, float(tau), pieces, float(added), float(added / scale), float(R0))


# --- occupation measures ---------------------------------------------------------

def occupation_measure(curve: Curve, grid: PhaseGrid, samples_per_step: int = 1) -> ControlMeasure:
    """Time average of ``(gamma, gamma', gamma'')`` deposited on the grid.

    Samples sit at the left ends of ``n`` equal sub-intervals, with ``n`` the
    number of grid steps in the curve (rounded up) times ``samples_per_step``.
    States split multilinearly onto ``(x, v)`` nodes and accelerations onto
    control nodes (clamped to the control box).
    """
    n = max(1, math.ceil(curve.duration / grid.h - 1e-9)) * samples_per_step
    times = curve.t0 + curve.duration * np.arange(n) / n
    pts = [curve.state(t) for t in times]
    x = np.array([p[0] for p in pts])
    v = np.array([p[1] for p in pts])
    w = np.array([p[2] for p in pts])
    if np.any(np.abs(v) > grid.v_max + 1e-9):
        raise ValueError("curve velocity leaves the grid box")
    si, sw = grid.stencil(x, v)
    ci, cw = grid.control_stencil(w)
    mass = (sw[:, :, None] * cw[:, None, :]) / n
    flat = si[:, :, None] * grid.n_controls + ci[:, None, :]
    weights = np.bincount(flat.ravel(), weights=mass.ravel(),
                          minlength=grid.n_states * grid.n_controls)
    weights = weights.reshape(grid.n_states, grid.n_controls)
    return ControlMeasure(grid, weights / weights.sum())

