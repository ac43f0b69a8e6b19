"""Running costs, mean-field couplings, terminal costs and sample-based assumption checks.

A :class:`CostField` is a vectorized map ``F(x, v)`` with the growth
metadata ``alpha, c_F, C_F``.  A :class:`MeanFieldCoupling` adds a congestion
term ``c * (K * rho_m)(x)`` where ``rho_m`` is the position marginal of ``m``
and ``K`` is an even trigonometric kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .core import GridMeasure, PhaseGrid

Func = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _as_points(x, v, d: int) -> tuple[np.ndarray, np.ndarray]:
    return (np.asarray(x, dtype=float).reshape(-1, d), np.asarray(v, dtype=float).reshape(-1, d))


@dataclass(frozen=True)
class CostField:
    """Running cost ``F(x, v) >= 0`` with growth constants.

    ``func`` takes arrays ``x, v`` of shape ``(M, d)`` and returns ``(M,)``.
    """

    func: Func
    d: int = 1
    alpha: float = 2.0
    c_F: float = 1.0
    C_F: float = 0.0
    name: str = "custom"

    def __post_init__(self) -> None:
        if not 1.0 < self.alpha <= 2.0:
            raise ValueError("alpha must lie in (1, 2]")
        if self.c_F < 1.0:
            raise ValueError("c_F must be >= 1")
        if self.C_F < 0.0:
            raise ValueError("C_F must be >= 0")

    def __call__(self, x, v) -> np.ndarray:
        x, v = _as_points(x, v, self.d)
        return np.asarray(self.func(x, v), dtype=float).reshape(-1)

    def on_grid(self, grid: PhaseGrid) -> np.ndarray:
        if grid.d != self.d:
            raise ValueError(f"cost is {self.d}-dimensional, grid is {grid.d}-dimensional")
        x, v = grid.states
        return self(x, v)

    def shifted(self, c: float) -> CostField:
        """``F + c`` with ``c_F`` raised by ``c``."""
        if c < 0:
            raise ValueError("shift must be nonnegative")
        base = self.func
        return replace(self, func=lambda x, v: base(x, v) + c, c_F=self.c_F + c,
                       name=f"{self.name}+{c:g}")


def truncate(F: CostField, R: float) -> CostField:
    """``F_R = min(F, R)``."""
    if not R > 0:
        raise ValueError("R must be positive")
    base = F.func
    return replace(F, func=lambda x, v: np.minimum(base(x, v), R), name=f"{F.name}|R={R:g}")


# --- library ---------------------------------------------------------------------

def _speed2(v: np.ndarray) -> np.ndarray:
    return np.sum(v * v, axis=1)


def quad(d: int = 1) -> CostField:
    return CostField(lambda x, v: _speed2(v), d=d, alpha=2.0, c_F=1.0, C_F=1.0, name="quad")


def quad_shift(c: float = 1.0, d: int = 1) -> CostField:
    return CostField(lambda x, v: _speed2(v) + c, d=d, alpha=2.0, c_F=1.0 + c, C_F=1.0,
                     name="quad_shift")


def well(d: int = 1) -> CostField:
    """``|v|^2 + 1 + cos(2 pi x_1)``; zero exactly at rest on ``x_1 = 1/2``."""
    return CostField(lambda x, v: _speed2(v) + 1.0 + np.cos(2.0 * np.pi * x[:, 0]), d=d,
                     alpha=2.0, c_F=2.0, C_F=2.0 * np.pi + 1.0, name="well")


def travel(d: int = 1) -> CostField:
    """``|v - e_1|^2``; zero along the orbit moving at unit speed in ``x_1``."""
    def func(x, v):
        shift = np.zeros(d)
        shift[0] = 1.0
        return _speed2(v - shift)
    return CostField(func, d=d, alpha=2.0, c_F=3.0, C_F=3.0, name="travel")


_REGISTRY: dict[str, Callable[..., CostField]] = {
    "quad": quad, "quad_shift": quad_shift, "well": well, "travel": travel,
}


def register_field(name: str, factory: Callable[..., CostField]) -> None:
    """Make a custom field available to configs under ``name``."""
    if name in _REGISTRY:
        raise ValueError(f"cost field {name!r} already registered")
    _REGISTRY[name] = factory


def field_names() -> list[str]:
    return sorted(_REGISTRY)


def make_field(name: str, **params) -> CostField:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown cost field {name!r}; known: {field_names()}") from None
    return factory(**params)


# --- mean-field coupling ---------------------------------------------------------

@dataclass(frozen=True)
class TrigKernel:
    """Even kernel ``K(x) = sum_k a_k cos(2 pi k.x)`` over integer wave vectors ``k``."""

    modes: tuple[tuple[int, ...], ...]
    amplitudes: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.modes) != len(self.amplitudes) or not self.modes:
            raise ValueError("need one amplitude per mode")
        dims = {len(k) for k in self.modes}
        if len(dims) != 1:
            raise ValueError("modes must share a dimension")

    @property
    def d(self) -> int:
        return len(self.modes[0])

    @property
    def k_max(self) -> int:
        return max(max(abs(c) for c in k) for k in self.modes)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.d)
        out = np.zeros(x.shape[0])
        for k, a in zip(self.modes, self.amplitudes):
            out += a * np.cos(2.0 * np.pi * (x @ np.asarray(k, dtype=float)))
        return out

    def is_positive(self) -> bool:
        return all(a > 0 for a in self.amplitudes)

    def matrix(self, grid: PhaseGrid) -> np.ndarray:
        """``K(x_i - x_j)`` over position nodes (symmetric)."""
        xs = np.stack(np.meshgrid(*([grid.x_axis] * grid.d), indexing="ij"), -1).reshape(-1, grid.d)
        diff = xs[:, None, :] - xs[None, :, :]
        return self(diff.reshape(-1, grid.d)).reshape(xs.shape[0], xs.shape[0])


@dataclass(frozen=True)
class MeanFieldCoupling:
    """``F(x, v, m) = f0(x, v) + strength * (K * rho_m)(x)``."""

    base: CostField
    kernel: TrigKernel
    strength: float = 1.0
    name: str = "coupling"

    def __post_init__(self) -> None:
        if self.strength < 0:
            raise ValueError("strength must be nonnegative")
        if self.kernel.d != self.base.d:
            raise ValueError("kernel and base field dimensions differ")

    @property
    def d(self) -> int:
        return self.base.d

    @property
    def c_F(self) -> float:
        bound = sum(abs(a) for a in self.kernel.amplitudes)
        return self.base.c_F + self.strength * bound

    @property
    def alpha(self) -> float:
        return self.base.alpha

    def convolution(self, grid: PhaseGrid, m: GridMeasure) -> np.ndarray:
        """``(K * rho_m)`` on position nodes."""
        return self.kernel.matrix(grid) @ m.x_marginal()

    def on_grid(self, grid: PhaseGrid, m: GridMeasure | None = None) -> np.ndarray:
        f0 = self.base.on_grid(grid)
        if m is None:
            return f0
        conv = self.strength * self.convolution(grid, m)
        return f0 + np.repeat(conv, grid.n_v**grid.d)

    def __call__(self, x, v, m: GridMeasure) -> np.ndarray:
        grid = m.grid
        x, v = _as_points(x, v, self.d)
        xs, _ = grid.states
        rho = m.x_marginal()
        pos = xs[:: grid.n_v**grid.d]
        conv = np.array([np.dot(rho, self.kernel(xi - pos)) for xi in x])
        return self.base(x, v) + self.strength * conv

    def frozen(self, m: GridMeasure) -> CostField:
        """The static field ``F(., ., m)``."""
        return replace(self.base, func=lambda x, v: self(x, v, m), c_F=self.c_F,
                       name=f"{self.name}@m")


def congestion(strength: float = 1.0, d: int = 1, amplitudes=(2.0, 2.0)) -> MeanFieldCoupling:
    """``well + strength * (K * rho)`` with ``K = a_0 + a_1 cos(2 pi x_1)``.

    ``a_0 >= a_1`` keeps ``K >= 0``.  For ``strength * a_1 > 1`` the population
    spreads until the position part of ``F`` is flat at rest.
    """
    zero = (0,) * d
    one = (1,) + (0,) * (d - 1)
    kernel = TrigKernel((zero, one), tuple(float(a) for a in amplitudes))
    return MeanFieldCoupling(well(d), kernel, strength, name="congestion")


# --- terminal costs --------------------------------------------------------------

@dataclass(frozen=True)
class TerminalCost:
    """Bounded terminal cost ``g(x, v, m) = g0(x, v) + strength * (K * rho_m)(x)``.

    ``g0`` defaults to zero; ``kernel=None`` makes ``g`` independent of ``m``.
    """

    base: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    kernel: TrigKernel | None = None
    strength: float = 0.0
    bound: float = 0.0

    @property
    def lip_m(self) -> float:
        if self.kernel is None:
            return 0.0
        grad = sum(abs(a) * 2 * math.pi * math.sqrt(sum(c * c for c in k))
                   for k, a in zip(self.kernel.modes, self.kernel.amplitudes))
        return abs(self.strength) * grad

    def on_grid(self, grid: PhaseGrid, m: GridMeasure | None = None) -> np.ndarray:
        x, v = grid.states
        out = np.zeros(grid.n_states) if self.base is None else np.asarray(self.base(x, v), float)
        if self.kernel is not None and m is not None:
            conv = self.kernel.matrix(grid) @ m.x_marginal()
            out = out + self.strength * np.repeat(conv, grid.n_v**grid.d)
        return out


ZERO_TERMINAL = TerminalCost()


def check_terminal_lipschitz(g: TerminalCost, grid: PhaseGrid, pair_count: int = 20,
                             seed: int = 0) -> dict:
    """Largest observed ``sup|g(m1) - g(m2)| / d1(m1, m2)`` against ``lip_m``."""
    from .core import wasserstein1

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pair_count):
        m1, m2 = (_random_measure(grid, rng) for _ in range(2))
        dist = wasserstein1(m1, m2)
        if dist > 0:
            diff = np.max(np.abs(g.on_grid(grid, m1) - g.on_grid(grid, m2)))
            worst = max(worst, diff / dist)
    return {"pass": worst <= g.lip_m + 1e-9, "measured_lip": worst, "lip_m": g.lip_m}


# --- assumption checks -----------------------------------------------------------

def _sample(d: int, n: int, radius: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    pts = qmc.Sobol(2 * d, scramble=True, seed=seed).random(n)
    return pts[:, :d], (2.0 * pts[:, d:] - 1.0) * radius


def check_growth(F: CostField, sample_count: int = 1024, radius: float = 4.0,
                 seed: int = 0) -> dict:
    """Check ``F >= 0`` and ``|v|^a / c_F - c_F <= F <= c_F (1 + |v|^a)`` on a Sobol sample.

    ``worst_ratio`` is the largest violation scaled by ``1 + |v|^alpha``;
    the check passes when it is nonpositive.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    x, v = _sample(F.d, sample_count, radius, seed)
    val = F(x, v)
    p = np.linalg.norm(v, axis=1) ** F.alpha
    viol = np.stack([p / F.c_F - F.c_F - val, val - F.c_F * (1.0 + p), -val]) / (1.0 + p)
    worst = viol.max(axis=0)
    i = int(np.argmax(worst))
    return {"pass": bool(worst[i] <= 1e-12), "worst_ratio": float(worst[i]),
            "witness": {"x": x[i].tolist(), "v": v[i].tolist(), "F": float(val[i])}}


def check_derivative_growth(F: CostField, sample_count: int = 1024, radius: float = 4.0,
                            seed: int = 0, step: float = 1e-6) -> dict:
    """Finite-difference check of ``|D_x F| + |D_v F| <= C_F (1 + |v|^alpha)``."""
    x, v = _sample(F.d, sample_count, radius, seed)
    gx = np.zeros_like(x)
    gv = np.zeros_like(v)
    for i in range(F.d):
        e = np.zeros(F.d)
        e[i] = step
        gx[:, i] = (F(x + e, v) - F(x - e, v)) / (2 * step)
        gv[:, i] = (F(x, v + e) - F(x, v - e)) / (2 * step)
    lhs = np.linalg.norm(gx, axis=1) + np.linalg.norm(gv, axis=1)
    ratio = lhs / (1.0 + np.linalg.norm(v, axis=1) ** F.alpha)
    i = int(np.argmax(ratio))
    return {"pass": bool(ratio[i] <= F.C_F * (1 + 1e-6) + 1e-9), "worst_ratio": float(ratio[i]),
            "witness": {"x": x[i].tolist(), "v": v[i].tolist()}}


def _random_measure(grid: PhaseGrid, rng: np.random.Generator) -> GridMeasure:
    w = rng.dirichlet(np.full(grid.n_states, 0.3))
    return GridMeasure(grid, w / w.sum())


def monotonicity_sides(coupling: MeanFieldCoupling, m1: GridMeasure, m2: GridMeasure
                       ) -> tuple[float, float]:
    """Both sides of the monotonicity inequality for one pair.

    Returns ``(int dF d(m1 - m2), int_T dF(x)^2 dx)``.  ``dF`` does not depend on
    ``v``, so the square is integrated over positions only; the integral is
    exact because ``dF`` is a trigonometric polynomial sampled on enough points.
    """
    grid = m1.grid
    drho = m1.x_marginal() - m2.x_marginal()
    lhs = coupling.strength * float(drho @ coupling.kernel.matrix(grid) @ drho)
    n = 4 * coupling.kernel.k_max + 4
    q = np.stack(np.meshgrid(*([np.arange(n) / n] * grid.d), indexing="ij"), -1).reshape(-1, grid.d)
    xs = np.stack(np.meshgrid(*([grid.x_axis] * grid.d), indexing="ij"), -1).reshape(-1, grid.d)
    dF = coupling.strength * (coupling.kernel((q[:, None, :] - xs[None, :, :]).reshape(-1, grid.d))
                              .reshape(q.shape[0], xs.shape[0]) @ drho)
    return lhs, float(np.mean(dF * dF))


def check_monotonicity(coupling: MeanFieldCoupling, grid: PhaseGrid, pair_count: int = 100,
                       seed: int = 0) -> dict:
    """Smallest observed ratio ``LHS / int (dF)^2`` over random pairs.

    Pairs are Dirichlet-random measures plus pairs of atoms at distinct
    positions.  ``measured_M_F`` is ``+inf`` when every pair has ``dF = 0``.
    """
    if pair_count < 1:
        raise ValueError("pair_count must be >= 1")
    rng = np.random.default_rng(seed)
    x, v = grid.states
    rest = np.flatnonzero(np.all(v == 0, axis=1))
    pairs = []
    for k in range(pair_count):
        if k % 2 == 0:
            pairs.append((_random_measure(grid, rng), _random_measure(grid, rng)))
        else:
            i, j = rng.choice(rest, size=2, replace=False)
            a, b = np.zeros(grid.n_states), np.zeros(grid.n_states)
            a[i] = b[j] = 1.0
            pairs.append((GridMeasure(grid, a), GridMeasure(grid, b)))
    ratio, worst_lhs = math.inf, math.inf
    for m1, m2 in pairs:
        lhs, rhs = monotonicity_sides(coupling, m1, m2)
        worst_lhs = min(worst_lhs, lhs)
        if rhs > 1e-300:
            ratio = min(ratio, lhs / rhs)
    passed = worst_lhs >= -1e-12 and ratio > 0
    return {"pass": bool(passed), "measured_M_F": ratio, "pairs": len(pairs)}


def interpolation_ratio(values: np.ndarray, grid: PhaseGrid, alpha: float, c0: float) -> float:
    """``sup |f|^(2d+2) / (1+|v|^a)^(2d)`` divided by ``c0^(2d) int |f|^2`` on the grid."""
    d = grid.d
    _, v = grid.states
    weight = (1.0 + np.linalg.norm(v, axis=1) ** alpha) ** (2 * d)
    sup = np.max(np.abs(values) ** (2 * d + 2) / weight)
    integral = np.sum(values * values) * (grid.dx * grid.dv) ** d
    return float(sup / (c0 ** (2 * d) * integral))
