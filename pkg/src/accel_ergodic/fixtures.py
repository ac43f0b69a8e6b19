"""Closed-form fixtures run by ``accel-ergodic selftest``.

Each check returns ``True`` when the library reproduces a value that is forced
by the structure of the problem (rest costs nothing, constant fields, exact
stationarity of grid orbits).
"""

from __future__ import annotations

import numpy as np

from .core import (ControlMeasure, FlowMeasure, GridMeasure, PhaseGrid, ValueField, boundary_mass,
                   interpolate, wasserstein1)
from .costs import (CostField, check_growth, congestion, monotonicity_sides, quad, quad_shift,
                    travel, truncate, well)
from .hjb import solve_discounted, solve_finite_horizon, tauberian_gap
from .measure_lp import (closedness_residual, concat_flows, solve_ergodic,
                         solve_finite_horizon_lp)
from .mfg import solve_ergodic_mfg
from .trajectory import (Curve, cubic_coefficients, evaluate_cost, make_periodic, minimize_horizon,
                         occupation_measure)

GRID = PhaseGrid()


def _interp_constant():
    f = ValueField(GRID, np.full(GRID.n_states, 3.0))
    return abs(interpolate(f, 0.37, 0.41) - 3.0) < 1e-14


def _interp_linear():
    _, v = GRID.states
    f = ValueField(GRID, v[:, 0].copy())
    a, b = GRID.v_axis[20], GRID.v_axis[21]
    return abs(interpolate(f, 0.25, 0.5 * (a + b)) - 0.5 * (a + b)) < 1e-14


def _w1_identity():
    m = GridMeasure.uniform(GRID)
    return wasserstein1(m, m) < 1e-12


def _w1_antipodal():
    return abs(wasserstein1(GridMeasure.dirac(GRID, 0.0, 0.0),
                            GridMeasure.dirac(GRID, 0.5, 0.0)) - 0.5) < 1e-12


def _closedness_rest_atom():
    return closedness_residual(ControlMeasure.rest(GRID, 0.25)) == 0.0


def _closedness_moving_atom():
    return abs(closedness_residual(ControlMeasure.rest(GRID, 0.25, [1.0])) - 1.0) < 1e-12


def _growth_pass():
    return check_growth(quad())["pass"]


def _growth_fail():
    neg = CostField(lambda x, v: -np.ones(len(x)), name="negative")
    report = check_growth(neg)
    return (not report["pass"]) and report["witness"] is not None


def _monotone_zero_coupling():
    cp = congestion(0.0)
    m1, m2 = GridMeasure.uniform(GRID), GridMeasure.dirac(GRID, 0.5, 0.0)
    return monotonicity_sides(cp, m1, m2) == (0.0, 0.0)


def _truncate_checks():
    F = quad()
    ok = np.array_equal(truncate(F, 1e18).on_grid(GRID), F.on_grid(GRID))
    ok &= truncate(F, 1.0)(0.0, 2.0)[0] == 1.0
    return bool(ok and truncate(well(), 2.0)(0.0, 0.0)[0] == 2.0)


def _cubic_zero():
    B, C = cubic_coefficients(0.0, 0.0, 0.0, 0.0, 1.0)
    return np.all(B == 0) and np.all(C == 0)


def _cubic_loop():
    B, C = cubic_coefficients(0.0, 1.0, 0.0, 1.0, 1.0)
    return B[0] == -3.0 and C[0] == 2.0


def _rest_cost():
    rest = Curve.from_controls(0.3, 0.0, np.zeros((16, 1)), 0.125)
    moving = Curve.from_controls(0.3, 1.0, np.zeros((16, 1)), 0.125)
    return evaluate_cost(rest, quad()) == 0.0 and abs(evaluate_cost(moving, quad()) - 2.0) < 1e-12


def _horizon_rest():
    r0 = minimize_horizon(0.25, 0.0, 2.0, quad(), GRID)
    r1 = minimize_horizon(0.25, 0.0, 2.0, quad_shift(1.5), GRID)
    return (r0.value == 0.0 and not np.any(r0.controls) and abs(r1.value - 3.0) < 1e-12
            and not np.any(r1.controls))


def _periodic_rest():
    rest = Curve.from_controls(0.25, 0.0, np.zeros((24, 1)), 0.125)
    return make_periodic(rest, quad()).added_cost == 0.0


def _periodic_line():
    line = Curve.from_controls(0.0, 1.0, np.zeros((24, 1)), 0.125)
    res = make_periodic(line, travel())
    x1, v1 = res.curve.end_state()
    closes = abs(((x1[0] + 0.5) % 1.0) - 0.5) < 1e-12 and abs(v1[0] - 1.0) < 1e-12
    return closes and abs(res.added_cost) < 1e-12


def _occupation_rest():
    mu = occupation_measure(Curve.from_controls(0.25, 0.0, np.zeros((8, 1)), 0.125), GRID)
    return mu.weights[GRID.node_index(0.25, 0.0), GRID.rest_control] == 1.0


def _occupation_loop():
    mu = occupation_measure(Curve.from_controls(0.0, 1.0, np.zeros((8, 1)), 0.125), GRID)
    marg = mu.marginal().weights
    idx = [GRID.node_index(k / 8, 1.0) for k in range(8)]
    return np.allclose(marg[idx], 1 / 8, atol=1e-14) and np.isclose(mu.weights[:, GRID.rest_control].sum(), 1.0)


def _finite_horizon_values():
    zero = CostField(lambda x, v: np.zeros(len(x)), name="zero")
    v0 = solve_finite_horizon(zero, GRID, 1.0).value.values
    v1 = solve_finite_horizon(quad_shift(0.5), GRID, 2.0).value.at(0.25, 0.0)
    return not np.any(v0) and abs(v1 - 1.0) < 1e-12


def _discounted_values():
    r0 = solve_discounted(quad(), 0.2, GRID)
    r1 = solve_discounted(quad_shift(0.5), 0.2, GRID)
    rest = [GRID.node_index(k / 32, 0.0) for k in range(32)]
    rt = solve_discounted(truncate(quad_shift(1.0), 1.0), 0.2, GRID)
    return (np.all(np.abs(r0.field.values[rest]) < 1e-9)
            and np.all(np.abs(0.2 * r1.field.values[rest] - 0.5) < 1e-9)
            and np.all(np.abs(0.2 * rt.field.values - 1.0) < 1e-9))


def _tauberian_rest():
    probe = [GRID.node_index(0.0, 0.0)]
    return (tauberian_gap(quad_shift(0.5), 8.0, GRID, probe) < 1e-9
            and tauberian_gap(quad(), 8.0, GRID, probe) < 1e-9)


def _lp_values():
    a = solve_ergodic(quad_shift(1.0), GRID)
    b = solve_ergodic(well(), GRID)
    c = solve_ergodic(travel(), GRID)
    _, v = GRID.states
    support_v = v[np.flatnonzero(c.mu.marginal().weights)]
    return (a.lambda_ == 1.0 and b.lambda_ == 0.0 and c.lambda_ == 0.0
            and np.allclose(support_v, 1.0))


def _finite_lp_values():
    m0 = GridMeasure.dirac(GRID, 0.25, 0.0)
    r = solve_finite_horizon_lp(quad_shift(0.5), m0, 1.0, GRID)
    return abs(r.value - 0.5) < 1e-9


def _concat_rest():
    m = GridMeasure.dirac(GRID, 0.25, 0.0)
    step = ControlMeasure.rest(GRID, 0.25)
    one = FlowMeasure((step,), GRID.h, m)
    two = concat_flows(one, one)
    return len(two.steps) == 2 and concat_flows(one, None) is one


def _mfg_zero_coupling():
    sol = solve_ergodic_mfg(congestion(0.0), GRID, damping="fully_corrective")
    return sol.lambda_bar == solve_ergodic(congestion(0.0).base, GRID).lambda_


def _boundary_rest():
    return boundary_mass(GridMeasure.dirac(GRID, 0.0, 0.0)) == 0.0


FIXTURES = [
    ("interpolation of a constant field", _interp_constant),
    ("interpolation of linear data in v", _interp_linear),
    ("d1(m, m) = 0", _w1_identity),
    ("d1 between antipodal rest atoms = 1/2", _w1_antipodal),
    ("closedness of a rest atom = 0", _closedness_rest_atom),
    ("closedness of a moving atom with w=0 = 1", _closedness_moving_atom),
    ("growth check passes for |v|^2", _growth_pass),
    ("growth check fails for F = -1", _growth_fail),
    ("zero coupling gives equal monotonicity sides", _monotone_zero_coupling),
    ("truncation examples", _truncate_checks),
    ("cubic connector with zero displacement", _cubic_zero),
    ("cubic connector closing a unit-speed loop", _cubic_loop),
    ("running cost of rest and unit-speed drift", _rest_cost),
    ("horizon minimizer stays at rest", _horizon_rest),
    ("make_periodic keeps a rest curve", _periodic_rest),
    ("make_periodic keeps a closed straight line", _periodic_line),
    ("occupation measure of a rest curve", _occupation_rest),
    ("occupation measure of a unit-speed loop", _occupation_loop),
    ("finite-horizon values for constant costs", _finite_horizon_values),
    ("discounted values at rest", _discounted_values),
    ("tauberian gap at the rest probe", _tauberian_rest),
    ("ergodic LP on quad_shift, well and travel", _lp_values),
    ("finite-horizon LP at rest", _finite_lp_values),
    ("concatenation of rest flows", _concat_rest),
    ("uncoupled MFG equals the static LP", _mfg_zero_coupling),
    ("rest atom carries no boundary mass", _boundary_rest),
]


def run_fixtures() -> list[tuple[str, bool]]:
    out = []
    for name, check in FIXTURES:
        try:
            ok = bool(check())
        except Exception:  # a crash counts as a failed fixture
            ok = False
        out.append((name, ok))
    return out
