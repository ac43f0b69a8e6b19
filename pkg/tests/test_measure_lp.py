import numpy as np
import pytest
import scipy.sparse as sp
from scipy.optimize import linprog

from accel_ergodic.core import (ControlMeasure, FlowMeasure, GridMeasure, PhaseGrid,
                                second_moment)
from accel_ergodic.costs import CostField, congestion, quad, quad_shift, travel, well
from accel_ergodic.hjb import solve_finite_horizon
from accel_ergodic.measure_lp import (build_ergodic_lp, build_finite_horizon_lp,
                                      closedness_residual, concat_flows, export_ergodic_lp,
                                      link_measures, pdhg, solve_ergodic, solve_finite_horizon_lp)
from accel_ergodic.trajectory import connect_cubic, evaluate_cost

ZERO = CostField(lambda x, v: np.zeros(len(x)), name="zero")
DRIFT_WELL = CostField(lambda x, v: (v[:, 0] - 0.3) ** 2 + 1 + np.cos(2 * np.pi * x[:, 0]),
                       c_F=3.0, C_F=8.0, name="drift_well")


def _dual_feasible(sol, F, grid, tol=1e-9):
    """``lambda h + phi(s) <= h L(s, a) + (P phi)(s, a)`` on every admissible pair."""
    chain = grid.chain
    L = chain.kinetic[None, :] + F.on_grid(grid)[:, None]
    rhs = grid.h * L + chain.expect(sol.phi.values)
    lhs = sol.lambda_dual * grid.h + sol.phi.values[:, None]
    return bool(np.all((lhs <= rhs + tol) | ~chain.admissible))


def _read_mps(text):
    """Tiny free-MPS reader for ``min c.x, Ax = b``."""
    section, rows, cols, entries, rhs, cost = None, {}, {}, [], {}, {}
    for line in text.splitlines():
        if not line.startswith(" "):
            section = line.split()[0]
            continue
        parts = line.split()
        if section == "ROWS":
            if parts[0] == "E":
                rows[parts[1]] = len(rows)
        elif section == "COLUMNS":
            j = cols.setdefault(parts[0], len(cols))
            if parts[1] == "COST":
                cost[j] = float(parts[2])
            else:
                entries.append((rows[parts[1]], j, float(parts[2])))
        elif section == "RHS":
            rhs[rows[parts[1]]] = float(parts[2])
    r, c, v = zip(*entries)
    A = sp.csr_matrix((v, (r, c)), shape=(len(rows), len(cols)))
    cvec = np.zeros(len(cols))
    for j, x in cost.items():
        cvec[j] = x
    b = np.zeros(len(rows))
    for i, x in rhs.items():
        b[i] = x
    return cvec, A, b


class TestErgodicExamples:
    @pytest.mark.parametrize("c", [0.0, 0.5, 1.0, 2.25])
    def test_shifted_quad(self, desk, c):
        sol = solve_ergodic(quad_shift(c), desk)
        assert sol.lambda_ == c
        _, v = desk.states
        s, a = np.nonzero(sol.mu.weights)
        assert np.all(v[s] == 0) and np.all(a == desk.rest_control)

    def test_well(self, desk):
        sol = solve_ergodic(well(), desk)
        assert sol.lambda_ == 0.0
        s, a = np.nonzero(sol.mu.weights)
        x, v = desk.states
        assert np.all(x[s] == 0.5) and np.all(v[s] == 0) and np.all(a == desk.rest_control)

    def test_travel_orbit(self, desk):
        sol = solve_ergodic(travel(), desk)
        assert sol.lambda_ == 0.0
        _, v = desk.states
        s, a = np.nonzero(sol.mu.weights)
        assert np.all(v[s] == 1.0) and np.all(a == desk.rest_control)

    @pytest.mark.parametrize("F", [quad(), well(), travel(), DRIFT_WELL])
    def test_strong_duality_and_certificate(self, desk, F):
        sol = solve_ergodic(F, desk)
        assert sol.relative_gap <= 1e-6
        assert sol.lambda_dual <= sol.lambda_ + 1e-12
        assert sol.residual <= 1e-9
        assert sol.phi.values.min() == 0.0
        assert _dual_feasible(sol, F, desk)

    def test_value_within_cost_range(self, desk):
        sol = solve_ergodic(DRIFT_WELL, desk)
        rest_costs = DRIFT_WELL.on_grid(desk)[np.flatnonzero(desk.states[1][:, 0] == 0)]
        assert 0.0 <= sol.lambda_ <= rest_costs.min() + 1e-12

    @pytest.mark.parametrize("F", [well(), travel(), DRIFT_WELL])
    def test_shift_exactness(self, desk, F):
        a = solve_ergodic(F, desk).lambda_
        b = solve_ergodic(F.shifted(0.7), desk).lambda_
        assert b - a == pytest.approx(0.7, abs=1e-9)


class TestDualRoutes:
    @pytest.mark.parametrize("F", [DRIFT_WELL, quad_shift(0.3)])
    def test_first_order_matches_simplex(self, desk, F):
        a = solve_ergodic(F, desk, method="simplex")
        b = solve_ergodic(F, desk, method="pdhg", pdhg_iterations=2000)
        assert b.method == "pdhg+polish"
        assert b.lambda_ == pytest.approx(a.lambda_, abs=1e-9)
        assert b.relative_gap <= 1e-6
        assert _dual_feasible(b, F, desk)

    def test_raw_pdhg_small_lp(self):
        rng = np.random.default_rng(4)
        A = sp.csr_matrix(rng.random((6, 14)))
        x0 = rng.random(14)
        b = A @ x0
        c = rng.random(14) + 0.1
        ref = linprog(c, A_eq=A, b_eq=b, bounds=(0, None), method="highs")
        res = pdhg(c, A, b, max_iter=200_000, tol=1e-9)
        assert res.primal == pytest.approx(ref.fun, rel=1e-5)
        assert res.feasibility <= 1e-6

    def test_unknown_method(self, desk):
        with pytest.raises(ValueError):
            solve_ergodic(quad(), desk, method="interior")


class TestClosedness:
    def test_rest_atom(self, desk):
        assert closedness_residual(ControlMeasure.rest(desk, 0.25)) == 0.0

    def test_moving_atom_by_hand(self, desk):
        # v = 0.875 moves x by 0.109375 = 3.5 cells: half the mass to each neighbor
        mu = ControlMeasure.rest(desk, 0.25, [0.875])
        src = desk.node_index(0.25, 0.875)
        hand = np.zeros(desk.n_states)
        hand[src] -= 1.0
        hand[desk.node_index(0.25 + 3 / 32, 0.875)] += 0.5
        hand[desk.node_index(0.25 + 4 / 32, 0.875)] += 0.5
        got = desk.chain.push(mu.weights) - mu.weights.sum(axis=1)
        np.testing.assert_allclose(got, hand, atol=1e-15)
        assert closedness_residual(mu) == pytest.approx(1.0, abs=1e-15)

    def test_unit_speed_atom(self, desk):
        assert closedness_residual(ControlMeasure.rest(desk, 0.25, [1.0])) == 1.0

    def test_orbit_measure(self, desk):
        w = np.zeros((desk.n_states, desk.n_controls))
        for k in range(desk.n_x):
            w[desk.node_index(k / desk.n_x, 1.0), desk.rest_control] = 1.0 / desk.n_x
        assert closedness_residual(ControlMeasure(desk, w)) <= 1e-15


class TestFiniteHorizonLP:
    def test_zero_cost(self, desk):
        m0 = GridMeasure.dirac(desk, 0.25, 0.0)
        assert solve_finite_horizon_lp(ZERO, m0, 1.0, desk).value == pytest.approx(0.0, abs=1e-12)

    def test_rest_cost(self, desk):
        m0 = GridMeasure.dirac(desk, 0.25, 0.0)
        r = solve_finite_horizon_lp(quad_shift(0.4), m0, 2.0, desk)
        assert r.value == pytest.approx(0.8, abs=1e-10)

    def test_matches_dynamic_programming(self, desk):
        m0 = GridMeasure.dirac(desk, 0.0, 0.0)
        lp = solve_finite_horizon_lp(well(), m0, 8.0, desk)
        dp = solve_finite_horizon(well(), desk, 8.0).value.values @ m0.weights
        assert lp.value == pytest.approx(dp, rel=1e-8)

    def test_matches_dp_with_terminal_and_spread_start(self, desk, rng):
        m0 = GridMeasure(desk, rng.dirichlet(np.ones(desk.n_states)))
        g = rng.random(desk.n_states)
        lp = solve_finite_horizon_lp(DRIFT_WELL, m0, 2.0, desk, terminal=g)
        dp = solve_finite_horizon(DRIFT_WELL, desk, 2.0, terminal=g).value.values @ m0.weights
        assert lp.value == pytest.approx(dp, rel=1e-8)

    def test_flow_is_feasible(self, desk):
        m0 = GridMeasure.dirac(desk, 0.0, 0.0)
        r = solve_finite_horizon_lp(well(), m0, 2.0, desk)
        np.testing.assert_allclose(r.flow.steps[0].marginal().weights, m0.weights, atol=1e-9)
        for a, b in zip(r.flow.steps, r.flow.steps[1:]):
            np.testing.assert_allclose(desk.chain.push(a.weights), b.marginal().weights,
                                       atol=1e-9)

    def test_concatenation_is_feasible_and_no_better(self, desk):
        m0 = GridMeasure.dirac(desk, 0.0, 0.0)
        first = solve_finite_horizon_lp(well(), m0, 4.0, desk)
        second = solve_finite_horizon_lp(well(), first.flow.terminal, 4.0, desk)
        joined = concat_flows(first.flow, second.flow, tol=1e-8)
        assert len(joined.steps) == 64
        c, A, b, n = build_finite_horizon_lp(well(), m0, 8.0, desk)
        s, a = desk.chain.pairs
        x = np.concatenate([st.weights[s, a] for st in joined.steps] + [joined.terminal.weights])
        assert np.max(np.abs(A @ x - b)) <= 1e-8
        full = solve_finite_horizon_lp(well(), m0, 8.0, desk)
        assert joined.cost(well().on_grid(desk)) >= full.value - 1e-9

    def test_concat_identity_and_mismatch(self, desk):
        m = GridMeasure.dirac(desk, 0.25, 0.0)
        one = FlowMeasure((ControlMeasure.rest(desk, 0.25),), desk.h, m)
        assert concat_flows(one, None) is one
        assert len(concat_flows(one, one).steps) == 2
        other = FlowMeasure((ControlMeasure.rest(desk, 0.5),), desk.h,
                            GridMeasure.dirac(desk, 0.5, 0.0))
        with pytest.raises(ValueError):
            concat_flows(one, other)


class TestLink:
    def test_rest_link(self, desk):
        m = GridMeasure.dirac(desk, 0.25, 0.0)
        r = link_measures(m, m, quad_shift(0.5))
        assert r.cost == pytest.approx(0.5, abs=1e-14)

    def test_single_connector(self, desk):
        m1, m2 = GridMeasure.dirac(desk, 0.0, 0.0), GridMeasure.dirac(desk, 0.5, 0.0)
        r = link_measures(m1, m2, quad())
        oracle = evaluate_cost(connect_cubic(0.0, 0.0, 0.5, 0.0, 1.0), quad())
        assert r.cost == pytest.approx(oracle, abs=1e-14)
        assert r.cost == pytest.approx(1.8, abs=1e-12)
        np.testing.assert_allclose(r.flow.steps[0].marginal().weights, m1.weights, atol=1e-6)
        np.testing.assert_allclose(r.flow.terminal.weights, m2.weights, atol=1e-6)

    def test_product_plan_linearity(self, desk):
        m1 = GridMeasure.dirac(desk, 0.0, 0.0)
        m2 = GridMeasure.from_points(desk, [[0.0], [0.5]], [[0.0], [0.0]])
        r = link_measures(m1, m2, quad())
        stay = evaluate_cost(connect_cubic(0.0, 0.0, 0.0, 0.0, 1.0), quad())
        move = evaluate_cost(connect_cubic(0.0, 0.0, 0.5, 0.0, 1.0), quad())
        assert r.cost == pytest.approx(0.5 * stay + 0.5 * move, abs=1e-14)
        assert r.C2 == pytest.approx(r.cost / (1 + second_moment(m1) + second_moment(m2)))


class TestExport:
    def test_mps_round_trip(self, tmp_path):
        grid = PhaseGrid(n_x=8, v_max=1.0, n_v=5, w_max=2.0, n_w=5, h=0.25)
        path = tmp_path / "lp.mps"
        lp = export_ergodic_lp(DRIFT_WELL, grid, path)
        c, A, b = _read_mps(path.read_text())
        np.testing.assert_allclose(c, lp.cost, rtol=0, atol=0)
        assert abs(A - lp.A_eq).max() == 0.0
        np.testing.assert_array_equal(b, lp.b_eq)
        ref = linprog(c, A_eq=A, b_eq=b, bounds=(0, None), method="highs")
        assert ref.fun == pytest.approx(solve_ergodic(DRIFT_WELL, grid).lambda_, abs=1e-9)

    def test_lp_rows(self, desk):
        lp = build_ergodic_lp(congestion().base, desk)
        assert lp.A_eq.shape == (desk.n_states + 1, 16672)
        np.testing.assert_allclose(np.asarray(lp.A_eq[:-1].sum(axis=0)).ravel(), 0.0, atol=1e-12)
