import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from accel_ergodic.core import (ControlMeasure, FlowMeasure, GridMeasure, GridMismatchError,
                                PhaseGrid, ValueField, boundary_mass, default_v_max, dumps,
                                ground_distance, interpolate, second_moment, sup_wasserstein1,
                                w1_bounds, wasserstein1)

SMALL = PhaseGrid(n_x=4, v_max=1.0, n_v=3, w_max=2.0, n_w=3, h=0.25)


def _weights(draw_list, n):
    w = np.asarray(draw_list[:n], dtype=float) + 1e-3
    return w / w.sum()


measures = st.lists(st.floats(0.0, 1.0), min_size=SMALL.n_states, max_size=SMALL.n_states)


class TestGrid:
    def test_desk_sizes(self, desk):
        assert desk.n_states == 32 * 33
        assert desk.n_controls == 17
        assert int(desk.chain.admissible.sum()) == 16672

    def test_round_trip(self, desk):
        assert PhaseGrid.from_dict(json.loads(json.dumps(desk.to_dict()))) == desk

    def test_rest_is_admissible_and_fixed(self, desk):
        chain = desk.chain
        assert chain.admissible[:, desk.rest_control].all()
        x, v = desk.states
        at_rest = np.flatnonzero(v[:, 0] == 0.0)
        s = at_rest[5]
        w = chain.wts[s, desk.rest_control]
        assert chain.idx[s, desk.rest_control][np.argmax(w)] == s and w.max() == 1.0

    def test_chain_rows_are_probabilities(self, desk):
        chain = desk.chain
        ok = chain.admissible
        np.testing.assert_allclose(chain.wts.sum(axis=2)[ok], 1.0, atol=1e-14)
        assert np.all(chain.wts >= 0)

    def test_one_step_of_a_moving_node(self, desk):
        # x' = x + h v + h^2 w / 2, v' = v + h w, landing between nodes
        s = desk.node_index(0.0, 1.0)
        a = desk.control_index([0.5])
        idx, wts = desk.chain.idx[s, a], desk.chain.wts[s, a]
        x, v = desk.states
        xs = np.sum(wts * x[idx][:, 0])
        vs = np.sum(wts * v[idx][:, 0])
        assert math.isclose(xs, 0.125 + 0.5 * 0.125**2 * 0.5, abs_tol=1e-12)
        assert math.isclose(vs, 1.0 + 0.125 * 0.5, abs_tol=1e-12)

    def test_rejects_even_velocity_count(self):
        with pytest.raises(ValueError):
            PhaseGrid(n_v=32)


class TestInterpolate:
    def test_constant(self, desk):
        f = ValueField(desk, np.full(desk.n_states, 3.0))
        assert interpolate(f, 0.731, -1.37) == pytest.approx(3.0, abs=1e-14)

    def test_linear_in_v_midpoint(self, desk):
        _, v = desk.states
        f = ValueField(desk, v[:, 0].copy())
        a, b = desk.v_axis[7], desk.v_axis[8]
        assert interpolate(f, 0.4, 0.5 * (a + b)) == pytest.approx(0.5 * (a + b), abs=1e-14)

    def test_cosine_two_point_oracle(self):
        grid = PhaseGrid(n_x=16)
        x, _ = grid.states
        f = ValueField(grid, np.cos(2 * np.pi * x[:, 0]))
        oracle = 0.5 * (math.cos(0.0) + math.cos(2 * math.pi / 16))
        assert interpolate(f, 1 / 32, 0.0) == pytest.approx(oracle, abs=1e-14)

    def test_exact_at_nodes(self, desk, rng):
        vals = rng.normal(size=desk.n_states)
        f = ValueField(desk, vals)
        x, v = desk.states
        np.testing.assert_allclose(interpolate(f, x, v), vals, atol=1e-13)

    def test_periodic_in_x(self, desk, rng):
        f = ValueField(desk, rng.normal(size=desk.n_states))
        assert interpolate(f, 0.3, 0.2) == pytest.approx(interpolate(f, 1.3, 0.2), abs=1e-13)

    def test_rejects_velocity_outside_box(self, desk):
        f = ValueField(desk, np.zeros(desk.n_states))
        with pytest.raises(ValueError):
            interpolate(f, 0.0, 2.5)


class TestWasserstein:
    def test_identity(self, desk):
        m = GridMeasure.uniform(desk)
        assert wasserstein1(m, m) == 0.0

    def test_antipodal_atoms(self, desk):
        a = GridMeasure.dirac(desk, 0.0, 0.0)
        b = GridMeasure.dirac(desk, 0.5, 0.0)
        assert wasserstein1(a, b) == pytest.approx(0.5, abs=1e-12)

    def test_split_atom_by_plan_enumeration(self, desk):
        a = GridMeasure.dirac(desk, 0.0, 0.0)
        b = GridMeasure.from_points(desk, [[0.0], [0.5]], [[0.0], [0.0]])
        # one source atom: the only plan sends half the mass each way
        sa, sb = np.flatnonzero(a.weights), np.flatnonzero(b.weights)
        cost = ground_distance(desk, sa, sb)
        oracle = min(float(np.sum(cost[0] * b.weights[sb])), np.inf)
        assert oracle == pytest.approx(0.25)
        assert wasserstein1(a, b) == pytest.approx(oracle, abs=1e-12)

    def test_two_by_two_enumeration(self, desk):
        # plans on 2x2 supports form a segment; the optimum sits at a vertex
        a = GridMeasure.from_points(desk, [[0.0], [0.25]], [[0.0], [1.0]], [0.3, 0.7])
        b = GridMeasure.from_points(desk, [[0.5], [0.75]], [[0.5], [-1.0]], [0.6, 0.4])
        sa, sb = np.flatnonzero(a.weights), np.flatnonzero(b.weights)
        C = ground_distance(desk, sa, sb)
        p, q = a.weights[sa], b.weights[sb]
        lo, hi = max(0.0, p[0] - q[1]), min(p[0], q[0])
        best = min(t * C[0, 0] + (p[0] - t) * C[0, 1] + (q[0] - t) * C[1, 0]
                   + (q[1] - p[0] + t) * C[1, 1] for t in (lo, hi))
        assert wasserstein1(a, b) == pytest.approx(best, abs=1e-12)

    def test_dense_and_network_routes_agree(self, rng):
        grid = PhaseGrid(n_x=16, n_v=9)
        for _ in range(5):
            a = GridMeasure(grid, rng.dirichlet(np.full(grid.n_states, 0.3)))
            b = GridMeasure(grid, rng.dirichlet(np.full(grid.n_states, 0.3)))
            dense = wasserstein1(a, b, method="dense")
            net = wasserstein1(a, b, method="network")
            assert dense == pytest.approx(net, rel=1e-9, abs=1e-12)

    @given(measures, measures, measures)
    def test_metric_axioms(self, la, lb, lc):
        a, b, c = (GridMeasure(SMALL, _weights(x, SMALL.n_states)) for x in (la, lb, lc))
        ab, ba = wasserstein1(a, b), wasserstein1(b, a)
        assert ab == pytest.approx(ba, abs=1e-9)
        assert ab <= wasserstein1(a, c) + wasserstein1(c, b) + 1e-9
        assert (ab > 1e-12) == (not np.array_equal(a.weights, b.weights)) or ab < 1e-9

    def test_bounds_bracket_exact_value(self, desk, rng):
        for _ in range(4):
            a = rng.dirichlet(np.full(desk.n_states, 0.5))
            b = rng.dirichlet(np.full(desk.n_states, 0.5))
            lo, hi = w1_bounds(desk, a - b)
            exact = wasserstein1(GridMeasure(desk, a), GridMeasure(desk, b), method="network")
            assert lo - 1e-10 <= exact <= hi + 1e-10

    def test_sup_over_stack(self, desk, rng):
        a = rng.dirichlet(np.full(desk.n_states, 0.5), size=4)
        b = rng.dirichlet(np.full(desk.n_states, 0.5), size=4)
        direct = max(wasserstein1(GridMeasure(desk, x), GridMeasure(desk, y), method="network")
                     for x, y in zip(a, b))
        assert sup_wasserstein1(a, b, desk) == pytest.approx(direct, rel=1e-9)

    def test_mismatched_grids(self, desk):
        with pytest.raises(GridMismatchError):
            wasserstein1(GridMeasure.uniform(desk), GridMeasure.uniform(SMALL))


class TestMoments:
    def test_rest_atom(self, desk):
        assert second_moment(GridMeasure.dirac(desk, 0.25, 0.0)) == 0.0

    def test_unit_atom(self, desk):
        assert second_moment(GridMeasure.dirac(desk, 0.25, 1.0)) == 1.0

    def test_three_velocities_direct_sum(self):
        grid = PhaseGrid(n_x=4, v_max=1.0, n_v=3)
        m = GridMeasure.from_points(grid, [[0.0]] * 3, [[-1.0], [0.0], [1.0]])
        oracle = sum(v * v for v in (-1.0, 0.0, 1.0)) / 3
        assert second_moment(m) == pytest.approx(oracle, abs=1e-15)

    def test_boundary_mass(self, desk):
        assert boundary_mass(GridMeasure.dirac(desk, 0.0, 2.0)) == 1.0
        assert boundary_mass(GridMeasure.dirac(desk, 0.0, 0.0)) == 0.0

    def test_default_v_max(self):
        assert default_v_max(2.0, (0.5, -1.0)) == 4.0


class TestSerialization:
    def test_measure_round_trip(self, desk, rng):
        m = GridMeasure(desk, rng.dirichlet(np.ones(desk.n_states)))
        back = GridMeasure.from_dict(json.loads(dumps(m)))
        np.testing.assert_array_equal(back.weights, m.weights)

    def test_control_measure_round_trip(self, desk):
        mu = ControlMeasure.rest(desk, 0.25)
        back = ControlMeasure.from_dict(json.loads(dumps(mu)))
        np.testing.assert_array_equal(back.weights, mu.weights)

    def test_value_field_round_trip(self, desk, rng):
        f = ValueField(desk, rng.normal(size=desk.n_states))
        np.testing.assert_array_equal(ValueField.from_dict(json.loads(dumps(f))).values, f.values)

    def test_value_field_csv(self, desk, tmp_path):
        f = ValueField(desk, np.arange(desk.n_states, dtype=float))
        path = tmp_path / "v.csv"
        f.to_csv(path)
        lines = path.read_text().splitlines()
        assert len(lines) == desk.n_states + 1

    def test_measures_are_normalized(self, desk):
        with pytest.raises(ValueError):
            GridMeasure(desk, np.full(desk.n_states, 1.0))

    def test_value_field_rejects_nonfinite(self, desk):
        with pytest.raises(ValueError):
            ValueField(desk, np.full(desk.n_states, np.inf))

    def test_flow_cost_and_horizon(self, desk):
        step = ControlMeasure.rest(desk, 0.25, [0.0])
        m = GridMeasure.dirac(desk, 0.25, 0.0)
        flow = FlowMeasure((step, step), desk.h, m)
        assert flow.horizon == 2 * desk.h
        running = np.ones(desk.n_states)
        assert flow.cost(running) == pytest.approx(2 * desk.h)
