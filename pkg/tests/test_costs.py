import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from accel_ergodic.core import GridMeasure, PhaseGrid
from accel_ergodic.costs import (CostField, MeanFieldCoupling, TerminalCost, TrigKernel,
                                 check_derivative_growth, check_growth, check_monotonicity,
                                 check_terminal_lipschitz, congestion, field_names,
                                 interpolation_ratio, make_field, monotonicity_sides, quad,
                                 quad_shift, register_field, travel, truncate, well)


def _fourier_sides(strength, modes, amps, drho, xs, n=4096):
    """Monotonicity sides from a fine Riemann sum, independent of the kernel matrix."""
    q = np.arange(n) / n
    K = lambda z: sum(a * np.cos(2 * np.pi * k * z) for k, a in zip(modes, amps))
    dF = strength * (K(q[:, None] - xs[None, :]) @ drho)
    at_nodes = strength * (K(xs[:, None] - xs[None, :]) @ drho)
    return float(at_nodes @ drho), float(np.mean(dF**2))


class TestGrowth:
    def test_quad_passes(self):
        assert check_growth(quad())["pass"]

    def test_negative_field_fails_with_witness(self):
        rep = check_growth(CostField(lambda x, v: -np.ones(len(x))))
        assert not rep["pass"]
        assert rep["witness"]["F"] == -1.0

    def test_travel_with_c3_against_closed_form(self):
        # |v-1|^2 - (|v|^2/3 - 3) = (2/3) v^2 - 2 v + 4 has minimum 5/2 at v = 3/2
        v = np.linspace(-4, 4, 80001)
        lower_slack = (v - 1) ** 2 - (v**2 / 3 - 3)
        assert lower_slack.min() == pytest.approx(2.5, abs=1e-8)
        upper_slack = 3 * (1 + v**2) - (v - 1) ** 2
        assert upper_slack.min() > 0
        F = travel()
        assert F.c_F == 3
        assert check_growth(F)["pass"]

    def test_travel_fails_with_smaller_constant(self):
        base = travel()
        F = CostField(base.func, c_F=1.0, C_F=3.0)
        assert not check_growth(F)["pass"]

    @pytest.mark.parametrize("factory", [quad, quad_shift, well, travel])
    def test_named_fields(self, factory):
        F = factory()
        assert check_growth(F)["pass"]
        assert check_derivative_growth(F)["pass"]

    def test_well_derivative_constant_is_sharp(self):
        rep = check_derivative_growth(well(), sample_count=4096)
        assert rep["pass"]
        assert rep["worst_ratio"] > 0.5 * well().C_F

    @given(st.floats(0.0, 10.0))
    def test_shift_keeps_growth(self, c):
        F = quad().shifted(c)
        assert F.c_F == pytest.approx(1.0 + c)
        assert check_growth(F, sample_count=128)["pass"]

    def test_validation(self):
        with pytest.raises(ValueError):
            CostField(lambda x, v: x[:, 0], alpha=2.5)
        with pytest.raises(ValueError):
            CostField(lambda x, v: x[:, 0], c_F=0.5)


class TestTruncate:
    def test_infinite_surrogate(self, desk):
        np.testing.assert_array_equal(truncate(quad(), 1e18).on_grid(desk), quad().on_grid(desk))

    def test_examples(self):
        assert truncate(quad(), 1.0)(0.0, 2.0)[0] == 1.0
        assert truncate(well(), 2.0)(0.0, 0.0)[0] == 2.0

    @given(st.floats(0.1, 50.0), st.floats(0.1, 50.0))
    def test_monotone_in_r(self, r1, r2):
        grid = PhaseGrid(n_x=8, n_v=9, v_max=3.0)
        lo, hi = sorted((r1, r2))
        a = truncate(well(), lo).on_grid(grid)
        b = truncate(well(), hi).on_grid(grid)
        assert np.all(a <= b)
        assert np.all(b <= well().on_grid(grid))
        assert np.all(a <= lo)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            truncate(quad(), 0.0)


class TestRegistry:
    def test_names(self):
        assert {"quad", "quad_shift", "travel", "well"} <= set(field_names())

    def test_make_with_params(self):
        F = make_field("quad_shift", c=2.5)
        assert F(0.0, 0.0)[0] == 2.5

    def test_unknown(self):
        with pytest.raises(KeyError):
            make_field("nope")

    def test_register_custom(self):
        register_field("flat_test", lambda d=1: CostField(lambda x, v: np.sum(v * v, 1) + 2.0,
                                                          d=d, c_F=3.0, C_F=2.0, name="flat"))
        assert make_field("flat_test")(0.1, 0.0)[0] == 2.0
        with pytest.raises(ValueError):
            register_field("flat_test", quad)


class TestCoupling:
    def test_convolution_against_direct_sum(self, desk, rng):
        cp = congestion(0.7)
        m = GridMeasure(desk, rng.dirichlet(np.ones(desk.n_states)))
        rho = m.x_marginal()
        xs = desk.x_axis
        direct = np.array([sum(r * (2 + 2 * math.cos(2 * math.pi * (xi - y)))
                               for y, r in zip(xs, rho)) for xi in xs])
        got = cp.on_grid(desk, m)
        base = well().on_grid(desk)
        np.testing.assert_allclose(got - base, 0.7 * np.repeat(direct, desk.n_v), atol=1e-12)

    def test_frozen_matches_on_grid(self, desk):
        cp = congestion(1.0)
        m = GridMeasure.dirac(desk, 0.5, 0.0)
        np.testing.assert_allclose(cp.frozen(m).on_grid(desk), cp.on_grid(desk, m), atol=1e-13)

    def test_coupled_constant(self):
        assert congestion(1.0).c_F == pytest.approx(well().c_F + 4.0)

    def test_kernel_matrix_is_psd(self, desk):
        G = congestion().kernel.matrix(desk)
        np.testing.assert_allclose(G, G.T, atol=1e-14)
        assert np.linalg.eigvalsh(G).min() > -1e-10


class TestMonotonicity:
    def test_zero_coupling(self, desk):
        rep = check_monotonicity(congestion(0.0), desk, pair_count=10)
        assert rep["pass"] and rep["measured_M_F"] == math.inf

    def test_equal_measures(self, desk):
        m = GridMeasure.uniform(desk)
        assert monotonicity_sides(congestion(), m, m) == (0.0, 0.0)

    def test_cosine_kernel_ratio_fourier_oracle(self, desk):
        cp = MeanFieldCoupling(quad(), TrigKernel(((1,),), (1.0,)), 1.0)
        m1, m2 = GridMeasure.dirac(desk, 0.0, 0.0), GridMeasure.dirac(desk, 0.5, 0.0)
        lhs, rhs = monotonicity_sides(cp, m1, m2)
        drho = m1.x_marginal() - m2.x_marginal()
        o_lhs, o_rhs = _fourier_sides(1.0, (1,), (1.0,), drho, desk.x_axis)
        assert lhs == pytest.approx(o_lhs, rel=1e-12)
        assert rhs == pytest.approx(o_rhs, rel=1e-9)
        # a cos(2 pi x) = (a/2)(e^{+} + e^{-}) gives LHS = a|drho_1|^2, RHS = a^2 |drho_1|^2 / 2
        assert lhs / rhs == pytest.approx(2.0, abs=1e-6)

    def test_congestion_constant(self, desk):
        rep = check_monotonicity(congestion(1.0), desk, pair_count=100)
        assert rep["pass"]
        # the constant mode cancels; the cosine mode gives 2 / (c a_1)
        assert rep["measured_M_F"] == pytest.approx(1.0, rel=1e-9)
        assert rep["measured_M_F"] >= 0.9 / 2.0

    def test_random_pairs_match_oracle(self, desk, rng):
        cp = congestion(1.0)
        for _ in range(5):
            m1 = GridMeasure(desk, rng.dirichlet(np.ones(desk.n_states)))
            m2 = GridMeasure(desk, rng.dirichlet(np.ones(desk.n_states)))
            drho = m1.x_marginal() - m2.x_marginal()
            o = _fourier_sides(1.0, (0, 1), (2.0, 2.0), drho, desk.x_axis)
            got = monotonicity_sides(cp, m1, m2)
            assert got[0] == pytest.approx(o[0], rel=1e-10, abs=1e-15)
            assert got[1] == pytest.approx(o[1], rel=1e-8, abs=1e-15)

    def test_mixed_sign_kernel_fails(self, desk):
        cp = MeanFieldCoupling(quad(), TrigKernel(((0,), (1,)), (1.0, -2.0)), 1.0)
        assert not cp.kernel.is_positive()
        assert not check_monotonicity(cp, desk, pair_count=20)["pass"]


class TestTerminal:
    def test_zero_terminal(self, desk):
        assert not np.any(TerminalCost().on_grid(desk))

    def test_lipschitz_bound_holds(self, desk):
        g = TerminalCost(kernel=congestion().kernel, strength=0.5, bound=2.0)
        rep = check_terminal_lipschitz(g, desk, pair_count=10)
        assert rep["pass"] and 0 < rep["measured_lip"] <= g.lip_m


class TestInterpolationInequality:
    @pytest.mark.parametrize("factory", [quad, well, travel])
    def test_ratio_is_scale_invariant(self, desk, factory):
        f = factory().on_grid(desk)
        c0 = 1.0
        ratios = [interpolation_ratio(s * f, desk, 2.0, s * c0) for s in (0.5, 1.0, 2.0)]
        np.testing.assert_allclose(ratios, ratios[1], rtol=1e-12)
        assert np.isfinite(ratios[1])
