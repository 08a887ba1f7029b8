import numpy as np
import pytest

from drawdown_ctmc.ctmc import DenseGenerator, build_generator, build_grid, build_levy_generator
from drawdown_ctmc.linsolve import KillingField
from drawdown_ctmc.models import ModelSpec
from drawdown_ctmc.oracle import dense_product_solve
from drawdown_ctmc.quantities import (
    QuantityRequest,
    UnsupportedRegime,
    c_levy_closed_form,
    drawdown_before_drawup,
    drawdown_occupation,
    drawdown_occupation_killing,
    evaluate,
    h_levy_closed_form,
    insurance_no_recovery,
    insurance_with_recovery,
    j_levy_closed_form,
    nth_drawdown_no_recovery,
    nth_drawdown_with_recovery,
    occupation_below_killing,
    occupation_until_drawdown,
    q_drawdown,
)


@pytest.fixture(scope="module")
def bs_small():
    g = build_grid(0.0, 0.2, 8, -0.8, 0.4)
    return build_generator(ModelSpec.bs(), g)


@pytest.fixture(scope="module")
def dejd_lattice():
    return build_levy_generator(ModelSpec.dejd(), 0.02, -1.0, 1.0)


def densify(gen):
    return DenseGenerator.from_dense(gen.states, gen.to_dense(max_states=4000),
                                     x0_index=gen.grid.eta_x)


class TestQDrawdown:
    def test_absorbing_top_is_zero(self, bs_small):
        top = bs_small.grid.states[-1]
        assert q_drawdown(bs_small, 1.0, 0.2, x=top) == 0.0

    def test_zero_payoff(self, bs_small):
        v = q_drawdown(bs_small, 1.0, 0.2, f=np.zeros(bs_small.n))
        assert v == 0.0

    def test_matches_product_oracle(self):
        g = build_grid(0.0, 0.2, 40, -0.8, 0.4)
        gen = build_generator(ModelSpec.bs(), g)
        v = q_drawdown(gen, 1.0, 0.2, f=None)
        ref = dense_product_solve(gen, QuantityRequest("Q", a=0.2, q=1.0))
        assert abs(v - ref) < 1e-9

    def test_psi_path_equals_generic_complex_argument(self, bs_small):
        for q in (1.0, 2.0 + 3.0j, 20.0 + 60.0j):
            fast = q_drawdown(bs_small, q, 0.2)
            slow = q_drawdown(bs_small, q, 0.2, force_generic=True)
            assert abs(fast - slow) < 1e-9

    def test_smw_toggle_identical(self, bs_small):
        dense = densify(bs_small)
        v_on = q_drawdown(dense, 1.3, 0.2, use_smw=True)
        v_off = q_drawdown(dense, 1.3, 0.2, use_smw=False)
        assert abs(v_on - v_off) < 1e-9

    def test_monotone_in_q(self, bs_small):
        vals = [q_drawdown(bs_small, q, 0.2).real for q in (0.5, 1.0, 2.0, 4.0)]
        assert all(b < a for a, b in zip(vals, vals[1:]))


class TestDrawdownBeforeDrawup:
    def test_unreachable_drawup_equals_plain_drawdown(self, bs_small):
        # drawup level beyond the grid span can never fire first
        v = drawdown_before_drawup(bs_small, 1.5, 0.2, 5.0)
        ref = q_drawdown(bs_small, 1.5, 0.2)
        assert abs(v - ref) < 1e-12

    def test_dominated_by_plain_drawdown(self, bs_small):
        states = bs_small.grid.states
        ref = q_drawdown(bs_small, 1.0, 0.2).real
        for y in (0.0, -0.05, -0.15):
            v = drawdown_before_drawup(bs_small, 1.0, 0.2, 0.3, y=y).real
            assert v <= ref + 1e-12

    def test_b_below_a_rejected(self, bs_small):
        with pytest.raises(UnsupportedRegime):
            drawdown_before_drawup(bs_small, 1.0, 0.2, 0.1)

    def test_diffusion_matches_generic(self, bs_small):
        for (x, y) in ((0.0, 0.0), (0.0, -0.1)):
            fast = drawdown_before_drawup(bs_small, 1.2 + 0.7j, 0.2, 0.3, x=x, y=y)
            slow = drawdown_before_drawup(bs_small, 1.2 + 0.7j, 0.2, 0.3, x=x, y=y,
                                          force_generic=True)
            assert abs(fast - slow) < 1e-10

    def test_y_interpolation_is_linear(self, bs_small):
        h = bs_small.grid.h
        lo = drawdown_before_drawup(bs_small, 1.0, 0.2, 0.3, y=-2 * h)
        hi = drawdown_before_drawup(bs_small, 1.0, 0.2, 0.3, y=-h)
        mid = drawdown_before_drawup(bs_small, 1.0, 0.2, 0.3, y=-1.5 * h)
        assert mid == pytest.approx(0.5 * (lo + hi), abs=1e-12)

    def test_started_past_drawup_level_is_zero(self, bs_small):
        assert drawdown_before_drawup(bs_small, 1.0, 0.2, 0.3, y=-0.4) == 0.0

    def test_single_step_levels(self):
        # a one step wide: windows have a single state and no interior minima
        g = build_grid(0.0, 0.05, 2, -0.5, 0.4)
        gen = build_generator(ModelSpec.dejd(), g)
        h = g.h
        for b_steps in (1, 3):
            req = QuantityRequest("A", a=h, b=b_steps * h, q=1.3, y=-h)
            val = evaluate(gen, req, force_generic=True)
            ref = dense_product_solve(gen, req)
            assert abs(val - ref) < 1e-12


class TestOccupationUntilDrawdown:
    def test_constant_killing_collapses_to_q(self, bs_small):
        q = 1.7 + 0.3j
        v = occupation_until_drawdown(bs_small, KillingField.constant(q), 0.2)
        assert abs(v - q_drawdown(bs_small, q, 0.2)) < 1e-12

    def test_zero_killing_is_probability(self, bs_small):
        v = occupation_until_drawdown(bs_small, KillingField.constant(1e-12), 0.2).real
        assert 0.0 <= v <= 1.0

    def test_threshold_killing_bounds(self, bs_small):
        k = occupation_below_killing(2.0, 0.05, 0.1)
        v = occupation_until_drawdown(bs_small, k, 0.2).real
        assert 0.0 <= v <= 1.0


class TestDrawdownOccupation:
    def test_max_independent_killing_collapses(self, bs_small):
        q = 1.4
        k2 = KillingField.bivariate(lambda s, y: np.full(len(s), q))
        v = drawdown_occupation(bs_small, k2, 0.2)
        ref = occupation_until_drawdown(bs_small, KillingField.constant(q), 0.2)
        assert abs(v - ref) < 1e-12

    def test_bounds(self, bs_small):
        k2 = drawdown_occupation_killing(2.0, 0.1, 0.3)
        v = drawdown_occupation(bs_small, k2, 0.2).real
        assert 0.0 <= v <= 1.0

    def test_levy_closed_form_vs_recursion(self):
        gen = build_levy_generator(ModelSpec.dejd(), 0.02, -4.0, 4.0)
        q = 6.0 + 0.5j
        cf = c_levy_closed_form(gen, q, 0.1, 0.04, shift=0.5)
        rec = drawdown_occupation(gen, drawdown_occupation_killing(q, 0.04, 0.5), 0.1)
        assert abs(cf - rec) < 1e-8

    def test_closed_form_denominator_modulus(self, dejd_lattice):
        # the up-exit weight has modulus < 1 under strict killing
        from drawdown_ctmc.quantities import _levy_window_masses
        _, p_up, _ = _levy_window_masses(dejd_lattice, 2.0 + 1.0j,
                                         dejd_lattice.grid.steps_of(0.1))
        assert abs(p_up) < 1.0


class TestNthDrawdownNoRecovery:
    def test_first_event_is_plain_drawdown(self, bs_small):
        q = 1.1 + 0.2j
        assert abs(nth_drawdown_no_recovery(bs_small, q, 0.2, n=1)
                   - q_drawdown(bs_small, q, 0.2)) < 1e-12

    def test_decreasing_in_count(self, bs_small):
        vals = [nth_drawdown_no_recovery(bs_small, 1.0, 0.2, n=n).real for n in (1, 2, 3, 4)]
        assert all(b < a for a, b in zip(vals, vals[1:]))

    def test_partial_sums_converge_to_fixed_point(self, bs_small):
        from drawdown_ctmc.quantities import insurance_partial_sums
        q = 1.0
        total = insurance_no_recovery(bs_small, q, 0.2).real
        sums = insurance_partial_sums(bs_small, q, 0.2).real
        assert np.all(np.diff(sums) > -1e-15)   # increasing in the event count
        assert abs(sums[-1] - total) < 1e-8

    def test_levy_fixed_point_vs_generic(self):
        gen = build_levy_generator(ModelSpec.dejd(), 0.02, -3.5, 3.5)
        q = 6.0 + 0.5j
        cf = h_levy_closed_form(gen, q, 0.1)
        ref = insurance_no_recovery(densify(gen), q, 0.1, force_generic=True)
        assert abs(cf - ref) < 1e-8

    def test_bd_fixed_point_vs_generic(self, bs_small):
        q = 1.5 + 0.5j
        fast = insurance_no_recovery(bs_small, q, 0.2)
        slow = insurance_no_recovery(densify(bs_small), q, 0.2, force_generic=True)
        assert abs(fast - slow) < 1e-9


class TestNthDrawdownWithRecovery:
    def test_diagonal_first_event_matches_plain(self, bs_small):
        q = 1.3
        f = np.cos(bs_small.grid.states)
        f2 = lambda x, y: np.cos(x)
        v = nth_drawdown_with_recovery(bs_small, q, 0.2, f2=f2, n=1)
        ref = q_drawdown(bs_small, q, 0.2, f=f)
        assert abs(v - ref) < 1e-10

    def test_decreasing_in_count(self, bs_small):
        vals = [nth_drawdown_with_recovery(bs_small, 1.0, 0.2, n=n).real for n in (1, 2, 3)]
        assert all(b < a for a, b in zip(vals, vals[1:]))

    def test_partial_sums_converge_to_fixed_point(self, bs_small):
        from drawdown_ctmc.quantities import insurance_partial_sums
        q = 1.0
        total = insurance_with_recovery(bs_small, q, 0.2).real
        sums = insurance_partial_sums(bs_small, q, 0.2, recovery=True).real
        assert abs(sums[-1] - total) < 1e-8

    def test_diffusion_recursion_vs_generic(self, bs_small):
        q = 1.5 + 0.5j
        for (x, y) in ((0.0, 0.0), (-0.1, 0.05)):
            fast = insurance_with_recovery(bs_small, q, 0.2, x=x, y=y)
            slow = insurance_with_recovery(densify(bs_small), q, 0.2, x=x, y=y,
                                           force_generic=True)
            assert abs(fast - slow) < 1e-9

    def test_levy_fixed_point_vs_generic(self):
        gen = build_levy_generator(ModelSpec.dejd(), 0.02, -3.5, 3.5)
        q = 6.0 + 0.5j
        cf = j_levy_closed_form(gen, q, 0.1)
        ref = insurance_with_recovery(densify(gen), q, 0.1, force_generic=True)
        assert abs(cf - ref) < 1e-8


class TestTranslationInvariance:
    def test_interior_values_constant_on_lattice(self):
        # constancy holds for starts at least (truncation - a) from the ends
        gen = build_levy_generator(ModelSpec.dejd(), 0.025, -4.0, 4.0)
        q = 6.0
        eta = gen.grid.eta_x
        dense = densify(gen)
        base_q = q_drawdown(gen, q, 0.1, x=gen.states[eta])
        k2 = drawdown_occupation_killing(q, 0.05, 0.4)
        base_c = drawdown_occupation(gen, k2, 0.1, x=gen.states[eta])
        base_h = insurance_no_recovery(dense, q, 0.1, x=gen.states[eta],
                                       force_generic=True)
        for shift in (-4, 2, 4):
            x = gen.states[eta + shift]
            assert abs(q_drawdown(gen, q, 0.1, x=x) - base_q) < 1e-8
            assert abs(drawdown_occupation(gen, k2, 0.1, x=x) - base_c) < 1e-8
            assert abs(insurance_no_recovery(dense, q, 0.1, x=x, force_generic=True)
                       - base_h) < 1e-8

    def test_recovery_sum_depends_on_gap_only(self):
        gen = densify(build_levy_generator(ModelSpec.dejd(), 0.05, -3.0, 3.0))
        q = 6.0
        h = gen.grid.h
        v1 = insurance_with_recovery(gen, q, 0.1, x=-3 * h, y=2 * h,
                                     force_generic=True)
        v2 = insurance_with_recovery(gen, q, 0.1, x=-8 * h, y=-3 * h,
                                     force_generic=True)
        assert abs(v1 - v2) < 1e-8


class TestVgSmallLattice:
    def test_quantities_vs_product_oracle(self):
        gen = build_levy_generator(ModelSpec.vg(), 0.05, -1.0, 1.0)
        dense = densify(gen)
        q = 2.5
        for req in (QuantityRequest("Q", a=0.2, q=q),
                    QuantityRequest("C", a=0.2, q=q, xi=0.1, shift=0.3),
                    QuantityRequest("Hsum", a=0.2, q=q)):
            val = evaluate(gen, req, force_generic=True)
            ref = dense_product_solve(dense, req)
            assert abs(val - ref) < 1e-8, req.kind

    def test_upwind_lattice_matches_dense_builder(self):
        from drawdown_ctmc.ctmc import build_generator as build_dense_gen
        from drawdown_ctmc.ctmc import build_grid as make_grid
        vg = ModelSpec.vg(r_f=0.05)
        h = 0.5 / 320   # fine enough that the one-sided drift engages
        grid = make_grid(0.0, 0.1, round(0.1 / h), -0.3, 0.3)
        dense = build_dense_gen(vg, grid).to_dense()
        lat = build_levy_generator(vg, h, -0.3, 0.3).to_dense()
        scale = np.abs(dense).max()
        assert np.abs(dense - lat)[1:-1, :].max() <= 1e-10 * scale


class TestDispatch:
    def test_evaluate_routes_all_kinds(self, bs_small):
        reqs = [
            QuantityRequest("Q", a=0.2, q=1.0),
            QuantityRequest("A", a=0.2, b=0.3, q=1.0, y=-0.1),
            QuantityRequest("B", a=0.2, q=1.0, xi=0.05, shift=0.1),
            QuantityRequest("C", a=0.2, q=1.0, xi=0.05, shift=0.1),
            QuantityRequest("Hn", a=0.2, q=1.0, n=2),
            QuantityRequest("Hsum", a=0.2, q=1.0),
            QuantityRequest("Jn", a=0.2, q=1.0, n=2),
            QuantityRequest("Jsum", a=0.2, q=1.0),
        ]
        for req in reqs:
            v = evaluate(bs_small, req)
            assert np.isfinite(v.real) and 0.0 <= v.real <= 1.1

    def test_kind_aliases(self):
        assert QuantityRequest("DrawdownBeforeDrawup_A", a=0.1, b=0.2).kind == "A"
        assert QuantityRequest("InsuranceWithRecovery_Jsum", a=0.1).kind == "Jsum"
        with pytest.raises(ValueError):
            QuantityRequest("XYZ", a=0.1)

    def test_monotone_in_q_all_quantities(self, bs_small):
        for kind in ("Q", "B", "C", "Hsum", "Jsum"):
            vals = []
            for q in (0.5, 1.0, 2.0, 4.0):
                req = QuantityRequest(kind, a=0.2, q=q, xi=0.05)
                vals.append(evaluate(bs_small, req).real)
            assert all(b < a + 1e-14 for a, b in zip(vals, vals[1:])), kind
