import numpy as np
import pytest

from drawdown_ctmc.ctmc import BirthDeathGenerator, DenseGenerator, Grid, build_generator, build_grid
from drawdown_ctmc.linsolve import (
    AmbientInverse,
    DegenerateWindow,
    KillingField,
    NotBirthDeath,
    Singular,
    hitting_coeffs_diffusion,
    psi_pair,
    smw_refresh,
    solve_passage,
    solve_R,
    solve_S_occ,
)
from drawdown_ctmc.models import ModelSpec


def random_birth_death(n, seed, lo=5.0, hi=60.0):
    rng = np.random.default_rng(seed)
    states = np.cumsum(rng.uniform(0.05, 0.15, n))
    up = rng.uniform(lo, hi, n)
    down = rng.uniform(lo, hi, n)
    grid = Grid(states=states, h=float(np.diff(states).min()), eta_x=n // 2, x0=float(states[n // 2]))
    return BirthDeathGenerator(grid, up, down)


def random_jump_chain(n, seed):
    rng = np.random.default_rng(seed)
    states = np.linspace(-1.0, 1.0, n)
    rates = rng.uniform(0.0, 8.0, (n, n))
    rates[rng.random((n, n)) < 0.5] = 0.0
    np.fill_diagonal(rates, 0.0)
    rates[0] = 0.0
    rates[-1] = 0.0
    np.fill_diagonal(rates, -rates.sum(axis=1))
    return DenseGenerator.from_dense(states, rates, x0_index=n // 2)


def ambient_solve(gen, window, kvals, f):
    """Direct dense solve of the full closed-form system, as the oracle."""
    n = gen.n
    states = gen.states
    dense = gen.to_dense().astype(complex)
    inside = (states > window[0] + 1e-12) & (states <= window[1] + 1e-12)
    M = np.eye(n, dtype=complex)
    rhs = np.asarray(f, dtype=complex).copy()
    for r in np.nonzero(inside)[0]:
        M[r] = -dense[r]
        M[r, r] += kvals[r]
        rhs[r] = 0.0
    return np.linalg.solve(M, rhs)


class TestSolvePassage:
    def test_boundary_clause(self):
        gen = random_birth_death(12, 0)
        f = np.arange(12, dtype=complex)
        w = (gen.states[3], gen.states[8])
        sol = solve_passage(gen, w, 1.0 + 0.5j, f)
        outside = np.setdiff1d(np.arange(12), np.arange(4, 9))
        assert np.array_equal(sol.values[outside], f[outside])

    def test_certain_exit_no_killing_gives_one(self):
        gen = random_birth_death(12, 1)
        w = (gen.states[3], gen.states[8])
        sol = solve_passage(gen, w, 0.0, np.ones(12))
        assert np.allclose(sol.values, 1.0, atol=1e-12)

    def test_hand_chain_vs_dense_oracle(self):
        gen = random_birth_death(5, 2)
        f = np.zeros(5)
        f[4] = 1.0   # indicator of exiting at the top
        w = (gen.states[0], gen.states[3])
        sol = solve_passage(gen, w, 1.0, f)
        ref = ambient_solve(gen, w, np.full(5, 1.0 + 0j), f)
        assert np.abs(sol.values - ref).max() < 1e-12

    def test_linearity_in_payoff(self):
        gen = random_jump_chain(14, 3)
        w = (gen.states[2], gen.states[10])
        rng = np.random.default_rng(5)
        f1, f2 = rng.random(14), rng.random(14)
        a, b = 0.7, -1.3
        s1 = solve_passage(gen, w, 2.0, f1).values
        s2 = solve_passage(gen, w, 2.0, f2).values
        s12 = solve_passage(gen, w, 2.0, a * f1 + b * f2).values
        assert np.abs(s12 - (a * s1 + b * s2)).max() < 1e-12

    def test_probabilistic_bounds(self):
        for seed in range(4):
            gen = random_jump_chain(12, seed)
            w = (gen.states[2], gen.states[9])
            rng = np.random.default_rng(seed + 100)
            f = rng.random(12)
            k = rng.uniform(0.0, 3.0, 12)
            kf = KillingField.from_function(
                lambda s, k=k, grid=gen.states: np.interp(s, grid, k))
            vals = solve_passage(gen, w, kf, f).values
            assert np.all(vals.real >= -1e-12) and np.all(vals.real <= 1.0 + 1e-12)

    def test_monotone_in_killing(self):
        for seed in range(4):
            gen = random_birth_death(10, seed + 20)
            w = (gen.states[1], gen.states[7])
            f = np.ones(10)
            lo = solve_passage(gen, w, 0.5, f).values.real
            hi = solve_passage(gen, w, 2.5, f).values.real
            assert np.all(lo >= hi - 1e-12)

    def test_residual_guard_flags_singular(self):
        gen = random_birth_death(8, 4)
        w = (gen.states[1], gen.states[6])
        with pytest.raises(Singular):
            # zero killing and a trapping window: interior cannot exit below
            up = gen.up.copy()
            down = gen.down.copy()
            down[1:7] = 0.0
            up[6] = 0.0
            trapped = BirthDeathGenerator(gen.grid, up, down)
            solve_passage(trapped, w, 0.0, np.ones(8))


class TestPsiPair:
    def test_boundary_conditions(self):
        gen = random_birth_death(9, 6)
        psi = psi_pair(gen, 1.3 + 0.2j)
        assert psi.psi_plus(0) == 0.0
        assert psi.psi_plus(8) == pytest.approx(1.0)
        assert psi.psi_minus(8) == 0.0
        assert psi.psi_minus(0) == pytest.approx(1.0)

    def test_monotone_for_real_killing(self):
        gen = random_birth_death(11, 7)
        psi = psi_pair(gen, 2.0)
        plus = [psi.psi_plus(i).real for i in range(11)]
        minus = [psi.psi_minus(i).real for i in range(11)]
        assert all(b >= a - 1e-13 for a, b in zip(plus, plus[1:]))
        assert all(b <= a + 1e-13 for a, b in zip(minus, minus[1:]))
        assert min(plus) >= 0.0 and min(minus) >= 0.0

    def test_interior_recurrence_residual(self):
        gen = random_birth_death(10, 8)
        q = 0.8 + 1.1j
        psi = psi_pair(gen, q)
        G = gen.to_dense().astype(complex)
        for vec in (np.array([psi.psi_plus(i) for i in range(10)]),
                    np.array([psi.psi_minus(i) for i in range(10)])):
            resid = (q * vec - G @ vec)[1:-1]
            assert np.abs(resid).max() < 1e-10 * max(1.0, np.abs(vec).max() * np.abs(G).max())

    def test_requires_birth_death(self):
        with pytest.raises(NotBirthDeath):
            psi_pair(random_jump_chain(8, 9), 1.0)

    def test_coeffs_match_passage_solve(self):
        bs = ModelSpec.bs()
        g = build_grid(0.0, 0.2, 10, -0.5, 0.3)
        gen = build_generator(bs, g)
        q = 1.0 + 0.0j
        psi = psi_pair(gen, q)
        up, down = hitting_coeffs_diffusion(psi, q, 0.0, 0.2)
        i = g.eta_x
        ind_up = np.zeros(gen.n)
        ind_up[i + 1] = 1.0
        ind_dn = np.zeros(gen.n)
        ind_dn[i - 10] = 1.0
        assert up == pytest.approx(solve_passage(gen, (-0.2, 0.0), q, ind_up).at(i), abs=1e-10)
        assert down == pytest.approx(solve_passage(gen, (-0.2, 0.0), q, ind_dn).at(i), abs=1e-10)
        assert abs(up) + abs(down) <= 1.0 + 1e-12

    def test_single_state_window_closed_form(self):
        # window of one interior state: both weights from one row of G
        gen = random_birth_death(8, 30)
        q = 1.7
        psi = psi_pair(gen, q)
        i = 4
        up = psi.up_coeff(i, i - 1, i + 1)
        down = psi.down_coeff(i, i - 1, i + 1)
        out = gen.up[i] + gen.down[i]
        assert up == pytest.approx(gen.up[i] / (q + out), rel=1e-12)
        assert down == pytest.approx(gen.down[i] / (q + out), rel=1e-12)
        assert up + down == pytest.approx(out / (q + out), rel=1e-12)

    def test_coeffs_decrease_in_killing(self):
        gen = build_generator(ModelSpec.bs(), build_grid(0.0, 0.2, 10, -0.5, 0.3))
        prev = None
        for q in (1.0, 10.0, 100.0):
            psi = psi_pair(gen, q)
            up, down = hitting_coeffs_diffusion(psi, q, 0.0, 0.2)
            tot = abs(up) + abs(down)
            if prev is not None:
                assert tot < prev
            prev = tot

    def test_missing_window_endpoint(self):
        gen = build_generator(ModelSpec.bs(), build_grid(0.0, 0.2, 10, -0.3, 0.3))
        psi = psi_pair(gen, 1.0)
        with pytest.raises(DegenerateWindow):
            hitting_coeffs_diffusion(psi, 1.0, gen.states[2], 0.2)  # (x-a) off the grid

    def test_scaled_representation_handles_long_chains(self):
        # growth over a long chain overflows raw doubles but bridges stay finite
        bs = ModelSpec.bs(sigma=0.3, r_f=0.05)
        g = build_grid(0.0, 0.2, 160, -4.0, 4.0)
        gen = build_generator(bs, g)
        q = 92.0 + 800.0j
        psi = psi_pair(gen, q)
        up, down = hitting_coeffs_diffusion(psi, q, 0.0, 0.2)
        assert np.isfinite(up.real) and np.isfinite(down.real)
        assert abs(up) <= 1.0 and abs(down) <= 1.0


class TestAugmentedSystems:
    def test_R_boundary_clauses(self):
        gen = random_jump_chain(10, 11)
        w = (gen.states[2], gen.states[6])
        g = lambda x, y: (1.0 + x) * (2.0 + y)
        R = solve_R(gen, w, 1.5, g)
        for x in range(0, 3):
            assert np.all(R[x, :x + 1] == 0.0)
        for x in range(7, 10):
            for y in range(0, x + 1):
                assert R[x, y] == pytest.approx(g(gen.states[x], gen.states[y]))

    def test_R_frozen_min_reduction(self):
        gen = random_birth_death(6, 12)
        w = (gen.states[1], gen.states[4])
        g = lambda x, y: 1.0 + 0.3 * x - 0.2 * y
        R = solve_R(gen, w, 2.0, g)
        y0 = gen.states[0]
        f1d = np.array([g(x, y0) for x in gen.states], dtype=complex)
        f1d[gen.states <= w[1]] = 0.0
        p = solve_passage(gen, w, 2.0, f1d)
        rows = np.arange(2, 5)
        assert np.abs(R[rows, 0] - p.values[rows]).max() < 1e-12

    def test_S_constant_killing_collapse(self):
        gen = random_jump_chain(10, 13)
        w = (gen.states[2], gen.states[6])
        q = 1.7 + 0.4j
        S = solve_S_occ(gen, w, KillingField.bivariate(lambda s, y: np.full(len(s), q)), np.ones(10))
        f1d = np.ones(10, dtype=complex)
        f1d[gen.states <= w[1]] = 0.0
        p = solve_passage(gen, w, q, f1d)
        rows = np.arange(3, 7)
        for y in range(6, 10):
            sub = rows[rows <= y]
            assert np.abs(S[sub, y] - p.values[sub]).max() < 1e-11

    def test_S_bivariate_vs_brute_force(self):
        # assemble the full (position, max)-indexed linear system directly
        gen = random_jump_chain(6, 14)
        q = 1.3
        xi = 0.3
        kf = KillingField.bivariate(lambda s, y: np.where(y - s > xi, q, 0.0) + 0.2)
        w = (gen.states[1], gen.states[3])
        S = solve_S_occ(gen, w, kf, np.ones(6))
        n = 6
        dense = gen.to_dense().astype(complex)
        pairs = [(x, y) for y in range(n) for x in range(min(y, 3) + 1) if 2 <= x <= 3 and x <= y]
        idx = {p: k for k, p in enumerate(pairs)}
        M = np.zeros((len(pairs), len(pairs)), dtype=complex)
        rhs = np.zeros(len(pairs), dtype=complex)
        for (x, y), r in idx.items():
            kv = kf.values2(gen.states[[x]], gen.states[y])[0]
            M[r, r] = kv - dense[x, x]
            for z in range(n):
                if z == x:
                    continue
                rate = dense[x, z]
                if rate == 0.0:
                    continue
                zy = max(z, y)
                if 2 <= z <= 3:
                    M[r, idx[(z, zy)]] -= rate
                elif z > 3:
                    rhs[r] += rate  # exit above: payoff 1
        sol = np.linalg.solve(M, rhs)
        for (x, y), r in idx.items():
            assert S[x, y] == pytest.approx(sol[r], abs=1e-12)


class TestSMW:
    def test_empty_update(self):
        rng = np.random.default_rng(15)
        A = rng.random((6, 6)) + np.eye(6) * 3
        inv = np.linalg.inv(A)
        assert np.array_equal(smw_refresh(inv, []), inv)

    def test_rank_one_matches_fresh(self):
        rng = np.random.default_rng(16)
        A = rng.random((10, 10)) + np.eye(10) * 5
        inv = np.linalg.inv(A)
        u, v = rng.random(10), rng.random(10)
        updated = smw_refresh(inv, [(u, v)])
        fresh = np.linalg.inv(A + np.outer(u, v))
        assert np.abs(updated - fresh).max() < 1e-10

    def test_ambient_inverse_window_shift(self):
        gen = random_jump_chain(12, 17)
        kill = np.full(12, 1.5 + 0.5j)
        amb = AmbientInverse(gen, kill, 4, 9)
        amb.shift(3, 8)
        fresh = np.linalg.inv(amb._matrix(3, 8))
        assert np.abs(amb.inv - fresh).max() < 1e-8
