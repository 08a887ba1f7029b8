import math
import os

import numpy as np
import pytest

from drawdown_ctmc.ctmc import (
    BadBounds,
    BirthDeathGenerator,
    NegativeRate,
    ToeplitzLevyGenerator,
    build_generator,
    build_grid,
    build_levy_generator,
    choose_drift_scheme,
    default_levy_truncation,
)
from drawdown_ctmc.models import ModelSpec


class TestGrid:
    def test_benchmark_grid_size(self):
        g = build_grid(0.0, 0.2, 20, -4.0, 4.0)
        assert g.h == pytest.approx(0.01)
        assert g.n == 801
        assert g.states[g.eta_x] == 0.0
        assert g.states[g.eta_x - 20] == pytest.approx(-0.2, abs=1e-14)

    def test_small_explicit_grid(self):
        g = build_grid(0.0, 0.2, 2, -0.3, 0.1)
        assert np.allclose(g.states, [-0.3, -0.2, -0.1, 0.0, 0.1])

    def test_strictly_increasing_and_core_present(self):
        g = build_grid(0.13, 0.35, 7, -2.0, 1.0)
        assert np.all(np.diff(g.states) > 0)
        assert g.states[g.eta_x] == pytest.approx(0.13)
        assert g.index_of(0.13 - 0.35) == g.eta_x - 7

    def test_bad_bounds(self):
        with pytest.raises(BadBounds):
            build_grid(0.0, 0.5, 10, -0.3, 1.0)
        with pytest.raises(BadBounds):
            build_grid(0.0, 0.5, 10, -2.0, -0.1)

    def test_window_helpers(self):
        g = build_grid(0.0, 0.2, 4, -1.0, 1.0)
        i = g.eta_x
        assert g.window_bottom(i, 4) == i - 3
        assert g.floor_index(i, 4) == i - 4
        assert g.floor_index(2, 4) is None
        assert g.steps_of(0.2) == 4
        assert g.steps_at_least(0.3) == 6
        assert g.steps_at_least(0.25) == 5


class TestBuildGenerator:
    def test_bs_interior_rates(self):
        # up rate 0.435/(2h) + sigma^2/(2h^2), down with the opposite drift sign
        bs = ModelSpec.bs(sigma=0.3, r_f=0.5, d=0.02)
        g = build_grid(0.0, 0.2, 20, -1.0, 1.0)
        gen = build_generator(bs, g)
        assert isinstance(gen, BirthDeathGenerator)
        i = g.eta_x
        assert gen.up[i] == pytest.approx(471.75, rel=1e-12)
        assert gen.down[i] == pytest.approx(428.25, rel=1e-12)

    def test_refinement_changes_rates_exactly(self):
        bs = ModelSpec.bs(sigma=0.3, r_f=0.5, d=0.02)
        for n_x, h in ((20, 0.01), (40, 0.005)):
            gen = build_generator(bs, build_grid(0.0, 0.2, n_x, -1.0, 1.0))
            up = 0.435 / (2 * h) + 0.09 / (2 * h * h)
            assert gen.up[gen.grid.eta_x] == pytest.approx(up, rel=1e-12)

    def test_absorbing_rows_zero(self):
        gen = build_generator(ModelSpec.dejd(), build_grid(0.0, 0.2, 4, -0.6, 0.6))
        assert np.all(gen.row(0) == 0.0)
        assert np.all(gen.row(gen.n - 1) == 0.0)

    def test_row_sums_vanish(self):
        for model in (ModelSpec.bs(), ModelSpec.cev(), ModelSpec.dejd(), ModelSpec.vg()):
            gen = build_generator(model, build_grid(0.0, 0.2, 5, -0.8, 0.8))
            assert np.abs(gen.row_sums()).max() < 1e-10 * max(1.0, np.abs(gen.to_dense()).max())

    def test_interior_outflow_positive(self):
        gen = build_generator(ModelSpec.vg(), build_grid(0.0, 0.2, 5, -0.8, 0.8))
        for i in range(1, gen.n - 1):
            assert gen.out_rate(i) > 0.0

    def test_negative_rate_aborts_central(self):
        # strongly drift-dominated diffusion on a coarse step
        m = ModelSpec.bs(sigma=0.05, r_f=0.5, d=0.0)
        g = build_grid(0.0, 0.4, 2, -1.0, 1.0)
        with pytest.raises(NegativeRate):
            build_generator(m, g, drift_scheme="central")
        gen = build_generator(m, g, drift_scheme="auto")  # one-sided drift keeps rates valid
        assert np.all(gen.up[1:-1] >= 0.0) and np.all(gen.down[1:-1] >= 0.0)


class TestLevyGenerator:
    @pytest.mark.parametrize("model", [ModelSpec.dejd(), ModelSpec.vg()])
    def test_matches_general_builder_row_wise(self, model):
        g = build_grid(0.0, 0.2, 4, -0.5, 0.5)
        dense = build_generator(model, g).to_dense()
        levy = build_levy_generator(model, g.h, -0.5, 0.5).to_dense()
        scale = np.abs(dense).max()
        assert np.abs(dense - levy)[1:-1, :].max() <= 1e-10 * scale

    def test_bs_lattice_is_toeplitz(self):
        gen = build_levy_generator(ModelSpec.bs(), 0.01, -0.3, 0.3)
        assert isinstance(gen, ToeplitzLevyGenerator)
        rows = [gen.row(i) for i in range(2, gen.n - 2)]
        for k in range(1, len(rows)):
            assert np.array_equal(np.roll(rows[k], -k), np.roll(rows[0], 0))

    def test_dejd_offset_bin_mass(self):
        m = ModelSpec.dejd()
        h = 0.01
        gen = build_levy_generator(m, h, -1.0, 1.0)
        i = gen.grid.eta_x
        # rate for a 10-step jump equals the measure of the half-open bin around it
        expect = m.lam * m.p_plus * (math.exp(-m.eta_plus * 9.5 * h) - math.exp(-m.eta_plus * 10.5 * h))
        assert gen.row(i)[i + 10] == pytest.approx(expect, rel=1e-12)

    def test_vg_rates_nonnegative(self):
        gen = build_levy_generator(ModelSpec.vg(), 0.005, -1.0, 1.0)
        row = gen.row(gen.grid.eta_x)
        off = np.delete(row, gen.grid.eta_x)
        assert np.all(off >= 0.0)

    def test_block_column_row_consistency(self):
        for gen in (
            build_levy_generator(ModelSpec.dejd(), 0.05, -0.6, 0.6),
            build_generator(ModelSpec.cev(), build_grid(0.0, 0.2, 4, -0.6, 0.4)),
            build_generator(ModelSpec.vg(), build_grid(0.0, 0.1, 3, -0.4, 0.4)),
        ):
            dense = gen.to_dense()
            n = gen.n
            for j in (0, 1, n // 2, n - 2, n - 1):
                assert np.allclose(gen.column(j), dense[:, j], atol=1e-14)
                assert np.allclose(gen.row(j), dense[j], atol=1e-14)
            blk = gen.window_block(1, n - 2)
            assert np.allclose(blk, dense[1:n - 1, 1:n - 1], atol=1e-14)
            blk = gen.window_block(0, n - 1)
            assert np.allclose(blk, dense, atol=1e-14)

    def test_col_support_covers_nonzeros(self):
        gen = build_levy_generator(ModelSpec.dejd(), 0.05, -0.6, 0.6)
        for j in range(gen.n):
            c0, c1 = gen.col_support(j)
            col = gen.column(j)
            outside = np.concatenate([col[:c0], col[c1:]])
            assert np.all(outside == 0.0)


class TestSchemeChoice:
    def test_diffusions_keep_central(self):
        assert choose_drift_scheme(ModelSpec.bs(r_f=0.05), 0.2 / 160, np.linspace(-4, 4, 9)) == "central"
        assert choose_drift_scheme(ModelSpec.dejd(r_f=0.05), 0.2 / 160, np.array([0.0])) == "central"

    def test_vg_fine_step_needs_upwind(self):
        assert choose_drift_scheme(ModelSpec.vg(r_f=0.05), 0.5 / 640, np.array([0.0])) == "upwind"

    def test_default_truncation(self):
        assert default_levy_truncation(0.2) == 4.0
        assert default_levy_truncation(0.5) == 5.0


class TestDump:
    def test_dump_csv_roundtrip(self, tmp_path):
        gen = build_generator(ModelSpec.bs(), build_grid(0.0, 0.2, 2, -0.5, 0.3))
        path = os.path.join(tmp_path, "gen.csv")
        gen.dump_csv(path)
        dense = gen.to_dense()
        with open(path) as fh:
            header = fh.readline().strip()
            assert header == "i,j,rate"
            seen = {}
            for line in fh:
                i, j, rate = line.strip().split(",")
                seen[(int(i), int(j))] = float(rate)
        for (i, j), rate in seen.items():
            assert rate == pytest.approx(dense[i, j], rel=1e-15)
        assert len(seen) == int(np.count_nonzero(dense))
