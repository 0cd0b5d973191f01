"""Measures, sparse marginals, KL divergence, and file round-trips."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from domdec.measures import (
    DivergenceSpec,
    Grid,
    GridMeasure,
    GridMismatchError,
    SparseCellMarginal,
    TransportProblem,
    assemble_y_marginal,
    box_union,
    extract_window,
    kl_divergence,
    truncate_and_rebox,
)


def grid1d(n=8, dx=0.125, origin=0.0625):
    return Grid(dims=(n,), dx=dx, origin=(origin,))


def grid2d(n=4, m=None, dx=0.25):
    m = n if m is None else m
    return Grid(dims=(n, m), dx=dx, origin=(dx / 2, dx / 2))


def kl_brute(rho, sigma):
    """Independent scalar-loop KL oracle."""
    total = 0.0
    for r, s in zip(np.ravel(rho), np.ravel(sigma)):
        if s == 0.0:
            if r > 0.0:
                return math.inf
            continue
        if r == 0.0:
            total += s
        else:
            total += r * math.log(r / s) - r + s
    return total


class TestGrid:
    def test_node_coordinates_exact(self):
        g = Grid(dims=(4, 3), dx=0.5, origin=(1.0, -2.0))
        assert g.axis_coords(0).tolist() == [1.0, 1.5, 2.0, 2.5]
        assert g.axis_coords(1).tolist() == [-2.0, -1.5, -1.0]
        # windows may extrapolate outside the grid
        assert g.axis_coords(0, start=-2, extent=2).tolist() == [0.0, 0.5]

    def test_validation(self):
        with pytest.raises(ValueError):
            Grid(dims=(4, 4, 4), dx=1.0, origin=(0, 0, 0))
        with pytest.raises(ValueError):
            Grid(dims=(0,), dx=1.0, origin=(0.0,))
        with pytest.raises(ValueError):
            Grid(dims=(4,), dx=0.0, origin=(0.0,))


class TestGridMeasure:
    def test_rejects_negative_and_shape_mismatch(self):
        g = grid1d(4)
        with pytest.raises(ValueError):
            GridMeasure(grid=g, mass=np.array([1.0, -1.0, 0.0, 0.0]))
        with pytest.raises(ValueError):
            GridMeasure(grid=g, mass=np.ones(5))

    def test_window_fills_out_of_range(self):
        g = grid1d(4)
        m = GridMeasure(grid=g, mass=np.array([1.0, 2.0, 3.0, 4.0]))
        w = m.window(((-1, 3),))
        assert w.tolist() == [0.0, 1.0, 2.0]


class TestKLDivergence:
    def test_identity_is_zero(self):
        g = grid2d(3)
        sigma = GridMeasure(grid=g, mass=np.random.default_rng(0).uniform(0.1, 2, g.dims))
        assert kl_divergence(sigma, sigma) == pytest.approx(0.0, abs=1e-14)

    def test_zero_against_sigma_gives_total_mass(self):
        g = grid1d(6)
        sigma = GridMeasure(grid=g, mass=np.linspace(0.5, 3.0, 6))
        zero = GridMeasure(grid=g, mass=np.zeros(6))
        assert kl_divergence(zero, sigma) == pytest.approx(sigma.total_mass, rel=1e-14)

    def test_doubled_sigma_closed_form(self):
        g = grid1d(5)
        sigma = GridMeasure(grid=g, mass=np.linspace(0.2, 1.0, 5))
        two = GridMeasure(grid=g, mass=2 * sigma.mass)
        expected = (2 * math.log(2) - 1) * sigma.total_mass
        assert kl_divergence(two, sigma) == pytest.approx(expected, rel=1e-13)

    def test_infinite_when_rho_escapes_support(self):
        rho = np.array([1.0, 1.0])
        sigma = np.array([1.0, 0.0])
        assert kl_divergence(rho, sigma) == math.inf

    def test_grid_mismatch_raises(self):
        a = GridMeasure(grid=grid1d(4), mass=np.ones(4))
        b = GridMeasure(grid=grid1d(4, dx=0.5), mass=np.ones(4))
        with pytest.raises(GridMismatchError):
            kl_divergence(a, b)

    def test_matches_brute_force_random(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            rho = rng.uniform(0, 2, (5, 4))
            sigma = rng.uniform(0.01, 2, (5, 4))
            rho[rng.uniform(size=rho.shape) < 0.3] = 0.0
            assert kl_divergence(rho, sigma) == pytest.approx(kl_brute(rho, sigma), rel=1e-12)

    def test_marginal_against_grid_measure_accounts_off_box(self):
        g = grid1d(8)
        sigma = GridMeasure(grid=g, mass=np.linspace(0.5, 1.2, 8))
        cell = SparseCellMarginal(box=((2, 3),), values=np.array([0.3, 0.0, 0.9]))
        dense = np.zeros(8)
        dense[2:5] = cell.values
        assert kl_divergence(cell, sigma) == pytest.approx(kl_brute(dense, sigma.mass), rel=1e-13)

    @settings(max_examples=60, deadline=None)
    @given(
        t=st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]),
        seed=st.integers(min_value=0, max_value=2**31),
    )
    def test_convexity_on_rays(self, t, seed):
        rng = np.random.default_rng(seed)
        rho1 = rng.uniform(0, 2, 12)
        rho2 = rng.uniform(0, 2, 12)
        sigma = rng.uniform(0.05, 2, 12)
        lhs = kl_divergence(t * rho1 + (1 - t) * rho2, sigma)
        rhs = t * kl_divergence(rho1, sigma) + (1 - t) * kl_divergence(rho2, sigma)
        assert lhs <= rhs + 1e-10


class TestDivergenceSpec:
    @settings(max_examples=60, deadline=None)
    @given(
        s=st.floats(min_value=1e-6, max_value=1e6),
        lam=st.floats(min_value=1e-4, max_value=1e8),
    )
    def test_fenchel_identity(self, s, lam):
        d = DivergenceSpec(lam=lam)
        lhs = d.phi_star(d.phi_prime(s)) + d.phi(s)
        rhs = s * d.phi_prime(s)
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12 * lam)

    def test_rejects_bad_lambda(self):
        with pytest.raises(ValueError):
            DivergenceSpec(lam=0.0)
        with pytest.raises(ValueError):
            DivergenceSpec(lam=math.inf)


class TestTruncateAndRebox:
    def test_all_above_threshold_unchanged(self):
        m = SparseCellMarginal(box=((3, 2), (1, 2)), values=np.array([[1.0, 2.0], [3.0, 4.0]]))
        out, removed = truncate_and_rebox(m, 0.5)
        assert out.box == m.box
        assert removed == 0.0
        np.testing.assert_array_equal(out.values, m.values)

    def test_single_survivor_gets_unit_box(self):
        vals = np.full((3, 3), 1e-20)
        vals[1, 1] = 1.0
        m = SparseCellMarginal(box=((0, 3), (4, 3)), values=vals)
        out, removed = truncate_and_rebox(m, 1e-15)
        assert out.box == ((1, 1), (5, 1))
        assert out.values.shape == (1, 1)
        assert removed == pytest.approx(8e-20, rel=1e-12)

    def test_all_below_threshold_yields_empty_flag(self):
        m = SparseCellMarginal(box=((0, 2),), values=np.array([1e-18, 1e-17]))
        out, removed = truncate_and_rebox(m, 1e-15)
        assert out.is_empty
        assert removed == pytest.approx(1.1e-17, rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=2**31))
    def test_mass_accounting_and_idempotence(self, seed):
        rng = np.random.default_rng(seed)
        vals = rng.uniform(0, 1, (6, 5))
        vals[rng.uniform(size=vals.shape) < 0.4] *= 1e-18
        m = SparseCellMarginal(box=((2, 6), (1, 5)), values=vals)
        thr = 1e-15
        out, removed = truncate_and_rebox(m, thr)
        # mass accounting against a direct-summation oracle
        expected_removed = float(vals[vals < thr].sum())
        assert removed == pytest.approx(expected_removed, rel=1e-12, abs=1e-25)
        assert out.total_mass + removed == pytest.approx(m.total_mass, rel=1e-12)
        # idempotence at the same threshold
        again, removed2 = truncate_and_rebox(out, thr)
        assert removed2 == 0.0
        assert again.box == out.box
        np.testing.assert_array_equal(again.values, out.values)


class TestAssembleYMarginal:
    def test_single_full_grid_cell_is_identity(self):
        g = grid2d(4)
        vals = np.random.default_rng(1).uniform(0, 1, g.dims)
        cell = SparseCellMarginal(box=g.full_box(), values=vals)
        out = assemble_y_marginal([cell], g)
        np.testing.assert_array_equal(out.mass, vals)

    def test_disjoint_cells(self):
        g = grid1d(8)
        a = SparseCellMarginal(box=((0, 3),), values=np.array([1.0, 2.0, 3.0]))
        b = SparseCellMarginal(box=((5, 2),), values=np.array([4.0, 5.0]))
        out = assemble_y_marginal([a, b], g)
        assert out.mass.tolist() == [1.0, 2.0, 3.0, 0.0, 0.0, 4.0, 5.0, 0.0]

    def test_matches_brute_force_accumulation(self):
        g = grid2d(6)
        rng = np.random.default_rng(5)
        cells = []
        dense = np.zeros(g.dims)
        for _ in range(16):
            off = (rng.integers(0, 4), rng.integers(0, 4))
            ext = (rng.integers(1, 3), rng.integers(1, 3))
            vals = rng.uniform(0, 1, ext)
            cells.append(SparseCellMarginal(box=((int(off[0]), int(ext[0])), (int(off[1]), int(ext[1]))), values=vals))
            # brute-force oracle: per-node loop
            for i in range(ext[0]):
                for j in range(ext[1]):
                    dense[off[0] + i, off[1] + j] += vals[i, j]
        out = assemble_y_marginal(cells, g)
        np.testing.assert_allclose(out.mass, dense, rtol=1e-13)
        # mass accounting invariant
        assert out.total_mass == pytest.approx(sum(c.total_mass for c in cells), rel=1e-12)

    def test_out_of_bounds_box_raises(self):
        g = grid1d(4)
        c = SparseCellMarginal(box=((3, 2),), values=np.array([1.0, 1.0]))
        with pytest.raises(GridMismatchError):
            assemble_y_marginal([c], g)


class TestFileRoundTrip:
    @pytest.mark.parametrize("encoding", ["csv", "f64"])
    @pytest.mark.parametrize("dims", [(16,), (4, 8)])
    def test_bit_exact_round_trip(self, tmp_path, encoding, dims):
        rng = np.random.default_rng(11)
        g = Grid(dims=dims, dx=1 / 64, origin=tuple(1 / 128 for _ in dims))
        mass = rng.uniform(0, 1, dims) * 10.0 ** rng.integers(-12, 3, dims)
        m = GridMeasure(grid=g, mass=mass)
        path = tmp_path / f"m.{encoding}"
        m.save(path, encoding=encoding)
        back = GridMeasure.load(path)
        assert back.grid == m.grid
        assert back.mass.tobytes() == m.mass.tobytes()

    def test_rejects_unknown_encoding(self, tmp_path):
        m = GridMeasure(grid=grid1d(2), mass=np.ones(2))
        with pytest.raises(ValueError):
            m.save(tmp_path / "x", encoding="npz")


class TestTransportProblem:
    def test_requires_full_support_nu(self):
        g = grid1d(4)
        mu = GridMeasure(grid=g, mass=np.ones(4))
        nu = GridMeasure(grid=g, mass=np.array([1.0, 0.0, 1.0, 1.0]))
        with pytest.raises(ValueError):
            TransportProblem(mu=mu, nu=nu, div=DivergenceSpec(lam=1.0), eps=0.1)

    def test_allows_zero_nodes_in_mu(self):
        g = grid1d(4)
        mu = GridMeasure(grid=g, mass=np.array([1.0, 0.0, 1.0, 1.0]))
        nu = GridMeasure(grid=g, mass=np.ones(4))
        TransportProblem(mu=mu, nu=nu, div=DivergenceSpec(lam=1.0), eps=0.1)


class TestBoxUtilities:
    def test_union(self):
        assert box_union([((0, 2), (3, 1)), ((1, 3), (2, 2))]) == ((0, 4), (2, 2))

    def test_extract_window_2d_padding(self):
        arr = np.arange(12.0).reshape(3, 4)
        w = extract_window(arr, ((-1, 3), (2, 3)))
        expected = np.array([[0.0, 0.0, 0.0], [2.0, 3.0, 0.0], [6.0, 7.0, 0.0]])
        np.testing.assert_array_equal(w, expected)
