import numpy as np
import pytest
from hypothesis import given, strategies as st

from enkfbench.grid import (
    FieldStats, Grid2D, LogPermField, build_covariance, covariance_factor, read_field_binary,
    read_field_csv, sample_field, sample_fields, spherical_correlation, write_field_binary,
    write_field_csv,
)


def _spherical_scalar(d, a):
    # independent evaluation of the textbook spherical model
    if d >= a:
        return 0.0
    u = d / a
    return 1.0 - (3.0 * u - u * u * u) / 2.0


class TestGrid:
    def test_centers_and_index(self):
        g = Grid2D(3, 2, 2.0, 5.0)
        np.testing.assert_allclose(g.centers()[g.index(2, 1)], [5.0, 7.5])
        assert g.n_cells == 6 and g.shape == (2, 3)

    def test_cell_of_tracer_observers(self):
        g = Grid2D(31, 31, 2.0, 2.0)
        assert g.cell_of(19.0, 31.0) == g.index(9, 15)
        assert g.cell_of(43.0, 31.0) == g.index(21, 15)

    @pytest.mark.parametrize("args", [(1, 5, 1.0, 1.0), (5, 5, 0.0, 1.0), (5, 5, 1.0, -2.0)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            Grid2D(*args)

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            Grid2D(3, 3, 1, 1).index(3, 0)


class TestSpherical:
    def test_examples(self):
        assert spherical_correlation(0.0, 50.0) == 1.0
        assert spherical_correlation(50.0, 50.0) == 0.0
        assert spherical_correlation(25.0, 50.0) == pytest.approx(_spherical_scalar(25.0, 50.0), abs=1e-15)
        assert spherical_correlation(25.0, 50.0) == pytest.approx(0.3125, abs=1e-15)

    def test_quadratic_flag(self):
        # printed bracket expands to 1 - 1.5u + 0.5u^2
        assert spherical_correlation(25.0, 50.0, quadratic=True) == pytest.approx(1 - 0.75 + 0.125)

    @given(st.floats(0, 500), st.floats(0.1, 200))
    def test_matches_scalar_oracle(self, d, a):
        assert spherical_correlation(d, a) == pytest.approx(_spherical_scalar(d, a), abs=1e-12)

    def test_non_increasing_and_continuous(self):
        d = np.linspace(0, 120, 100_001)
        rho = spherical_correlation(d, 50.0)
        assert np.all(np.diff(rho) <= 1e-15)
        assert np.max(np.abs(np.diff(rho))) < 1e-3
        assert np.all(rho[d >= 50.0] == 0.0)

    @pytest.mark.parametrize("d,a", [(-1.0, 5.0), (np.nan, 5.0), (1.0, 0.0), (1.0, np.inf)])
    def test_invalid(self, d, a):
        with pytest.raises(ValueError):
            spherical_correlation(d, a)


class TestCovariance:
    def test_two_cell_examples(self):
        cov = build_covariance(Grid2D(2, 2, 50.0, 1000.0), FieldStats(0, 0.5, 50.0))
        np.testing.assert_allclose(cov[:2, :2], [[0.25, 0.0], [0.0, 0.25]], atol=1e-15)
        cov = build_covariance(Grid2D(2, 2, 25.0, 1000.0), FieldStats(0, 0.5, 50.0))
        assert cov[0, 1] == pytest.approx(0.078125, abs=1e-15)

    def test_zero_stddev(self):
        g = Grid2D(4, 3, 1.0, 1.0)
        assert np.all(build_covariance(g, FieldStats(-12, 0.0, 5.0)) == 0)
        f = sample_field(g, FieldStats(-12, 0.0, 5.0), seed=3)
        assert np.all(f.values == -12.0)

    def test_symmetric_and_factorizable(self):
        g = Grid2D(12, 12, 2.0, 2.0)
        stats = FieldStats(0, 0.5, 10.0)
        cov = build_covariance(g, stats)
        assert np.array_equal(cov, cov.T)
        L = covariance_factor(g, stats)
        np.testing.assert_allclose(L @ L.T, cov + 1e-10 * 0.25 * np.eye(g.n_cells), atol=1e-12)

    def test_factor_is_read_only(self):
        L = covariance_factor(Grid2D(3, 3, 1, 1), FieldStats(0, 1.0, 2.0))
        with pytest.raises(ValueError):
            L[0, 0] = 1.0


class TestSampling:
    def test_reproducible(self):
        g = Grid2D(10, 8, 2.0, 2.0)
        stats = FieldStats(-12.5, 0.5, 20.0)
        a = sample_field(g, stats, 11).values
        b = sample_field(g, stats, 11).values
        assert np.array_equal(a, b)
        assert not np.array_equal(a, sample_field(g, stats, 12).values)

    def test_member_independent_of_batch(self):
        g = Grid2D(6, 6, 2.0, 2.0)
        stats = FieldStats(0, 1.0, 6.0)
        all_ = sample_fields(g, stats, 5, range(10))
        np.testing.assert_array_equal(all_[7], sample_fields(g, stats, 5, [7])[0])

    def test_ensemble_statistics(self):
        # 10 000 realizations: per-cell mean and stddev within 3 standard errors
        g = Grid2D(6, 6, 12.5, 12.5)
        stats = FieldStats(-12.0, 0.5, 50.0)
        n = 10_000
        x = sample_fields(g, stats, 1, range(n))
        se_mean = stats.stddev / np.sqrt(n)
        se_std = stats.stddev / np.sqrt(2 * (n - 1))
        assert np.all(np.abs(x.mean(axis=0) - stats.mean) < 3 * se_mean * 1.34)  # Bonferroni-ish slack over 36 cells
        assert np.all(np.abs(x.std(axis=0, ddof=1) - stats.stddev) < 4 * se_std)
        assert abs(x[:, 0].mean() - stats.mean) < 3 * stats.stddev / 100

    def test_variogram_at_25m(self):
        g = Grid2D(6, 6, 12.5, 12.5)
        stats = FieldStats(0.0, 0.5, 50.0)
        x = sample_fields(g, stats, 2, range(10_000))
        # pairs two cells apart along x: lag 25 m
        grid_vals = x.reshape(-1, 6, 6)
        gamma = 0.5 * np.mean((grid_vals[:, :, 2:] - grid_vals[:, :, :-2]) ** 2)
        expected = 0.25 * (1 - _spherical_scalar(25.0, 50.0))
        assert gamma == pytest.approx(expected, rel=0.05)


class TestFieldIO:
    def test_csv_round_trip(self, tmp_path):
        g = Grid2D(5, 4, 2.0, 3.0)
        f = sample_field(g, FieldStats(-12, 0.5, 5.0), 0)
        write_field_csv(f, tmp_path / "f.csv")
        back = read_field_csv(tmp_path / "f.csv", g)
        assert np.array_equal(back.values, f.values)
        header = (tmp_path / "f.csv").read_text().splitlines()[0]
        assert header == "cell,x,y,log10K"

    def test_binary_round_trip(self, tmp_path):
        g = Grid2D(5, 4, 2.0, 3.0)
        f = sample_field(g, FieldStats(-12, 0.5, 5.0), 0)
        write_field_binary(f, tmp_path / "f.npz")
        back = read_field_binary(tmp_path / "f.npz")
        assert back.grid == g and np.array_equal(back.values, f.values)

    def test_field_validation(self):
        g = Grid2D(2, 2, 1, 1)
        with pytest.raises(ValueError):
            LogPermField(g, np.zeros(3))
        with pytest.raises(ValueError):
            LogPermField(g, np.array([0, 0, np.nan, 0]))
        np.testing.assert_allclose(LogPermField(g, np.full(4, -12.0)).permeability, 1e-12)
