import numpy as np
import pytest

from nmqsd.grids import TimeGrid
from nmqsd.kernels import (
    BathModeSet,
    OrnsteinUhlenbeckKernel,
    TabulatedKernel,
    discretize_bath_modes,
    kernel_eval,
    kernel_gram,
)


class TestGrid:
    def test_times(self):
        g = TimeGrid.from_t_max(0.1, 1.0)
        assert g.n_t == 11
        assert np.isclose(g.t_max, 1.0)
        assert np.allclose(g.times[:3], [0.0, 0.1, 0.2])

    def test_trapezoid_weights(self):
        g = TimeGrid(0.5, 5)
        w = g.trapezoid_weights()
        assert np.isclose(w.sum(), g.t_max)
        # integrates quadratics with the expected error, linears exactly
        assert np.isclose((w * g.times).sum(), g.t_max**2 / 2)

    def test_index_of(self):
        g = TimeGrid(0.25, 9)
        assert g.index_of(0.5) == 2
        with pytest.raises(ValueError):
            g.index_of(0.3)

    def test_invalid(self):
        with pytest.raises(ValueError):
            TimeGrid(0.0, 10)


class TestOUKernel:
    def test_zero_lag(self):
        k = OrnsteinUhlenbeckKernel(0.4)
        assert np.isclose(kernel_eval(k, 1.3, 1.3), 0.2)

    def test_hermitian_symmetry(self):
        k = OrnsteinUhlenbeckKernel(0.7)
        assert np.isclose(kernel_eval(k, 2.0, 0.5), np.conj(kernel_eval(k, 0.5, 2.0)))

    def test_decay_value(self):
        k = OrnsteinUhlenbeckKernel(2.0)
        assert np.isclose(kernel_eval(k, 3.0, 2.0), np.exp(-2.0))

    def test_gram_psd(self):
        k = OrnsteinUhlenbeckKernel(0.4)
        g = kernel_gram(k, TimeGrid.from_t_max(0.05, 5.0))
        w = np.linalg.eigvalsh(g)
        assert w.min() >= -1e-10

    def test_rejects_bad_gamma(self):
        with pytest.raises(ValueError):
            OrnsteinUhlenbeckKernel(-1.0)


class TestTabulatedKernel:
    def test_matches_source_on_grid(self):
        grid = TimeGrid.from_t_max(0.1, 2.0)
        ou = OrnsteinUhlenbeckKernel(0.8)
        tab = TabulatedKernel(grid, ou.gram(grid))
        assert np.allclose(tab.gram(grid), ou.gram(grid))

    def test_interpolates_off_grid(self):
        grid = TimeGrid.from_t_max(0.05, 2.0)
        ou = OrnsteinUhlenbeckKernel(0.8)
        tab = TabulatedKernel(grid, ou.gram(grid))
        v = tab.eval(0.525, 0.275)
        assert abs(v - ou.eval(0.525, 0.275)) < 2e-4

    def test_rejects_off_domain(self):
        grid = TimeGrid.from_t_max(0.1, 1.0)
        tab = TabulatedKernel(grid, OrnsteinUhlenbeckKernel(1.0).gram(grid))
        with pytest.raises(ValueError):
            tab.eval(5.0, 0.0)

    def test_rejects_non_psd(self):
        grid = TimeGrid(0.1, 3)
        bad = np.array([[1.0, 0, 0], [0, -1.0, 0], [0, 0, 1.0]], dtype=complex)
        with pytest.raises(ValueError):
            TabulatedKernel(grid, bad)


class TestBathModes:
    def test_zero_lag_sum_rule(self):
        k = OrnsteinUhlenbeckKernel(0.4)
        modes = discretize_bath_modes(k, 128)
        assert abs(np.sum(np.abs(modes.couplings) ** 2) - 0.2) < 0.01

    def test_single_mode_never_decays(self):
        modes = BathModeSet(np.array([0.3]), np.array([1.0]), 0.0)
        lags = np.linspace(0, 20, 50)
        assert np.allclose(np.abs(modes.kernel_on_lags(lags)), 1.0)

    def test_error_decreases_with_mode_count(self):
        # coarse combs recur within the lag window, fine ones do not; the
        # error need not be monotone until the recurrence clears the window
        k = OrnsteinUhlenbeckKernel(0.4)
        lag_grid = TimeGrid.from_t_max(0.1, 10.0)
        errs = [
            discretize_bath_modes(k, n, lag_grid=lag_grid, error_threshold=np.inf).reconstruction_error
            for n in (8, 128)
        ]
        assert errs[1] < errs[0]
        assert errs[1] < 0.05 * 0.2

    def test_narrow_window_fails(self):
        k = OrnsteinUhlenbeckKernel(0.4)
        with pytest.raises(ValueError, match="reconstruction error"):
            discretize_bath_modes(k, 16, omega_range=(-0.2, 0.2))

    def test_reconstruction_accuracy(self):
        k = OrnsteinUhlenbeckKernel(0.4)
        lag_grid = TimeGrid.from_t_max(0.1, 10.0)
        modes = discretize_bath_modes(k, 512, omega_range=(-30, 30), lag_grid=lag_grid)
        lags = lag_grid.times
        target = k.eval(lags, 0.0)
        assert np.abs(modes.kernel_on_lags(lags) - target).max() < 5e-3
