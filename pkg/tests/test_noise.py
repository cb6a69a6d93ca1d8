import numpy as np
import pytest

from nmqsd.grids import TimeGrid
from nmqsd.kernels import OrnsteinUhlenbeckKernel, kernel_gram
from nmqsd.noise import (
    NoisePath,
    noise_factor,
    sample_noise_path,
    sample_noise_paths,
)

GRID = TimeGrid.from_t_max(0.25, 5.0)
KERNEL = OrnsteinUhlenbeckKernel(0.4)


class TestFactor:
    def test_reproduces_gram(self):
        m = noise_factor(KERNEL, GRID)
        gram = kernel_gram(KERNEL, GRID)
        assert np.abs(m @ m.conj().T - gram).max() < 1e-10

    def test_lower_triangular(self):
        m = noise_factor(KERNEL, GRID)
        assert np.abs(np.triu(m, 1)).max() == 0.0

    def test_indefinite_kernel_reports_minor(self):
        class Bad:
            def eval(self, t, s):
                raise NotImplementedError

            def gram(self, grid):
                g = np.eye(grid.n_t, dtype=complex)
                g[2, 2] = -1.0
                return g

        from nmqsd.kernels import BathKernel

        bad = Bad()
        bad.__class__ = type("BadKernel", (Bad, BathKernel), {})
        with pytest.raises(np.linalg.LinAlgError, match="order 3"):
            noise_factor(bad, TimeGrid(0.1, 5))


class TestSampling:
    def test_path_shape_and_determinism(self):
        p1 = sample_noise_path(KERNEL, GRID, seed=7)
        p2 = sample_noise_path(KERNEL, GRID, seed=7)
        p3 = sample_noise_path(KERNEL, GRID, seed=8)
        assert p1.values.shape == (GRID.n_t,)
        assert np.array_equal(p1.values, p2.values)
        assert not np.array_equal(p1.values, p3.values)

    def test_batch_rows_depend_only_on_pair_seed(self):
        batch = sample_noise_paths(KERNEL, GRID, master_seed=3, n_paths=4)
        batch2 = sample_noise_paths(KERNEL, GRID, master_seed=3, n_paths=2)
        assert batch.shape == (4, GRID.n_t)
        # first rows agree regardless of how many paths were requested
        assert np.array_equal(batch[:2], batch2)

    def test_first_row_matches_single_path(self):
        batch = sample_noise_paths(KERNEL, GRID, master_seed=11, n_paths=1)
        single = sample_noise_path(KERNEL, GRID, seed=11)
        assert np.array_equal(batch[0], single.values)

    def test_covariance_converges_to_gram(self):
        n = 40_000
        z = sample_noise_paths(KERNEL, GRID, master_seed=0, n_paths=n)
        gram = kernel_gram(KERNEL, GRID)
        # stored values are z*, so mean[z*_t z_s] = mean[v_t conj(v_s)]
        cov = (z.T @ z.conj()) / n
        assert np.abs(cov - gram).max() < 6.0 / np.sqrt(n)

    def test_pseudo_covariance_vanishes(self):
        n = 40_000
        z = sample_noise_paths(KERNEL, GRID, master_seed=0, n_paths=n)
        pseudo = (z.T @ z) / n
        assert np.abs(pseudo).max() < 6.0 / np.sqrt(n)

    def test_zero_mean(self):
        n = 40_000
        z = sample_noise_paths(KERNEL, GRID, master_seed=5, n_paths=n)
        assert np.abs(z.mean(axis=0)).max() < 6.0 / np.sqrt(n)


class TestNoisePath:
    def test_rejects_wrong_shape(self):
        with pytest.raises(ValueError):
            NoisePath(GRID, np.zeros(3), seed=0)

    def test_rejects_non_finite(self):
        v = np.zeros(GRID.n_t, dtype=complex)
        v[4] = np.nan
        with pytest.raises(ValueError):
            NoisePath(GRID, v, seed=0)
