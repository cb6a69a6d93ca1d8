"""Discretized complex Gaussian noise paths driving the trajectory engine.

A path holds the conjugated process values z*_{t_i} on the grid nodes.  The
ensemble statistics are: zero mean, zero pseudo-covariance (exact by
construction), and covariance  mean[z*_t z_s] = alpha(t, s)  reproduced
exactly on the grid through a Cholesky factor of the kernel Gram matrix.

Trajectory b draws its standard normals from an rng seeded with the pair
(master_seed, b), so ensembles are reproducible and independent of how the
work is scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import TimeGrid
from .kernels import BathKernel, kernel_gram

__all__ = [
    "NoisePath",
    "noise_factor",
    "sample_noise_path",
    "sample_noise_paths",
    "verify_novikov",
    "NovikovReport",
]

_REGULARIZATION = 1e-12


@dataclass(frozen=True)
class NoisePath:
    grid: TimeGrid
    values: np.ndarray  # z*_{t_i}
    seed: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        if v.shape != (self.grid.n_t,):
            raise ValueError(f"values shape {v.shape} does not match grid")
        if not np.all(np.isfinite(v)):
            raise ValueError("noise path contains non-finite values")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


def noise_factor(kernel: BathKernel, grid: TimeGrid) -> np.ndarray:
    """Lower-triangular factor M with M M^dagger = Gram matrix.

    Regularizes the diagonal once by 1e-12 * max diagonal if the plain
    factorization fails; a second failure is reported with the offending
    leading minor.
    """
    gram = kernel_gram(kernel, grid, check_psd=False)
    try:
        return np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        pass
    bump = _REGULARIZATION * float(np.real(np.diag(gram)).max())
    regularized = gram + bump * np.eye(grid.n_t)
    try:
        return np.linalg.cholesky(regularized)
    except np.linalg.LinAlgError:
        # locate the first failing leading minor for the error message
        order = grid.n_t
        for k in range(1, grid.n_t + 1):
            try:
                np.linalg.cholesky(regularized[:k, :k])
            except np.linalg.LinAlgError:
                order = k
                break
        raise np.linalg.LinAlgError(
            f"kernel Gram matrix is not positive definite even after adding "
            f"{bump:.3e} to the diagonal; leading minor of order {order} fails"
        )


def _standard_complex_normals(master_seed: int, traj_index: int, n: int) -> np.ndarray:
    rng = np.random.default_rng([master_seed, traj_index])
    xy = rng.standard_normal((2, n))
    return (xy[0] + 1j * xy[1]) / np.sqrt(2.0)


def sample_noise_path(
    kernel: BathKernel, grid: TimeGrid, seed: int, factor: np.ndarray | None = None
) -> NoisePath:
    if factor is None:
        factor = noise_factor(kernel, grid)
    xi = _standard_complex_normals(seed, 0, grid.n_t)
    return NoisePath(grid=grid, values=factor @ xi, seed=seed)


def sample_noise_paths(
    kernel: BathKernel, grid: TimeGrid, master_seed: int, n_paths: int
) -> np.ndarray:
    """(n_paths, n_t) matrix of z* values; row b depends only on (master_seed, b)."""
    factor = noise_factor(kernel, grid)
    out = np.empty((n_paths, grid.n_t), dtype=complex)
    for b in range(n_paths):
        out[b] = factor @ _standard_complex_normals(master_seed, b, grid.n_t)
    return out


@dataclass(frozen=True)
class NovikovReport:
    """Residual of the Gaussian integration-by-parts identity.

    residual_max: max entry of | mean_b X_b | where X_b is the per-trajectory
    difference between the noise-weighted projector and the kernel-weighted
    response average.  standard_error_max: matching Monte-Carlo standard
    error; sigma_level = residual in units of its standard error.
    """

    residual_max: float
    standard_error_max: float
    sigma_level: float
    n_trajectories: int

    @property
    def consistent_with_zero(self) -> bool:
        return self.sigma_level <= 5.0


def verify_novikov(
    noise_values: np.ndarray,
    trajectories: np.ndarray,
    hierarchy,
    kernel: BathKernel,
    s: float,
    t: float,
) -> NovikovReport:
    """Check  mean[z_s P_t] = int_0^t ds' alpha(s, s') mean[O(t, s') P_t].

    ``noise_values``: (B, n_t) z* paths on the hierarchy grid;
    ``trajectories``: (B, dim) states at time t; ``hierarchy``: a propagated
    ResponseHierarchy whose current time covers t.
    """
    grid: TimeGrid = hierarchy.grid
    i_t = grid.index_of(t)
    i_s = grid.index_of(s)
    if i_s > i_t:
        raise ValueError("need s <= t")
    if noise_values.shape[1] != grid.n_t:
        raise ValueError("noise paths are not on the hierarchy grid")
    n_b, dim = trajectories.shape
    n_s = i_t + 1

    z_conj = noise_values[:, : grid.n_t]
    psi = trajectories
    # per-trajectory difference, accumulated in chunks to bound memory
    weights = grid.trapezoid_weights(n_s)
    alpha_row = kernel.eval(grid.times[i_s], grid.times[:n_s]) * weights

    diff_sum = np.zeros((dim, dim), dtype=complex)
    diff_sq_sum = np.zeros((dim, dim))
    chunk = max(1, 2_000_000 // max(1, n_s * dim * dim))
    for b0 in range(0, n_b, chunk):
        zb = z_conj[b0 : b0 + chunk]
        pb = psi[b0 : b0 + chunk]
        # response operator applied per trajectory, contracted against alpha
        resp = hierarchy.response_apply(i_t, zb, pb, alpha_row)
        proj = np.einsum("bp,bq->bpq", pb, pb.conj())
        lhs = np.conj(zb[:, i_s])[:, None, None] * proj
        d = lhs - resp
        diff_sum += d.sum(axis=0)
        diff_sq_sum += (np.abs(d) ** 2).sum(axis=0)

    mean = diff_sum / n_b
    var = diff_sq_sum / n_b - np.abs(mean) ** 2
    se = np.sqrt(np.maximum(var, 0.0) / n_b)
    residual_max = float(np.abs(mean).max())
    idx = np.unravel_index(np.argmax(np.abs(mean)), mean.shape)
    se_at_max = float(se[idx])
    se_max = float(se.max())
    sigma = residual_max / se_at_max if se_at_max > 0 else (0.0 if residual_max == 0 else np.inf)
    return NovikovReport(
        residual_max=residual_max,
        standard_error_max=se_max,
        sigma_level=sigma,
        n_trajectories=n_b,
    )
