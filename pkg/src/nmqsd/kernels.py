"""Bath correlation kernels and their bath-mode discretizations.

The production kernel is the exponential (Ornstein-Uhlenbeck) one,
alpha(t, s) = (gamma / 2) exp(-gamma |t - s|), whose single rate gamma
interpolates between long-memory (small gamma) and Markovian (large gamma)
baths.  A tabulated kernel is supported for cross-checks, and any kernel can
be approximated by a finite set of bath modes sampled from its spectral
density for use by the finite-bath oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import TimeGrid

__all__ = [
    "BathKernel",
    "OrnsteinUhlenbeckKernel",
    "TabulatedKernel",
    "BathModeSet",
    "kernel_eval",
    "kernel_gram",
    "discretize_bath_modes",
]

_PSD_TOL = 1e-10


class BathKernel:
    """Two-time bath correlation alpha(t, s) with Hermitian symmetry."""

    def eval(self, t, s):
        raise NotImplementedError

    def gram(self, grid: TimeGrid) -> np.ndarray:
        """Matrix alpha(t_i, t_j) on the grid nodes."""
        times = grid.times
        return self.eval(times[:, None], times[None, :])


@dataclass(frozen=True)
class OrnsteinUhlenbeckKernel(BathKernel):
    gamma: float

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")

    def eval(self, t, s):
        return 0.5 * self.gamma * np.exp(-self.gamma * np.abs(np.asarray(t) - np.asarray(s))) + 0j

    def spectral_density(self, omega):
        """Lorentzian weight whose Fourier transform reproduces the kernel."""
        omega = np.asarray(omega, dtype=float)
        return self.gamma**2 / (2 * np.pi * (omega**2 + self.gamma**2))


class TabulatedKernel(BathKernel):
    """Kernel given by samples alpha(t_i, t_j) on a uniform grid.

    Off-grid queries are linearly interpolated in both arguments.  The sample
    matrix must be Hermitian and positive semidefinite within tolerance.
    """

    def __init__(self, grid: TimeGrid, table: np.ndarray):
        table = np.asarray(table, dtype=complex)
        if table.shape != (grid.n_t, grid.n_t):
            raise ValueError(f"table shape {table.shape} does not match grid")
        if np.abs(table - table.conj().T).max() > 1e-12:
            raise ValueError("kernel table is not Hermitian")
        w_min = float(np.linalg.eigvalsh(table).min())
        if w_min < -_PSD_TOL * max(1.0, np.abs(table).max()):
            raise ValueError(f"kernel table is not PSD (min eigenvalue {w_min:.3e})")
        self.grid = grid
        self.table = table

    def eval(self, t, s):
        t = np.asarray(t, dtype=float)
        s = np.asarray(s, dtype=float)
        tmax = self.grid.t_max
        if np.any(t < -1e-12) or np.any(s < -1e-12) or np.any(t > tmax + 1e-12) or np.any(s > tmax + 1e-12):
            raise ValueError("tabulated kernel queried outside its grid")

        def frac_index(x):
            xi = np.clip(x / self.grid.dt, 0, self.grid.n_t - 1)
            lo = np.minimum(xi.astype(int), self.grid.n_t - 2)
            return lo, xi - lo

        ti, tf = frac_index(t)
        si, sf = frac_index(s)
        ti, tf, si, sf = np.broadcast_arrays(ti, tf, si, sf)
        out = (
            self.table[ti, si] * (1 - tf) * (1 - sf)
            + self.table[ti + 1, si] * tf * (1 - sf)
            + self.table[ti, si + 1] * (1 - tf) * sf
            + self.table[ti + 1, si + 1] * tf * sf
        )
        return out


def kernel_eval(kernel: BathKernel, t, s):
    """alpha(t, s); symmetry alpha(s, t) = conj(alpha(t, s)) holds by class contract."""
    return kernel.eval(t, s)


def kernel_gram(kernel: BathKernel, grid: TimeGrid, check_psd: bool = True) -> np.ndarray:
    gram = kernel.gram(grid)
    if check_psd:
        w_min = float(np.linalg.eigvalsh(gram).min())
        if w_min < -_PSD_TOL * max(1.0, np.abs(gram).max()):
            raise ValueError(f"kernel Gram matrix not PSD (min eigenvalue {w_min:.3e})")
    return gram


@dataclass(frozen=True)
class BathModeSet:
    """Discrete modes (omega_k, g_k) approximating a kernel.

    reconstruction_error is the max deviation of sum_k |g_k|^2 e^{-i omega_k tau}
    from the target kernel over the lag grid it was fitted on.
    """

    frequencies: np.ndarray
    couplings: np.ndarray
    reconstruction_error: float

    @property
    def count(self) -> int:
        return self.frequencies.size

    def kernel_on_lags(self, lags: np.ndarray) -> np.ndarray:
        lags = np.asarray(lags, dtype=float)
        return np.sum(
            np.abs(self.couplings[:, None]) ** 2
            * np.exp(-1j * self.frequencies[:, None] * lags[None, :]),
            axis=0,
        )


def discretize_bath_modes(
    kernel: BathKernel,
    n_modes: int,
    omega_range: tuple[float, float] | None = None,
    lag_grid: TimeGrid | None = None,
    error_threshold: float = 0.05,
) -> BathModeSet:
    """Midpoint sampling of the kernel's spectral density.

    |g_k|^2 = J(omega_k) * d_omega on a uniform window.  The reconstructed
    kernel is compared against the target on ``lag_grid`` (default: lags up
    to 10 time units, matching the simulation horizons the modes are used
    for; a finite comb recurs at lag 2 pi / d_omega, so validating far past
    the horizon would reject usable mode sets) and the call fails if the max
    error exceeds ``error_threshold`` relative to alpha(0, 0).
    """
    if n_modes < 1:
        raise ValueError("need at least one bath mode")
    if not isinstance(kernel, OrnsteinUhlenbeckKernel):
        raise NotImplementedError("mode discretization implemented for the OU kernel")
    gamma = kernel.gamma
    if lag_grid is None:
        lag_grid = TimeGrid.from_t_max(min(0.05 / gamma, 0.1), 10.0)
    if omega_range is None:
        # wide enough to capture the Lorentzian tails, but narrow enough that
        # the comb recurrence 2 pi / d_omega stays beyond the validated lags
        half = min(40.0 * gamma, 0.8 * np.pi * n_modes / lag_grid.t_max)
        omega_range = (-half, half)
    lo, hi = omega_range
    if not hi > lo:
        raise ValueError(f"invalid frequency window {omega_range}")
    d_omega = (hi - lo) / n_modes
    omegas = lo + d_omega * (np.arange(n_modes) + 0.5)
    g_sq = kernel.spectral_density(omegas) * d_omega
    couplings = np.sqrt(g_sq)

    lags = lag_grid.times
    target = kernel.eval(lags, 0.0)
    recon = BathModeSet(omegas, couplings, 0.0).kernel_on_lags(lags)
    err = float(np.abs(recon - target).max())
    scale = float(np.abs(kernel.eval(0.0, 0.0)))
    if err > error_threshold * scale:
        raise ValueError(
            f"bath-mode reconstruction error {err:.3e} exceeds "
            f"{error_threshold:.1e} * alpha(0,0); widen the window or raise n_modes"
        )
    return BathModeSet(omegas, couplings, err)
