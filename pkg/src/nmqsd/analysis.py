"""Entanglement and distance measures plus the single-qubit benchmark."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .grids import TimeGrid
from .operators import DensityMatrix, partial_trace

__all__ = [
    "ConcurrenceSeries",
    "concurrence",
    "pairwise_concurrence_series",
    "trace_distance",
    "single_qubit_benchmark",
]

_SY_SY = np.array(
    [
        [0, 0, 0, -1],
        [0, 0, 1, 0],
        [0, 1, 0, 0],
        [-1, 0, 0, 0],
    ],
    dtype=complex,
)

_EIG_CLAMP = -1e-12


@dataclass(frozen=True)
class ConcurrenceSeries:
    """Concurrence of one qubit pair over time; values clamped to [0, 1]."""

    pair: tuple[int, int]
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.times.shape != self.values.shape:
            raise ValueError("times and values must have matching shapes")
        if self.values.min() < -1e-9 or self.values.max() > 1 + 1e-9:
            raise ValueError("concurrence values outside [0, 1] beyond tolerance")


def _as_matrix(rho) -> np.ndarray:
    return rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho, dtype=complex)


def concurrence(rho2) -> float:
    """Wootters concurrence of a two-qubit density matrix."""
    m = _as_matrix(rho2)
    if m.shape != (4, 4):
        raise ValueError(f"expected a 4x4 two-qubit density matrix, got {m.shape}")
    if np.abs(m - m.conj().T).max() > 1e-8:
        raise ValueError("density matrix is not Hermitian within tolerance")
    m_tilde = _SY_SY @ m.conj() @ _SY_SY
    lam = np.linalg.eigvals(m @ m_tilde)
    lam = np.real(lam)
    lam[(lam < 0) & (lam > _EIG_CLAMP * max(1.0, np.abs(lam).max()))] = 0.0
    lam = np.clip(lam, 0.0, None)
    roots = np.sort(np.sqrt(lam))[::-1]
    return float(max(0.0, roots[0] - roots[1] - roots[2] - roots[3]))


def pairwise_concurrence_series(
    states: Sequence[np.ndarray] | np.ndarray,
    times: np.ndarray,
    pairs: Iterable[tuple[int, int]] = ((1, 2), (1, 3), (2, 3)),
) -> list[ConcurrenceSeries]:
    """Partial-trace each state to every pair, then concurrence per node."""
    times = np.asarray(times, dtype=float)
    out = []
    for pair in pairs:
        vals = np.empty(len(times))
        for i, rho in enumerate(states):
            rho2 = partial_trace(_as_matrix(rho), pair)
            vals[i] = concurrence(rho2)
        out.append(
            ConcurrenceSeries(pair=tuple(pair), times=times, values=np.clip(vals, 0.0, 1.0))
        )
    return out


def trace_distance(rho_a, rho_b) -> float:
    """(1/2) trace norm of the difference."""
    a = _as_matrix(rho_a)
    b = _as_matrix(rho_b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    diff = 0.5 * (diff + diff.conj().T)
    return float(0.5 * np.abs(np.linalg.eigvalsh(diff)).sum())


def single_qubit_benchmark(
    gamma: float,
    omega: float,
    grid: TimeGrid,
    kappa: float = 1.0,
    rho_11_0: float = 1.0,
) -> np.ndarray:
    """Excited population of one qubit from the scalar memory ODE.

    The exponential kernel turns the memory integral into an auxiliary
    variable u(t) = int_0^t alpha(t,s) f(s) ds, giving the closed linear
    system f' = -i omega f - kappa^2 u, u' = (gamma/2) f - gamma u with
    f(0) = 1, u(0) = 0.  Returns rho_11(t) = rho_11(0) |f(t)|^2.
    """
    if kappa == 0.0:
        return np.full(grid.n_t, rho_11_0)

    def rhs(t, y):
        f = y[0] + 1j * y[1]
        u = y[2] + 1j * y[3]
        df = -1j * omega * f - kappa**2 * u
        du = 0.5 * gamma * f - gamma * u
        return [df.real, df.imag, du.real, du.imag]

    sol = solve_ivp(
        rhs,
        (0.0, grid.t_max),
        [1.0, 0.0, 0.0, 0.0],
        t_eval=grid.times,
        rtol=1e-11,
        atol=1e-13,
        method="DOP853",
    )
    if not sol.success:
        raise RuntimeError(f"benchmark ODE solve failed: {sol.message}")
    f_t = sol.y[0] + 1j * sol.y[1]
    return rho_11_0 * np.abs(f_t) ** 2
