"""Uniform time grids shared by all engines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["TimeGrid"]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_i = i * dt, i = 0 .. n_t - 1."""

    dt: float
    n_t: int

    def __post_init__(self):
        if self.dt <= 0 or self.n_t < 2:
            raise ValueError(f"invalid grid dt={self.dt} n_t={self.n_t}")

    @staticmethod
    def from_t_max(dt: float, t_max: float) -> "TimeGrid":
        n_t = int(round(t_max / dt)) + 1
        return TimeGrid(dt=dt, n_t=n_t)

    @property
    def t_max(self) -> float:
        return (self.n_t - 1) * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_t) * self.dt

    def trapezoid_weights(self, n: int | None = None) -> np.ndarray:
        """Quadrature weights for integrating over the first ``n`` nodes."""
        if n is None:
            n = self.n_t
        w = np.full(n, self.dt)
        if n == 1:
            return np.zeros(1)
        w[0] = w[-1] = 0.5 * self.dt
        return w

    def index_of(self, t: float) -> int:
        i = int(round(t / self.dt))
        if not 0 <= i < self.n_t or abs(i * self.dt - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not a node of this grid")
        return i
