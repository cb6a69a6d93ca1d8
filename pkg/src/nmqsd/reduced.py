"""Reduced field propagator for the exponential bath kernel.

The direct hierarchy stores the order-2 field on a (s, s1, s2) grid, which is
infeasible at fine time steps.  For the exponential kernel the master
equation never needs the raw order-2 field, only its kernel convolution over
the functional slot, and d/dt alpha(t, s) = -gamma * alpha(t, s) closes the
convolved field's evolution:

    d/dt Obar2(t, s1, s2) = -gamma Obar2 + [A, Obar2]
                            - (1/2)([L^+ Obar1(s1), Obar1(s2)] + (s1 <-> s2))
                            - [L^+ Obar2(s1, s2), Obar0],

with A = -iH - L^+ Obar0 and boundary Obar2(t, s1, t) = (1/2)[L, Obar1(t, s1)]
(the symmetric split of the order-2 boundary, convolved).  The order-0 and
order-1 fields keep their direct-grid equations; the state is therefore at
most two-dimensional in time history:

    depth 0 (one qubit):    O0(t, s)
    depth 1 (two qubits):   O0(t, s), Obar1(t, s1)
    depth 2 (three qubits): O0(t, s), O1(t, s, s1), Obar2(t, s1, s2)

Obar0 and (at depth 2) Obar1 are trapezoid quadratures of the stored fields,
matching the direct hierarchy's convolutions, which is what the coarse-grid
cross-validation tests compare against.
"""

from __future__ import annotations

import numpy as np

from .grids import TimeGrid
from .hierarchy import (
    MAX_DEPTH,
    CompSpace,
    FieldSnapshot,
    OrbitCompSpace,
    _bilinear_tensor,
)
from .kernels import OrnsteinUhlenbeckKernel
from .operators import (
    QubitSystemSpec,
    build_lindblad_operator,
    build_system_hamiltonian,
    permutation_automorphisms,
)

__all__ = ["ReducedHierarchy"]


class ReducedHierarchy:
    """Convolved-field propagation specialized to the exponential kernel."""

    def __init__(
        self,
        spec: QubitSystemSpec,
        grid: TimeGrid,
        kernel: OrnsteinUhlenbeckKernel,
        depth: int | None = None,
        symmetry: str = "auto",
    ):
        if not isinstance(kernel, OrnsteinUhlenbeckKernel):
            raise TypeError(
                "the reduced propagator requires the exponential kernel; "
                "use the direct hierarchy for other kernels"
            )
        if depth is None:
            depth = min(spec.n_qubits - 1, MAX_DEPTH)
        if not 0 <= depth <= MAX_DEPTH:
            raise ValueError(f"depth {depth} outside supported range 0..{MAX_DEPTH}")
        self.spec = spec
        self.grid = grid
        self.kernel = kernel
        self.gamma = kernel.gamma
        self.depth = depth
        self.n_qubits = spec.n_qubits
        self.dim = spec.dim

        self.h_sys = build_system_hamiltonian(spec).matrix
        self.lower = build_lindblad_operator(spec).matrix
        self.lower_dag = self.lower.conj().T.copy()

        if symmetry not in ("auto", "none"):
            raise ValueError(f"unknown symmetry mode {symmetry!r}")
        n = spec.n_qubits
        perms = permutation_automorphisms(spec) if symmetry == "auto" else []
        if len(perms) > 1:
            self.spaces = [OrbitCompSpace(n, k + 1, perms) for k in range(depth + 1)]
        else:
            self.spaces = [CompSpace(n, k + 1) for k in range(depth + 1)]
        s = self.spaces
        ld = self.lower_dag
        ell = self.lower
        self._lmul_ldag = [
            s[k + 1].lin_map_to(lambda x: ld @ x, s[k]) for k in range(depth)
        ]
        self._bc_comm = [
            s[k].lin_map_to(lambda x: ell @ x - x @ ell, s[k + 1]) for k in range(depth)
        ]
        self._bil = {}
        if depth >= 1:
            self._bil[(1, 0)] = _bilinear_tensor(
                lambda a, b: (ld @ a) @ b - b @ (ld @ a), s[1], s[0], s[1]
            )
        if depth >= 2:
            self._bil[(1, 1)] = _bilinear_tensor(
                lambda a, b: (ld @ a) @ b - b @ (ld @ a), s[1], s[1], s[2]
            )
            self._bil[(2, 0)] = _bilinear_tensor(
                lambda a, b: (ld @ a) @ b - b @ (ld @ a), s[2], s[0], s[2]
            )

        n_t = grid.n_t
        self.o0 = np.zeros((n_t, s[0].size), dtype=complex)
        self.ob1 = np.zeros((n_t, s[1].size), dtype=complex) if depth == 1 else None
        self.o1 = (
            np.zeros((n_t, n_t, s[1].size), dtype=complex) if depth == 2 else None
        )
        self.ob2 = (
            np.zeros((n_t, n_t, s[2].size), dtype=complex) if depth == 2 else None
        )

        self._ell_comps = s[0].to_comps(ell)
        self.it = 0
        self.o0[0] = self._ell_comps
        # boundary values involving zero-width convolutions all vanish at t=0

        # persistent predictor buffers; only the active region is ever
        # written or read, so stale data outside it is harmless
        self._pred = {key: np.zeros_like(arr) for key, arr in self._state().items()}

    # -- helpers -------------------------------------------------------------

    @property
    def t(self) -> float:
        return self.it * self.grid.dt

    def _alpha_weights(self, it: int) -> np.ndarray:
        m = it + 1
        w = self.grid.trapezoid_weights(m)
        return self.kernel.eval(it * self.grid.dt, self.grid.times[:m]) * w

    def _state(self):
        out = {"o0": self.o0}
        if self.depth == 1:
            out["ob1"] = self.ob1
        if self.depth == 2:
            out["o1"] = self.o1
            out["ob2"] = self.ob2
        return out

    def _obar0(self, state, it):
        return self._alpha_weights(it) @ state["o0"][: it + 1]

    def _g1(self, state, it):
        """Obar1(t, s1) on nodes 0..it (None at depth 0)."""
        m = it + 1
        if self.depth == 0:
            return None
        if self.depth == 1:
            return state["ob1"][:m]
        return np.tensordot(self._alpha_weights(it), state["o1"][:m, :m], axes=(0, 0))

    # -- evolution -----------------------------------------------------------

    def _rhs(self, state, it):
        m = it + 1
        s = self.spaces
        ob0 = self._obar0(state, it)
        g1 = self._g1(state, it)
        a_op = -1j * self.h_sys - self.lower_dag @ s[0].from_comps(ob0)
        comm = [s[k].lin_map(lambda x: a_op @ x - x @ a_op) for k in range(self.depth + 1)]

        out = {}
        o0 = state["o0"][:m]
        d_o0 = o0 @ comm[0].T
        if self.depth >= 1:
            d_o0 = d_o0 - g1 @ self._lmul_ldag[0].T
        out["o0"] = d_o0

        if self.depth == 1:
            d_ob1 = -self.gamma * g1 + g1 @ comm[1].T
            d_ob1 = d_ob1 - np.einsum(
                "aij,xi,j->xa", self._bil[(1, 0)], g1, ob0, optimize=True
            )
            out["ob1"] = d_ob1

        if self.depth == 2:
            o1 = state["o1"][:m, :m]
            ob2 = state["ob2"][:m, :m, 0]
            m2 = s[1].size

            # [A, O1]
            d_o1 = o1 @ comm[1].T
            # [L^+ Obar1(s1), O0(s)]: contract the bilinear tensor with g1
            # first, then one gemm over the o0 axis
            c_mix = np.tensordot(g1, self._bil[(1, 0)], axes=(1, 1))  # (x, a, j)
            mix = o0 @ c_mix.reshape(m * m2, -1).T  # (s, x*a)
            d_o1 -= mix.reshape(m, m, m2)
            # L^+ (Obar2(s, s1) + Obar2(s1, s)): scalar order-2 component
            sym2 = ob2 + ob2.T
            lvec = self._lmul_ldag[1][:, 0]
            for a in range(m2):
                d_o1[:, :, a] -= lvec[a] * sym2
            out["o1"] = d_o1

            # order-2 component space is one-dimensional: [A, .] and
            # [L^+ ., Obar0] act as scalars on it
            scale = comm[2][0, 0] - self.gamma - self._bil[(2, 0)][0, 0] @ ob0
            d_ob2 = scale * ob2
            gb = g1 @ self._bil[(1, 1)][0]  # (x, j)
            cross = gb @ g1.T  # [L^+ Obar1(x), Obar1(y)] component
            d_ob2 -= 0.5 * (cross + cross.T)
            out["ob2"] = d_ob2[:, :, None]
        return out

    def _insert_boundary(self, state, i):
        state["o0"][i] = self._ell_comps
        if self.depth == 1:
            ob0 = self._obar0(state, i)
            state["ob1"][i] = ob0 @ self._bc_comm[0].T
        if self.depth == 2:
            state["o1"][i, : i + 1] = 0.0
            state["o1"][: i + 1, i] = state["o0"][: i + 1] @ self._bc_comm[0].T
            g1 = self._g1(state, i)
            bc = 0.5 * (g1 @ self._bc_comm[1].T)
            state["ob2"][i, : i + 1] = bc
            state["ob2"][: i + 1, i] = bc

    def step(self) -> None:
        it = self.it
        if it + 1 >= self.grid.n_t:
            raise ValueError("grid exhausted")
        m = it + 1
        dt = self.grid.dt
        state = self._state()

        k1 = self._rhs(state, it)
        pred = self._pred
        for key, d in k1.items():
            region = tuple([slice(0, m)] * (pred[key].ndim - 1))
            pred[key][region] = state[key][region] + dt * d
        self._insert_boundary(pred, it + 1)
        k2 = self._rhs(pred, it + 1)

        for key, d in k1.items():
            region = tuple([slice(0, m)] * (state[key].ndim - 1))
            incr = k2[key][region]
            incr += d
            incr *= 0.5 * dt
            state[key][region] += incr
        self._insert_boundary(state, it + 1)
        self.it = it + 1

        if not np.all(np.isfinite(self.o0[self.it])):
            raise FloatingPointError(f"non-finite reduced fields at t index {self.it}")

    def propagate_to(self, t_index: int) -> None:
        while self.it < t_index:
            self.step()

    # -- exports -------------------------------------------------------------

    def field_snapshot(self) -> FieldSnapshot:
        m = self.it + 1
        state = self._state()
        return FieldSnapshot(
            spec=self.spec,
            grid=self.grid,
            t_index=self.it,
            spaces=tuple(self.spaces),
            lower=self.lower,
            h_sys=self.h_sys,
            o0=self.o0[:m],
            obar0=self._obar0(state, self.it),
            obar1=self._g1(state, self.it),
            o1=self.o1[:m, :m] if self.depth == 2 else None,
            obar2=self.ob2[:m, :m] if self.depth == 2 else None,
        )
