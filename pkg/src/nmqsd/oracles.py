"""Independent ground-truth engines.

Two oracles with deliberately different numerics:

* Pseudomode embedding: system + one damped bosonic mode under a Markovian
  Lindblad equation.  Eliminating the mode reproduces the exponential kernel
  exactly, so up to Fock truncation this is an exact reference for the
  exponential bath.  Truncation is detected by re-running at cutoff + 1.

* Finite-bath unitary engine: the microscopic system + K discrete modes
  evolved unitarily in the excitation-restricted joint basis.  Kernel
  agnostic (any mode set), conserves total excitation exactly, and shares no
  master-equation machinery with the engine under test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np
from scipy.linalg import expm
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import expm_multiply

from .grids import TimeGrid
from .kernels import BathModeSet
from .operators import (
    DensityMatrix,
    QubitSystemSpec,
    build_lindblad_operator,
    build_system_hamiltonian,
    excitations,
)

__all__ = [
    "PseudomodeConfig",
    "FiniteBathConfig",
    "OracleResult",
    "pseudomode_evolve",
    "pseudomode_mode_correlation",
    "finite_bath_evolve",
    "restricted_basis_dimension",
]


@dataclass(frozen=True)
class PseudomodeConfig:
    """One damped mode whose free correlation is coupling^2 e^{-decay|tau|}.

    ``mode_decay`` is the decay rate of the mode *correlation function*; the
    Lindblad damping rate applied to the mode is 2 * mode_decay.
    """

    fock_cutoff: int
    coupling: float
    mode_decay: float
    mode_frequency: float = 0.0

    def __post_init__(self):
        if self.fock_cutoff < 1:
            raise ValueError("fock_cutoff must be at least 1")
        if self.coupling < 0 or self.mode_decay <= 0:
            raise ValueError("invalid pseudomode parameters")

    @staticmethod
    def for_ou(gamma: float, n_qubits: int, fock_cutoff: int = 5) -> "PseudomodeConfig":
        if fock_cutoff < n_qubits + 1:
            raise ValueError(f"fock_cutoff must be >= {n_qubits + 1} for {n_qubits} qubits")
        return PseudomodeConfig(
            fock_cutoff=fock_cutoff,
            coupling=math.sqrt(0.5 * gamma),
            mode_decay=gamma,
            mode_frequency=0.0,
        )

    def check_matches_ou(self, gamma: float) -> None:
        if (
            abs(self.coupling**2 - 0.5 * gamma) > 1e-12 * max(1.0, gamma)
            or abs(self.mode_decay - gamma) > 1e-12 * max(1.0, gamma)
            or self.mode_frequency != 0.0
        ):
            raise ValueError("pseudomode parameters do not embed the exponential kernel")


@dataclass(frozen=True)
class FiniteBathConfig:
    modes: BathModeSet
    excitation_cap: int
    memory_budget_mb: float = 1500.0


@dataclass(frozen=True)
class OracleResult:
    grid: TimeGrid
    states: np.ndarray  # (n_t, dim_sys, dim_sys)
    trace_drift_max: float
    hermiticity_defect_max: float
    min_eigenvalue: float
    truncation_error: float | None = None  # pseudomode: cutoff vs cutoff+1
    excitation_drift: float | None = None  # finite bath: conservation defect
    joint_dimension: int | None = None

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


# -- pseudomode --------------------------------------------------------------


def _vec_super_sparse(a: np.ndarray, b: np.ndarray):
    return csr_matrix(np.kron(a, b.T))


def _pseudomode_states(
    spec: QubitSystemSpec, cfg: PseudomodeConfig, rho0: np.ndarray, grid: TimeGrid
) -> np.ndarray:
    """Joint evolution, reduced to the system at every node."""
    return _pseudomode_states_batch(spec, cfg, rho0[np.newaxis], grid)[0]


def _pseudomode_states_batch(
    spec: QubitSystemSpec, cfg: PseudomodeConfig, rho0s: np.ndarray, grid: TimeGrid
) -> np.ndarray:
    """Joint evolution for a batch of initial states sharing one Liouvillian.

    The propagation cost is dominated by the Krylov sweep over the (shared,
    time-independent) Liouvillian, so evolving all initial states as columns
    of one right-hand side is nearly as cheap as a single run.
    """
    n_m = cfg.fock_cutoff + 1
    dim_s = spec.dim
    dim = dim_s * n_m

    h_sys = build_system_hamiltonian(spec).matrix
    ell = build_lindblad_operator(spec).matrix
    a_m = np.diag(np.sqrt(np.arange(1, n_m)), 1).astype(complex)
    eye_s = np.eye(dim_s, dtype=complex)
    eye_m = np.eye(n_m, dtype=complex)

    h = np.kron(h_sys, eye_m)
    h += cfg.coupling * (np.kron(ell, a_m.conj().T) + np.kron(ell.conj().T, a_m))
    h += cfg.mode_frequency * np.kron(eye_s, a_m.conj().T @ a_m)
    a_j = np.kron(eye_s, a_m)
    eye = np.eye(dim, dtype=complex)

    rate = 2.0 * cfg.mode_decay
    liou = -1j * (np.kron(h, eye) - np.kron(eye, h.T))
    liou += rate * np.kron(a_j, a_j.conj())
    n_j = a_j.conj().T @ a_j
    liou -= 0.5 * rate * (np.kron(n_j, eye) + np.kron(eye, n_j.T))
    liou_sp = csr_matrix(liou)

    vac = np.outer(eye_m[0], eye_m[0])
    rhs = np.stack(
        [np.kron(np.asarray(r, dtype=complex), vac).reshape(-1) for r in rho0s],
        axis=1,
    )
    series = expm_multiply(
        liou_sp,
        rhs,
        start=0.0,
        stop=grid.t_max,
        num=grid.n_t,
        endpoint=True,
    )
    joint = series.reshape(grid.n_t, dim_s, n_m, dim_s, n_m, len(rho0s))
    return np.einsum("tambmk->ktab", joint)


def pseudomode_evolve(
    spec: QubitSystemSpec,
    gamma: float,
    rho0,
    grid: TimeGrid,
    cfg: PseudomodeConfig | None = None,
    check_cutoff: bool = True,
    truncation_tol: float = 1e-6,
) -> OracleResult:
    """Exact reference dynamics for the exponential kernel."""
    if cfg is None:
        cfg = PseudomodeConfig.for_ou(gamma, spec.n_qubits)
    cfg.check_matches_ou(gamma)
    rho_m = rho0.matrix if isinstance(rho0, DensityMatrix) else np.asarray(rho0, dtype=complex)

    states = _pseudomode_states(spec, cfg, rho_m, grid)
    trunc = None
    if check_cutoff:
        cfg_up = PseudomodeConfig(
            cfg.fock_cutoff + 1, cfg.coupling, cfg.mode_decay, cfg.mode_frequency
        )
        states_up = _pseudomode_states(spec, cfg_up, rho_m, grid)
        trunc = float(np.abs(states - states_up).max())
        if trunc > truncation_tol:
            raise ValueError(
                f"Fock-cutoff truncation error {trunc:.3e} exceeds {truncation_tol:.1e}; "
                f"raise fock_cutoff above {cfg.fock_cutoff}"
            )

    herm = float(np.abs(states - states.conj().transpose(0, 2, 1)).max())
    traces = np.real(np.einsum("tii->t", states))
    states = 0.5 * (states + states.conj().transpose(0, 2, 1))
    min_eig = float(np.linalg.eigvalsh(states).min())
    return OracleResult(
        grid=grid,
        states=states,
        trace_drift_max=float(np.abs(traces - 1.0).max()),
        hermiticity_defect_max=herm,
        min_eigenvalue=min_eig,
        truncation_error=trunc,
        joint_dimension=spec.dim * (cfg.fock_cutoff + 1),
    )


def pseudomode_evolve_batch(
    spec: QubitSystemSpec,
    gamma: float,
    rho0s,
    grid: TimeGrid,
    cfg: PseudomodeConfig | None = None,
) -> list[OracleResult]:
    """Evolve several initial states in one Krylov sweep (shared Liouvillian).

    Equivalent to calling :func:`pseudomode_evolve` per state (without the
    cutoff self-check) at roughly the cost of a single call.
    """
    if cfg is None:
        cfg = PseudomodeConfig.for_ou(gamma, spec.n_qubits)
    cfg.check_matches_ou(gamma)
    rho0s = np.asarray(
        [r.matrix if isinstance(r, DensityMatrix) else r for r in rho0s], dtype=complex
    )
    batch = _pseudomode_states_batch(spec, cfg, rho0s, grid)
    results = []
    for states in batch:
        herm = float(np.abs(states - states.conj().transpose(0, 2, 1)).max())
        traces = np.real(np.einsum("tii->t", states))
        states = 0.5 * (states + states.conj().transpose(0, 2, 1))
        results.append(
            OracleResult(
                grid=grid,
                states=states,
                trace_drift_max=float(np.abs(traces - 1.0).max()),
                hermiticity_defect_max=herm,
                min_eigenvalue=float(np.linalg.eigvalsh(states).min()),
                truncation_error=None,
                joint_dimension=spec.dim * (cfg.fock_cutoff + 1),
            )
        )
    return results


def pseudomode_mode_correlation(cfg: PseudomodeConfig, lags: np.ndarray) -> np.ndarray:
    """<a(tau) a^+(0)> of the free damped mode via quantum regression.

    Fixes the rate convention: must decay as e^{-mode_decay * tau}.
    """
    n_m = cfg.fock_cutoff + 1
    a_m = np.diag(np.sqrt(np.arange(1, n_m)), 1).astype(complex)
    n_op = a_m.conj().T @ a_m
    eye = np.eye(n_m, dtype=complex)
    rate = 2.0 * cfg.mode_decay
    h = cfg.mode_frequency * n_op
    liou = -1j * (np.kron(h, eye) - np.kron(eye, h.T))
    liou += rate * np.kron(a_m, a_m.conj())
    liou -= 0.5 * rate * (np.kron(n_op, eye) + np.kron(eye, n_op.T))

    vac = np.outer(eye[0], eye[0])
    x0 = (a_m.conj().T @ vac).reshape(-1)
    out = np.empty(lags.size, dtype=complex)
    for i, tau in enumerate(np.asarray(lags, dtype=float)):
        x_t = (expm(liou * tau) @ x0).reshape(n_m, n_m)
        out[i] = np.trace(a_m @ x_t)
    return out


# -- finite bath -------------------------------------------------------------


def _bath_occupations(n_modes: int, j: int) -> np.ndarray:
    """Sorted occupation tuples with exactly j quanta, lexicographic order."""
    if j == 0:
        return np.zeros((1, 0), dtype=np.int64)
    return np.array(list(combinations_with_replacement(range(n_modes), j)), dtype=np.int64)


def _keys(states: np.ndarray, n_modes: int) -> np.ndarray:
    """Unique integer key per sorted tuple (strictly increasing in lex order)."""
    key = np.zeros(states.shape[0], dtype=np.int64)
    for c in range(states.shape[1]):
        key = key * n_modes + states[:, c]
    return key


def restricted_basis_dimension(n_qubits: int, n_modes: int, cap: int) -> int:
    """Combinatorial count of system (x) bath states with total excitation <= cap."""
    sys_by_exc = [math.comb(n_qubits, m) for m in range(n_qubits + 1)]
    dim = 0
    for m, n_sys in enumerate(sys_by_exc):
        for j in range(cap - m + 1):
            dim += n_sys * math.comb(n_modes + j - 1, j)
    return dim


class _RestrictedBasis:
    """Joint basis {|s> (x) |occupations>} with total excitation <= cap."""

    def __init__(self, spec: QubitSystemSpec, n_modes: int, cap: int):
        self.spec = spec
        self.n_modes = n_modes
        self.cap = cap
        self.bath = [_bath_occupations(n_modes, j) for j in range(cap + 1)]
        self.bath_keys = [_keys(b, n_modes) for b in self.bath]
        self.bath_offsets = np.cumsum([0] + [b.shape[0] for b in self.bath])
        self.n_bath_total = int(self.bath_offsets[-1])

        sys_exc = excitations(spec.n_qubits)
        self.sys_exc = sys_exc
        # block layout: for each system state s, bath sectors j = 0..cap-e_s
        self.block_start = {}
        pos = 0
        for s in range(spec.dim):
            for j in range(cap - sys_exc[s] + 1):
                self.block_start[(s, j)] = pos
                pos += self.bath[j].shape[0]
        self.dim = pos

    def block(self, s: int, j: int) -> tuple[int, int]:
        start = self.block_start[(s, j)]
        return start, start + self.bath[j].shape[0]

    def flat_indices(self):
        """(system index, global bath index) per basis vector."""
        sys_idx = np.empty(self.dim, dtype=np.int64)
        bath_idx = np.empty(self.dim, dtype=np.int64)
        for (s, j), start in self.block_start.items():
            n = self.bath[j].shape[0]
            sys_idx[start : start + n] = s
            bath_idx[start : start + n] = self.bath_offsets[j] + np.arange(n)
        return sys_idx, bath_idx


def _bath_raising_edges(basis: _RestrictedBasis, j: int):
    """b_k^+ edges from bath sector j to j+1: (src, dst, amp) arrays."""
    src_states = basis.bath[j]
    n_src = src_states.shape[0]
    dst_keys = basis.bath_keys[j + 1]
    srcs, dsts, ks, amps = [], [], [], []
    for k in range(basis.n_modes):
        target = np.sort(
            np.concatenate(
                [src_states, np.full((n_src, 1), k, dtype=np.int64)], axis=1
            ),
            axis=1,
        )
        idx = np.searchsorted(dst_keys, _keys(target, basis.n_modes))
        occ = (src_states == k).sum(axis=1)
        srcs.append(np.arange(n_src))
        dsts.append(idx)
        ks.append(np.full(n_src, k))
        amps.append(np.sqrt(occ + 1.0))
    return (
        np.concatenate(srcs),
        np.concatenate(dsts),
        np.concatenate(ks),
        np.concatenate(amps),
    )


def _build_hamiltonian(spec: QubitSystemSpec, modes: BathModeSet, basis: _RestrictedBasis):
    h_sys = build_system_hamiltonian(spec).matrix
    ell = build_lindblad_operator(spec).matrix
    omegas = modes.frequencies
    g = modes.couplings
    rows, cols, vals = [], [], []

    # diagonal: system diagonal + bath energies
    diag = np.zeros(basis.dim)
    for (s, j), start in basis.block_start.items():
        bath_e = omegas[basis.bath[j]].sum(axis=1) if j else np.zeros(1)
        diag[start : start + basis.bath[j].shape[0]] = np.real(h_sys[s, s]) + bath_e
    rows.append(np.arange(basis.dim))
    cols.append(np.arange(basis.dim))
    vals.append(diag.astype(complex))

    # system off-diagonal terms (XY coupling), identity on the bath
    off = np.argwhere((np.abs(h_sys) > 0) & ~np.eye(spec.dim, dtype=bool))
    for s_r, s_c in off:
        if basis.sys_exc[s_r] != basis.sys_exc[s_c]:
            raise AssertionError("system Hamiltonian must conserve excitation")
        for j in range(basis.cap - basis.sys_exc[s_r] + 1):
            r0, _ = basis.block(s_r, j)
            c0, _ = basis.block(s_c, j)
            n = basis.bath[j].shape[0]
            rows.append(r0 + np.arange(n))
            cols.append(c0 + np.arange(n))
            vals.append(np.full(n, h_sys[s_r, s_c], dtype=complex))

    # interaction: L (x) sum_k g_k b_k^+  + h.c.
    edge_cache = {j: _bath_raising_edges(basis, j) for j in range(basis.cap)}
    l_elems = np.argwhere(np.abs(ell) > 0)
    for s_lo, s_hi in l_elems:  # <s_lo| L |s_hi> with e(s_hi) = e(s_lo) + 1
        lval = ell[s_lo, s_hi]
        for j in range(basis.cap - basis.sys_exc[s_hi] + 1):
            src_b, dst_b, k_idx, amp = edge_cache[j]
            r0, _ = basis.block(s_lo, j + 1)
            c0, _ = basis.block(s_hi, j)
            coup = lval * g[k_idx] * amp
            rows.append(r0 + dst_b)
            cols.append(c0 + src_b)
            vals.append(coup.astype(complex))
            rows.append(c0 + src_b)
            cols.append(r0 + dst_b)
            vals.append(np.conj(coup).astype(complex))

    h = csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(basis.dim, basis.dim),
    )
    return h


def _lanczos_expm(h, v: np.ndarray, dt: float, max_dim: int, tol: float) -> np.ndarray:
    """exp(-i dt H) v via a Lanczos subspace with full reorthogonalization."""
    norm0 = np.linalg.norm(v)
    if norm0 == 0:
        return v
    basis_vecs = [v / norm0]
    alphas, betas = [], []
    for m in range(max_dim):
        w = h @ basis_vecs[m]
        alpha = np.real(np.vdot(basis_vecs[m], w))
        w = w - alpha * basis_vecs[m]
        if m > 0:
            w = w - betas[-1] * basis_vecs[m - 1]
        # full reorthogonalization (cheap at these subspace sizes)
        for q in basis_vecs:
            w = w - np.vdot(q, w) * q
        alphas.append(alpha)
        beta = np.linalg.norm(w)
        t_mat = np.diag(alphas).astype(complex)
        if m > 0:
            off = np.array(betas)
            t_mat += np.diag(off, 1) + np.diag(off, -1)
        small = expm(-1j * dt * t_mat)
        # residual estimate: weight that would flow to the next basis vector
        err = abs(beta * dt * small[m, 0])
        if err < tol or beta < 1e-14:
            coeff = norm0 * small[:, 0]
            out = np.zeros_like(v)
            for c, q in zip(coeff, basis_vecs):
                out += c * q
            return out
        betas.append(beta)
        basis_vecs.append(w / beta)
    raise RuntimeError(
        f"Lanczos step did not converge to {tol:.1e} within {max_dim} vectors"
    )


def finite_bath_evolve(
    spec: QubitSystemSpec,
    modes: BathModeSet,
    psi0,
    grid: TimeGrid,
    cap: int,
    krylov_dim: int = 20,
    krylov_tol: float = 1e-10,
    memory_budget_mb: float = 1500.0,
) -> OracleResult:
    """Unitary system + K-mode evolution in the excitation-restricted basis.

    ``psi0`` is a system state vector (bath starts in vacuum); every system
    basis state it populates must have excitation <= cap.
    """
    psi_sys = np.asarray(psi0, dtype=complex)
    if psi_sys.shape != (spec.dim,):
        raise ValueError(f"psi0 must be a system state vector of length {spec.dim}")

    dim = restricted_basis_dimension(spec.n_qubits, modes.count, cap)
    est_mb = dim * 16 * (krylov_dim + 6) / 1e6
    if est_mb > memory_budget_mb:
        raise MemoryError(
            f"restricted basis dimension {dim} needs ~{est_mb:.0f} MB, "
            f"over the {memory_budget_mb:.0f} MB budget"
        )

    basis = _RestrictedBasis(spec, modes.count, cap)
    assert basis.dim == dim
    for s in range(spec.dim):
        if abs(psi_sys[s]) > 0 and basis.sys_exc[s] > cap:
            raise ValueError(
                f"initial state populates excitation {basis.sys_exc[s]} > cap {cap}"
            )

    h = _build_hamiltonian(spec, modes, basis)
    exc_diag = np.empty(dim)
    for (s, j), start in basis.block_start.items():
        exc_diag[start : start + basis.bath[j].shape[0]] = basis.sys_exc[s] + j

    psi = np.zeros(dim, dtype=complex)
    for s in range(spec.dim):
        if abs(psi_sys[s]) > 0:
            psi[basis.block(s, 0)[0]] = psi_sys[s]

    sys_idx, bath_idx = basis.flat_indices()
    scatter = np.zeros((spec.dim, basis.n_bath_total), dtype=complex)

    def reduced(p):
        scatter[:, :] = 0.0
        scatter[sys_idx, bath_idx] = p
        return scatter @ scatter.conj().T

    exc0 = float(np.real(np.vdot(psi, exc_diag * psi)))
    states = np.empty((grid.n_t, spec.dim, spec.dim), dtype=complex)
    states[0] = reduced(psi)
    exc_drift = 0.0
    for i in range(1, grid.n_t):
        psi = _lanczos_expm(h, psi, grid.dt, krylov_dim, krylov_tol)
        states[i] = reduced(psi)
        exc_drift = max(exc_drift, abs(float(np.real(np.vdot(psi, exc_diag * psi))) - exc0))

    herm = float(np.abs(states - states.conj().transpose(0, 2, 1)).max())
    traces = np.real(np.einsum("tii->t", states))
    states = 0.5 * (states + states.conj().transpose(0, 2, 1))
    min_eig = float(np.linalg.eigvalsh(states).min())
    return OracleResult(
        grid=grid,
        states=states,
        trace_drift_max=float(np.abs(traces - 1.0).max()),
        hermiticity_defect_max=herm,
        min_eigenvalue=min_eig,
        excitation_drift=exc_drift,
        joint_dimension=dim,
    )
