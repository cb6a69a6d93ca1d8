"""Assembly of R(t) from the response fields and master-equation propagation.

The exact master equation is

    d rho / dt = -i[H_s, rho] + [L, R(t)] - [L^+, R(t)^+],

with R(t) a sum of four terms built from the response fields.  Because every
term has the form (operator) rho (operator) with rho-independent factors,
each grid node reduces to a small vector of scalar coefficients multiplying
fixed operator pairs:

    (i)   rho Obar0(t)^+                      -> |grading 1| coefficients
    (ii)  O0(s2) rho [smoothed Obar1]^+(s2)   -> |g1| x |g2| coefficient table
    (iii) O1(s2,s3) rho O0til^+(s3) D^+(s2)   -> |grading 2| coefficients
    (iv)  [O0til O0til + O1til] rho Obar2^+   -> |grading 2| coefficients

(terms iii and iv multiply rho by a grading -3 operator on the right, which
is a scalar times the single grading-3 basis element).  One field
propagation therefore serves every initial state: the per-node tables are
computed once and rho is advanced through 64x64 (or smaller) superoperators
assembled from them.

All exponential-kernel smoothings use prefix recursions, so table emission
costs O(n_t) per node on the 1-D quantities and one O(n_t^2) pass on the
2-D fields.  A brute-force 4-D quadrature oracle checks the factorized
assembly on coarse grids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import TimeGrid
from .hierarchy import FieldSnapshot, _bilinear_tensor
from .kernels import BathKernel, OrnsteinUhlenbeckKernel
from .operators import (
    DensityMatrix,
    QubitSystemSpec,
    build_lindblad_operator,
    build_system_hamiltonian,
)
from .reduced import ReducedHierarchy

__all__ = [
    "RAssembly",
    "RTableSeries",
    "MasterResult",
    "assemble_R",
    "brute_force_R",
    "compute_r_tables",
    "propagate_rho",
    "propagate_master",
    "lindblad_propagate",
]

TRACE_TOL = 1e-8


# -- kernel smoothings -------------------------------------------------------


def _ou_smooth(gamma: float, dt: float, values: np.ndarray, axis: int = 0) -> np.ndarray:
    """Apply S[a] = sum_s (gamma/2) e^{-gamma |t_a - t_s|} v[s] along ``axis``.

    Exact reordering of the dense kernel matmul via forward/backward
    exponential recursions, O(n) instead of O(n^2).
    """
    from scipy.signal import lfilter

    v = np.moveaxis(np.asarray(values, dtype=complex), axis, 0)
    decay = np.exp(-gamma * dt)
    coeff = np.array([1.0, -decay])
    fwd = lfilter([1.0], coeff, v, axis=0)
    bwd = lfilter([1.0], coeff, v[::-1], axis=0)[::-1]
    out = 0.5 * gamma * (fwd + bwd - v)
    return np.moveaxis(out, 0, axis)


def _smooth(
    kernel: BathKernel,
    grid: TimeGrid,
    m: int,
    values: np.ndarray,
    axis: int = 0,
    conj: bool = False,
):
    """Kernel matmul over the first ``m`` nodes (prefix form for OU kernels).

    With ``conj`` the conjugated kernel is applied (needed whenever the
    smoothed factor sits under a dagger); the exponential kernel is real, so
    there it makes no difference.
    """
    if isinstance(kernel, OrnsteinUhlenbeckKernel):
        return _ou_smooth(kernel.gamma, grid.dt, values, axis=axis)
    times = grid.times[:m]
    gram = kernel.eval(times[:, None], times[None, :])
    if conj:
        gram = np.conj(gram)
    return np.moveaxis(np.tensordot(gram, np.moveaxis(values, axis, 0), axes=(1, 0)), 0, axis)


# -- per-node coefficient tables ---------------------------------------------


@dataclass(frozen=True)
class RTableSeries:
    """rho-independent R(t) coefficients at every grid node.

    obar0[i]: grading-1 components of Obar0(t_i); g[i]: coefficient table of
    term (ii); jw[i]: grading-2 components of the combined terms (iii)+(iv)
    (zero-width when the register has no grading-3 sector).
    """

    spec: QubitSystemSpec
    grid: TimeGrid
    symmetric_storage: bool
    obar0: np.ndarray  # (n_t, m1)
    g: np.ndarray  # (n_t, m1, m2)
    jw: np.ndarray  # (n_t, m2)


def _node_tables(snap: FieldSnapshot, kernel: BathKernel):
    """(obar0, G, jw) coefficient blocks at the snapshot's time."""
    grid = snap.grid
    m = snap.n_nodes
    w = grid.trapezoid_weights(m)
    spaces = snap.spaces
    m1 = spaces[0].size
    m2 = spaces[1].size if len(spaces) > 1 else 0

    obar0 = snap.obar0
    if m2 == 0:
        return obar0, np.zeros((m1, 0)), np.zeros(0)

    # term (ii): G[a, i] = sum_s2 w(s2) o0[s2, a] conj( g_sm[s2, i] ) with
    # g_sm the conjugate-kernel smoothing of Obar1 (it sits under a dagger)
    g_sm = _smooth(kernel, grid, m, w[:, None] * snap.obar1, axis=0, conj=True)
    gtab = (w[:, None] * snap.o0).T @ np.conj(g_sm)

    m3 = spaces[2].size if len(spaces) > 2 else 0
    jw = np.zeros(m2, dtype=complex)
    if m3 == 0 or snap.o1 is None:
        return obar0, gtab, jw

    # smoothed order-0 field: plain kernel for the left factor of term (iv),
    # conjugate kernel for the daggered factor of term (iii)
    o0til = _smooth(kernel, grid, m, w[:, None] * snap.o0, axis=0)
    o0tilc = _smooth(kernel, grid, m, w[:, None] * snap.o0, axis=0, conj=True)

    # term (iii): rho is multiplied on the right by
    # O0tilc^+(s3) g_sm^+(s2) = conj(nu(s2, s3)) E^+ with
    # nu = grading-3 component of g_sm(s2) O0tilc(s3)
    p21 = _bilinear_tensor(lambda a, b: a @ b, spaces[1], spaces[0], spaces[2])[0]
    nu = (g_sm @ p21) @ o0tilc.T  # (s2, s3)
    c_iii = (w[:, None] * w[None, :]) * np.conj(nu)
    j_vec = np.einsum("st,stc->c", c_iii, snap.o1)

    # term (iv): weights conj(obar2) paired through alpha(s1,s3) alpha(s2,s4)
    c2 = (w[:, None] * w[None, :]) * np.conj(snap.obar2[:, :, 0])
    # O0 O0 part via the grading-1 x grading-1 product tensor
    p11 = _bilinear_tensor(lambda a, b: a @ b, spaces[0], spaces[0], spaces[1])
    gram = o0til.T @ (c2 @ o0til)  # (i, j)
    w_vec = np.tensordot(p11, gram, axes=([1, 2], [0, 1]))
    # O1 part: both alpha contractions moved onto the weight matrix;
    # sum_s1 alpha(s1, s3) c2[s1, s2] is a conjugate-kernel smoothing
    y = _smooth(
        kernel, grid, m, _smooth(kernel, grid, m, c2, axis=0, conj=True), axis=1, conj=True
    )
    y = (w[:, None] * w[None, :]) * y
    w_vec = w_vec + np.einsum("st,stc->c", y, snap.o1)
    return obar0, gtab, j_vec + w_vec


def compute_r_tables(fields, kernel: BathKernel | None = None) -> RTableSeries:
    """Propagate the field object to the end of its grid, emitting tables.

    ``fields`` is a ReducedHierarchy or direct ResponseHierarchy positioned
    at t = 0 (or anywhere; nodes before the current time reuse the stored
    history).  The returned series covers every grid node.
    """
    if kernel is None:
        kernel = fields.kernel
    grid = fields.grid
    spaces = fields.spaces
    m1 = spaces[0].size
    m2 = spaces[1].size if len(spaces) > 1 else 0
    n_t = grid.n_t
    obar0 = np.zeros((n_t, m1), dtype=complex)
    gtab = np.zeros((n_t, m1, m2), dtype=complex)
    jw = np.zeros((n_t, m2), dtype=complex)
    if fields.it != 0:
        raise ValueError("field object must start at t = 0")
    for i in range(n_t):
        if i > 0:
            fields.step()
        o, g, j = _node_tables(fields.field_snapshot(), kernel)
        obar0[i] = o
        gtab[i] = g
        jw[i] = j
    from .hierarchy import OrbitCompSpace

    return RTableSeries(
        spec=fields.spec,
        grid=grid,
        symmetric_storage=isinstance(spaces[0], OrbitCompSpace),
        obar0=obar0,
        g=gtab,
        jw=jw,
    )


# -- R assembly and oracle ---------------------------------------------------


@dataclass(frozen=True)
class RAssembly:
    """R(t) applied to a given rho, with the four summands kept separate."""

    r: np.ndarray
    term_breakdown: dict[str, np.ndarray]
    quadrature_cost: int

    def __post_init__(self):
        total = sum(self.term_breakdown.values())
        if np.abs(total - self.r).max() > 1e-12 * max(1.0, np.abs(self.r).max()):
            raise ValueError("R does not equal the sum of its summands")


def _term_operators(snap: FieldSnapshot):
    """Fixed (M, N) operator pairs matching the coefficient layout."""
    spaces = snap.spaces
    dim = snap.spec.dim
    eye = np.eye(dim, dtype=complex)
    b1 = spaces[0].basis()
    b2 = spaces[1].basis() if len(spaces) > 1 else np.zeros((0, dim, dim))
    if len(spaces) > 2 and spaces[2].size:
        e3 = spaces[2].basis()[0]
    else:
        e3 = None
    return eye, b1, b2, e3


def assemble_R(
    h,
    rho: DensityMatrix | np.ndarray,
    kernel: BathKernel | None = None,
    t: float | None = None,
) -> RAssembly:
    """Factorized R(t) for the field object's current time and the given rho."""
    snap = h if isinstance(h, FieldSnapshot) else h.field_snapshot()
    if kernel is None:
        kernel = h.kernel if not isinstance(h, FieldSnapshot) else None
    if kernel is None:
        raise ValueError("a kernel is required when assembling from a snapshot")
    if t is not None and snap.grid.index_of(t) != snap.t_index:
        raise ValueError(f"fields are at t index {snap.t_index}, not t = {t}")
    rho_m = rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho, dtype=complex)

    obar0, gtab, jw = _node_tables(snap, kernel)
    eye, b1, b2, e3 = _term_operators(snap)
    spaces = snap.spaces

    term_i = rho_m @ spaces[0].from_comps(obar0).conj().T
    term_ii = np.zeros_like(term_i)
    for a in range(gtab.shape[0]):
        for i in range(gtab.shape[1]):
            if gtab[a, i] != 0:
                term_ii += gtab[a, i] * (b1[a] @ rho_m @ b2[i].conj().T)
    if e3 is not None:
        jw_op = np.tensordot(jw, b2, axes=(0, 0))
        term_iii_iv = jw_op @ rho_m @ e3.conj().T
    else:
        term_iii_iv = np.zeros_like(term_i)
    m = snap.n_nodes
    # quadrature evaluations after factorization: one 1-D pass per smoothing
    # plus the 2-D passes over the order-1 field
    cost = m * 4 + (2 * m * m if e3 is not None else 0)
    return RAssembly(
        r=term_i + term_ii + term_iii_iv,
        term_breakdown={"i": term_i, "ii": term_ii, "iii+iv": term_iii_iv},
        quadrature_cost=cost,
    )


def brute_force_R(
    h,
    rho: DensityMatrix | np.ndarray,
    kernel: BathKernel | None = None,
) -> RAssembly:
    """Direct 4-D trapezoidal evaluation of R(t) (oracle; coarse grids only).

    Every quadrature tuple is summed explicitly (einsum with optimization
    disabled), with no kernel-weighted partial contractions.
    """
    snap = h if isinstance(h, FieldSnapshot) else h.field_snapshot()
    if kernel is None:
        kernel = getattr(h, "kernel", None)
    if kernel is None:
        raise ValueError("a kernel is required")
    rho_m = rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho, dtype=complex)
    grid = snap.grid
    m = snap.n_nodes
    if m > 80:
        raise ValueError("brute-force oracle is restricted to coarse grids")
    w = grid.trapezoid_weights(m)
    times = grid.times[:m]
    alpha = kernel.eval(times[:, None], times[None, :])
    cw = (w[:, None] * w[None, :]) * alpha
    spaces = snap.spaces

    term_i = rho_m @ spaces[0].from_comps(snap.obar0).conj().T
    breakdown = {"i": term_i}
    r = term_i.copy()
    cost = m

    if snap.obar1 is not None:
        o0d = spaces[0].from_comps(snap.o0)
        ob1d = spaces[1].from_comps(snap.obar1)
        term_ii = np.einsum(
            "ab,bij,jk,akl->il",
            cw, o0d, rho_m, ob1d.conj().transpose(0, 2, 1),
            optimize=False,
        )
        breakdown["ii"] = term_ii
        r = r + term_ii
        cost += m * m
    if snap.o1 is not None and len(spaces) > 2 and spaces[2].size:
        o0d = spaces[0].from_comps(snap.o0)
        o1d = spaces[1].from_comps(snap.o1)
        ob1d = spaces[1].from_comps(snap.obar1)
        ob2d = spaces[2].from_comps(snap.obar2)
        # term (iii): alpha(s1,s2) alpha(s3,s4) O1(s2,s3) rho O0^+(s4) Obar1^+(s1)
        x = o1d @ rho_m  # (s2, s3, i, j)
        y = np.einsum(
            "djk,akl->dajl", o0d.conj().transpose(0, 2, 1), ob1d.conj().transpose(0, 2, 1),
            optimize=False,
        )
        term_iii = np.einsum("ab,cd,bcij,dajl->il", cw, cw, x, y, optimize=False)
        breakdown["iii"] = term_iii
        r = r + term_iii
        # term (iv): alpha(s1,s3) alpha(s2,s4) [O0(s3)O0(s4) + O1(s3,s4)] rho Obar2^+(s1,s2)
        pair = np.einsum("cij,djk->cdik", o0d, o0d, optimize=False) + o1d
        z = pair @ rho_m
        term_iv = np.einsum(
            "ac,bd,cdij,abjl->il", cw, cw, z, ob2d.conj().transpose(0, 1, 3, 2),
            optimize=False,
        )
        breakdown["iv"] = term_iv
        r = r + term_iv
        cost += 2 * m**4
    return RAssembly(r=r, term_breakdown=breakdown, quadrature_cost=cost)


# -- rho propagation ---------------------------------------------------------


def _vec_super(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Superoperator of rho -> A rho B for row-major vec(rho)."""
    return np.kron(a, b.T)


def _spaces_for_tables(tables: RTableSeries):
    from .hierarchy import CompSpace, OrbitCompSpace
    from .operators import permutation_automorphisms

    n = tables.spec.n_qubits
    depth = min(n - 1, 2)
    if tables.symmetric_storage:
        perms = permutation_automorphisms(tables.spec)
        return [OrbitCompSpace(n, k + 1, perms) for k in range(depth + 1)]
    return [CompSpace(n, k + 1) for k in range(depth + 1)]


@dataclass(frozen=True)
class MasterResult:
    grid: TimeGrid
    states: np.ndarray  # (n_t, dim, dim)
    trace_drift_max: float
    hermiticity_defect_max: float
    min_eigenvalue: float

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def _master_superops(tables: RTableSeries) -> np.ndarray:
    """Per-node superoperators of the full master-equation generator."""
    spec = tables.spec
    spaces = _spaces_for_tables(tables)
    dim = spec.dim
    h_sys = build_system_hamiltonian(spec).matrix
    ell = build_lindblad_operator(spec).matrix
    ell_dag = ell.conj().T

    eye = np.eye(dim, dtype=complex)
    b1 = spaces[0].basis()
    b2 = spaces[1].basis() if len(spaces) > 1 else np.zeros((0, dim, dim))
    e3 = spaces[2].basis()[0] if len(spaces) > 2 and spaces[2].size else None

    # (M, N) pairs in the order matching the coefficient vector layout
    pairs = [(eye, b.conj().T) for b in b1]
    for a in range(b1.shape[0]):
        for i in range(b2.shape[0]):
            pairs.append((b1[a], b2[i].conj().T))
    if e3 is not None:
        for c in range(b2.shape[0]):
            pairs.append((b2[c], e3.conj().T))

    ka = np.empty((len(pairs), dim * dim, dim * dim), dtype=complex)
    kb = np.empty_like(ka)
    for k, (mk, nk) in enumerate(pairs):
        ka[k] = _vec_super(ell @ mk, nk) - _vec_super(mk, nk @ ell)
        kb[k] = -_vec_super(ell_dag @ nk.conj().T, mk.conj().T) + _vec_super(
            nk.conj().T, mk.conj().T @ ell_dag
        )
    s_h = -1j * (_vec_super(h_sys, eye) - _vec_super(eye, h_sys))

    coeffs = [np.conj(tables.obar0), tables.g.reshape(tables.grid.n_t, -1)]
    if e3 is not None:
        coeffs.append(tables.jw)
    c_all = np.concatenate(coeffs, axis=1)
    if c_all.shape[1] != len(pairs):
        raise ValueError("coefficient layout does not match operator pairs")
    supers = s_h[None, :, :] + np.tensordot(c_all, ka, axes=(1, 0))
    supers += np.tensordot(np.conj(c_all), kb, axes=(1, 0))
    return supers


def propagate_rho(tables: RTableSeries, rho0, trace_tol: float = TRACE_TOL) -> MasterResult:
    """Heun integration of rho against precomputed R tables."""
    rho_m = rho0.matrix if isinstance(rho0, DensityMatrix) else np.asarray(rho0, dtype=complex)
    grid = tables.grid
    dim = rho_m.shape[0]
    supers = _master_superops(tables)
    states = np.empty((grid.n_t, dim, dim), dtype=complex)
    states[0] = rho_m
    v = rho_m.reshape(-1).copy()
    dt = grid.dt
    trace_drift = 0.0
    herm_defect = 0.0
    min_eig = float(np.linalg.eigvalsh(rho_m).min())
    for i in range(grid.n_t - 1):
        k1 = supers[i] @ v
        k2 = supers[i + 1] @ (v + dt * k1)
        v = v + 0.5 * dt * (k1 + k2)
        mat = v.reshape(dim, dim)
        herm_defect = max(herm_defect, float(np.abs(mat - mat.conj().T).max()))
        mat = 0.5 * (mat + mat.conj().T)
        drift = abs(float(np.real(np.trace(mat))) - 1.0)
        trace_drift = max(trace_drift, drift)
        if drift > trace_tol:
            raise FloatingPointError(
                f"trace drift {drift:.3e} exceeds {trace_tol:.1e} at t index {i + 1}"
            )
        v = mat.reshape(-1)
        states[i + 1] = mat
        min_eig = min(min_eig, float(np.linalg.eigvalsh(mat).min()))
    return MasterResult(
        grid=grid,
        states=states,
        trace_drift_max=trace_drift,
        hermiticity_defect_max=herm_defect,
        min_eigenvalue=min_eig,
    )


def step_master(rho, tables: RTableSeries, i: int):
    """One Heun step from node i using the precomputed tables (helper)."""
    sub = RTableSeries(
        spec=tables.spec,
        grid=TimeGrid(tables.grid.dt, 2),
        symmetric_storage=tables.symmetric_storage,
        obar0=tables.obar0[i : i + 2],
        g=tables.g[i : i + 2],
        jw=tables.jw[i : i + 2],
    )
    rho_m = rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho, dtype=complex)
    return propagate_rho(sub, rho_m).states[1]


def propagate_master(
    spec: QubitSystemSpec,
    kernel: BathKernel,
    rho0,
    grid: TimeGrid,
    tables: RTableSeries | None = None,
    symmetry: str = "auto",
) -> MasterResult:
    """Field propagation + rho propagation in one call.

    Pass precomputed ``tables`` to amortize the field propagation across
    initial states.
    """
    if tables is None:
        if isinstance(kernel, OrnsteinUhlenbeckKernel):
            fields = ReducedHierarchy(spec, grid, kernel, symmetry=symmetry)
        else:
            from .hierarchy import ResponseHierarchy

            fields = ResponseHierarchy(spec, grid, kernel)
        tables = compute_r_tables(fields)
    return propagate_rho(tables, rho0)


def lindblad_propagate(spec: QubitSystemSpec, rho0, grid: TimeGrid) -> MasterResult:
    """Markov-limit engine: rate-1/2 dissipator with the collective L."""
    from scipy.linalg import expm

    h_sys = build_system_hamiltonian(spec).matrix
    ell = build_lindblad_operator(spec).matrix
    ell_dag = ell.conj().T
    dim = spec.dim
    eye = np.eye(dim, dtype=complex)
    liou = -1j * (_vec_super(h_sys, eye) - _vec_super(eye, h_sys))
    liou += _vec_super(ell, ell_dag)
    liou -= 0.5 * (_vec_super(ell_dag @ ell, eye) + _vec_super(eye, ell_dag @ ell))
    stepper = expm(grid.dt * liou)

    rho_m = rho0.matrix if isinstance(rho0, DensityMatrix) else np.asarray(rho0, dtype=complex)
    states = np.empty((grid.n_t, dim, dim), dtype=complex)
    states[0] = rho_m
    v = rho_m.reshape(-1).copy()
    trace_drift = 0.0
    herm = 0.0
    min_eig = float(np.linalg.eigvalsh(rho_m).min())
    for i in range(1, grid.n_t):
        v = stepper @ v
        mat = v.reshape(dim, dim)
        herm = max(herm, float(np.abs(mat - mat.conj().T).max()))
        mat = 0.5 * (mat + mat.conj().T)
        trace_drift = max(trace_drift, abs(float(np.real(np.trace(mat))) - 1.0))
        states[i] = mat
        v = mat.reshape(-1)
        min_eig = min(min_eig, float(np.linalg.eigvalsh(mat).min()))
    return MasterResult(
        grid=grid,
        states=states,
        trace_drift_max=trace_drift,
        hermiticity_defect_max=herm,
        min_eigenvalue=min_eig,
    )
