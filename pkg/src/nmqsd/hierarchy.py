"""Grid propagation of the noise-order expansion of the response operator.

The time-local trajectory equation replaces the functional derivative of the
state by a response operator expanded in powers of the conjugate noise.  For
a register of N qubits the expansion terminates: the order-k coefficient
carries k + 1 collective lowering factors, so it changes the excitation
count by exactly k + 1 and the highest surviving order is N - 1.

This module propagates the coefficient fields on the time grid:

    order 0:  field over (s,)          grading 1
    order 1:  field over (s, s1)       grading 2
    order 2:  field over (s, s1, s2)   grading 3, symmetric in (s1, s2)

together with their kernel convolutions over the functional slot s.  Fields
are stored as components on the graded support (a handful of scalars per
grid point), or fully dense for cross-checking the graded path.  Method of
lines in t with a Heun predictor-corrector; trapezoidal quadrature in s.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .grids import TimeGrid
from .kernels import BathKernel
from .operators import (
    Operator,
    QubitSystemSpec,
    build_lindblad_operator,
    build_system_hamiltonian,
    graded_support,
)

__all__ = [
    "ResponseHierarchy",
    "CompSpace",
    "OrbitCompSpace",
    "FieldSnapshot",
    "ForbiddenReport",
    "init_hierarchy",
    "step_hierarchy",
    "convolve_obar",
    "check_forbidden",
    "save_checkpoint",
    "load_checkpoint",
]

MAX_DEPTH = 2


class CompSpace:
    """Component storage for operators confined to one grading's support.

    ``grading=None`` means dense storage (all matrix entries are components);
    that mode exists to cross-check the graded path.
    """

    def __init__(self, n_qubits: int, grading: int | None):
        self.n_qubits = n_qubits
        self.grading = grading
        dim = 2**n_qubits
        self.dim = dim
        if grading is None:
            rows, cols = np.meshgrid(np.arange(dim), np.arange(dim), indexing="ij")
            self.rows, self.cols = rows.ravel(), cols.ravel()
        else:
            self.rows, self.cols = graded_support(n_qubits, grading)
        self.size = self.rows.size

    def to_comps(self, matrix: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(matrix[..., self.rows, self.cols])

    def from_comps(self, comps: np.ndarray) -> np.ndarray:
        out = np.zeros(comps.shape[:-1] + (self.dim, self.dim), dtype=complex)
        out[..., self.rows, self.cols] = comps
        return out

    def basis(self) -> np.ndarray:
        """(size, dim, dim) array of component basis matrices."""
        return self.from_comps(np.eye(self.size, dtype=complex))

    def lin_map(self, f) -> np.ndarray:
        """Matrix of components -> components for a linear dense-matrix map."""
        return self.lin_map_to(f, self)

    def lin_map_to(self, f, out: "CompSpace") -> np.ndarray:
        if self.size == 0:
            return np.zeros((out.size, 0), dtype=complex)
        return out.to_comps(np.stack([f(b) for b in self.basis()])).T.copy()


class OrbitCompSpace(CompSpace):
    """Graded components collapsed onto orbits of a qubit-relabeling group.

    When H_s and L are invariant under a group of qubit permutations, every
    propagated field stays in the symmetric subspace, so one component per
    entry orbit suffices.  ``rows``/``cols`` hold one representative entry
    per orbit (used by to_comps, valid only for symmetric matrices);
    from_comps scatters each component to its whole orbit.
    """

    def __init__(self, n_qubits: int, grading: int, perms):
        if grading is None:
            raise ValueError("orbit storage requires a graded support")
        full_rows, full_cols = graded_support(n_qubits, grading)
        entries = list(zip(full_rows.tolist(), full_cols.tolist()))
        canon = {}
        for r, c in entries:
            canon[(r, c)] = min((int(p[r]), int(p[c])) for p in perms)
        reps = sorted(set(canon.values()))
        rep_index = {rc: k for k, rc in enumerate(reps)}

        self.n_qubits = n_qubits
        self.grading = grading
        self.dim = 2**n_qubits
        self.rows = np.array([r for r, _ in reps], dtype=np.intp)
        self.cols = np.array([c for _, c in reps], dtype=np.intp)
        self.size = len(reps)
        self._all_rows = full_rows
        self._all_cols = full_cols
        self._orbit_of_entry = np.array(
            [rep_index[canon[(r, c)]] for r, c in entries], dtype=np.intp
        )

    def from_comps(self, comps: np.ndarray) -> np.ndarray:
        out = np.zeros(comps.shape[:-1] + (self.dim, self.dim), dtype=complex)
        out[..., self._all_rows, self._all_cols] = comps[..., self._orbit_of_entry]
        return out


def _bilinear_tensor(f, space_a: CompSpace, space_b: CompSpace, out: CompSpace) -> np.ndarray:
    """T[a, i, j] with out_a = sum_ij T[a,i,j] A_i B_j for f(A, B)."""
    t = np.zeros((out.size, space_a.size, space_b.size), dtype=complex)
    basis_a = space_a.basis()
    basis_b = space_b.basis()
    for i, ea in enumerate(basis_a):
        for j, eb in enumerate(basis_b):
            t[:, i, j] = out.to_comps(f(ea, eb))
    return t


@dataclass(frozen=True)
class FieldSnapshot:
    """Read-only view of the response fields at the current time.

    This is the contract the master-equation assembly consumes; both the
    direct grid hierarchy and the reduced propagator produce it.  Component
    arrays cover grid nodes 0 .. t_index; entries that a register size does
    not support are None.
    """

    spec: QubitSystemSpec
    grid: TimeGrid
    t_index: int
    spaces: tuple
    lower: np.ndarray
    h_sys: np.ndarray
    o0: np.ndarray  # (m, |grading 1|)
    obar0: np.ndarray  # (|grading 1|,)
    obar1: np.ndarray | None  # (m, |grading 2|)
    o1: np.ndarray | None  # (m, m, |grading 2|)
    obar2: np.ndarray | None  # (m, m, |grading 3|)

    @property
    def n_nodes(self) -> int:
        return self.t_index + 1


@dataclass(frozen=True)
class ForbiddenReport:
    """Max-entry norms of the operator products that must vanish."""

    residuals: dict[str, float]
    applicable: bool
    n_samples: int

    def max_residual(self) -> float:
        return max(self.residuals.values()) if self.residuals else 0.0

    def passes(self, tolerance: float = 1e-10) -> bool:
        return (not self.applicable) or self.max_residual() <= tolerance


class ResponseHierarchy:
    """Coefficient fields of the response operator on a uniform grid.

    Fields are advanced in t over their existing s-domains; each step then
    inserts the exact boundary values at the new node (order 0 equals the
    collective lowering operator on the diagonal; higher orders are the
    commutator boundary values, with the order-2 value split symmetrically
    between its two noise slots).
    """

    def __init__(
        self,
        spec: QubitSystemSpec,
        grid: TimeGrid,
        kernel: BathKernel,
        depth: int | None = None,
        storage: str = "graded",
    ):
        if depth is None:
            depth = spec.n_qubits - 1
        if depth > MAX_DEPTH:
            raise ValueError(
                f"hierarchy depth {depth} not supported (max {MAX_DEPTH}; "
                "deeper registers are out of scope for the exact engines)"
            )
        if depth < 0:
            raise ValueError("depth must be >= 0")
        if storage not in ("graded", "dense"):
            raise ValueError(f"unknown storage {storage!r}")
        self.spec = spec
        self.grid = grid
        self.kernel = kernel
        self.depth = depth
        self.storage = storage
        self.n_qubits = spec.n_qubits
        self.dim = spec.dim

        self.h_sys = build_system_hamiltonian(spec).matrix
        self.lower = build_lindblad_operator(spec).matrix
        self.lower_dag = self.lower.conj().T.copy()

        n = spec.n_qubits
        if storage == "graded":
            self.spaces = [CompSpace(n, k + 1) for k in range(depth + 1)]
        else:
            self.spaces = [CompSpace(n, None) for _ in range(depth + 1)]

        ld = self.lower_dag
        ell = self.lower
        s = self.spaces
        # maps used by the field equations
        self._lmul_ldag = [
            s[k + 1].lin_map_to(lambda x: ld @ x, s[k]) for k in range(depth)
        ]
        self._bc_comm = [
            s[k].lin_map_to(lambda x: ell @ x - x @ ell, s[k + 1]) for k in range(depth)
        ]
        # T[k]: commutator [L^dag * (order-k conv), order-j field] tensors
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
        self.fields: list[np.ndarray] = []
        for k in range(depth + 1):
            shape = (n_t,) * (k + 1) + (s[k].size,)
            self.fields.append(np.zeros(shape, dtype=complex))
        self.convs: list[np.ndarray] = [
            np.zeros((n_t,) * k + (s[k].size,), dtype=complex) for k in range(depth + 1)
        ]

        self._ell_comps = s[0].to_comps(ell)
        self.it = 0
        self.fields[0][0] = self._ell_comps
        self._update_convs(self.fields, self.it, into=self.convs)

    # -- propagation -------------------------------------------------------

    @property
    def t(self) -> float:
        return self.it * self.grid.dt

    def _alpha_weights(self, it: int) -> np.ndarray:
        m = it + 1
        w = self.grid.trapezoid_weights(m)
        return self.kernel.eval(it * self.grid.dt, self.grid.times[:m]) * w

    def _update_convs(self, fields, it, into):
        aw = self._alpha_weights(it)
        m = it + 1
        for k in range(self.depth + 1):
            f = fields[k][tuple([slice(0, m)] * (k + 1))]
            into[k][tuple([slice(0, m)] * k)] = np.tensordot(aw, f, axes=(0, 0))

    def _rhs(self, fields, convs, it):
        """Time derivatives of the interior field values at node count it+1."""
        m = it + 1
        s = self.spaces
        g0 = convs[0]
        a_op = -1j * self.h_sys - self.lower_dag @ s[0].from_comps(g0)
        out = []
        comm = [s[k].lin_map(lambda x: a_op @ x - x @ a_op) for k in range(self.depth + 1)]

        f0 = fields[0][:m]
        d0 = f0 @ comm[0].T
        if self.depth >= 1:
            g1 = convs[1][:m]
            d0 = d0 - g1 @ self._lmul_ldag[0].T
        out.append(d0)

        if self.depth >= 1:
            f1 = fields[1][:m, :m]
            d1 = f1 @ comm[1].T
            d1 = d1 - np.einsum("aij,xi,sj->sxa", self._bil[(1, 0)], g1, f0, optimize=True)
            if self.depth >= 2:
                g2 = convs[2][:m, :m]
                d1 = d1 - (g2 + g2.swapaxes(0, 1)) @ self._lmul_ldag[1].T
            out.append(d1)

        if self.depth >= 2:
            f2 = fields[2][:m, :m, :m]
            d2 = f2 @ comm[2].T
            half = 0.5 * np.einsum(
                "aij,xi,syj->sxya", self._bil[(1, 1)], g1, f1, optimize=True
            )
            d2 = d2 - half - half.swapaxes(1, 2)
            d2 = d2 - np.einsum(
                "aij,xyi,sj->sxya", self._bil[(2, 0)], g2, f0, optimize=True
            )
            out.append(d2)
        return out

    def _insert_boundary(self, fields, it_new):
        """Exact boundary values at the new node index."""
        i = it_new
        fields[0][i] = self._ell_comps
        if self.depth >= 1:
            f0 = fields[0][: i + 1]
            fields[1][i, : i + 1] = 0.0
            fields[1][: i + 1, i] = f0 @ self._bc_comm[0].T
        if self.depth >= 2:
            f1 = fields[1][: i + 1, : i + 1]
            bc = 0.5 * (f1 @ self._bc_comm[1].T)
            fields[2][i, : i + 1, : i + 1] = 0.0
            fields[2][: i + 1, : i + 1, i] = bc
            fields[2][: i + 1, i, : i + 1] = bc

    def step(self) -> None:
        """Advance every field from t to t + dt (Heun), then insert boundaries."""
        it = self.it
        if it + 1 >= self.grid.n_t:
            raise ValueError("grid exhausted")
        m = it + 1
        dt = self.grid.dt

        k1 = self._rhs(self.fields, self.convs, it)
        pred = [f.copy() for f in self.fields]
        for k in range(self.depth + 1):
            region = tuple([slice(0, m)] * (k + 1))
            pred[k][region] += dt * k1[k]
        self._insert_boundary(pred, it + 1)
        pred_convs = [np.empty_like(c) for c in self.convs]
        self._update_convs(pred, it + 1, into=pred_convs)
        k2 = self._rhs(pred, pred_convs, it + 1)

        for k in range(self.depth + 1):
            region = tuple([slice(0, m)] * (k + 1))
            self.fields[k][region] += 0.5 * dt * (k1[k] + k2[k][region])
        self._insert_boundary(self.fields, it + 1)
        self.it = it + 1
        self._update_convs(self.fields, self.it, into=self.convs)

        head = self.fields[0][self.it]
        if not np.all(np.isfinite(head)) or not np.all(np.isfinite(self.convs[0])):
            raise FloatingPointError(
                f"non-finite hierarchy values at t index {self.it}"
            )

    def propagate_to(self, t_index: int) -> None:
        while self.it < t_index:
            self.step()

    # -- dense views -------------------------------------------------------

    def order_dense(self, k: int, *indices: int) -> np.ndarray:
        """Dense matrix of the order-k field at the given grid indices."""
        return self.spaces[k].from_comps(self.fields[k][indices])

    def conv_dense(self, k: int, *indices: int) -> np.ndarray:
        return self.spaces[k].from_comps(self.convs[k][indices])

    def field_snapshot(self) -> FieldSnapshot:
        m = self.it + 1
        return FieldSnapshot(
            spec=self.spec,
            grid=self.grid,
            t_index=self.it,
            spaces=tuple(self.spaces),
            lower=self.lower,
            h_sys=self.h_sys,
            o0=self.fields[0][:m],
            obar0=self.convs[0],
            obar1=self.convs[1][:m] if self.depth >= 1 else None,
            o1=self.fields[1][:m, :m] if self.depth >= 1 else None,
            obar2=self.convs[2][:m, :m] if self.depth >= 2 else None,
        )

    # -- trajectory support ------------------------------------------------

    def noise_weights(self) -> np.ndarray:
        return self.grid.trapezoid_weights(self.it + 1)

    def response_apply(
        self,
        i_t: int,
        z_conj: np.ndarray,
        psi: np.ndarray,
        alpha_row: np.ndarray,
    ) -> np.ndarray:
        """Per-trajectory sum_s' alpha_row[s'] O(t, s', z*_b) |psi_b><psi_b|.

        ``alpha_row`` carries the kernel values times quadrature weights over
        s' = 0 .. i_t; noise integrals inside the response use trapezoidal
        weights over the same window.
        """
        if i_t != self.it:
            raise ValueError("hierarchy is not at the requested time index")
        m = i_t + 1
        s = self.spaces
        w = self.grid.trapezoid_weights(m)
        y = z_conj[:, :m] * w[None, :]

        a_dense = np.tensordot(alpha_row, s[0].from_comps(self.fields[0][:m]), axes=(0, 0))
        a_batch = np.broadcast_to(a_dense, (psi.shape[0],) + a_dense.shape).copy()
        if self.depth >= 1:
            f1_conv = np.tensordot(alpha_row, self.fields[1][:m, :m], axes=(0, 0))
            a_batch += s[1].from_comps(y @ f1_conv)
        if self.depth >= 2:
            f2_conv = np.tensordot(alpha_row, self.fields[2][:m, :m, :m], axes=(0, 0))
            quad = np.einsum("bi,ijc,bj->bc", y, f2_conv, y, optimize=True)
            a_batch += s[2].from_comps(quad)
        a_psi = np.einsum("bpq,bq->bp", a_batch, psi)
        return np.einsum("bp,bq->bpq", a_psi, psi.conj())

    # -- validation --------------------------------------------------------

    def grading_defect(self) -> float:
        """Max weight outside the declared grading support (dense mode only).

        In graded storage the support is structural and the defect is zero by
        construction; dense mode measures it genuinely.
        """
        if self.storage == "graded":
            return 0.0
        from .operators import excitations

        exc = excitations(self.n_qubits)
        diff = exc[None, :] - exc[:, None]
        worst = 0.0
        m = self.it + 1
        for k in range(self.depth + 1):
            dense = self.spaces[k].from_comps(self.fields[k][tuple([slice(0, m)] * (k + 1))])
            mask = diff != (k + 1)
            if mask.any():
                worst = max(worst, float(np.abs(dense[..., mask]).max(initial=0.0)))
        return worst


def init_hierarchy(
    spec: QubitSystemSpec,
    grid: TimeGrid,
    kernel: BathKernel,
    depth: int | None = None,
    storage: str = "graded",
) -> ResponseHierarchy:
    return ResponseHierarchy(spec, grid, kernel, depth=depth, storage=storage)


def step_hierarchy(h: ResponseHierarchy) -> ResponseHierarchy:
    h.step()
    return h


def convolve_obar(h: ResponseHierarchy, kernel: BathKernel | None = None, t_index: int | None = None):
    """Kernel convolutions of every field over the functional slot at time t.

    Returns the list [conv_0, conv_1, ...]; also refreshes the cached values
    on the hierarchy when called with its own kernel.
    """
    if t_index is None:
        t_index = h.it
    if t_index != h.it:
        raise ValueError("fields are only available at the current time")
    if kernel is not None and kernel is not h.kernel:
        aw = kernel.eval(h.t, h.grid.times[: h.it + 1]) * h.grid.trapezoid_weights(h.it + 1)
        m = h.it + 1
        return [
            np.tensordot(aw, h.fields[k][tuple([slice(0, m)] * (k + 1))], axes=(0, 0))
            for k in range(h.depth + 1)
        ]
    h._update_convs(h.fields, h.it, into=h.convs)
    return h.convs


def check_forbidden(
    h: ResponseHierarchy,
    n_samples: int = 64,
    seed: int = 0,
    perturbation: float = 0.0,
) -> ForbiddenReport:
    """Sample the operator products that must vanish for the register size.

    For three qubits the set is {L f2, f0 f2, f2 f0, f1 f1, f1 f0 f0}; for
    two qubits {f0 f1, f1 f0, f1 f1}; a single qubit has nothing to check.
    ``perturbation`` injects a grading-violating error (test hook for the
    negative control in the validation command).
    """
    rng = np.random.default_rng(seed)
    m = h.it + 1
    depth = h.depth
    if depth == 0:
        return ForbiddenReport(residuals={}, applicable=False, n_samples=0)

    def dense(k, idx):
        mat = h.order_dense(k, *idx)
        if perturbation:
            mat = mat + perturbation * np.eye(h.dim)
        return mat

    def sample_idx(k):
        return tuple(int(i) for i in rng.integers(0, m, size=k + 1))

    residuals: dict[str, float] = {}

    def record(name, value):
        residuals[name] = max(residuals.get(name, 0.0), float(np.abs(value).max()))

    for _ in range(n_samples):
        if depth >= 2:
            f2 = dense(2, sample_idx(2))
            f0 = dense(0, sample_idx(0))
            f1a = dense(1, sample_idx(1))
            f1b = dense(1, sample_idx(1))
            f0b = dense(0, sample_idx(0))
            record("L*f2", h.lower @ f2)
            record("f0*f2", f0 @ f2)
            record("f2*f0", f2 @ f0)
            record("f1*f1", f1a @ f1b)
            record("f1*f0*f0", f1a @ f0 @ f0b)
        else:
            f0 = dense(0, sample_idx(0))
            f1 = dense(1, sample_idx(1))
            f1b = dense(1, sample_idx(1))
            record("f0*f1", f0 @ f1)
            record("f1*f0", f1 @ f0)
            record("f1*f1", f1 @ f1b)
    return ForbiddenReport(residuals=residuals, applicable=True, n_samples=n_samples)


# -- checkpoint container ---------------------------------------------------

_MAGIC = b"NMQHIER1"


def save_checkpoint(h: ResponseHierarchy, path) -> None:
    """Self-describing little-endian binary dump of the hierarchy state."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        storage_flag = 0 if h.storage == "graded" else 1
        f.write(struct.pack("<IIII", 1, h.n_qubits, h.depth, storage_flag))
        f.write(struct.pack("<dI", h.grid.dt, h.grid.n_t))
        f.write(struct.pack("<I", h.it))
        for k in range(h.depth + 1):
            arr = np.ascontiguousarray(h.fields[k], dtype="<c16")
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path, spec: QubitSystemSpec, kernel: BathKernel) -> ResponseHierarchy:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise ValueError("not a hierarchy checkpoint file")
        version, n_qubits, depth, storage_flag = struct.unpack("<IIII", f.read(16))
        if version != 1:
            raise ValueError(f"unsupported checkpoint version {version}")
        dt, n_t = struct.unpack("<dI", f.read(12))
        (it,) = struct.unpack("<I", f.read(4))
        if n_qubits != spec.n_qubits:
            raise ValueError("checkpoint register size does not match the spec")
        grid = TimeGrid(dt=dt, n_t=n_t)
        h = ResponseHierarchy(
            spec, grid, kernel, depth=depth,
            storage="graded" if storage_flag == 0 else "dense",
        )
        for k in range(depth + 1):
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            count = int(np.prod(shape))
            arr = np.frombuffer(f.read(16 * count), dtype="<c16").reshape(shape)
            h.fields[k][...] = arr
        h.it = it
        h._update_convs(h.fields, h.it, into=h.convs)
    return h
