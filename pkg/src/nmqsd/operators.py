"""Complex operator algebra on small qubit registers.

Basis convention: computational basis with qubit 1 as the most significant
bit and |1> = excited.  The excitation number of a basis state is the
popcount of its index, so operators that change the total excitation count
by a fixed amount d ("grading d": sector n -> n - d) are supported on a
small, known set of matrix entries.  That support set is what the hierarchy
and master-equation modules use for compact storage.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "QubitSystemSpec",
    "Operator",
    "DensityMatrix",
    "sigma_x",
    "sigma_y",
    "sigma_z",
    "sigma_minus",
    "sigma_plus",
    "embed_single_qubit",
    "build_system_hamiltonian",
    "build_lindblad_operator",
    "excitation_number_operator",
    "permutation_automorphisms",
    "partial_trace",
    "excitation_grading",
    "graded_support",
    "to_components",
    "from_components",
    "component_map",
    "named_state",
]

# Single-qubit basis ordered by index: {|0>, |1>} with |1> = excited,
# so a register basis state's excitation count is the popcount of its index.
sigma_x = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
sigma_y = np.array([[0.0, 1.0j], [-1.0j, 0.0]], dtype=complex)
sigma_z = np.array([[-1.0, 0.0], [0.0, 1.0]], dtype=complex)
sigma_minus = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)
sigma_plus = sigma_minus.conj().T.copy()

_GRADING_ATOL = 1e-14


@dataclass(frozen=True)
class QubitSystemSpec:
    """Parameters of the dissipative qubit chain.

    omega: per-qubit level splittings; j_xy: nearest-neighbour XY exchange;
    kappa: real weights of each qubit in the collective lowering operator.
    """

    n_qubits: int
    omega: tuple[float, ...]
    j_xy: float = 0.0
    kappa: tuple[float, ...] = ()

    def __post_init__(self):
        if self.n_qubits < 1:
            raise ValueError(f"n_qubits must be >= 1, got {self.n_qubits}")
        object.__setattr__(self, "omega", tuple(float(w) for w in self.omega))
        kappa = self.kappa if self.kappa else tuple(1.0 for _ in range(self.n_qubits))
        object.__setattr__(self, "kappa", tuple(float(k) for k in kappa))
        if len(self.omega) != self.n_qubits:
            raise ValueError(
                f"omega has length {len(self.omega)}, expected {self.n_qubits}"
            )
        if len(self.kappa) != self.n_qubits:
            raise ValueError(
                f"kappa has length {len(self.kappa)}, expected {self.n_qubits}"
            )

    @property
    def dim(self) -> int:
        return 2**self.n_qubits


def _validate_grading(matrix: np.ndarray, grading: int) -> None:
    n_qubits = int(np.log2(matrix.shape[0]))
    exc = excitations(n_qubits)
    mask = (exc[None, :] - exc[:, None]) != grading
    worst = np.abs(matrix[mask]).max() if mask.any() else 0.0
    if worst > _GRADING_ATOL:
        raise ValueError(
            f"matrix has weight {worst:.3e} outside the grading-{grading} support"
        )


@dataclass(frozen=True)
class Operator:
    """Dense complex matrix, optionally tagged with its excitation grading.

    grading = d means the operator maps excitation sector n to sector n - d;
    declaring it asserts that every entry outside that support is zero.
    """

    matrix: np.ndarray
    grading: Optional[int] = None

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"operator matrix must be square, got shape {m.shape}")
        dim = m.shape[0]
        if dim & (dim - 1) or dim == 0:
            raise ValueError(f"operator dimension {dim} is not a power of two")
        m = m.copy()
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)
        if self.grading is not None:
            _validate_grading(m, self.grading)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_qubits(self) -> int:
        return int(np.log2(self.dim))

    def dagger(self) -> "Operator":
        g = None if self.grading is None else -self.grading
        return Operator(self.matrix.conj().T, grading=g)

    def __matmul__(self, other: "Operator") -> "Operator":
        g = None
        if self.grading is not None and other.grading is not None:
            g = self.grading + other.grading
            if abs(g) > self.n_qubits:
                # product of gradings beyond the register size is identically zero
                return Operator(np.zeros_like(self.matrix), grading=None)
        return Operator(self.matrix @ other.matrix, grading=g)


@dataclass(frozen=True)
class DensityMatrix:
    """Hermitian, unit-trace state with positivity kept as a diagnostic."""

    matrix: np.ndarray
    trace_tolerance: float = 1e-8
    hermiticity_tolerance: float = 1e-10

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex).copy()
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"density matrix must be square, got shape {m.shape}")
        tr = np.trace(m)
        if abs(tr - 1.0) > self.trace_tolerance:
            raise ValueError(f"trace deviates from one by {abs(tr - 1.0):.3e}")
        herm = np.abs(m - m.conj().T).max()
        if herm > self.hermiticity_tolerance:
            raise ValueError(f"hermiticity defect {herm:.3e} above tolerance")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_qubits(self) -> int:
        return int(np.log2(self.dim))

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix).min())

    @staticmethod
    def from_state(psi: np.ndarray) -> "DensityMatrix":
        psi = np.asarray(psi, dtype=complex)
        psi = psi / np.linalg.norm(psi)
        return DensityMatrix(np.outer(psi, psi.conj()))


@lru_cache(maxsize=None)
def excitations(n_qubits: int) -> np.ndarray:
    """Excitation count (popcount) of each computational basis state."""
    idx = np.arange(2**n_qubits)
    return np.array([bin(i).count("1") for i in idx])


def embed_single_qubit(op2: np.ndarray, site: int, n_qubits: int) -> np.ndarray:
    """Embed a single-qubit operator at 1-indexed ``site`` (qubit 1 = MSB)."""
    if not 1 <= site <= n_qubits:
        raise ValueError(f"site {site} outside 1..{n_qubits}")
    out = np.array([[1.0 + 0.0j]])
    for j in range(1, n_qubits + 1):
        out = np.kron(out, op2 if j == site else np.eye(2))
    return out


def build_system_hamiltonian(spec: QubitSystemSpec) -> Operator:
    """Level splittings plus nearest-neighbour XY exchange; conserves excitation."""
    n = spec.n_qubits
    h = np.zeros((spec.dim, spec.dim), dtype=complex)
    for j in range(1, n + 1):
        h += 0.5 * spec.omega[j - 1] * embed_single_qubit(sigma_z, j, n)
    for j in range(1, n):
        h += spec.j_xy * (
            embed_single_qubit(sigma_x, j, n) @ embed_single_qubit(sigma_x, j + 1, n)
            + embed_single_qubit(sigma_y, j, n) @ embed_single_qubit(sigma_y, j + 1, n)
        )
    return Operator(h, grading=0)


def build_lindblad_operator(spec: QubitSystemSpec) -> Operator:
    """Collective lowering operator: weighted sum of per-qubit sigma_minus."""
    n = spec.n_qubits
    m = np.zeros((spec.dim, spec.dim), dtype=complex)
    for j in range(1, n + 1):
        m += spec.kappa[j - 1] * embed_single_qubit(sigma_minus, j, n)
    return Operator(m, grading=1)


def excitation_number_operator(n_qubits: int) -> Operator:
    return Operator(np.diag(excitations(n_qubits).astype(complex)), grading=0)


def permutation_automorphisms(spec: QubitSystemSpec) -> list[np.ndarray]:
    """Qubit relabelings that leave H_s and L invariant, as basis-index maps.

    A permutation qualifies when it preserves the per-qubit frequencies and
    lowering weights and maps the nearest-neighbour coupling graph onto
    itself (any relabeling qualifies when j_xy == 0, only the identity and
    the chain reversal otherwise).  Each entry p satisfies
    (P A P^T)[i, j] = A[p[i], p[j]] for the induced basis permutation.
    """
    from itertools import permutations as _perms

    n = spec.n_qubits
    edges = {frozenset((j, j + 1)) for j in range(1, n)} if spec.j_xy != 0.0 else set()
    out = []
    for sigma in _perms(range(n)):
        if any(spec.omega[sigma[j]] != spec.omega[j] for j in range(n)):
            continue
        if any(spec.kappa[sigma[j]] != spec.kappa[j] for j in range(n)):
            continue
        if edges and {frozenset((sigma[a - 1] + 1, sigma[b - 1] + 1)) for a, b in edges} != edges:
            continue
        # qubit j (1-indexed, MSB first) occupies bit n - 1 - (j - 1)
        p = np.empty(spec.dim, dtype=np.intp)
        for i in range(spec.dim):
            k = 0
            for j in range(n):
                if i >> (n - 1 - j) & 1:
                    k |= 1 << (n - 1 - sigma[j])
            p[i] = k
        out.append(p)
    return out


def partial_trace(rho, keep: Iterable[int], n_qubits: Optional[int] = None):
    """Reduce to the 1-indexed qubits in ``keep`` (order preserved as given).

    Accepts a DensityMatrix (returns a DensityMatrix) or a bare ndarray
    (returns an ndarray).
    """
    wrapped = isinstance(rho, DensityMatrix)
    m = rho.matrix if wrapped else np.asarray(rho, dtype=complex)
    if n_qubits is None:
        n_qubits = int(np.log2(m.shape[0]))
    keep = list(keep)
    if not keep or any(not 1 <= k <= n_qubits for k in keep) or len(set(keep)) != len(keep):
        raise ValueError(f"invalid qubit subset {keep} for {n_qubits} qubits")
    tensor = m.reshape((2,) * (2 * n_qubits))
    drop = [j for j in range(1, n_qubits + 1) if j not in keep]
    for j in sorted(drop, reverse=True):
        tensor = np.trace(tensor, axis1=j - 1, axis2=tensor.ndim // 2 + j - 1)
        # remaining axes shift down; relabel the kept list accordingly
        keep = [k if k < j else k - 1 for k in keep]
    n_keep = tensor.ndim // 2
    perm = [k - 1 for k in keep] + [n_keep + k - 1 for k in keep]
    tensor = tensor.transpose(perm)
    out = tensor.reshape(2**n_keep, 2**n_keep)
    if wrapped:
        return DensityMatrix(
            out,
            trace_tolerance=rho.trace_tolerance,
            hermiticity_tolerance=rho.hermiticity_tolerance,
        )
    return out


def excitation_grading(op: Operator) -> dict[int, float]:
    """Map sector difference d -> Frobenius norm of the corresponding block.

    Only differences with nonzero block norm are reported.
    """
    exc = excitations(op.n_qubits)
    diff = exc[None, :] - exc[:, None]
    report: dict[int, float] = {}
    for d in range(-op.n_qubits, op.n_qubits + 1):
        norm = float(np.linalg.norm(op.matrix[diff == d]))
        if norm > 0.0:
            report[d] = norm
    return report


# --- component storage for graded operators -------------------------------

@lru_cache(maxsize=None)
def graded_support(n_qubits: int, grading: int) -> tuple[np.ndarray, np.ndarray]:
    """(rows, cols) of the matrix entries a grading-d operator may occupy."""
    exc = excitations(n_qubits)
    rows, cols = np.nonzero(exc[None, :] - exc[:, None] == grading)
    return rows, cols


def support_size(n_qubits: int, grading: int) -> int:
    return graded_support(n_qubits, grading)[0].size


def to_components(matrix: np.ndarray, n_qubits: int, grading: int) -> np.ndarray:
    rows, cols = graded_support(n_qubits, grading)
    return np.ascontiguousarray(matrix[rows, cols])


def from_components(comp: np.ndarray, n_qubits: int, grading: int) -> np.ndarray:
    rows, cols = graded_support(n_qubits, grading)
    dim = 2**n_qubits
    out = np.zeros(comp.shape[:-1] + (dim, dim), dtype=complex)
    out[..., rows, cols] = comp
    return out


def component_map(
    f: Callable[[np.ndarray], np.ndarray],
    n_qubits: int,
    grading_in: int,
    grading_out: int,
) -> np.ndarray:
    """Matrix of a linear map between graded component spaces.

    ``f`` takes and returns dense matrices; the result M satisfies
    components_out = M @ components_in for every grading_in operator.
    """
    n_in = support_size(n_qubits, grading_in)
    n_out = support_size(n_qubits, grading_out)
    m = np.zeros((n_out, n_in), dtype=complex)
    for a in range(n_in):
        basis = np.zeros(n_in, dtype=complex)
        basis[a] = 1.0
        m[:, a] = to_components(f(from_components(basis, n_qubits, grading_in)),
                                n_qubits, grading_out)
    return m


# --- named states ----------------------------------------------------------

def _basis_state(bits: str) -> np.ndarray:
    v = np.zeros(2 ** len(bits), dtype=complex)
    v[int(bits, 2)] = 1.0
    return v


def named_state(name: str, n_qubits: int) -> np.ndarray:
    """Resolve a preset name or a bit string to a normalized state vector."""
    name = name.strip().lower()
    if set(name) <= {"0", "1"} and len(name) == n_qubits:
        return _basis_state(name)
    if name == "ghz":
        v = _basis_state("1" * n_qubits) + _basis_state("0" * n_qubits)
    elif name == "w":
        v = sum(
            _basis_state("0" * j + "1" + "0" * (n_qubits - 1 - j))
            for j in range(n_qubits)
        )
    elif name in ("antiw", "w-bar", "wbar"):
        v = sum(
            _basis_state("1" * j + "0" + "1" * (n_qubits - 1 - j))
            for j in range(n_qubits)
        )
    elif name in ("bell00", "bell"):
        if n_qubits < 2:
            raise ValueError("bell presets need at least 2 qubits")
        v = _basis_state("11" + "0" * (n_qubits - 2)) + _basis_state("0" * n_qubits)
    elif name == "bell01":
        if n_qubits < 2:
            raise ValueError("bell presets need at least 2 qubits")
        v = _basis_state("10" + "0" * (n_qubits - 2)) + _basis_state(
            "01" + "0" * (n_qubits - 2)
        )
    else:
        raise ValueError(f"unknown state preset {name!r} for {n_qubits} qubits")
    return v / np.linalg.norm(v)
