"""Linear quantum-state-diffusion trajectories and ensemble reconstruction.

Each trajectory integrates the unnormalized time-local equation

    d/dt psi = (-i H_s + L z*_t - L^+ Obar(t, z*)) psi,
    Obar(t, z*) = Obar0(t) + int_0^t ds1 z*_{s1} Obar1(t, s1)
                  + int int_0^t ds1 ds2 z*_{s1} z*_{s2} Obar2(t, s1, s2),

with the noise held at grid nodes (the colored process is smooth, so there
is no Ito/Stratonovich ambiguity) and trapezoidal quadrature against the
sampled path.  The barred coefficient fields are extracted once from a
field propagator and shared read-only by every trajectory.

The ensemble average (1/n) sum |psi><psi| reconstructs rho_t; accumulators
keep elementwise sums and sums of squares for per-entry standard errors and
are merged in a fixed chunk order, so a run is bitwise reproducible for a
given (config, master_seed) no matter how the work is scheduled.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .grids import TimeGrid
from .kernels import BathKernel, OrnsteinUhlenbeckKernel
from .noise import NoisePath, _standard_complex_normals, noise_factor
from .operators import QubitSystemSpec
from .reduced import ReducedHierarchy

__all__ = [
    "TrajectoryState",
    "QsdFieldTables",
    "EnsembleAccumulator",
    "EnsembleResult",
    "compute_qsd_tables",
    "qsd_step",
    "propagate_trajectory",
    "propagate_batch",
    "run_ensemble",
]


@dataclass(frozen=True)
class TrajectoryState:
    """Unnormalized trajectory state psi at time t, tagged with its seed."""

    psi: np.ndarray
    t: float
    seed: int

    def __post_init__(self):
        psi = np.asarray(self.psi, dtype=complex)
        if psi.ndim != 1:
            raise ValueError(f"psi must be a vector, got shape {psi.shape}")
        if not np.all(np.isfinite(psi)):
            raise ValueError("trajectory state contains non-finite entries")
        psi.flags.writeable = False
        object.__setattr__(self, "psi", psi)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.psi))


@dataclass(frozen=True)
class QsdFieldTables:
    """Per-node barred fields in the form the trajectory stepper consumes.

    a0[i] is the drift generator -iH - L^+ Obar0(t_i).  obar1_rows[i] holds
    the order-1 barred components Obar1(t_i, s1) on nodes s1 = 0..i, and
    obar2_blocks[i] the order-2 components Obar2(t_i, s1, s2); ldag_b2 and
    ldag_b3 are L^+ times the component basis matrices, so the noise
    contractions reduce to small batched tensor products.
    """

    spec: QubitSystemSpec
    grid: TimeGrid
    lower: np.ndarray
    a0: np.ndarray  # (n_t, dim, dim)
    ldag_b2: np.ndarray | None  # (|grading 2|, dim, dim)
    obar1_rows: tuple | None  # [i] -> (i + 1, |grading 2|)
    ldag_b3: np.ndarray | None  # (|grading 3|, dim, dim)
    obar2_blocks: tuple | None  # [i] -> (i + 1, i + 1, |grading 3|)

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def depth(self) -> int:
        if self.obar2_blocks is not None:
            return 2
        return 1 if self.obar1_rows is not None else 0

    def drop_order2(self) -> "QsdFieldTables":
        """Tables with the noise-square term removed (diagnostic only)."""
        return dataclasses.replace(self, ldag_b3=None, obar2_blocks=None)


def compute_qsd_tables(fields, memory_budget_mb: float = 2000.0) -> QsdFieldTables:
    """Propagate a freshly initialized field object and collect the tables.

    ``fields`` is a ResponseHierarchy or ReducedHierarchy at time index 0;
    it is stepped through its whole grid.  The order-2 table grows as
    n_t^3 / 3 components, so fine grids are rejected against the budget.
    """
    if fields.it != 0:
        raise ValueError("field object must start at time index 0")
    grid: TimeGrid = fields.grid
    n_t = grid.n_t
    depth = fields.depth
    spaces = fields.spaces
    if depth >= 2:
        est_mb = (n_t**3 / 3) * spaces[2].size * 16 / 1e6
        if est_mb > memory_budget_mb:
            raise MemoryError(
                f"order-2 table needs ~{est_mb:.0f} MB, over the "
                f"{memory_budget_mb:.0f} MB budget; use a coarser grid"
            )

    lower = fields.lower
    ldag = lower.conj().T
    a0 = np.empty((n_t, fields.dim, fields.dim), dtype=complex)
    obar1_rows = [] if depth >= 1 else None
    obar2_blocks = [] if depth >= 2 else None

    def record(i):
        snap = fields.field_snapshot()
        a0[i] = -1j * snap.h_sys - ldag @ spaces[0].from_comps(snap.obar0)
        if depth >= 1:
            obar1_rows.append(np.array(snap.obar1, copy=True))
        if depth >= 2:
            obar2_blocks.append(np.array(snap.obar2, copy=True))

    record(0)
    for i in range(1, n_t):
        fields.step()
        record(i)

    return QsdFieldTables(
        spec=fields.spec,
        grid=grid,
        lower=np.array(lower, copy=True),
        a0=a0,
        ldag_b2=(
            np.einsum("ij,ajk->aik", ldag, spaces[1].basis()) if depth >= 1 else None
        ),
        obar1_rows=tuple(obar1_rows) if depth >= 1 else None,
        ldag_b3=(
            np.einsum("ij,ajk->aik", ldag, spaces[2].basis()) if depth >= 2 else None
        ),
        obar2_blocks=tuple(obar2_blocks) if depth >= 2 else None,
    )


def _batch_rhs(tables: QsdFieldTables, i: int, psi: np.ndarray, z: np.ndarray):
    """d/dt psi for a batch (B, dim) with noise rows z (B, n_t) at node i."""
    m = i + 1
    d = psi @ tables.a0[i].T + z[:, i, None] * (psi @ tables.lower.T)
    if tables.depth >= 1:
        zw = z[:, :m] * tables.grid.trapezoid_weights(m)
        coef = zw @ tables.obar1_rows[i]  # (B, |grading 2|)
        ops = np.tensordot(coef, tables.ldag_b2, axes=(1, 0))
        if tables.depth >= 2:
            blk = tables.obar2_blocks[i]
            quad = np.einsum("bs,stc,bt->bc", zw, blk, zw, optimize=True)
            ops += np.tensordot(quad, tables.ldag_b3, axes=(1, 0))
        d -= np.einsum("bij,bj->bi", ops, psi)
    return d


def _heun_step(tables: QsdFieldTables, i: int, psi: np.ndarray, z: np.ndarray):
    dt = tables.grid.dt
    k1 = _batch_rhs(tables, i, psi, z)
    k2 = _batch_rhs(tables, i + 1, psi + dt * k1, z)
    return psi + 0.5 * dt * (k1 + k2)


def qsd_step(
    state: TrajectoryState, noise: NoisePath, tables: QsdFieldTables, dt: float
) -> TrajectoryState:
    """One Heun step of a single trajectory on the tables' grid."""
    grid = tables.grid
    if abs(dt - grid.dt) > 1e-12 * max(1.0, grid.dt):
        raise ValueError(f"dt {dt} does not match the field grid step {grid.dt}")
    if noise.grid.n_t != grid.n_t or abs(noise.grid.dt - grid.dt) > 1e-12:
        raise ValueError("noise path is not on the field grid")
    i = grid.index_of(state.t)
    if i + 1 >= grid.n_t:
        raise ValueError("grid exhausted")
    psi_new = _heun_step(tables, i, state.psi[None, :], noise.values[None, :])[0]
    return TrajectoryState(psi=psi_new, t=grid.times[i + 1], seed=state.seed)


def propagate_trajectory(
    tables: QsdFieldTables, psi0: np.ndarray, z_values: np.ndarray
) -> np.ndarray:
    """(n_t, dim) trajectory states for one noise realization."""
    grid = tables.grid
    psi0 = np.asarray(psi0, dtype=complex)
    out = np.empty((grid.n_t, tables.dim), dtype=complex)
    out[0] = psi0
    psi = psi0[None, :]
    z = np.asarray(z_values, dtype=complex)[None, :]
    for i in range(grid.n_t - 1):
        psi = _heun_step(tables, i, psi, z)
        out[i + 1] = psi[0]
    return out


def propagate_batch(
    tables: QsdFieldTables,
    psi0: np.ndarray,
    z_values: np.ndarray,
    t_index: int | None = None,
) -> np.ndarray:
    """Batch of trajectory states (B, dim) at one output node (default last)."""
    grid = tables.grid
    if t_index is None:
        t_index = grid.n_t - 1
    z = np.asarray(z_values, dtype=complex)
    psi = np.broadcast_to(np.asarray(psi0, dtype=complex), (z.shape[0], tables.dim)).copy()
    for i in range(t_index):
        psi = _heun_step(tables, i, psi, z)
    return psi


@dataclass(frozen=True)
class EnsembleAccumulator:
    """Running sums of trajectory projectors and their squares.

    Merging is associative and commutative up to floating-point reordering;
    callers keep the reduction order fixed so results are reproducible.
    """

    sum_p: np.ndarray  # (n_t, dim, dim) complex
    sum_sq: np.ndarray  # (n_t, dim, dim) real, elementwise |P|^2
    sum_trace: np.ndarray  # (n_t,) real
    sum_trace_sq: np.ndarray  # (n_t,) real
    count: int
    exploded: tuple[int, ...]

    @classmethod
    def empty(cls, n_t: int, dim: int) -> "EnsembleAccumulator":
        return cls(
            sum_p=np.zeros((n_t, dim, dim), dtype=complex),
            sum_sq=np.zeros((n_t, dim, dim)),
            sum_trace=np.zeros(n_t),
            sum_trace_sq=np.zeros(n_t),
            count=0,
            exploded=(),
        )

    def merge(self, other: "EnsembleAccumulator") -> "EnsembleAccumulator":
        return EnsembleAccumulator(
            sum_p=self.sum_p + other.sum_p,
            sum_sq=self.sum_sq + other.sum_sq,
            sum_trace=self.sum_trace + other.sum_trace,
            sum_trace_sq=self.sum_trace_sq + other.sum_trace_sq,
            count=self.count + other.count,
            exploded=self.exploded + other.exploded,
        )

    def mean(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("empty accumulator has no mean")
        return self.sum_p / self.count

    def standard_error(self) -> np.ndarray:
        n = self.count
        if n < 2:
            raise ValueError("standard errors need at least two trajectories")
        var = self.sum_sq / n - np.abs(self.mean()) ** 2
        return np.sqrt(np.clip(var, 0.0, None) / n)

    def trace_standard_error(self) -> np.ndarray:
        n = self.count
        if n < 2:
            raise ValueError("standard errors need at least two trajectories")
        mean_tr = self.sum_trace / n
        var = self.sum_trace_sq / n - mean_tr**2
        return np.sqrt(np.clip(var, 0.0, None) / n)


@dataclass(frozen=True)
class EnsembleResult:
    """Monte-Carlo density-matrix series with per-entry standard errors."""

    grid: TimeGrid
    states: np.ndarray  # (n_t, dim, dim)
    standard_errors: np.ndarray  # (n_t, dim, dim) real
    trace_standard_errors: np.ndarray  # (n_t,) real
    n_trajectories: int  # trajectories included in the average
    n_requested: int
    exploded_trajectories: tuple[int, ...]
    exclusion_applied: bool

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def _chunk_pass(tables, psi0, z, norm_bound, acc_arrays=None, keep=None):
    """Propagate one batch; returns the boolean 'exploded' row mask.

    When ``acc_arrays`` is given, projector sums are accumulated there for
    rows where ``keep`` is True.  Rows whose state goes non-finite are
    zeroed (their later contributions vanish) and always reported.
    """
    n_b = z.shape[0]
    grid = tables.grid
    psi = np.broadcast_to(np.asarray(psi0, dtype=complex), (n_b, tables.dim)).copy()
    exploded = np.zeros(n_b, dtype=bool)
    if keep is None:
        keep = np.ones(n_b, dtype=bool)

    def accumulate(i, psi_now):
        if acc_arrays is None:
            return
        sum_p, sum_sq, sum_tr, sum_tr_sq = acc_arrays
        p = psi_now[keep]
        sum_p[i] += p.T @ p.conj()
        mag = np.abs(p) ** 2
        sum_sq[i] += mag.T @ mag
        tr = mag.sum(axis=1)
        sum_tr[i] += tr.sum()
        sum_tr_sq[i] += (tr**2).sum()

    accumulate(0, psi)
    bound_sq = norm_bound**2
    for i in range(grid.n_t - 1):
        psi = _heun_step(tables, i, psi, z)
        bad = ~np.isfinite(psi).all(axis=1)
        if bad.any():
            psi[bad] = 0.0
            exploded |= bad
        norms_sq = np.einsum("bi,bi->b", psi, psi.conj()).real
        exploded |= norms_sq > bound_sq
        accumulate(i + 1, psi)
    return exploded


def run_ensemble(
    spec: QubitSystemSpec,
    kernel: BathKernel,
    psi0: np.ndarray,
    grid: TimeGrid,
    n_traj: int,
    master_seed: int,
    tables: QsdFieldTables | None = None,
    chunk_size: int = 256,
    norm_bound: float = 1e6,
    exclude_exploded: bool = False,
    include_order2: bool = True,
    symmetry: str = "auto",
) -> EnsembleResult:
    """Ensemble average of linear QSD trajectories with error bars.

    Trajectory b draws its noise from (master_seed, b) alone and the chunk
    accumulators are merged in index order, so the output is bitwise
    reproducible for a fixed configuration regardless of scheduling.
    Trajectories whose norm exceeds ``norm_bound`` are flagged and reported;
    they stay in the average unless ``exclude_exploded`` is set, since
    trimming biases the ensemble mean.  ``include_order2=False`` drops the
    noise-square term (diagnostic; the result is then wrong on purpose).
    """
    if n_traj < 2:
        raise ValueError("ensemble needs at least 2 trajectories")
    psi0 = np.asarray(psi0, dtype=complex)
    if psi0.shape != (spec.dim,):
        raise ValueError(f"psi0 shape {psi0.shape} does not match dim {spec.dim}")

    if tables is None:
        if isinstance(kernel, OrnsteinUhlenbeckKernel):
            fields = ReducedHierarchy(spec, grid, kernel, symmetry=symmetry)
        else:
            from .hierarchy import init_hierarchy

            fields = init_hierarchy(spec, grid, kernel)
        tables = compute_qsd_tables(fields)
    if not include_order2:
        tables = tables.drop_order2()

    factor = noise_factor(kernel, grid)
    total = EnsembleAccumulator.empty(grid.n_t, spec.dim)
    for b0 in range(0, n_traj, chunk_size):
        indices = range(b0, min(b0 + chunk_size, n_traj))
        xi = np.stack(
            [_standard_complex_normals(master_seed, b, grid.n_t) for b in indices]
        )
        z = xi @ factor.T
        chunk = EnsembleAccumulator.empty(grid.n_t, spec.dim)
        arrays = (chunk.sum_p, chunk.sum_sq, chunk.sum_trace, chunk.sum_trace_sq)
        if exclude_exploded:
            mask = _chunk_pass(tables, psi0, z, norm_bound)
            _chunk_pass(tables, psi0, z, norm_bound, arrays, keep=~mask)
            included = int((~mask).sum())
        else:
            mask = _chunk_pass(tables, psi0, z, norm_bound, arrays)
            included = len(indices)
        chunk = dataclasses.replace(
            chunk,
            count=included,
            exploded=tuple(int(b0 + k) for k in np.flatnonzero(mask)),
        )
        total = total.merge(chunk)

    if total.count < 2:
        raise RuntimeError(
            f"only {total.count} of {n_traj} trajectories survived the norm cap "
            f"{norm_bound:g}; cannot form an ensemble average"
        )
    return EnsembleResult(
        grid=grid,
        states=total.mean(),
        standard_errors=total.standard_error(),
        trace_standard_errors=total.trace_standard_error(),
        n_trajectories=total.count,
        n_requested=n_traj,
        exploded_trajectories=total.exploded,
        exclusion_applied=exclude_exploded,
    )
