import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from nmqsd.grids import TimeGrid
from nmqsd.hierarchy import init_hierarchy
from nmqsd.kernels import OrnsteinUhlenbeckKernel
from nmqsd.master import (
    assemble_R,
    brute_force_R,
    compute_r_tables,
    lindblad_propagate,
    propagate_master,
    propagate_rho,
    step_master,
)
from nmqsd.operators import (
    QubitSystemSpec,
    build_lindblad_operator,
    build_system_hamiltonian,
    named_state,
)
from nmqsd.reduced import ReducedHierarchy

SPEC1 = QubitSystemSpec(n_qubits=1, omega=(1.0,))
SPEC2 = QubitSystemSpec(n_qubits=2, omega=(1.0, 1.3), j_xy=0.2)
SPEC3 = QubitSystemSpec(n_qubits=3, omega=(1.0, 1.3, 0.7), j_xy=0.2)
SPEC3_SYM = QubitSystemSpec(n_qubits=3, omega=(1.0, 1.0, 1.0))
OU = OrnsteinUhlenbeckKernel(0.4)


def random_rho(dim, seed=7):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    rho = a @ a.conj().T
    return rho / np.trace(rho)


class TestFactorizedVsBruteForce:
    """The factorized R assembly must reproduce the 4-D quadrature exactly."""

    @pytest.mark.parametrize("spec", [SPEC1, SPEC2, SPEC3])
    def test_direct_fields(self, spec):
        grid = TimeGrid(0.1, 40)
        h = init_hierarchy(spec, grid, OU)
        h.propagate_to(grid.n_t - 1)
        rho = random_rho(spec.dim)
        fact = assemble_R(h, rho)
        brute = brute_force_R(h, rho)
        scale = max(1.0, np.abs(brute.r).max())
        assert np.abs(fact.r - brute.r).max() / scale < 1e-10

    def test_reduced_fields_symmetric(self):
        grid = TimeGrid(0.1, 40)
        h = ReducedHierarchy(SPEC3_SYM, grid, OU)
        h.propagate_to(grid.n_t - 1)
        rho = random_rho(8, seed=3)
        fact = assemble_R(h, rho)
        brute = brute_force_R(h, rho)
        scale = max(1.0, np.abs(brute.r).max())
        assert np.abs(fact.r - brute.r).max() / scale < 1e-10

    def test_term_breakdown_sums_to_r(self):
        grid = TimeGrid(0.1, 20)
        h = init_hierarchy(SPEC3, grid, OU)
        h.propagate_to(grid.n_t - 1)
        rho = random_rho(8)
        fact = assemble_R(h, rho)
        assert set(fact.term_breakdown) == {"i", "ii", "iii+iv"}
        total = sum(fact.term_breakdown.values())
        assert np.abs(total - fact.r).max() < 1e-12
        assert fact.quadrature_cost > 0

    def test_brute_force_rejects_fine_grids(self):
        grid = TimeGrid(0.01, 200)
        h = ReducedHierarchy(SPEC1, grid, OU)
        h.propagate_to(grid.n_t - 1)
        with pytest.raises(ValueError, match="coarse"):
            brute_force_R(h, random_rho(2))


class TestTablesConsistency:
    def test_reduced_matches_direct_tables(self):
        # same R operator from both field propagators on a coarse grid
        grid = TimeGrid(0.05, 17)
        rho = random_rho(8, seed=11)
        direct = init_hierarchy(SPEC3, grid, OU)
        reduced = ReducedHierarchy(SPEC3, grid, OU)
        direct.propagate_to(grid.n_t - 1)
        reduced.propagate_to(grid.n_t - 1)
        r_d = assemble_R(direct, rho).r
        r_r = assemble_R(reduced, rho).r
        assert np.abs(r_d - r_r).max() < 5e-3
        assert np.abs(r_d).max() > 1e-3

    def test_symmetric_storage_matches_entry_storage(self):
        grid = TimeGrid(0.05, 30)
        rho = random_rho(8, seed=2)
        sym = ReducedHierarchy(SPEC3_SYM, grid, OU, symmetry="auto")
        ent = ReducedHierarchy(SPEC3_SYM, grid, OU, symmetry="none")
        sym.propagate_to(grid.n_t - 1)
        ent.propagate_to(grid.n_t - 1)
        assert np.abs(assemble_R(sym, rho).r - assemble_R(ent, rho).r).max() < 1e-12

    def test_propagate_rho_matches_either_storage(self):
        grid = TimeGrid(0.02, 60)
        rho0 = np.outer(named_state("111", 3), named_state("111", 3).conj())
        res_sym = propagate_master(SPEC3_SYM, OU, rho0, grid, symmetry="auto")
        res_ent = propagate_master(SPEC3_SYM, OU, rho0, grid, symmetry="none")
        assert np.abs(res_sym.states - res_ent.states).max() < 1e-11


class TestSingleQubitExact:
    """Exact one-qubit solution: rho_ee = |G|^2 with a closed memory ODE."""

    @pytest.mark.parametrize("gamma", [0.4, 1.5])
    def test_excited_population_and_coherence(self, gamma):
        kernel = OrnsteinUhlenbeckKernel(gamma)
        grid = TimeGrid.from_t_max(0.002, 4.0)
        h_sys = build_system_hamiltonian(SPEC1).matrix
        # memory integral carries the transition frequency: G is the excited
        # amplitude with the ground-state phase factored out
        delta = float(np.real(h_sys[1, 1] - h_sys[0, 0]))
        kappa = SPEC1.kappa[0]

        def rhs(t, y):
            g, u = y[0] + 1j * y[1], y[2] + 1j * y[3]
            dg = -1j * delta * g - kappa**2 * u
            du = 0.5 * gamma * g - gamma * u
            return [dg.real, dg.imag, du.real, du.imag]

        sol = solve_ivp(
            rhs, (0.0, grid.t_max), [1.0, 0.0, 0.0, 0.0],
            t_eval=grid.times, rtol=1e-11, atol=1e-12,
        )
        g_t = sol.y[0] + 1j * sol.y[1]

        psi0 = (named_state("0", 1) + named_state("1", 1)) / np.sqrt(2)
        rho0 = np.outer(psi0, psi0.conj())
        res = propagate_master(SPEC1, kernel, rho0, grid)
        rho_ee = np.real(res.states[:, 1, 1])
        rho_ge = res.states[:, 0, 1]
        assert np.abs(rho_ee - 0.5 * np.abs(g_t) ** 2).max() < 5e-6
        assert np.abs(rho_ge - 0.5 * np.conj(g_t)).max() < 5e-6

    def test_markov_limit_matches_lindblad(self):
        # initial slippage is O(kappa^2/gamma), so the transient gap stays
        # a few percent even deep in the Markov regime; the final-time gap
        # is orders of magnitude smaller
        kernel = OrnsteinUhlenbeckKernel(40.0)
        grid = TimeGrid.from_t_max(0.0005, 3.0)
        rho0 = np.outer(named_state("1", 1), named_state("1", 1).conj())
        res = propagate_master(SPEC1, kernel, rho0, grid)
        lind = lindblad_propagate(SPEC1, rho0, grid)
        assert np.abs(res.states - lind.states).max() < 3e-2
        assert np.abs(res.final - lind.final).max() < 1e-3


@pytest.fixture(scope="module")
def three_qubit_run():
    grid = TimeGrid.from_t_max(0.01, 3.0)
    psi0 = named_state("100", 3)
    rho0 = np.outer(psi0, psi0.conj())
    return propagate_master(SPEC3_SYM, OU, rho0, grid)


class TestInvariants:
    def test_trace_conserved(self, three_qubit_run):
        assert three_qubit_run.trace_drift_max < 1e-10

    def test_hermiticity_defect_small(self, three_qubit_run):
        assert three_qubit_run.hermiticity_defect_max < 1e-10

    def test_positivity(self, three_qubit_run):
        assert three_qubit_run.min_eigenvalue > -1e-6

    def test_dynamics_nontrivial(self, three_qubit_run):
        pop = np.real(three_qubit_run.states[:, 4, 4])
        assert pop[0] > 0.99
        assert pop[-1] < 0.9

    def test_zero_coupling_is_unitary(self):
        spec = QubitSystemSpec(n_qubits=2, omega=(1.0, 1.3), j_xy=0.3, kappa=(0.0, 0.0))
        grid = TimeGrid.from_t_max(0.002, 2.0)
        psi0 = (named_state("10", 2) + named_state("01", 2)) / np.sqrt(2)
        rho0 = np.outer(psi0, psi0.conj())
        res = propagate_master(spec, OU, rho0, grid)
        h_sys = build_system_hamiltonian(spec).matrix
        u = expm(-1j * grid.t_max * h_sys)
        exact = u @ rho0 @ u.conj().T
        assert np.abs(res.final - exact).max() < 1e-4
        purity = np.real(np.trace(res.final @ res.final))
        assert abs(purity - 1.0) < 1e-7


class TestLindblad:
    def test_single_qubit_decay(self):
        grid = TimeGrid.from_t_max(0.01, 5.0)
        rho0 = np.outer(named_state("1", 1), named_state("1", 1).conj())
        res = lindblad_propagate(SPEC1, rho0, grid)
        kappa = SPEC1.kappa[0]
        exact = np.exp(-(kappa**2) * grid.times)
        assert np.abs(np.real(res.states[:, 1, 1]) - exact).max() < 1e-10
        assert res.trace_drift_max < 1e-12

    def test_collective_dissipator(self):
        # dark singlet state of two identical qubits does not decay
        spec = QubitSystemSpec(n_qubits=2, omega=(1.0, 1.0))
        grid = TimeGrid.from_t_max(0.01, 4.0)
        psi0 = (named_state("10", 2) - named_state("01", 2)) / np.sqrt(2)
        rho0 = np.outer(psi0, psi0.conj())
        ell = build_lindblad_operator(spec).matrix
        assert np.abs(ell @ psi0).max() < 1e-14
        res = lindblad_propagate(spec, rho0, grid)
        assert np.abs(res.final - rho0).max() < 1e-10


class TestStepper:
    def test_step_master_matches_propagation(self):
        grid = TimeGrid(0.02, 40)
        fields = ReducedHierarchy(SPEC2, grid, OU)
        tables = compute_r_tables(fields)
        rho0 = random_rho(4, seed=5)
        res = propagate_rho(tables, rho0)
        stepped = step_master(res.states[10], tables, 10)
        sym = 0.5 * (stepped + stepped.conj().T)
        assert np.abs(sym - res.states[11]).max() < 1e-12

    def test_trace_drift_abort(self):
        grid = TimeGrid(0.02, 40)
        tables = compute_r_tables(ReducedHierarchy(SPEC2, grid, OU))
        bad = np.eye(4, dtype=complex)  # trace 4, far from normalized
        with pytest.raises(FloatingPointError, match="trace drift"):
            propagate_rho(tables, bad, trace_tol=1e-8)
