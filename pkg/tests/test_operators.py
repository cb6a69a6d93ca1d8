import numpy as np
import pytest

from nmqsd.operators import (
    DensityMatrix,
    Operator,
    QubitSystemSpec,
    build_lindblad_operator,
    build_system_hamiltonian,
    component_map,
    excitation_grading,
    excitation_number_operator,
    from_components,
    graded_support,
    named_state,
    partial_trace,
    to_components,
)

rng = np.random.default_rng(7)


def random_spec(n):
    return QubitSystemSpec(
        n_qubits=n,
        omega=tuple(rng.uniform(0.5, 2.0, n)),
        j_xy=rng.uniform(-0.5, 0.5),
        kappa=tuple(rng.uniform(0.2, 1.5, n)),
    )


def random_graded(n, d):
    comp = rng.normal(size=2 * len(graded_support(n, d)[0])).view(complex)
    return from_components(comp, n, d)


class TestSpec:
    def test_rejects_bad_lengths(self):
        with pytest.raises(ValueError):
            QubitSystemSpec(n_qubits=2, omega=(1.0,), kappa=(1.0, 1.0))
        with pytest.raises(ValueError):
            QubitSystemSpec(n_qubits=2, omega=(1.0, 1.0), kappa=(1.0,))
        with pytest.raises(ValueError):
            QubitSystemSpec(n_qubits=0, omega=())

    def test_default_kappa(self):
        spec = QubitSystemSpec(n_qubits=2, omega=(1.0, 1.0))
        assert spec.kappa == (1.0, 1.0)


class TestHamiltonian:
    def test_single_qubit_diagonal(self):
        spec = QubitSystemSpec(n_qubits=1, omega=(1.0,))
        h = build_system_hamiltonian(spec).matrix
        # index order {|0>, |1>}: +omega/2 on the excited state
        assert np.allclose(h, np.diag([-0.5, 0.5]))

    def test_three_qubit_diagonal_entry(self):
        spec = QubitSystemSpec(n_qubits=3, omega=(1.0, 1.3, 0.7), j_xy=0.0)
        h = build_system_hamiltonian(spec).matrix
        assert np.isclose(h[7, 7], (1.0 + 1.3 + 0.7) / 2)  # |111>
        assert np.count_nonzero(h - np.diag(np.diag(h))) == 0

    def test_xy_matrix_element(self):
        # <10|H|01> = 2 J_xy from sx sx + sy sy = 2(s+ s- + s- s+)
        spec = QubitSystemSpec(n_qubits=2, omega=(1.0, 1.0), j_xy=0.37)
        h = build_system_hamiltonian(spec).matrix
        assert np.isclose(h[2, 1], 2 * 0.37)

    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_hermitian_and_excitation_conserving(self, n):
        for _ in range(5):
            spec = random_spec(n)
            h = build_system_hamiltonian(spec)
            assert np.allclose(h.matrix, h.matrix.conj().T, atol=1e-14)
            num = excitation_number_operator(n).matrix
            comm = h.matrix @ num - num @ h.matrix
            assert np.abs(comm).max() == 0.0


class TestLindblad:
    def test_single_qubit_is_lowering(self):
        spec = QubitSystemSpec(n_qubits=1, omega=(1.0,), kappa=(1.0,))
        ell = build_lindblad_operator(spec).matrix
        assert np.allclose(ell, [[0, 1], [0, 0]])

    def test_nilpotency_degree(self):
        spec = QubitSystemSpec(n_qubits=3, omega=(1.0,) * 3, kappa=(1.0,) * 3)
        ell = build_lindblad_operator(spec).matrix
        cube = np.linalg.matrix_power(ell, 3)
        assert np.abs(cube).max() > 0
        assert np.abs(ell @ cube).max() == 0.0

    def test_cubed_matrix_element(self):
        # <000|L^3|111> = 3! k1 k2 k3 (all orderings of three commuting lowerings)
        spec = QubitSystemSpec(n_qubits=3, omega=(1.0,) * 3, kappa=(0.5, 2.0, 3.0))
        ell = build_lindblad_operator(spec).matrix
        cube = np.linalg.matrix_power(ell, 3)
        assert np.isclose(cube[0, 7], 6 * 0.5 * 2.0 * 3.0)

    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_nilpotency_random_kappa(self, n):
        for _ in range(5):
            spec = random_spec(n)
            ell = build_lindblad_operator(spec).matrix
            assert np.abs(np.linalg.matrix_power(ell, n + 1)).max() == 0.0


class TestGrading:
    def test_lindblad_grading(self):
        spec = random_spec(3)
        ell = build_lindblad_operator(spec)
        assert list(excitation_grading(ell)) == [1]
        assert list(excitation_grading(build_system_hamiltonian(spec))) == [0]
        assert list(excitation_grading(ell @ ell)) == [2]

    def test_grading_composition(self):
        for _ in range(10):
            da, db = rng.integers(-2, 3, size=2)
            a = Operator(random_graded(3, da), grading=int(da))
            b = Operator(random_graded(3, db), grading=int(db))
            prod = a @ b
            report = excitation_grading(prod)
            assert set(report) <= {int(da + db)}

    def test_declared_grading_validated(self):
        with pytest.raises(ValueError):
            Operator(np.eye(4), grading=1)

    def test_component_roundtrip(self):
        for d in (-2, 0, 1, 3):
            m = random_graded(3, d)
            comp = to_components(m, 3, d)
            assert np.allclose(from_components(comp, 3, d), m)

    def test_component_map_commutator(self):
        spec = random_spec(3)
        h = build_system_hamiltonian(spec).matrix
        cmap = component_map(lambda x: h @ x - x @ h, 3, 1, 1)
        m = random_graded(3, 1)
        lhs = cmap @ to_components(m, 3, 1)
        rhs = to_components(h @ m - m @ h, 3, 1)
        assert np.allclose(lhs, rhs)

    def test_support_sizes_three_qubits(self):
        assert len(graded_support(3, 1)[0]) == 15
        assert len(graded_support(3, 2)[0]) == 6
        assert len(graded_support(3, 3)[0]) == 1


class TestPartialTrace:
    def test_product_state(self):
        rho = DensityMatrix.from_state(named_state("111", 3))
        red = partial_trace(rho, [1, 2])
        expect = np.zeros((4, 4))
        expect[3, 3] = 1.0
        assert np.allclose(red.matrix, expect)

    def test_ghz_marginal(self):
        rho = DensityMatrix.from_state(named_state("ghz", 3))
        red = partial_trace(rho, [1, 2]).matrix
        expect = np.zeros((4, 4))
        expect[0, 0] = expect[3, 3] = 0.5
        assert np.allclose(red, expect)

    def test_w_marginal_coherence(self):
        rho = DensityMatrix.from_state(named_state("w", 3))
        red = partial_trace(rho, [1, 2]).matrix
        # <01| rho_12 |10> = 1/3 by direct summation over the third qubit
        assert np.isclose(red[1, 2], 1 / 3)

    def test_trace_and_hermiticity_preserved(self):
        for _ in range(5):
            m = rng.normal(size=(8, 8)) + 1j * rng.normal(size=(8, 8))
            m = m @ m.conj().T
            m /= np.trace(m)
            red = partial_trace(m, [2, 3], n_qubits=3)
            assert np.isclose(np.trace(red), 1.0)
            assert np.allclose(red, red.conj().T)

    def test_keep_order(self):
        psi = np.kron(named_state("1", 1), named_state("0", 1))
        rho = np.outer(psi, psi.conj())
        r12 = partial_trace(rho, [1, 2], n_qubits=2)
        r21 = partial_trace(rho, [2, 1], n_qubits=2)
        assert np.isclose(r12[2, 2], 1.0)  # |10>
        assert np.isclose(r21[1, 1], 1.0)  # |01>

    def test_invalid_subset(self):
        rho = DensityMatrix.from_state(named_state("ghz", 3))
        with pytest.raises(ValueError):
            partial_trace(rho, [])
        with pytest.raises(ValueError):
            partial_trace(rho, [0, 1])


class TestDensityMatrix:
    def test_rejects_bad_trace(self):
        with pytest.raises(ValueError):
            DensityMatrix(np.eye(2))

    def test_rejects_non_hermitian(self):
        m = np.array([[0.5, 0.2], [0.0, 0.5]])
        with pytest.raises(ValueError):
            DensityMatrix(m)

    def test_min_eigenvalue(self):
        rho = DensityMatrix(np.diag([0.75, 0.25]).astype(complex))
        assert np.isclose(rho.min_eigenvalue(), 0.25)


class TestNamedStates:
    def test_bit_string(self):
        v = named_state("101", 3)
        assert np.isclose(v[5], 1.0)

    def test_bell_tensor_zero(self):
        v = named_state("bell00", 3)
        assert np.isclose(v[0b110], 1 / np.sqrt(2))
        assert np.isclose(v[0b000], 1 / np.sqrt(2))

    def test_unknown(self):
        with pytest.raises(ValueError):
            named_state("nope", 3)
