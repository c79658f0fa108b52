import numpy as np
import pytest

from pttkit import quantum as qo


def _phase_equal(a, b, tol=1e-10):
    return qo.equal_up_to_phase(a, b, tol)


class TestPauli:
    def test_x(self):
        assert np.abs(qo.pauli("X") - [[0, 1], [1, 0]]).max() == 0

    def test_two_identities(self):
        assert np.abs(qo.pauli("II") - np.eye(4)).max() == 0

    def test_kronecker(self):
        assert np.abs(qo.pauli("ZX") - np.kron(qo.Z, qo.X)).max() == 0

    def test_bad_label(self):
        with pytest.raises((KeyError, ValueError)):
            qo.pauli("Q")


class TestCliffords:
    def test_count_and_identity(self):
        C = qo.single_qubit_cliffords()
        assert len(C) == 24
        assert _phase_equal(C[0], np.eye(2))

    def test_contains_generators(self):
        C = qo.single_qubit_cliffords()
        assert any(_phase_equal(c, qo.H) for c in C)
        assert any(_phase_equal(c, qo.S) for c in C)

    def test_distinct(self):
        C = qo.single_qubit_cliffords()
        for i in range(24):
            for j in range(i):
                assert not _phase_equal(C[i], C[j])

    def test_closed_under_composition(self):
        C = qo.single_qubit_cliffords()
        for a in C:
            for b in C:
                assert any(_phase_equal(a @ b, c) for c in C)

    def test_canonical_angles_reproduce_members(self):
        C = qo.single_qubit_cliffords()
        for i, c in enumerate(C):
            assert _phase_equal(qo.u3(*qo.clifford_angles(i)), c)


class TestU3:
    def test_zero_is_identity(self):
        U = qo.u3(0, 0, 0)
        assert abs(abs(np.trace(U)) / 2 - 1) < 1e-12

    def test_pi_0_pi_is_x(self):
        assert _phase_equal(qo.u3(np.pi, 0, np.pi), qo.X)

    def test_matches_written_product(self):
        th, ph, la = 0.3, 1.1, -0.7
        ref = qo.rz(ph + 3 * np.pi) @ qo.rx(np.pi / 2) @ qo.rz(th + np.pi) @ qo.rx(np.pi / 2) @ qo.rz(la)
        assert np.abs(qo.u3(th, ph, la) - ref).max() < 1e-12

    def test_zyz_roundtrip(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            U = qo.haar_unitary(2, rng)
            assert _phase_equal(qo.u3(*qo.zyz_angles(U)), U, 1e-9)


class TestChoi:
    def test_identity_channel(self):
        c = qo.choi_of(np.eye(2))
        phi = np.array([1, 0, 0, 1.0])
        assert np.abs(c.matrix - np.outer(phi, phi)).max() < 1e-15
        assert abs(c.trace - 2) < 1e-15

    def test_fully_depolarising(self):
        kraus = [0.5 * qo.pauli(p) for p in "IXYZ"]
        c = qo.choi_of(kraus)
        assert np.abs(c.matrix - np.eye(4) / 2).max() < 1e-14

    def test_unitary_x_rank_one(self):
        w = np.linalg.eigvalsh(qo.choi_of(qo.X).matrix)
        assert abs(w.max() - 2) < 1e-12
        assert np.sum(np.abs(w) > 1e-12) == 1

    def test_mismatched_kraus(self):
        with pytest.raises(ValueError):
            qo.choi_of([np.eye(2), np.eye(3)])

    def test_link_identity_identity(self):
        a = qo.choi_of(np.eye(2), ("c", "b"))
        b = qo.choi_of(np.eye(2), ("b", "a"))
        out = qo.link_product(a, b)
        assert out.labels == ["c", "a"]
        assert np.abs(out.matrix - qo.choi_of(np.eye(2)).matrix).max() < 1e-14

    def test_link_with_state_applies_channel(self):
        rng = np.random.default_rng(1)
        K = [qo.haar_unitary(2, rng) * np.sqrt(0.7), qo.haar_unitary(2, rng) * np.sqrt(0.3)]
        psi = qo.haar_unitary(2, rng)[:, 0]
        rho = np.outer(psi, psi.conj())
        ch = qo.choi_of(K, ("out", "in"))
        st = qo.ChoiState(rho, [2], ["in"])
        out = qo.link_product(ch, st)
        assert np.abs(out.matrix - qo.apply_kraus(K, rho)).max() < 1e-12

    def test_link_rejects_unlinked_clash(self):
        a = qo.choi_of(np.eye(2), ("x", "y"))
        with pytest.raises(ValueError):
            qo.link_product(a, a, shared=["x"])

    def test_partial_trace_full(self):
        rho = np.diag([0.25, 0.25, 0.5, 0.0]).astype(complex)
        out = qo.partial_trace(qo.ChoiState(rho, [2, 2], ["a", "b"]), ["a", "b"])
        assert abs(out.matrix[0, 0] - 1) < 1e-15

    def test_partial_trace_bell(self):
        c = qo.choi_of(np.eye(2), ("a", "b"))
        red = qo.partial_trace(qo.ChoiState(c.matrix / 2, [2, 2], ["a", "b"]), ["b"])
        assert np.abs(red.matrix - np.eye(2) / 2).max() < 1e-15

    def test_partial_trace_unknown_leg(self):
        with pytest.raises(ValueError):
            qo.partial_trace(qo.choi_of(np.eye(2)), ["zz"])


class TestDistances:
    def test_hellinger(self):
        assert qo.hellinger_distance([0.3, 0.7], [0.3, 0.7]) < 1e-15
        assert abs(qo.hellinger_distance([1, 0], [0, 1]) - 1) < 1e-15
        ref = np.sqrt(0.5 * ((np.sqrt(0.5) - 1) ** 2 + 0.5))
        assert abs(qo.hellinger_distance([0.5, 0.5], [1, 0]) - ref) < 1e-12
        assert abs(ref - 0.541196) < 1e-6

    def test_hellinger_rejects_bad_input(self):
        with pytest.raises(ValueError):
            qo.hellinger_distance([0.5, 0.5], [1.0])
        with pytest.raises(ValueError):
            qo.hellinger_distance([0.5, 0.6], [0.5, 0.5])

    def test_fidelity(self):
        psi = np.array([1, 1j]) / np.sqrt(2)
        rho = np.outer(psi, psi.conj())
        assert abs(qo.uhlmann_fidelity(rho, rho) - 1) < 1e-10
        assert qo.uhlmann_fidelity(np.diag([1.0, 0]), np.diag([0, 1.0])) < 1e-12
        assert abs(qo.uhlmann_fidelity(np.diag([1.0, 0]), np.eye(2) / 2) - 0.5) < 1e-12

    def test_fidelity_rejects_non_psd(self):
        with pytest.raises(ValueError):
            qo.uhlmann_fidelity(np.diag([1.5, -0.5]), np.eye(2) / 2)

    def test_trace_distance(self):
        a = np.diag([0.7, 0.3])
        assert qo.trace_distance(a, a) < 1e-15
        assert abs(qo.trace_distance(np.diag([1.0, 0]), np.diag([0, 1.0])) - 1) < 1e-14
        assert abs(qo.trace_distance(a, np.eye(2) / 2) - 0.2) < 1e-14
        with pytest.raises(ValueError):
            qo.trace_distance(np.eye(2), np.eye(3))

    def test_average_gate_fidelity(self):
        assert abs(qo.average_gate_fidelity(qo.X, [qo.X]) - 1) < 1e-12
        dep = [0.5 * qo.pauli(p) for p in "IXYZ"]
        assert abs(qo.average_gate_fidelity(np.eye(2), dep) - 0.5) < 1e-12

    def test_entropy(self):
        assert abs(qo.von_neumann_entropy(np.eye(2) / 2) - np.log(2)) < 1e-14
        assert qo.von_neumann_entropy(np.diag([1.0, 0])) < 1e-14
