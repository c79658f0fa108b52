import io

import numpy as np
import pytest

from pttkit import model as M
from pttkit import noise as N
from pttkit import quantum as qo

PHI = np.array([1, 0, 0, 1.0])
PSI = qo.X.reshape(-1)


def _identity_dense(k, n=1):
    """Dense identity process: Phi+ on every (o_j, i_j) pair and |0><0| on o_0."""
    D = 2**n
    phi = np.eye(D).reshape(-1)
    rho0 = np.zeros((D, D))
    rho0[0, 0] = 1
    out = np.ones((1, 1))
    for _ in range(k):
        out = np.kron(out, np.outer(phi, phi))
    return np.kron(out, rho0)


def _random_gateset(seed, n=1, k=2, chi=2, chi_gamma=1):
    rng = np.random.default_rng(seed)
    return M.init_gateset(n, k, chi_nu=chi, chi_alpha=chi, chi_mu=chi, chi_gamma=chi_gamma, seed=rng, scale=0.4, pulse_scale=0.2)


class TestInit:
    def test_zero_scale_is_identity_process(self):
        pt = M.init_process_lpdo(1, 2, seed=0, scale=0.0)
        assert np.abs(M.lpdo_to_dense(pt).matrix - _identity_dense(2)).max() < 1e-14

    def test_zero_scale_two_qubits(self):
        pt = M.init_process_lpdo(2, 1, chi_alpha=2, seed=0, scale=0.0)
        assert np.abs(M.lpdo_to_dense(pt).matrix - _identity_dense(1, 2)).max() < 1e-14

    def test_identity_circuit(self):
        gs = M.init_gateset(1, 3, seed=0, scale=0.0)
        c = N.CircuitSpec([[{"kind": "named", "name": "I"}]] * 3, ["Z"])
        assert abs(M.predict_probability(gs, c, "0") - 1) < 1e-12

    def test_rejects_bad_bond(self):
        with pytest.raises(ValueError):
            M.init_process_lpdo(1, 2, chi_nu=0)

    def test_random_lpdo_is_psd(self):
        pt = M.init_process_lpdo(2, 2, chi_nu=2, chi_alpha=2, chi_mu=2, seed=1, scale=1.0)
        rho = M.lpdo_to_dense(pt).matrix
        w = np.linalg.eigvalsh(rho / np.trace(rho).real)
        assert w.min() >= -1e-10


class TestPrediction:
    def test_ideal_gateset_matches_noiseless_simulator(self):
        model = N.build_exchange_bath(2, J_ranges=(0.0, 0.0), n_steps=2)
        gs = M.exact_gateset(model)
        rng = np.random.default_rng(0)
        for _ in range(10):
            c = N.random_circuit(2, 2, rng, "clifford")
            p = N.run_circuit_exact(model, c)
            q = M.predict_distributions(gs, [c])[0]
            assert np.abs(p - q).max() < 1e-9

    @pytest.mark.parametrize("profile", [N.ControlProfile(), N.ControlProfile("coherent_offset", epsilon=np.pi / 16)])
    def test_exact_encoding_matches_simulator(self, profile):
        model = N.build_exchange_bath(1, J_ranges=(0.3, 1.2), n_steps=3, seed=2, profile=profile)
        gs = M.exact_gateset(model)
        rng = np.random.default_rng(1)
        circs = [N.random_circuit(1, 3, rng, "u3") for _ in range(8)]
        q = M.predict_distributions(gs, circs)
        for c, row in zip(circs, q):
            assert np.abs(N.run_circuit_exact(model, c) - row).max() < 1e-10

    def test_dense_born_rule(self):
        model = N.build_exchange_bath(1, J_ranges=(0.2, 1.5), n_steps=2, seed=4)
        gs = M.exact_gateset(model)
        ups = N.dense_process_tensor(model)
        rng = np.random.default_rng(2)
        for _ in range(5):
            c = N.random_circuit(1, 2, rng, "u3")
            for x in range(2):
                ref = N.born_probability(ups, N.dense_tester(c, x))
                assert abs(M.predict_probability(gs, c, x) - ref) < 1e-10

    @pytest.mark.parametrize("n,chi_gamma", [(1, 1), (1, 2), (2, 2)])
    def test_network_matches_dense_tester(self, n, chi_gamma):
        gs = _random_gateset(3, n=n, k=2, chi_gamma=chi_gamma)
        ups = M.lpdo_to_dense(gs.process)
        rng = np.random.default_rng(4)
        for _ in range(3):
            c = N.random_circuit(n, 2, rng, "u3")
            q = M.predict_distributions(gs, [c])[0]
            for x in range(2**n):
                ref = N.born_probability(ups, M.tester_to_dense(gs, c, x))
                assert abs(q[x] - ref) < 1e-10 * max(1.0, abs(ref))

    def test_site_doubling_quadruples(self):
        gs = _random_gateset(12, chi=1)
        c = N.random_circuit(1, 2, np.random.default_rng(1), "u3")
        p = M.predict_distributions(gs, [c])[0]
        gs.process.phi[0][0] = 2 * gs.process.phi[0][0]
        assert np.abs(M.predict_distributions(gs, [c])[0] - 4 * p).max() < 1e-12 * max(1.0, p.max())

    @pytest.mark.parametrize("n", [1, 2])
    def test_ideal_tester_matches_dense_choi(self, n):
        gs = M.init_gateset(n, 2, seed=0, scale=0.0)
        rng = np.random.default_rng(n)
        for _ in range(3):
            c = N.random_circuit(n, 2, rng, "u3")
            for x in range(2**n):
                T = M.tester_to_dense(gs, c, x).matrix
                assert np.abs(T - N.dense_tester(c, x).matrix).max() < 1e-9

    def test_normalised_prediction(self):
        gs = _random_gateset(5)
        c = N.random_circuit(1, 2, np.random.default_rng(0))
        p = M.predict_distributions(gs, [c], normalise=True)[0]
        assert abs(p.sum() - 1) < 1e-12

    def test_outcome_validation(self):
        gs = M.init_gateset(1, 2, seed=0)
        c = N.CircuitSpec([[{"kind": "clifford", "i": 0}]] * 2, ["Z"])
        with pytest.raises(ValueError):
            M.predict_probability(gs, c, "01")
        with pytest.raises(ValueError):
            M.predict_probability(gs, N.CircuitSpec([[{"kind": "clifford", "i": 0}]], ["Z"]), 0)

    def test_prediction_independent_of_batch_composition(self):
        gs = _random_gateset(6, k=3)
        rng = np.random.default_rng(7)
        circs = [N.random_circuit(1, 3, rng) for _ in range(6)]
        together = M.predict_distributions(gs, circs)
        alone = np.array([M.predict_distributions(gs, [c])[0] for c in circs])
        assert np.abs(together - alone).max() < 1e-13


class TestCausalityConstraints:
    def test_structure(self):
        k = 4
        for c in M.sample_causality_constraints(2, k, 300, seed=0):
            legs = c.legs
            # find j: last slot whose i-leg is non-identity
            js = [j for j in range(1, k + 1) if c.leg(f"i{j}") != "II"]
            j = max(js)
            assert c.leg(f"o{j}") == "II"
            for m in range(j + 1, k + 1):
                assert c.leg(f"o{m}") == "II" and c.leg(f"i{m}") == "II"
            assert len(legs) == 2 * k + 1

    def test_k1_label_space(self):
        labels = {c.label for c in M.sample_causality_constraints(1, 1, 10**4, seed=1)}
        expect = {f"I|{p}|{q}" for p in "XYZ" for q in "IXYZ"}
        assert labels == expect

    def test_identity_process_satisfies_all(self):
        pt = M.init_process_lpdo(1, 3, seed=0, scale=0.0)
        cons = M.sample_causality_constraints(1, 3, 500, seed=2)
        assert np.abs(M.pauli_expectations(pt, cons)).max() < 1e-12
        assert M.causality_penalty(pt, cons) < 1e-20

    def test_exact_bath_is_causal(self):
        model = N.build_exchange_bath(2, J_ranges=(0.3, 1.0), n_steps=2, seed=1)
        pt = M.encode_noise_model(model)
        cons = M.sample_causality_constraints(2, 2, 300, seed=3)
        assert np.abs(M.pauli_expectations(pt, cons)).max() < 1e-10

    def test_biased_process_matches_dense(self):
        pt = M.init_process_lpdo(1, 2, seed=0, scale=0.0)
        # an input-leg bias: make i_1 see a non-maximally-mixed marginal
        pt.phi[0][0][1, 1] *= 0.5
        cons = M.sample_causality_constraints(1, 2, 200, seed=4)
        dense = M.lpdo_to_dense(pt).matrix
        ref = sum(np.trace(c.matrix() @ dense).real ** 2 for c in cons)
        val = M.causality_penalty(pt, cons)
        assert val > 0
        assert abs(val - ref) < 1e-10 * max(1.0, ref)

    def test_pauli_values_match_dense_random(self):
        pt = M.init_process_lpdo(2, 1, chi_nu=2, chi_alpha=2, chi_mu=2, seed=5, scale=0.7)
        cons = M.sample_causality_constraints(2, 1, 100, seed=6)
        dense = M.lpdo_to_dense(pt).matrix
        ref = np.array([np.trace(c.matrix() @ dense).real for c in cons])
        assert np.abs(M.pauli_expectations(pt, cons) - ref).max() < 1e-10

    def test_batch_roundtrip(self):
        cb = M.sample_causality_batch(2, 3, 50, seed=0)
        back = M.ConstraintBatch.from_list(2, 3, cb.to_list())
        assert np.array_equal(cb.codes, back.codes)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            M.sample_causality_constraints(1, 1, 0)
        with pytest.raises(ValueError):
            M.sample_tester_constraints(1, 1, 0)


class TestTesterConstraints:
    def _circuits(self, n, k, m, seed):
        rng = np.random.default_rng(seed)
        return [N.random_circuit(n, k, rng, "u3") for _ in range(m)]

    def test_ideal_gates_are_trace_preserving(self):
        gs = M.init_gateset(1, 2, seed=0, scale=0.0)
        circs = self._circuits(1, 2, 3, 0)
        cons = [M.sample_tester_constraints(1, 2, 100, seed=i) for i in range(3)]
        assert M.tp_penalty(gs, circs, cons, normalisation=True) < 1e-20

    def test_scaled_povm_is_penalised(self):
        gs = M.init_gateset(1, 2, seed=0, scale=0.0)
        gs.povm = [np.sqrt(0.9) * P for P in gs.povm]
        circs = self._circuits(1, 2, 3, 1)
        cons = [M.sample_tester_constraints(1, 2, 50, seed=i) for i in range(3)]
        val = M.tp_penalty(gs, circs, cons, normalisation=True)
        assert abs(val - 3 * 0.01) < 1e-12

    def test_matches_dense(self):
        gs = _random_gateset(8, n=1, k=2, chi_gamma=2)
        circs = self._circuits(1, 2, 2, 2)
        cons = [M.sample_tester_constraints(1, 2, 40, seed=10 + i) for i in range(2)]
        ref = 0.0
        for c, cs in zip(circs, cons):
            T = M.tester_to_dense(gs, c).matrix
            ref += sum(abs(np.trace(p.matrix() @ T)) ** 2 for p in cs)
        val = M.tp_penalty(gs, circs, cons)
        assert val > 0
        assert abs(val - ref) < 1e-10 * max(1.0, ref)

    def test_length_mismatch(self):
        gs = M.init_gateset(1, 1, seed=0)
        with pytest.raises(ValueError):
            M.tp_penalty(gs, self._circuits(1, 1, 2, 0), [[]])


class TestConditionalMarginal:
    def test_identity_process(self):
        dense = qo.ChoiState(_identity_dense(2), [2] * 5, N.process_legs(2))
        cm = M.conditional_marginal(dense, (0, 0), (1, 2))
        ref = np.kron(np.outer(PHI, PHI), np.outer(PHI, PHI))
        assert np.abs(cm.matrix - ref).max() < 1e-12

    def test_correlated_process(self):
        rho0 = np.diag([1.0, 0])
        mix = 0.5 * np.kron(np.outer(PHI, PHI), np.outer(PHI, PHI)) + 0.5 * np.kron(np.outer(PSI, PSI), np.outer(PSI, PSI))
        dense = qo.ChoiState(np.kron(mix, rho0), [2] * 5, N.process_legs(2))
        cm = M.conditional_marginal(dense, (0, 0), (2, 1))
        assert np.abs(cm.matrix - mix).max() < 1e-12
        assert np.sum(np.linalg.eigvalsh(cm.matrix) > 1e-9) == 2

    def test_bad_slots(self):
        dense = qo.ChoiState(_identity_dense(2), [2] * 5, N.process_legs(2))
        with pytest.raises(ValueError):
            M.conditional_marginal(dense, (0, 0), (1, 1))
        with pytest.raises(ValueError):
            M.conditional_marginal(dense, (0, 0), (1, 3))


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        gs = _random_gateset(9, n=2, k=2, chi_gamma=2)
        M.save_gateset(gs, tmp_path / "g.bin", {"note": "x"})
        back, manifest = M.load_gateset(tmp_path / "g.bin")
        assert manifest["note"] == "x" and manifest["chi_gamma"] == [2, 2]
        for k, v in gs.arrays().items():
            assert np.array_equal(v, back.arrays()[k])

    def test_bytes_deterministic(self):
        gs = _random_gateset(10)
        assert M.gateset_bytes(gs) == M.gateset_bytes(gs.copy())

    def test_stream(self):
        gs = _random_gateset(11)
        buf = io.BytesIO()
        M.save_gateset(gs, buf)
        buf.seek(0)
        back, _ = M.load_gateset(buf)
        assert np.array_equal(back.pulses[0], gs.pulses[0])


def test_dense_guard():
    pt = M.init_process_lpdo(2, 4, seed=0)
    with pytest.raises(ValueError, match="guard"):
        M.lpdo_to_dense(pt)


def test_exact_gateset_rejects_drift():
    model = N.build_exchange_bath(1, n_steps=1, profile=N.ControlProfile("quasistatic_1f"))
    with pytest.raises(ValueError):
        M.exact_gateset(model)
