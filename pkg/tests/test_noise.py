import hashlib

import numpy as np
import pytest

from pttkit import noise as N
from pttkit import quantum as qo


def _named(name):
    return {"kind": "named", "name": name}


def _bath(J=(0.0, 0.0), k=1, profile=None, seed=0):
    return N.build_exchange_bath(1, J_ranges=J, n_steps=k, seed=seed, profile=profile)


class TestBath:
    def test_zero_coupling_is_identity(self):
        m = _bath((0.0, 0.0))
        assert np.abs(m.step_unitaries[0] - np.eye(4)).max() < 1e-14

    def test_z_coupling_dephases(self):
        Jz = 0.37
        m = N.build_exchange_bath(1, J_ranges=[(0, 0), (0, 0), (Jz, Jz)], dt=1.0, n_steps=1)
        plus = np.array([1, 1]) / np.sqrt(2)
        psi = np.kron(plus, [1, 0])
        out = m.step_unitaries[0] @ psi
        rho = np.outer(out, out.conj())
        rho_s = rho.reshape(2, 2, 2, 2).trace(axis1=1, axis2=3)
        assert abs(abs(np.trace(rho_s @ qo.X)) - abs(np.cos(2 * Jz))) < 1e-12

    def test_couplings_in_range(self):
        m = N.build_exchange_bath(2, J_ranges=(0.2, 0.4), seed=3)
        assert m.couplings.shape == (2, 3)
        assert (m.couplings >= 0.2).all() and (m.couplings <= 0.4).all()

    def test_bad_ranges(self):
        with pytest.raises(ValueError):
            N.build_exchange_bath(1, J_ranges=(0.1, 0.2, 0.3))

    def test_unknown_profile(self):
        with pytest.raises(ValueError):
            N.ControlProfile("wobble")

    def test_invalid_state_rejected(self):
        with pytest.raises(ValueError):
            N.NoiseModel(1, [2], [np.eye(4)], np.eye(4))


class TestRunCircuit:
    def test_x_gate_flips(self):
        m = _bath()
        p = N.run_circuit_exact(m, N.CircuitSpec([[_named("X")]], ["Z"]))
        assert abs(p[1] - 1) < 1e-12

    def test_identity_circuit(self):
        m = _bath(k=3)
        p = N.run_circuit_exact(m, N.CircuitSpec([[_named("I")]] * 3, ["Z"]))
        assert abs(p[0] - 1) < 1e-12

    def test_x_basis_after_hadamard(self):
        m = _bath()
        p = N.run_circuit_exact(m, N.CircuitSpec([[_named("H")]], ["X"]))
        assert abs(p[0] - 1) < 1e-12

    def test_grid_mismatch(self):
        with pytest.raises(ValueError):
            N.run_circuit_exact(_bath(k=2), N.CircuitSpec([[_named("X")]], ["Z"]))

    def test_matches_dense_born_rule(self):
        m = N.build_exchange_bath(1, J_ranges=(0.3, 0.9), n_steps=2, seed=5)
        ups = N.dense_process_tensor(m)
        rng = np.random.default_rng(0)
        for _ in range(5):
            c = N.random_circuit(1, 2, rng, "u3")
            p = N.run_circuit_exact(m, c)
            q = [N.born_probability(ups, N.dense_tester(c, x)) for x in range(2)]
            assert np.abs(p - q).max() < 1e-12

    def test_coherent_offset_changes_outcome(self):
        c = N.CircuitSpec([[_named("X")]], ["Z"])
        p0 = N.run_circuit_exact(_bath(), c)
        p1 = N.run_circuit_exact(_bath(profile=N.ControlProfile("coherent_offset", epsilon=np.pi / 16)), c)
        assert abs(p0[1] - p1[1]) > 1e-3

    def test_spillage_is_invisible_without_memory(self):
        # the kick only rotates the environment, so with no coupling and one step
        # the system statistics are unchanged
        c = N.CircuitSpec([[_named("H")]], ["Z"])
        p0 = N.run_circuit_exact(_bath(), c)
        p1 = N.run_circuit_exact(_bath(profile=N.ControlProfile("spillage")), c)
        assert np.abs(p0 - p1).max() < 1e-12


class TestOneOverF:
    def test_pink_slope(self):
        rng = np.random.default_rng(0)
        seqs = np.array([N.sample_one_over_f(1.0, 2**14, seed=rng) for _ in range(100)])
        s = N.periodogram_slope(seqs, (1e-3, 0.5))
        assert -1.2 <= s <= -0.8

    def test_white(self):
        rng = np.random.default_rng(1)
        seqs = np.array([N.sample_one_over_f(0.0, 2**12, seed=rng) for _ in range(50)])
        assert abs(N.periodogram_slope(seqs, (1e-3, 0.5))) <= 0.2

    def test_deterministic(self):
        a = N.sample_one_over_f(1.0, 256, seed=42)
        b = N.sample_one_over_f(1.0, 256, seed=42)
        assert np.array_equal(a, b)

    def test_standardised(self):
        x = N.sample_one_over_f(1.0, 1024, seed=3)
        assert abs(x.mean()) < 1e-12 and abs(x.std() - 1) < 1e-12

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            N.sample_one_over_f(-1.0, 16)
        with pytest.raises(ValueError):
            N.sample_one_over_f(1.0, 16, (0.0, 0.5))


class TestSampleCounts:
    def test_certain(self):
        assert N.sample_counts([1.0, 0.0], 100, seed=0) == {"0": 100}

    def test_fair_coin(self):
        c = N.sample_counts([0.5, 0.5], 10**6, seed=1)
        assert abs(c["0"] - 500000) < 5 * 500
        assert sum(c.values()) == 10**6

    def test_zero_shots(self):
        assert N.sample_counts([0.5, 0.5], 0, seed=0) == {}

    def test_rejects_bad_distribution(self):
        with pytest.raises(ValueError):
            N.sample_counts([0.6, 0.6], 10)
        with pytest.raises(ValueError):
            N.sample_counts([1.5, -0.5], 10)

    def test_two_qubit_keys(self):
        c = N.sample_counts([0, 0, 1, 0], 5, seed=0)
        assert c == {"10": 5}


class TestDataset:
    def test_single_shot(self):
        ds = N.generate_dataset(_bath(k=2), 1, 0, 1, seed=0)
        assert len(ds.circuits) == 1
        assert sum(ds.circuits[0].counts.values()) == 1

    def test_splits_and_kinds(self):
        ds = N.generate_dataset(_bath(k=2), 4, 3, 16, seed=0)
        tr, va = ds.split("train"), ds.split("validation")
        assert len(tr) == 4 and len(va) == 3
        assert all(g["kind"] == "clifford" for r in tr for layer in r.circuit.gates for g in layer)
        assert all(g["kind"] == "u3" for r in va for layer in r.circuit.gates for g in layer)

    def test_deterministic_file(self, tmp_path):
        m = _bath((0.1, 0.3), k=2)
        hashes = []
        for name in ("a.json", "b.json"):
            N.generate_dataset(m, 5, 2, 64, seed=9).save(tmp_path / name)
            hashes.append(hashlib.sha256((tmp_path / name).read_bytes()).hexdigest())
        assert hashes[0] == hashes[1]

    def test_workers_do_not_change_output(self):
        m = _bath((0.1, 0.3), k=2)
        a = N.generate_dataset(m, 6, 2, 32, seed=4, workers=1).to_json()
        b = N.generate_dataset(m, 6, 2, 32, seed=4, workers=2).to_json()
        assert a == b

    def test_quasistatic_counts(self):
        m = _bath((0.1, 0.3), k=2, profile=N.ControlProfile("quasistatic_1f", sigma=0.2))
        ds = N.generate_dataset(m, 3, 1, 128, seed=1)
        assert all(sum(r.counts.values()) == 128 for r in ds.circuits)

    def test_roundtrip(self, tmp_path):
        ds = N.generate_dataset(_bath(k=2), 3, 1, 8, seed=2)
        ds.save(tmp_path / "d.json")
        back = N.CircuitDataset.load(tmp_path / "d.json")
        assert back.to_json() == ds.to_json()

    def test_load_rejects_bad_counts(self):
        obj = {"meta": {"n_qubits": 1, "n_steps": 1}, "circuits": [{"gates": [[_named("X")]], "basis": ["Z"], "counts": {"0": 3}, "shots": 4}]}
        with pytest.raises(ValueError):
            N.CircuitDataset.from_json(obj)

    def test_load_rejects_missing_meta(self):
        with pytest.raises(ValueError):
            N.CircuitDataset.from_json({"meta": {}, "circuits": []})


def test_dense_process_of_identity_is_phi_plus_chain():
    m = _bath(k=2)
    ups = N.dense_process_tensor(m)
    phi = np.array([1, 0, 0, 1.0])
    ref = np.kron(np.kron(np.outer(phi, phi), np.outer(phi, phi)), np.diag([1.0, 0]))
    assert np.abs(ups.matrix - ref).max() < 1e-12
    assert abs(ups.trace - 4) < 1e-12
