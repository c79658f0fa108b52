import numpy as np
import pytest

from pttkit import analysis as A
from pttkit import estimator as E
from pttkit import model as M
from pttkit import noise as N


def _exact_batch(model, circuits, shots):
    """Batch whose counts are exactly ``shots * p`` (non-integer)."""
    counts = []
    for c in circuits:
        p = N.run_circuit_exact(model, c)
        counts.append({format(x, f"0{model.n_system_qubits}b"): shots * p[x] for x in range(len(p))})
    return M.prepare_batch(circuits, counts)


def _circuits(n, k, m, seed, kind="clifford"):
    rng = np.random.default_rng(seed)
    return [N.random_circuit(n, k, rng, kind) for _ in range(m)]


@pytest.fixture(scope="module")
def bath():
    return N.build_exchange_bath(1, J_ranges=(0.1, 0.3), n_steps=2, seed=1)


class TestObjective:
    def test_exact_counts_give_entropy(self, bath):
        gs = M.exact_gateset(bath)
        circs = _circuits(1, 2, 10, 0)
        shots = 1000
        b = _exact_batch(bath, circs, shots)
        ref = 0.0
        for c in circs:
            p = N.run_circuit_exact(bath, c)
            p = p[p > 0]
            ref -= shots * np.sum(p * np.log(p))
        val = E.objective(gs, b, kappa=0.0, scale="sum")
        assert abs(val - ref) < 1e-8 * abs(ref)
        assert abs(E.objective(gs, b, kappa=0.0) - ref / (shots * len(circs))) < 1e-10

    def test_kappa_zero_removes_penalties(self, bath):
        gs = M.init_gateset(1, 2, chi_nu=2, chi_mu=2, seed=0, scale=0.5)
        b = _exact_batch(bath, _circuits(1, 2, 5, 1), 100)
        cons = E.sample_constraints(b, 50, 3, 20, np.random.default_rng(0))
        t0 = E.objective(gs, b, cons, kappa=0.0, detail=True)
        t1 = E.objective(gs, b, cons, kappa=1.0, detail=True)
        assert t0["objective"] == t0["cross_entropy"]
        assert t1["objective"] > t0["objective"]
        assert abs(t1["objective"] - t1["cross_entropy"] - t1["causality_pen"] - t1["tp_pen"]) < 1e-12

    def test_trace_normalised_scaling(self, bath):
        gs = M.init_gateset(1, 2, chi_nu=2, chi_mu=2, seed=0, scale=0.5)
        b = _exact_batch(bath, _circuits(1, 2, 5, 1), 100)
        cons = E.Constraints(M.sample_causality_batch(1, 2, 30, seed=1))
        raw = E.objective(gs, b, cons, detail=True)["causality_pen"]
        scaled = E.objective(gs, b, cons, detail=True, trace_normalised=True)["causality_pen"]
        pt = gs.process
        tr = np.trace(M.lpdo_to_dense(pt).matrix).real
        norm = (tr / 4 - 1) ** 2
        assert abs((raw - norm) / 4**2 - (scaled - norm)) < 1e-10 * max(1.0, raw)


class TestGradient:
    def test_zero_at_exact_gateset(self, bath):
        gs = M.exact_gateset(bath)
        b = _exact_batch(bath, _circuits(1, 2, 20, 2, "u3"), 1024)
        _, g = E.gradient(gs, b, kappa=0.0)
        assert max(np.abs(v).max() for v in g.values()) < 1e-8

    def test_frozen_parameters_untouched_by_fit(self, bath):
        ds = N.generate_dataset(bath, 20, 5, 64, seed=0)
        gs0 = M.init_gateset(1, 2, seed=1, scale=0.1)
        cfg = E.FitConfig(max_iters=5, m_batch=10, m_causal=20, val_every=2, learn_pulses=False, learn_povm=False, normalise_gauge=False, adam=E.AdamConfig(lr=0.05))
        gs, _ = E.fit(ds, gs0, cfg)
        assert np.array_equal(gs.pulses[0], gs0.pulses[0])
        assert np.array_equal(gs.povm[0], gs0.povm[0])

    def test_unused_control_bond_gets_zero_gradient(self):
        # gamma0 = (1, 0) and a pulse that never leaves gamma = 0 make the
        # second control-bond column of the pulse unreachable
        gs = M.init_gateset(1, 2, chi_mu=2, chi_gamma=2, seed=0, scale=0.3)
        gs.gamma0[0] = np.array([1.0, 0.0], dtype=complex)
        W = gs.pulses[0].copy()
        W[..., 1, :] = 0
        W[..., :, 1] = 0
        gs.pulses[0] = W
        b = M.prepare_batch(_circuits(1, 2, 4, 3), [{"0": 3, "1": 1}] * 4)
        _, g = E.gradient(gs, b, kappa=0.0)
        assert np.abs(g["pulse_0"][..., 1, 1]).max() == 0
        assert np.abs(g["pulse_0"][..., 0, 0]).max() > 0

    @pytest.mark.parametrize("n,k,chi,chi_gamma", [(1, 2, 1, 1), (2, 2, 2, 2)])
    def test_gradient_check(self, n, k, chi, chi_gamma):
        gs = M.init_gateset(n, k, chi_nu=chi, chi_alpha=chi, chi_mu=chi, chi_gamma=chi_gamma, seed=4, scale=0.4, pulse_scale=0.1)
        circs = _circuits(n, k, 6, 5, "u3")
        rng = np.random.default_rng(6)
        counts = [{format(x, f"0{n}b"): int(v) for x, v in enumerate(rng.integers(1, 50, 2**n))} for _ in circs]
        b = M.prepare_batch(circs, counts)
        cons = E.sample_constraints(b, 30, 2, 10, np.random.default_rng(7))
        res = E.gradient_check(gs, b, constraints=cons, max_entries=120, seed=1)
        assert res["checked"] > 30
        assert res["max_rel_error"] < 1e-5

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_step_sweep_is_convex(self, seed):
        # truncation error falls and round-off grows as h shrinks
        rng = np.random.default_rng(seed)
        gs = M.init_gateset(1, 2, chi_nu=2, chi_mu=2, seed=rng, scale=0.4, pulse_scale=0.1)
        circs = [N.random_circuit(1, 2, rng, "u3") for _ in range(4)]
        b = M.prepare_batch(circs, [{"0": int(rng.integers(1, 50)), "1": int(rng.integers(1, 50))} for _ in circs])
        cons = E.sample_constraints(b, 20, 2, 10, rng)
        e = np.log([E.gradient_check(gs, b, h=h, constraints=cons)["max_rel_error"] for h in (1e-5, 1e-6, 1e-7)])
        assert e[1] <= 0.5 * (e[0] + e[2])


class TestAdam:
    def test_first_step_matches_hand_recursion(self):
        cfg = E.AdamConfig(lr=0.1, beta1=0.8, beta2=0.9, eps=1e-8)
        p = {"a": np.array([1.0 + 2.0j, -0.5 + 0j])}
        g = {"a": np.array([0.3 - 0.4j, 2.0 + 0.1j])}
        new, state = E.adam_step(p, g, None, cfg)
        gr = np.array([0.3, -0.4, 2.0, 0.1])
        m = (1 - 0.8) * gr / (1 - 0.8)
        v = (1 - 0.9) * gr**2 / (1 - 0.9)
        ref = np.array([1.0, 2.0, -0.5, 0.0]) - 0.1 * m / (np.sqrt(v) + 1e-8)
        assert np.abs(new["a"].view(np.float64) - ref).max() < 1e-14
        assert state["t"] == 1

    def test_second_step(self):
        cfg = E.AdamConfig(lr=0.01)
        p = {"a": np.array([0.5 + 0j])}
        g1, g2 = np.array([1.0 + 0j]), np.array([-2.0 + 0j])
        p1, st = E.adam_step(p, {"a": g1}, None, cfg)
        p2, st = E.adam_step(p1, {"a": g2}, st, cfg)
        m = 0.9 * 0.1 * 1.0 + 0.1 * -2.0
        v = 0.999 * 0.001 * 1.0 + 0.001 * 4.0
        step2 = 0.01 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
        assert abs(p2["a"][0].real - (p1["a"][0].real - step2)) < 1e-14

    def test_zero_gradient_leaves_parameters(self):
        p = {"a": np.array([1.0 + 1j, 2.0])}
        new, _ = E.adam_step(p, {"a": np.zeros(2, dtype=complex)}, None, E.AdamConfig())
        assert np.array_equal(new["a"], p["a"])

    def test_missing_gradient_is_frozen(self):
        p = {"a": np.array([1.0 + 0j]), "b": np.array([3.0 + 0j])}
        new, _ = E.adam_step(p, {"a": np.array([1.0 + 0j]), "b": None}, None, E.AdamConfig())
        assert new["b"] is p["b"]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            E.adam_step({"a": np.zeros(2, complex)}, {"a": np.zeros(3, complex)}, None, E.AdamConfig())


class TestConfig:
    def test_unknown_field(self):
        with pytest.raises(ValueError, match="bogus"):
            E.FitConfig.from_dict({"bogus": 1})

    def test_bad_values(self):
        with pytest.raises(ValueError):
            E.FitConfig(m_batch=0)
        with pytest.raises(ValueError):
            E.FitConfig(kappa=-1)

    def test_toml(self, tmp_path):
        (tmp_path / "c.toml").write_text("[fit]\nmax_iters = 7\n[fit.adam]\nlr = 0.2\n")
        cfg = E.FitConfig.from_file(tmp_path / "c.toml")
        assert cfg.max_iters == 7 and cfg.adam.lr == 0.2


def test_empirical_entropy():
    rec = N.CircuitRecord(N.CircuitSpec([[{"kind": "named", "name": "H"}]], ["Z"]), {"0": 50, "1": 50}, "train")
    assert abs(E.empirical_entropy([rec]) - np.log(2)) < 1e-14


@pytest.fixture(scope="module")
def problem():
    model = N.build_exchange_bath(1, J_ranges=(0.0, 0.0), n_steps=2, seed=3)
    ds = N.generate_dataset(model, 150, 30, 1024, seed=4)
    return model, ds


class TestFit:
    def _cfg(self, iters=150):
        return E.FitConfig(max_iters=iters, m_batch=100, m_causal=50, val_every=25, window=100, adam=E.AdamConfig(lr=0.02), lr_final=2e-3, seed=5)

    def test_converges_from_perturbed_ideal(self, problem):
        _, ds = problem
        gs0 = M.init_gateset(1, 2, chi_nu=2, chi_mu=2, seed=6, scale=0.1)
        gs, trace = E.fit(ds, gs0, self._cfg())
        med = A.reconstruction_report(gs, ds.split("validation"))["median"]
        assert med < 2 / np.sqrt(1024)
        it, v = trace.validation_points()
        assert v[-1] < v[0]

    def test_deterministic(self, problem):
        _, ds = problem
        gs0 = M.init_gateset(1, 2, seed=6, scale=0.1)
        a, _ = E.fit(ds, gs0, self._cfg(20))
        b, _ = E.fit(ds, gs0, self._cfg(20))
        assert M.gateset_bytes(a) == M.gateset_bytes(b)

    def test_gauge_normalised(self, problem):
        _, ds = problem
        gs, _ = E.fit(ds, M.init_gateset(1, 2, seed=7, scale=0.1), self._cfg(10))
        assert abs(np.trace(M.lpdo_to_dense(gs.process).matrix).real - 4) < 1e-10

    def test_trace_csv(self, problem, tmp_path):
        _, ds = problem
        _, trace = E.fit(ds, M.init_gateset(1, 2, seed=8, scale=0.1), self._cfg(5))
        trace.to_csv(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0].startswith("iteration") and len(lines) == 6
