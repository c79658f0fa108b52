"""Ground-truth simulator for driven system-environment dynamics.

The system qubits share one environment (a single two-level system by
default).  Between consecutive gate layers the joint state evolves under a
fixed exchange unitary; gates are executed as two physical ``R_X(pi/2)``
pulses framed by virtual Z rotations, and the pulses carry the control noise
of the chosen profile.  Basis rotations before the final Z measurement are
ideal.

Qubit ordering inside the joint Hilbert space is system qubit 0 first, then
the remaining system qubits, then the environment.  Outcome bitstrings put
qubit 0 leftmost.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import expm

from . import quantum as qo

PURPOSE = {"model": 0, "circuit": 1, "counts": 2, "eps": 3, "analysis": 4}


def derived_rng(seed: int, index: int, purpose: str) -> np.random.Generator:
    """Counter-based stream for (seed, index, purpose); independent of scheduling."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(index), PURPOSE[purpose]))
    return np.random.default_rng(ss)


@dataclass
class ControlProfile:
    """Pulse-level control noise.

    kind is one of ``ideal``, ``coherent_offset``, ``quasistatic_1f`` or
    ``spillage``.  ``epsilon`` is the over-rotation for coherent offsets,
    ``sigma``/``alpha``/``f_range`` parametrise the quasistatic 1/f drift,
    ``crx_angle`` and ``env_target`` the spillage onto the environment.
    """

    kind: str = "ideal"
    epsilon: float = 0.0
    alpha: float = 1.0
    sigma: float = 0.05 * np.pi
    f_range: tuple[float, float] | None = None
    crx_angle: float = np.pi / 16
    env_target: int = 0

    def __post_init__(self):
        if self.kind not in ("ideal", "coherent_offset", "quasistatic_1f", "spillage"):
            raise ValueError(f"unknown control profile {self.kind!r}")


@dataclass
class NoiseModel:
    n_system_qubits: int
    env_dims: list[int]
    step_unitaries: list[np.ndarray]
    initial_SE_state: np.ndarray
    control_profile: ControlProfile = field(default_factory=ControlProfile)
    seed: int = 0

    def __post_init__(self):
        D = self.dim
        for U in self.step_unitaries:
            if U.shape != (D, D):
                raise ValueError("step unitary does not act on S (x) E")
        rho = self.initial_SE_state
        if rho.shape != (D, D):
            raise ValueError("initial state has wrong dimension")
        if abs(np.trace(rho) - 1) > 1e-9 or np.linalg.eigvalsh(0.5 * (rho + rho.conj().T)).min() < -1e-9:
            raise ValueError("initial state must be PSD with unit trace")

    @property
    def d_system(self) -> int:
        return 2**self.n_system_qubits

    @property
    def d_env(self) -> int:
        return int(np.prod(self.env_dims)) if self.env_dims else 1

    @property
    def dim(self) -> int:
        return self.d_system * self.d_env

    @property
    def n_steps(self) -> int:
        return len(self.step_unitaries)


def _as_ranges(J_ranges) -> list[tuple[float, float]]:
    arr = np.asarray(J_ranges, dtype=float)
    if arr.shape == (2,):
        return [tuple(arr)] * 3
    if arr.shape == (3, 2):
        return [tuple(r) for r in arr]
    raise ValueError("J_ranges must be (lo, hi) or three (lo, hi) pairs for x, y, z")


def exchange_hamiltonian(n_system: int, couplings: np.ndarray, d_env: int = 2) -> np.ndarray:
    """``sum_q Jx X_q X_E + Jy Y_q Y_E + Jz Z_q Z_E`` with ``couplings[q] = (Jx, Jy, Jz)``."""
    if d_env != 2:
        raise ValueError("exchange coupling is defined for a two-level environment")
    D = 2**n_system * 2
    Hm = np.zeros((D, D), dtype=complex)
    for q in range(n_system):
        for c, P in zip(couplings[q], (qo.X, qo.Y, qo.Z)):
            ops = [qo.I2] * n_system
            ops[q] = P
            term = np.ones((1, 1))
            for o in ops:
                term = np.kron(term, o)
            Hm += c * np.kron(term, P)
    return Hm


def build_exchange_bath(
    n_system: int,
    J_ranges=(0.1, 0.3),
    dt: float = 1.0,
    seed: int = 0,
    n_steps: int = 1,
    profile: ControlProfile | None = None,
) -> NoiseModel:
    """System qubits coupled to one shared TLS by a random Heisenberg exchange.

    ``J_i * dt`` is drawn uniformly from ``J_ranges`` (a single ``(lo, hi)`` or
    one pair per component x, y, z), independently per system qubit.  The
    same interval unitary is used at every one of the ``n_steps`` steps.
    The joint initial state is ``|0...0>_S |0>_E``.
    """
    if n_system < 1:
        raise ValueError("need at least one system qubit")
    rng = derived_rng(seed, 0, "model")
    ranges = _as_ranges(J_ranges)
    Jdt = np.array([[rng.uniform(lo, hi) for lo, hi in ranges] for _ in range(n_system)])
    Hdt = exchange_hamiltonian(n_system, Jdt)
    U = expm(-1j * Hdt)
    D = 2**n_system * 2
    rho0 = np.zeros((D, D), dtype=complex)
    rho0[0, 0] = 1.0
    model = NoiseModel(n_system, [2], [U.copy() for _ in range(n_steps)], rho0, profile or ControlProfile(), seed)
    model.couplings = Jdt / dt  # type: ignore[attr-defined]
    return model


# --- circuits ------------------------------------------------------------

@dataclass
class CircuitSpec:
    """``gates[step][qubit]`` gate specs and the final measurement bases."""

    gates: list[list[dict]]
    basis: list[str]

    def __post_init__(self):
        n = len(self.basis)
        if any(len(layer) != n for layer in self.gates):
            raise ValueError("every step must list one gate per qubit")
        if any(b not in ("X", "Y", "Z") for b in self.basis):
            raise ValueError("basis entries must be X, Y or Z")

    @property
    def n_qubits(self) -> int:
        return len(self.basis)

    @property
    def n_steps(self) -> int:
        return len(self.gates)

    def to_json(self) -> dict:
        return {"gates": self.gates, "basis": list(self.basis)}


def _embed(op: np.ndarray, site: int, n_sites: int, d_env: int) -> np.ndarray:
    ops = [qo.I2] * n_sites
    ops[site] = op
    out = np.ones((1, 1), dtype=complex)
    for o in ops:
        out = np.kron(out, o)
    return np.kron(out, np.eye(d_env))


def _crx_to_env(q: int, n: int, env_dims: Sequence[int], target: int, angle: float) -> np.ndarray:
    """Controlled R_X on environment qubit ``target`` conditioned on system qubit ``q``."""
    dims = [2] * n + list(env_dims)
    P1 = np.diag([0.0, 1.0]).astype(complex)
    P0 = np.diag([1.0, 0.0]).astype(complex)

    def kron_all(ops):
        out = np.ones((1, 1), dtype=complex)
        for o in ops:
            out = np.kron(out, o)
        return out

    base = [np.eye(d) for d in dims]
    a = list(base)
    a[q] = P0
    b = list(base)
    b[q] = P1
    b[n + target] = qo.rx(angle)
    return kron_all(a) + kron_all(b)


def pulse_unitaries(model: NoiseModel, q: int, eps: np.ndarray) -> np.ndarray:
    """Full-space unitaries of one physical pulse on qubit ``q`` for each ``eps``."""
    n, dE = model.n_system_qubits, model.d_env
    prof = model.control_profile
    out = np.empty((len(eps), model.dim, model.dim), dtype=complex)
    spill = None
    if prof.kind == "spillage":
        spill = _crx_to_env(q, n, model.env_dims, prof.env_target, prof.crx_angle)
    for b, e in enumerate(eps):
        P = _embed(qo.rx(np.pi / 2 + e), q, n, dE)
        out[b] = spill @ P if spill is not None else P
    return out


def _evolve(model: NoiseModel, circuit: CircuitSpec, eps: np.ndarray) -> np.ndarray:
    """Outcome distributions ``(len(eps), 2**n)`` for pulse offsets ``eps``."""
    n, dE = model.n_system_qubits, model.d_env
    if circuit.n_qubits != n or circuit.n_steps != model.n_steps:
        raise ValueError("circuit grid does not match the model")
    B = len(eps)
    uniq, inv = np.unique(eps, return_inverse=True)
    pulses = [pulse_unitaries(model, q, uniq)[inv] for q in range(n)]
    rho = np.broadcast_to(model.initial_SE_state, (B, model.dim, model.dim)).copy()

    def conj_by(U, r):
        return U @ r @ np.swapaxes(U.conj(), -1, -2)

    for j, layer in enumerate(circuit.gates):
        for q, spec in enumerate(layer):
            a, b, c = qo.u3_rz_angles(*qo.gate_angles(spec))
            rho = conj_by(_embed(qo.rz(a), q, n, dE), rho)
            rho = conj_by(pulses[q], rho)
            rho = conj_by(_embed(qo.rz(b), q, n, dE), rho)
            rho = conj_by(pulses[q], rho)
            rho = conj_by(_embed(qo.rz(c), q, n, dE), rho)
        rho = conj_by(model.step_unitaries[j], rho)
    R = np.ones((1, 1), dtype=complex)
    for basis in circuit.basis:
        R = np.kron(R, qo.measurement_rotation(basis))
    R = np.kron(R, np.eye(dE))
    rho = conj_by(R, rho)
    diag = np.real(np.diagonal(rho, axis1=1, axis2=2)).reshape(B, 2**n, dE).sum(axis=2)
    p = np.clip(diag, 0.0, None)
    return p / p.sum(axis=1, keepdims=True)


def draw_epsilons(model: NoiseModel, n: int, index: int = 0) -> np.ndarray:
    """Pulse offsets for ``n`` consecutive shots of circuit ``index``."""
    prof = model.control_profile
    if prof.kind == "coherent_offset":
        return np.full(n, prof.epsilon)
    if prof.kind == "quasistatic_1f":
        if n == 1:
            seq = derived_rng(model.seed, index, "eps").normal(size=1)
        else:
            seq = sample_one_over_f(prof.alpha, n, prof.f_range, derived_rng(model.seed, index, "eps"))
        return prof.sigma * seq
    return np.zeros(n)


def run_circuit_exact(
    model: NoiseModel,
    circuit: CircuitSpec,
    eps: float | None = None,
    index: int = 0,
) -> np.ndarray:
    """Exact outcome distribution of ``circuit``.

    For the quasistatic profile a single pulse offset is used for the whole
    call: ``eps`` if given, otherwise a draw derived from ``(seed, index)``.
    """
    if eps is None:
        e = draw_epsilons(model, 1, index)
    else:
        e = np.array([float(eps)])
    return _evolve(model, circuit, e)[0]


# --- 1/f noise and sampling ---------------------------------------------

def sample_one_over_f(
    alpha: float,
    n_samples: int,
    f_range: tuple[float, float] | None = None,
    seed=None,
) -> np.ndarray:
    """Stationary sequence with power spectrum ``~ 1/f**alpha`` on ``f_range``.

    Frequencies are in cycles per sample; the default band is
    ``(1/n_samples, 0.5)``.  White complex Gaussians are shaped by
    ``f**(-alpha/2)``, inverse transformed, and the real part is
    standardised to zero mean and unit variance.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    lo, hi = f_range if f_range is not None else (1.0 / n_samples, 0.5)
    if lo <= 0 or hi <= 0:
        raise ValueError("f_range must be positive")
    f = np.abs(np.fft.fftfreq(n_samples))
    amp = np.zeros(n_samples)
    band = (f >= lo) & (f <= hi)
    amp[band] = f[band] ** (-alpha / 2)
    white = rng.normal(size=n_samples) + 1j * rng.normal(size=n_samples)
    x = np.fft.ifft(amp * white).real
    x -= x.mean()
    sd = x.std()
    return x / sd if sd > 0 else x


def periodogram_slope(seqs: np.ndarray, f_range: tuple[float, float]) -> float:
    """Log-log slope of the ensemble-averaged periodogram over ``f_range``."""
    seqs = np.atleast_2d(seqs)
    n = seqs.shape[1]
    P = np.mean(np.abs(np.fft.rfft(seqs, axis=1)) ** 2, axis=0)
    f = np.fft.rfftfreq(n)
    sel = (f >= f_range[0]) & (f <= f_range[1]) & (f > 0)
    slope, _ = np.polyfit(np.log(f[sel]), np.log(P[sel]), 1)
    return float(slope)


def bitstring(i: int, n: int) -> str:
    return format(i, f"0{n}b")


def sample_counts(p, shots: int, seed=None) -> dict[str, int]:
    """Multinomial counts keyed by bitstring (qubit 0 leftmost); zero counts omitted."""
    p = np.asarray(p, dtype=float)
    if (p < -1e-12).any():
        raise ValueError("negative probability")
    if abs(p.sum() - 1) > 1e-9:
        raise ValueError("probabilities must sum to 1")
    if shots == 0:
        return {}
    p = np.clip(p, 0, None)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    counts = rng.multinomial(shots, p / p.sum())
    n = int(np.log2(len(p)))
    return {bitstring(i, n): int(c) for i, c in enumerate(counts) if c > 0}


# --- datasets ------------------------------------------------------------

@dataclass
class CircuitRecord:
    circuit: CircuitSpec
    counts: dict[str, int]
    shots: int
    split: str = "train"

    def to_json(self) -> dict:
        d = self.circuit.to_json()
        d.update(counts=dict(sorted(self.counts.items())), shots=self.shots, split=self.split)
        return d


@dataclass
class CircuitDataset:
    meta: dict
    circuits: list[CircuitRecord]

    def split(self, name: str) -> list[CircuitRecord]:
        return [c for c in self.circuits if c.split == name]

    def to_json(self) -> dict:
        return {"meta": self.meta, "circuits": [c.to_json() for c in self.circuits]}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, sort_keys=True)

    @classmethod
    def from_json(cls, obj: dict) -> "CircuitDataset":
        for key in ("n_qubits", "n_steps"):
            if key not in obj.get("meta", {}):
                raise ValueError(f"dataset meta missing {key!r}")
        recs = []
        for c in obj["circuits"]:
            counts = {str(k): int(v) for k, v in c["counts"].items()}
            if sum(counts.values()) != int(c["shots"]):
                raise ValueError("counts do not sum to shots")
            recs.append(CircuitRecord(CircuitSpec(c["gates"], c["basis"]), counts, int(c["shots"]), c.get("split", "train")))
        return cls(obj["meta"], recs)

    @classmethod
    def load(cls, path) -> "CircuitDataset":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def random_circuit(n: int, k: int, rng: np.random.Generator, kind: str = "clifford") -> CircuitSpec:
    gates = []
    for _ in range(k):
        if kind == "clifford":
            gates.append([{"kind": "clifford", "i": int(rng.integers(24))} for _ in range(n)])
        else:
            gates.append(
                [
                    {"kind": "u3", "theta": float(a), "phi": float(b), "lam": float(c)}
                    for a, b, c in rng.uniform(0, 2 * np.pi, size=(n, 3))
                ]
            )
    basis = [str(b) for b in rng.choice(["X", "Y", "Z"], size=n)]
    return CircuitSpec(gates, basis)


def _simulate_one(args) -> CircuitRecord:
    model, index, split, shots, seed = args
    rng = derived_rng(seed, index, "circuit")
    circ = random_circuit(model.n_system_qubits, model.n_steps, rng, "clifford" if split == "train" else "u3")
    crng = derived_rng(seed, index, "counts")
    if model.control_profile.kind == "quasistatic_1f":
        eps = draw_epsilons(model, shots, index)
        P = _evolve(model, circ, eps)
        cdf = np.cumsum(P, axis=1)
        u = crng.random(shots)[:, None] * cdf[:, -1:]
        outcomes = (u > cdf).sum(axis=1)
        hist = np.bincount(outcomes, minlength=P.shape[1])
        n = model.n_system_qubits
        counts = {bitstring(i, n): int(c) for i, c in enumerate(hist) if c > 0}
    else:
        counts = sample_counts(run_circuit_exact(model, circ, index=index), shots, crng)
    return CircuitRecord(circ, counts, shots, split)


def generate_dataset(
    model: NoiseModel,
    n_train_circuits: int,
    n_validation_circuits: int,
    shots: int,
    seed: int = 0,
    workers: int = 1,
) -> CircuitDataset:
    """Random-Clifford training circuits and random-u3 validation circuits.

    Quasistatic drift is sampled per shot: each circuit gets its own 1/f
    sequence of pulse offsets, one value per shot.  Output does not depend on
    ``workers``.
    """
    jobs = [(model, i, "train", shots, seed) for i in range(n_train_circuits)]
    jobs += [(model, n_train_circuits + i, "validation", shots, seed) for i in range(n_validation_circuits)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            recs = list(ex.map(_simulate_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        recs = [_simulate_one(j) for j in jobs]
    meta = {"n_qubits": model.n_system_qubits, "n_steps": model.n_steps, "shots_default": shots, "seed": seed}
    return CircuitDataset(meta, recs)


# --- dense process tensor (oracle) ----------------------------------------

def step_choi(U: np.ndarray, dS: int, dE: int, j: int) -> qo.ChoiState:
    """Choi of ``rho -> U rho U^dag`` with legs ``(o_j, e_j, i_j, e_{j-1})``."""
    v = U.reshape(-1)
    return qo.ChoiState(np.outer(v, v.conj()), [dS, dE, dS, dE], [f"o{j}", f"e{j}", f"i{j}", f"e{j-1}"])


def process_legs(k: int) -> list[str]:
    """Leg order ``o_k, i_k, ..., o_1, i_1, o_0``."""
    legs = []
    for j in range(k, 0, -1):
        legs += [f"o{j}", f"i{j}"]
    return legs + ["o0"]


def dense_process_tensor(model: NoiseModel) -> qo.ChoiState:
    """Process tensor of the environment dynamics, built from link products."""
    dS, dE = model.d_system, model.d_env
    k = model.n_steps
    ups = qo.ChoiState(model.initial_SE_state, [dS, dE], ["o0", "e0"])
    for j in range(1, k + 1):
        ups = qo.link_product(ups, step_choi(model.step_unitaries[j - 1], dS, dE, j), [f"e{j-1}"])
    ups = qo.partial_trace(ups, [f"e{k}"])
    return ups.reorder(process_legs(k))


def layer_unitary(layer: list[dict]) -> np.ndarray:
    U = np.ones((1, 1), dtype=complex)
    for spec in layer:
        U = np.kron(U, qo.gate_unitary(spec))
    return U


def dense_tester(circuit: CircuitSpec, outcome: int, gate_unitaries: list[np.ndarray] | None = None) -> qo.ChoiState:
    """Choi tester ``Pi^T (x) A`` for one outcome of an ideal-basis circuit."""
    n, k = circuit.n_qubits, circuit.n_steps
    d = 2**n
    R = np.ones((1, 1), dtype=complex)
    for b in circuit.basis:
        R = np.kron(R, qo.measurement_rotation(b))
    e = np.zeros(d)
    e[outcome] = 1
    Pi = R.conj().T @ np.diag(e) @ R
    T = qo.ChoiState(Pi.T, [d], [f"o{k}"])
    for j in range(k):
        U = layer_unitary(circuit.gates[j]) if gate_unitaries is None else gate_unitaries[j]
        T = qo.link_product(T, qo.choi_of(U, (f"i{j+1}", f"o{j}")), [])
    return T.reorder(process_legs(k))


def born_probability(ups: qo.ChoiState, tester: qo.ChoiState) -> float:
    """``Tr[Upsilon T^T]`` as a full link product."""
    val = qo.link_product(ups, tester.reorder(ups.labels), ups.labels)
    return float(np.real(val.matrix[0, 0]))
