"""Locally purified process-tensor and tester networks.

Process network (one row of sites per qubit)::

    Psi0[q]   axes (o_0, nu_1, mu_0, alpha_l, alpha_r)
    Phi_j[q]  axes (o_j, i_j, nu_j, nu_{j+1}, alpha_l, alpha_r),  j = 1..k

``nu_{k+1}`` of the last site is the Kraus bond ``mu``.  The represented
operator is ``Upsilon = Y Y^dag`` with ``Y`` the ket obtained by contracting
all bonds except the Kraus bonds, with legs ordered
``o_k, i_k, ..., o_1, i_1, o_0`` (qubit 0 most significant inside each leg).

Tester network (per qubit, no spatial bonds): the gate in slot ``j`` maps
``o_j -> i_{j+1}`` and is assembled as ``R_Z . W . R_Z . W . R_Z`` from the
shared learnable pulse ``W[o, i, gamma_l, gamma_r]``; the control bond
``gamma`` starts in the learnable vector ``b`` and its final index is traced.
The measurement is ``Pi_x = M_x^dag M_x`` preceded by an ideal basis rotation.

Born probabilities are amplitudes of the process ket contracted with the
(unconjugated) tester ket, squared and summed over all Kraus indices, which
equals ``Tr[Upsilon T^T]`` for the tester Choi ``T``.
"""

from __future__ import annotations

import io
import json
import string
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import quantum as qo
from .noise import CircuitSpec, NoiseModel, process_legs
from .tensor import ComplexTensor, NetworkSpec, contract, read_records, svd_split, write_records

DENSE_GUARD = 2**14


# --- Pauli tables ----------------------------------------------------------

_PAULI_CHARS = "IXYZ"


def pauli_tables(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Permutation/phase form of every n-qubit Pauli: ``P[perm[p][o], o] = phase[p][o]``.

    Pauli index ``p`` is the base-4 number of the label (I=0, X=1, Y=2, Z=3),
    qubit 0 most significant.
    """
    perm1 = np.array([[0, 1], [1, 0], [1, 0], [0, 1]])
    phase1 = np.array([[1, 1], [1, 1], [1j, -1j], [1, -1]], dtype=complex)
    perm, phase = np.zeros((1, 1), dtype=np.int64), np.ones((1, 1), dtype=complex)
    for _ in range(n):
        D = perm.shape[1]
        perm = (perm[:, None, :, None] * 2 + perm1[None, :, None, :]).reshape(-1, 2 * D)
        phase = (phase[:, None, :, None] * phase1[None, :, None, :]).reshape(-1, 2 * D)
    return perm.astype(np.int64), phase


def label_index(label: str) -> int:
    out = 0
    for ch in label:
        out = out * 4 + _PAULI_CHARS.index(ch)
    return out


@dataclass(frozen=True)
class PauliConstraint:
    """Pauli string over the legs ``o_k, i_k, ..., o_1, i_1, o_0``; target 0."""

    legs: tuple[str, ...]
    target: float = 0.0

    @property
    def label(self) -> str:
        return "|".join(self.legs)

    def leg(self, name: str) -> str:
        k = (len(self.legs) - 1) // 2
        return self.legs[process_legs(k).index(name)]

    def matrix(self) -> np.ndarray:
        out = np.ones((1, 1), dtype=complex)
        for l in self.legs:
            out = np.kron(out, qo.pauli(l))
        return out


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _col_o(k: int, j: int) -> int:
    return 2 * (k - j)


def _col_i(k: int, j: int) -> int:
    return 2 * (k - j) + 1


@dataclass
class ConstraintBatch:
    """Many Pauli constraints in integer form.

    ``codes[c, l]`` is the base-4 index (qubit 0 most significant) of the
    Pauli on leg ``l`` of constraint ``c``, legs in ``o_k, ..., i_1, o_0``
    order.
    """

    n: int
    k: int
    codes: np.ndarray

    def __len__(self) -> int:
        return len(self.codes)

    def to_list(self) -> list[PauliConstraint]:
        n = self.n
        return [
            PauliConstraint(tuple("".join(_PAULI_CHARS[(int(c) >> (2 * (n - 1 - q))) & 3] for q in range(n)) for c in row))
            for row in self.codes
        ]

    @classmethod
    def from_list(cls, n: int, k: int, constraints: Sequence[PauliConstraint]) -> "ConstraintBatch":
        codes = np.array([[label_index(l) for l in c.legs] for c in constraints], dtype=np.int64).reshape(-1, 2 * k + 1)
        return cls(n, k, codes)

    def digits(self, q: int) -> np.ndarray:
        """Single-qubit Pauli indices of qubit ``q`` on every leg."""
        return (self.codes >> (2 * (self.n - 1 - q))) & 3


def as_constraint_batch(n: int, k: int, constraints) -> ConstraintBatch:
    if isinstance(constraints, ConstraintBatch):
        return constraints
    return ConstraintBatch.from_list(n, k, list(constraints))


def sample_causality_batch(n: int, k: int, m_causal: int, seed=None) -> ConstraintBatch:
    """Random process-causality constraints.

    Pick ``j`` in ``1..k``; identity on ``o_j`` and every later leg, a random
    traceless Pauli on ``i_j`` and uniformly random Paulis on earlier legs.
    """
    if m_causal < 1:
        raise ValueError("m_causal must be positive")
    rng = _rng(seed)
    j = rng.integers(1, k + 1, size=m_causal)
    codes = rng.integers(0, 4**n, size=(m_causal, 2 * k + 1))
    traceless = rng.integers(1, 4**n, size=m_causal)
    for m in range(1, k + 1):
        codes[j <= m, _col_o(k, m)] = 0
        codes[j < m, _col_i(k, m)] = 0
        codes[j == m, _col_i(k, m)] = traceless[j == m]
    return ConstraintBatch(n, k, codes.astype(np.int64))


def sample_tester_batch(n: int, k: int, m_causal: int, seed=None) -> ConstraintBatch:
    """Random trace-preservation constraints for an outcome-summed tester.

    Pick ``t`` in ``0..k``.  ``t = k``: traceless Pauli on ``o_k``, random
    elsewhere.  Otherwise: identity on ``i_{t+1}`` and every later leg
    (including ``o_k``), traceless on ``o_t``, random on earlier legs.
    """
    if m_causal < 1:
        raise ValueError("m_causal must be positive")
    rng = _rng(seed)
    t = rng.integers(0, k + 1, size=m_causal)
    codes = rng.integers(0, 4**n, size=(m_causal, 2 * k + 1))
    traceless = rng.integers(1, 4**n, size=m_causal)
    last = t == k
    codes[last, _col_o(k, k)] = traceless[last]
    codes[~last, _col_o(k, k)] = 0
    for s in range(k):
        later = (~last) & (s > t)
        codes[later, _col_o(k, s)] = 0
        codes[later, _col_i(k, s + 1)] = 0
        here = (~last) & (s == t)
        codes[here, _col_i(k, s + 1)] = 0
        codes[here, _col_o(k, s)] = traceless[here]
    return ConstraintBatch(n, k, codes.astype(np.int64))


def sample_causality_constraints(n: int, k: int, m_causal: int, seed=None) -> list[PauliConstraint]:
    """List form of :func:`sample_causality_batch`."""
    return sample_causality_batch(n, k, m_causal, seed).to_list()


def sample_tester_constraints(n: int, k: int, m_causal: int, seed=None) -> list[PauliConstraint]:
    """List form of :func:`sample_tester_batch`."""
    return sample_tester_batch(n, k, m_causal, seed).to_list()


# --- model containers -------------------------------------------------------

@dataclass
class ProcessTensorLPDO:
    n_qubits: int
    n_steps: int
    psi0: list[np.ndarray]
    phi: list[list[np.ndarray]]  # phi[j-1][q]

    @property
    def chi_nu(self) -> list[int]:
        return [a.shape[1] for a in self.psi0]

    @property
    def chi_mu(self) -> list[int]:
        return [a.shape[3] for a in self.phi[-1]]

    @property
    def chi_mu0(self) -> list[int]:
        return [a.shape[2] for a in self.psi0]

    @property
    def chi_alpha(self) -> list[int]:
        return [a.shape[-1] for a in self.phi[0][:-1]] if self.n_qubits > 1 else []

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"psi0_{q}": a for q, a in enumerate(self.psi0)}
        for j, row in enumerate(self.phi, start=1):
            for q, a in enumerate(row):
                out[f"phi{j}_{q}"] = a
        return out

    @classmethod
    def from_arrays(cls, n: int, k: int, arrs: dict) -> "ProcessTensorLPDO":
        return cls(
            n,
            k,
            [np.array(arrs[f"psi0_{q}"], dtype=complex) for q in range(n)],
            [[np.array(arrs[f"phi{j}_{q}"], dtype=complex) for q in range(n)] for j in range(1, k + 1)],
        )

    def copy(self) -> "ProcessTensorLPDO":
        return ProcessTensorLPDO.from_arrays(self.n_qubits, self.n_steps, self.arrays())


@dataclass
class GateSet:
    process: ProcessTensorLPDO
    pulses: list[np.ndarray]  # per qubit (o, i, gamma_l, gamma_r)
    gamma0: list[np.ndarray]  # per qubit (chi_gamma,)
    povm: list[np.ndarray]  # per qubit (2 outcomes, rank, 2)

    @property
    def n_qubits(self) -> int:
        return self.process.n_qubits

    @property
    def n_steps(self) -> int:
        return self.process.n_steps

    @property
    def chi_gamma(self) -> list[int]:
        return [len(b) for b in self.gamma0]

    def arrays(self) -> dict[str, np.ndarray]:
        out = self.process.arrays()
        for q in range(self.n_qubits):
            out[f"pulse_{q}"] = self.pulses[q]
            out[f"gamma0_{q}"] = self.gamma0[q]
            out[f"povm_{q}"] = self.povm[q]
        return out

    @classmethod
    def from_arrays(cls, n: int, k: int, arrs: dict) -> "GateSet":
        return cls(
            ProcessTensorLPDO.from_arrays(n, k, arrs),
            [np.array(arrs[f"pulse_{q}"], dtype=complex) for q in range(n)],
            [np.array(arrs[f"gamma0_{q}"], dtype=complex) for q in range(n)],
            [np.array(arrs[f"povm_{q}"], dtype=complex) for q in range(n)],
        )

    def copy(self) -> "GateSet":
        return GateSet.from_arrays(self.n_qubits, self.n_steps, self.arrays())

    def effects(self, q: int) -> list[np.ndarray]:
        return [M.conj().T @ M for M in self.povm[q]]


def _cgauss(rng, shape, scale):
    """Complex Gaussian with E|z|^2 = scale^2."""
    return scale * (rng.normal(size=shape) + 1j * rng.normal(size=shape)) / np.sqrt(2)


def _alpha_dims(n: int, chi_alpha: int, q: int) -> tuple[int, int]:
    return (1 if q == 0 else chi_alpha), (1 if q == n - 1 else chi_alpha)


def init_process_lpdo(
    n: int,
    k: int,
    chi_nu: int = 1,
    chi_alpha: int = 1,
    chi_mu: int = 1,
    seed=None,
    scale: float = 0.1,
    chi_mu0: int = 1,
) -> ProcessTensorLPDO:
    """Identity process plus complex Gaussian noise of standard deviation ``scale``.

    Every ``Phi`` site is ``delta_{o,i}`` on bond index 0 and ``Psi0`` is
    ``|0>`` on bond index 0; all other entries start at zero before the
    perturbation is added.
    """
    if min(chi_nu, chi_alpha, chi_mu, chi_mu0) < 1:
        raise ValueError("bond dimensions must be >= 1")
    rng = _rng(seed)
    psi0, rows = [], []
    for q in range(n):
        al, ar = _alpha_dims(n, chi_alpha, q)
        a = np.zeros((2, chi_nu, chi_mu0, al, ar), dtype=complex)
        a[0, 0, 0, 0, 0] = 1.0
        psi0.append(a + _cgauss(rng, a.shape, scale))
    for j in range(1, k + 1):
        row = []
        for q in range(n):
            al, ar = _alpha_dims(n, chi_alpha, q)
            nr = chi_mu if j == k else chi_nu
            a = np.zeros((2, 2, chi_nu, nr, al, ar), dtype=complex)
            a[0, 0, 0, 0, 0, 0] = a[1, 1, 0, 0, 0, 0] = 1.0
            row.append(a + _cgauss(rng, a.shape, scale))
        rows.append(row)
    return ProcessTensorLPDO(n, k, psi0, rows)


def ideal_pulse(chi_gamma: int = 1, epsilon: float = 0.0) -> np.ndarray:
    return np.einsum("oi,lr->oilr", qo.rx(np.pi / 2 + epsilon), np.eye(chi_gamma))


def ideal_povm(rank: int = 2) -> np.ndarray:
    M = np.zeros((2, rank, 2), dtype=complex)
    M[0, 0, 0] = 1.0
    M[1, min(1, rank - 1), 1] = 1.0
    return M


def init_gateset(
    n: int,
    k: int,
    chi_nu: int = 1,
    chi_alpha: int = 1,
    chi_mu: int = 1,
    chi_gamma: int = 1,
    seed=None,
    scale: float = 0.1,
    pulse_scale: float = 0.0,
    chi_mu0: int = 1,
) -> GateSet:
    """Perturbed identity process with ideal pulses and POVM.

    ``pulse_scale`` adds noise to the pulse tensors; by default it is 0 for
    ``chi_gamma = 1`` and 0.01 otherwise, which moves the control bond off
    the stationary point where its off-diagonal blocks have no gradient.
    """
    rng = _rng(seed)
    proc = init_process_lpdo(n, k, chi_nu, chi_alpha, chi_mu, rng, scale, chi_mu0)
    if pulse_scale == 0.0 and chi_gamma > 1:
        pulse_scale = 0.01
    pulses, g0 = [], []
    for _ in range(n):
        W = ideal_pulse(chi_gamma)
        if pulse_scale:
            W = W + _cgauss(rng, W.shape, pulse_scale)
        pulses.append(W)
        b = np.zeros(chi_gamma, dtype=complex)
        b[0] = 1.0
        if pulse_scale:
            b = b + _cgauss(rng, b.shape, pulse_scale)
        g0.append(b)
    return GateSet(proc, pulses, g0, [ideal_povm() for _ in range(n)])


# --- exact encodings -----------------------------------------------------

def _split_sites(full: ComplexTensor, n: int, per_qubit: list[list[str]], q0_extra: list[str]) -> list[ComplexTensor]:
    """Split a tensor over n qubits into a chain of per-qubit tensors with bonds a0, a1, ..."""
    out = []
    rest = full
    for q in range(n - 1):
        left = per_qubit[q] + (q0_extra if q == 0 else []) + ([f"a{q-1}"] if q > 0 else [])
        right = [l for l in rest.axis_labels if l not in left]
        U, S, V = svd_split(rest, left, right, bond_label=f"a{q}")
        out.append(U)
        rest = ComplexTensor(np.einsum("a,a...->a...", S, V.data), V.axis_labels)
    out.append(rest)
    return out


def encode_unitary_process(
    n: int,
    d_env: int,
    step_unitaries: Sequence[np.ndarray],
    rho0: np.ndarray,
) -> ProcessTensorLPDO:
    """Exact LPDO of a unitary system-environment process.

    The environment is the temporal bond of qubit 0; the final environment
    index becomes the Kraus bond and the purification of ``rho0`` the
    initial Kraus bond.  Spatial bonds come from successive SVDs.
    """
    k = len(step_unitaries)
    dS = 2**n
    w, V = np.linalg.eigh(0.5 * (rho0 + rho0.conj().T))
    keep = w > 1e-14
    purif = V[:, keep] * np.sqrt(w[keep])  # (dS*dE, r)
    r = purif.shape[1]
    ps = purif.reshape([2] * n + [d_env, r])
    t = ComplexTensor(ps, [f"o{q}" for q in range(n)] + ["nu", "mu0"])
    parts = _split_sites(t, n, [[f"o{q}"] for q in range(n)], ["nu", "mu0"])
    psi0 = []
    for q, p in enumerate(parts):
        labels = [f"o{q}", "nu", "mu0", f"a{q-1}", f"a{q}"]
        psi0.append(_to_axes(p, labels))
    rows = []
    for U in step_unitaries:
        T = U.reshape([2] * n + [d_env] + [2] * n + [d_env])
        labels = [f"o{q}" for q in range(n)] + ["nr"] + [f"i{q}" for q in range(n)] + ["nl"]
        t = ComplexTensor(T, labels)
        parts = _split_sites(t, n, [[f"o{q}", f"i{q}"] for q in range(n)], ["nl", "nr"])
        rows.append([_to_axes(p, [f"o{q}", f"i{q}", "nl", "nr", f"a{q-1}", f"a{q}"]) for q, p in enumerate(parts)])
    return ProcessTensorLPDO(n, k, psi0, rows)


def _to_axes(t: ComplexTensor, labels: list[str]) -> np.ndarray:
    """Transpose to ``labels``, inserting unit axes for labels ``t`` lacks."""
    data = t.data
    have = list(t.axis_labels)
    for l in labels:
        if l not in have:
            data = data[..., None]
            have.append(l)
    return np.ascontiguousarray(data.transpose([have.index(l) for l in labels]))


def encode_noise_model(model: NoiseModel) -> ProcessTensorLPDO:
    return encode_unitary_process(model.n_system_qubits, model.d_env, model.step_unitaries, model.initial_SE_state)


def exact_gateset(model: NoiseModel, chi_gamma: int = 1) -> GateSet:
    """Gate set that reproduces ``run_circuit_exact`` for ideal or coherent-offset control."""
    prof = model.control_profile
    if prof.kind not in ("ideal", "coherent_offset"):
        raise ValueError(f"control profile {prof.kind!r} has no exact time-local encoding")
    eps = prof.epsilon if prof.kind == "coherent_offset" else 0.0
    n = model.n_system_qubits
    b = np.zeros(chi_gamma, dtype=complex)
    b[0] = 1
    return GateSet(
        encode_noise_model(model),
        [ideal_pulse(chi_gamma, eps) for _ in range(n)],
        [b.copy() for _ in range(n)],
        [ideal_povm() for _ in range(n)],
    )


# --- network assembly on a tape ----------------------------------------------

def _merge_row(tensors: list, n_feat: int):
    """Contract per-qubit tensors over their trailing (alpha_l, alpha_r) axes.

    Each tensor has ``n_feat`` feature axes then ``alpha_l, alpha_r``.  The
    result has ``n_feat`` axes, each the qubit-major product of the
    per-qubit features.
    """
    n = len(tensors)
    shapes = [t.shape for t in tensors]
    acc = ad.reshape(tensors[0], shapes[0][:n_feat] + (shapes[0][n_feat + 1],)) if isinstance(tensors[0], ad.Node) else tensors[0][..., 0, :]
    letters = string.ascii_letters
    for q in range(1, n):
        m = q * n_feat
        a = letters[:m]
        b = letters[m : m + n_feat]
        x, y = "Y", "Z"
        acc = ad.einsum(f"{a}{x},{b}{x}{y}->{a}{b}{y}", acc, tensors[q])
    # drop the trailing unit alpha bond, interleave features qubit-major
    full = acc.shape[:-1]
    acc = ad.reshape(acc, full)
    perm = [q * n_feat + f for f in range(n_feat) for q in range(n)]
    acc = ad.transpose(acc, perm)
    dims = [int(np.prod([shapes[q][f] for q in range(n)])) for f in range(n_feat)]
    return ad.reshape(acc, tuple(dims))


def _kron_stack(per_qubit: list, n_feat: int):
    """Kronecker-merge per-qubit tables sharing a leading batch axis."""
    acc = per_qubit[0]
    n = len(per_qubit)
    if n == 1:
        return acc
    letters = string.ascii_letters
    for q in range(1, n):
        m = q * n_feat
        a = letters[:m]
        b = letters[m : m + n_feat]
        acc = ad.einsum(f"Z{a},Z{b}->Z{a}{b}", acc, per_qubit[q])
    perm = [0] + [1 + q * n_feat + f for f in range(n_feat) for q in range(n)]
    acc = ad.transpose(acc, perm)
    shp = acc.shape
    dims = [int(np.prod(shp[1 + f * n : 1 + (f + 1) * n])) for f in range(n_feat)]
    return ad.reshape(acc, (shp[0],) + tuple(dims))


def _rz_phases(angles: np.ndarray) -> np.ndarray:
    """(G, 3) u3 angles -> (G, 3, 2) diagonal phases of the three virtual R_Z."""
    lam, th, ph = angles[:, 2], angles[:, 0], angles[:, 1]
    t = np.stack([lam, th + np.pi, ph + 3 * np.pi], axis=1)
    return np.stack([np.exp(-0.5j * t), np.exp(0.5j * t)], axis=2)


def gate_tensors(W, angles: np.ndarray):
    """``G[g, o, i, gl, gr]`` for each row of u3 angles."""
    ph = _rz_phases(np.asarray(angles, dtype=float).reshape(-1, 3))
    return ad.einsum("go,oamr,ga,ailm,gi->goilr", ph[:, 2], W, ph[:, 1], W, ph[:, 0])


class _Keys:
    """Deduplicates gate angle triples."""

    def __init__(self):
        self.index: dict[tuple, int] = {}
        self.angles: list[tuple] = []

    def add(self, ang) -> int:
        key = tuple(np.round(np.asarray(ang, dtype=float), 12))
        if key not in self.index:
            self.index[key] = len(self.angles)
            self.angles.append(tuple(float(a) for a in ang))
        return self.index[key]


@dataclass
class PreparedBatch:
    """Circuits lowered to index arrays for the batched engine."""

    n: int
    k: int
    gate_angles: list[np.ndarray]  # per qubit (G_q, 3)
    gate_idx: np.ndarray  # (N, k, n) rows into gate_angles[q]
    layer_keys: np.ndarray  # (U, n) unique gate layers
    layer_idx: np.ndarray  # (N, k) rows into layer_keys
    bases: np.ndarray  # (N, n) basis rotations index (0=Z,1=X,2=Y)
    counts: np.ndarray  # (N, 2**n)

    @property
    def size(self) -> int:
        return self.gate_idx.shape[0]


_BASIS_INDEX = {"Z": 0, "X": 1, "Y": 2}
_BASIS_ROT = np.stack([qo.measurement_rotation(b) for b in ("Z", "X", "Y")])


def prepare_batch(circuits: Sequence[CircuitSpec], counts: Sequence[dict] | None = None) -> PreparedBatch:
    if not circuits:
        raise ValueError("empty batch")
    n, k = circuits[0].n_qubits, circuits[0].n_steps
    keys = [_Keys() for _ in range(n)]
    gidx = np.zeros((len(circuits), k, n), dtype=np.int64)
    for c, circ in enumerate(circuits):
        if circ.n_qubits != n or circ.n_steps != k:
            raise ValueError("all circuits in a batch must share (n, k)")
        for j, layer in enumerate(circ.gates):
            for q, spec in enumerate(layer):
                gidx[c, j, q] = keys[q].add(qo.gate_angles(spec))
    flat = gidx.reshape(-1, n)
    layer_keys, inv = np.unique(flat, axis=0, return_inverse=True)
    layer_idx = inv.reshape(len(circuits), k)
    bases = np.array([[_BASIS_INDEX[b] for b in c.basis] for c in circuits], dtype=np.int64)
    cnt = np.zeros((len(circuits), 2**n))
    if counts is not None:
        for c, d in enumerate(counts):
            for bits, v in d.items():
                cnt[c, int(bits, 2)] = v
    return PreparedBatch(n, k, [np.array(kk.angles).reshape(-1, 3) for kk in keys], gidx, layer_keys, layer_idx, bases, cnt)


def _nodes(tape: ad.Tape, arrs: dict) -> dict:
    return {k: tape.leaf(v) for k, v in arrs.items()}


def process_supersites(P: dict, n: int, k: int):
    """Merged (all-qubit) process sites: psi0 (D, Nnu, M0) and phi_j (D, D, Nl, Nr)."""
    psi = _merge_row([P[f"psi0_{q}"] for q in range(n)], 3)
    phis = [_merge_row([P[f"phi{j}_{q}"] for q in range(n)], 4) for j in range(1, k + 1)]
    return psi, phis


def _layer_tables(P: dict, batch: PreparedBatch):
    n = batch.n
    per_q = []
    for q in range(n):
        G = gate_tensors(P[f"pulse_{q}"], batch.gate_angles[q])
        per_q.append(ad.take(G, batch.layer_keys[:, q]))
    return _kron_stack(per_q, 4)  # (U, D, D, Gam, Gam)


def _measurement_ops(P: dict, batch: PreparedBatch):
    """(N, 2**n, rank**n, D) measurement Kraus operators including basis rotation."""
    per_q = []
    for q in range(batch.n):
        R = _BASIS_ROT[batch.bases[:, q]]  # (N, 2, 2)
        per_q.append(ad.einsum("xma,cao->cxmo", P[f"povm_{q}"], R))
    return _kron_stack(per_q, 3)


def _gamma_start(P: dict, n: int):
    b = P["gamma0_0"]
    for q in range(1, n):
        b = ad.reshape(ad.einsum("a,b->ab", b, P[f"gamma0_{q}"]), (-1,))
    return b


def forward_probabilities(P: dict, batch: PreparedBatch):
    """Unnormalised outcome probabilities (N, 2**n) on the tape."""
    n, k, N = batch.n, batch.k, batch.size
    psi, phis = process_supersites(P, n, k)
    layers = _layer_tables(P, batch)
    b = _gamma_start(P, n)
    D = 2**n
    R0 = ad.einsum("apm,g->apgm", psi, b)
    nnu, gam, m0 = psi.shape[1], b.shape[0], psi.shape[2]
    m = D * nnu * gam
    R0 = ad.reshape(R0, (1, m, m0))
    if k > 1:
        tabs = []
        for j in range(1, k):
            A = ad.einsum("oiab,uipgh->uobhpag", phis[j - 1], layers)
            tabs.append(ad.reshape(A, (layers.shape[0], m, m)))
        T = ad.reshape(ad.stack(tabs), (-1, m, m))
        U = layers.shape[0]
        idx = np.arange(k - 1)[None, :] * U + batch.layer_idx[:, : k - 1]
        h = ad.matrix_chain(T, R0, idx, np.zeros(N, dtype=np.int64))
    else:
        h = ad.take(R0, np.zeros(N, dtype=np.int64))
    phk = phis[-1]
    mu = phk.shape[3]
    F = ad.einsum("oiab,uipgh->uobhpag", phk, layers)
    F = ad.reshape(F, (layers.shape[0], D, mu * gam, m))
    Fc = ad.take(F, batch.layer_idx[:, k - 1])
    out = ad.einsum("cokm,cmr->cokr", Fc, h)
    Mb = _measurement_ops(P, batch)
    amp = ad.einsum("cxmo,cokr->cxmkr", Mb, out)
    amp = ad.reshape(amp, (N, D, -1))
    return ad.total(ad.abs2(amp), axis=2)


# --- penalties on the tape --------------------------------------------------

def _embed(Nl: int, c: int) -> np.ndarray:
    return np.eye(c)[:, :Nl]


_PAULI_STACK = np.stack([qo.pauli(c) for c in _PAULI_CHARS])


def process_pauli_values(P: dict, n: int, k: int, constraints, with_identity=True):
    """``Tr[P_c Upsilon]`` for each constraint (plus the identity string last)."""
    psi, phis = process_supersites(P, n, k)
    D = 2**n
    dims = [psi.shape[1], psi.shape[2]] + [s for ph in phis for s in ph.shape[2:]]
    c = max(dims)
    e0 = np.zeros(D)
    e0[0] = 1
    sites = [ad.einsum("onm,i,am,bn->oiab", psi, e0, _embed(psi.shape[2], c), _embed(psi.shape[1], c))]
    for ph in phis:
        sites.append(ad.einsum("oilr,al,br->oiab", ph, _embed(ph.shape[2], c), _embed(ph.shape[3], c)))
    sites = ad.stack(sites)
    codes = as_constraint_batch(n, k, constraints).codes
    if with_identity:
        codes = np.vstack([codes, np.zeros((1, 2 * k + 1), dtype=np.int64)])
    rows = len(codes)
    po = np.zeros((rows, k + 1), dtype=np.int64)
    pi = np.zeros_like(po)
    po[:, 0] = codes[:, 2 * k]
    for j in range(1, k + 1):
        po[:, j] = codes[:, _col_o(k, j)]
        pi[:, j] = codes[:, _col_i(k, j)]
    perm, phase = pauli_tables(n)
    Lb = np.diag((np.arange(c) < psi.shape[2]).astype(complex))[None]
    Rb = np.diag((np.arange(c) < phis[-1].shape[3]).astype(complex))[None]
    sidx = np.broadcast_to(np.arange(k + 1), (rows, k + 1)).copy()
    z = np.zeros(rows, dtype=np.int64)
    return ad.real(ad.pauli_chain(sites, sidx, perm, phase, po, pi, Lb, z, Rb, z))


def causality_penalty_node(P: dict, n: int, k: int, constraints, trace_normalised: bool = False):
    """Squared constraint values plus ``(Tr Upsilon / D^k - 1)^2``.

    With ``trace_normalised`` the constraint values are taken on
    ``Upsilon / D^k`` (unit trace) instead of ``Upsilon``.
    """
    cb = as_constraint_batch(n, k, constraints)
    vals = process_pauli_values(P, n, k, cb)
    D = 2**n
    nc = len(cb)
    body = ad.total(ad.abs2(ad.take(vals, np.arange(nc))))
    if trace_normalised:
        body = ad.scale(body, 1.0 / D ** (2 * k))
    norm = ad.scale(ad.take(vals, nc), 1.0 / D**k)
    return ad.add(body, ad.abs2(ad.sub(norm, 1.0)))


def tester_pauli_values(P: dict, batch: PreparedBatch, circ_idx: np.ndarray, constraints):
    """``Tr[P_c T_sum]`` of the outcome-summed tester of circuit ``circ_idx[c]``."""
    n, k = batch.n, batch.k
    cb = as_constraint_batch(n, k, constraints)
    perm1, phase1 = pauli_tables(1)
    z = np.zeros(len(cb), dtype=np.int64)
    total = None
    for q in range(n):
        dig = cb.digits(q)
        G = gate_tensors(P[f"pulse_{q}"], batch.gate_angles[q])
        b = P[f"gamma0_{q}"]
        chi = b.shape[0]
        Lb = ad.reshape(ad.einsum("l,m->lm", b, ad.conj(b)), (1, chi, chi))
        Rb = np.eye(chi, dtype=complex)[None]
        sidx = batch.gate_idx[circ_idx, :, q]
        po = np.stack([dig[:, _col_i(k, s + 1)] for s in range(k)], axis=1)
        pi = np.stack([dig[:, _col_o(k, s)] for s in range(k)], axis=1)
        chain = ad.pauli_chain(G, sidx, perm1, phase1, po, pi, Lb, z, Rb, z)
        R = _BASIS_ROT[batch.bases[circ_idx, q]]
        MR = ad.einsum("xma,cao->cxmo", P[f"povm_{q}"], R)
        sum_pi = ad.einsum("cxma,cxmb->cab", ad.conj(MR), MR)
        Pk = _PAULI_STACK[dig[:, _col_o(k, k)]]
        f = ad.einsum("cab,cab->c", Pk, sum_pi)
        term = ad.mul(chain, f)
        total = term if total is None else ad.mul(total, term)
    return ad.real(total)


def tp_penalty_node(P: dict, batch: PreparedBatch, circ_idx: Sequence[int], constraints_per_circuit, trace_normalised: bool = False):
    """Mean over the chosen circuits of the squared tester constraint values plus normalisation.

    With ``trace_normalised`` the values are taken on ``T_sum / D^(k+1)``.
    """
    n, k = batch.n, batch.k
    D = 2**n
    codes, rows_c, is_norm = [], [], []
    for c, cons in zip(circ_idx, constraints_per_circuit):
        cc = as_constraint_batch(n, k, cons).codes
        codes += [cc, np.zeros((1, 2 * k + 1), dtype=np.int64)]
        rows_c += [c] * (len(cc) + 1)
        is_norm += [False] * len(cc) + [True]
    cb = ConstraintBatch(n, k, np.vstack(codes))
    vals = tester_pauli_values(P, batch, np.array(rows_c, dtype=np.int64), cb)
    is_norm = np.array(is_norm)
    body = ad.total(ad.abs2(ad.take(vals, np.nonzero(~is_norm)[0])))
    if trace_normalised:
        body = ad.scale(body, 1.0 / D ** (2 * k + 2))
    norm = ad.total(ad.abs2(ad.sub(ad.scale(ad.take(vals, np.nonzero(is_norm)[0]), 1.0 / D ** (k + 1)), 1.0)))
    return ad.scale(ad.add(body, norm), 1.0 / max(1, len(circ_idx)))


# --- public evaluation API ---------------------------------------------------

def predict_distributions(gs: GateSet, circuits: Sequence[CircuitSpec], normalise: bool = False) -> np.ndarray:
    """Outcome probabilities (N, 2**n) for a list of circuits."""
    tape = ad.Tape()
    P = _nodes(tape, gs.arrays())
    p = forward_probabilities(P, prepare_batch(circuits)).value
    if normalise:
        p = p / p.sum(axis=1, keepdims=True)
    return p


def predict_probability(gs: GateSet, circuit: CircuitSpec, outcome) -> float:
    """Probability of ``outcome`` (bitstring, qubit 0 leftmost, or integer)."""
    if isinstance(outcome, str):
        if len(outcome) != gs.n_qubits:
            raise ValueError("outcome length does not match the number of qubits")
        outcome = int(outcome, 2)
    if circuit.n_qubits != gs.n_qubits or circuit.n_steps != gs.n_steps:
        raise ValueError("circuit does not match the gate set dimensions")
    return float(predict_distributions(gs, [circuit])[0, outcome])


def pauli_expectations(pt: ProcessTensorLPDO, constraints: Sequence[PauliConstraint]) -> np.ndarray:
    tape = ad.Tape()
    P = _nodes(tape, pt.arrays())
    return process_pauli_values(P, pt.n_qubits, pt.n_steps, constraints, with_identity=False).value


def causality_penalty(pt: ProcessTensorLPDO, constraints: Sequence[PauliConstraint], normalisation: bool = False) -> float:
    """``sum_c Tr[P_c Upsilon]^2`` evaluated on the network (no densification).

    With ``normalisation`` the term ``(Tr Upsilon / D^k - 1)^2`` used by the
    fit is added.
    """
    tape = ad.Tape()
    P = _nodes(tape, pt.arrays())
    if normalisation:
        return float(causality_penalty_node(P, pt.n_qubits, pt.n_steps, constraints).value)
    v = process_pauli_values(P, pt.n_qubits, pt.n_steps, constraints, with_identity=False).value
    return float(np.sum(v**2))


def tp_penalty(gs: GateSet, circuits: Sequence[CircuitSpec], constraints_per_circuit, normalisation: bool = False) -> float:
    """Squared Pauli expectations of each circuit's outcome-summed tester."""
    if len(circuits) != len(constraints_per_circuit):
        raise ValueError("one constraint set per circuit is required")
    tape = ad.Tape()
    P = _nodes(tape, gs.arrays())
    batch = prepare_batch(circuits)
    idx = np.arange(len(circuits))
    if normalisation:
        return float(tp_penalty_node(P, batch, idx, constraints_per_circuit).value) * len(circuits)
    n, k = gs.n_qubits, gs.n_steps
    cbs = [as_constraint_batch(n, k, cons) for cons in constraints_per_circuit]
    rows_c = [c for c, cb in zip(idx, cbs) for _ in range(len(cb))]
    cb = ConstraintBatch(n, k, np.vstack([x.codes for x in cbs]))
    v = tester_pauli_values(P, batch, np.array(rows_c, dtype=np.int64), cb).value
    return float(np.sum(v**2))


# --- dense views --------------------------------------------------------------

def _guard(n: int, k: int) -> None:
    if (2**n) ** (2 * k + 1) > DENSE_GUARD:
        raise ValueError("dense representation exceeds the size guard")


def process_ket(pt: ProcessTensorLPDO) -> np.ndarray:
    """Ket ``Y`` of shape (D^(2k+1), Kraus) with legs ``o_k, i_k, ..., o_0``."""
    n, k = pt.n_qubits, pt.n_steps
    tape = ad.Tape()
    psi, phis = process_supersites(_nodes(tape, pt.arrays()), n, k)
    tensors = [ComplexTensor(psi.value, ["o0", "nu1", "mu0"])]
    for j, ph in enumerate(phis, start=1):
        right = "mu" if j == k else f"nu{j+1}"
        tensors.append(ComplexTensor(ph.value, [f"o{j}", f"i{j}", f"nu{j}", right]))
    pairs = [(j - 1, f"nu{j}", j, f"nu{j}") for j in range(1, k + 1)]
    open_axes = []
    for lab in process_legs(k):
        j = int(lab[1:])
        open_axes.append((j, lab))
    open_axes += [(k, "mu"), (0, "mu0")]
    Y = contract(NetworkSpec(tensors, pairs, open_axes))
    D = 2**n
    return Y.data.reshape(D ** (2 * k + 1), -1)


def lpdo_to_dense(pt: ProcessTensorLPDO) -> qo.ChoiState:
    """Explicit ``Upsilon`` (Hermitian PSD), legs ``o_k, i_k, ..., o_1, i_1, o_0``."""
    _guard(pt.n_qubits, pt.n_steps)
    Y = process_ket(pt)
    D = 2**pt.n_qubits
    return qo.ChoiState(Y @ Y.conj().T, [D] * (2 * pt.n_steps + 1), process_legs(pt.n_steps))


def tester_to_dense(gs: GateSet, circuit: CircuitSpec, outcome: int | None = None) -> qo.ChoiState:
    """Tester Choi (``Pi^T (x) A``) of one outcome, or the outcome sum if ``outcome`` is None."""
    n, k = gs.n_qubits, gs.n_steps
    _guard(n, k)
    outs = range(2**n) if outcome is None else [outcome]
    D = 2**n
    T = np.zeros((D ** (2 * k + 1),) * 2, dtype=complex)
    batch = prepare_batch([circuit])
    for x in outs:
        bits = [(x >> (n - 1 - q)) & 1 for q in range(n)]
        kets = []
        for q in range(n):
            W, b, M = gs.pulses[q], gs.gamma0[q], gs.povm[q]
            Gs = [_gate_np(W, batch.gate_angles[q][batch.gate_idx[0, s, q]]) for s in range(k)]
            v = b.reshape(1, -1)  # (legs..., gamma)
            for s in range(k):
                # new legs: i_{s+1}, o_s prepended in reverse time order later
                v = np.einsum("Ag,iogh->Aioh", v, Gs[s]).reshape(-1, Gs[s].shape[3])
            R = _BASIS_ROT[batch.bases[0, q]]
            MR = M[bits[q]] @ R  # (rank, o_k)
            ket = np.einsum("Ag,mo->Aogm", v, MR)
            # axes: (i1,o0, i2,o1, ..., ik,o_{k-1}), o_k, gamma, m
            ket = ket.reshape([2] * (2 * k + 1) + [-1])
            order = [2 * k] + [a for s in range(k - 1, -1, -1) for a in (2 * s, 2 * s + 1)]
            ket = ket.transpose(order + [2 * k + 1]).reshape(2 ** (2 * k + 1), -1)
            kets.append(ket)
        Z = kets[0]
        for q in range(1, n):
            Z = np.einsum("aA,bB->abAB", Z, kets[q]).reshape(Z.shape[0] * kets[q].shape[0], -1)
        if n > 1:
            L = 2 * k + 1
            Z = Z.reshape([2] * (L * n) + [-1])
            perm = [q * L + l for l in range(L) for q in range(n)] + [L * n]
            Z = Z.transpose(perm).reshape(D**L, -1)
        T += Z @ Z.conj().T
    return qo.ChoiState(T, [D] * (2 * k + 1), process_legs(k))


def _gate_np(W: np.ndarray, angles) -> np.ndarray:
    ph = _rz_phases(np.asarray(angles, dtype=float).reshape(1, 3))[0]
    return np.einsum("o,oamr,a,ailm,i->oilr", ph[2], W, ph[1], W, ph[0])


# --- conditional marginals ------------------------------------------------------

def conditional_marginal(
    dense: qo.ChoiState,
    qubits: tuple[int, int],
    steps: tuple[int, int],
    refocus: np.ndarray | None = None,
) -> qo.ChoiState:
    """Two-slot dynamical-map Choi of ``(q_i, step j)`` and ``(q_l, step m)``.

    Every other gate slot is replaced by the refocusing gate (X by default);
    a slot whose output leg belongs to a selected map is fed the maximally
    mixed state, a slot whose input leg is selected discards its output
    (identity), and an unselected final output is traced.  The result has
    legs ``(o_j, i_j, o_m, i_m)`` of the chosen qubits and trace ``d^2``.
    """
    k = (len(dense.dims) - 1) // 2
    D = dense.dims[0]
    n = int(round(np.log2(D)))
    (qa, qb), (j, m) = qubits, steps
    if not (1 <= j <= k and 1 <= m <= k) or not (0 <= qa < n and 0 <= qb < n):
        raise ValueError("slot out of range")
    if (qa, j) == (qb, m):
        raise ValueError("the two slots must differ")
    refocus = qo.X if refocus is None else refocus
    # split every leg into qubit legs
    legs = [f"{l}_{q}" for l in dense.labels for q in range(n)]
    ups = qo.ChoiState(dense.matrix, [2] * len(legs), legs)
    open_legs = [f"o{j}_{qa}", f"i{j}_{qa}", f"o{m}_{qb}", f"i{m}_{qb}"]
    pieces = []
    for q in range(n):
        for s in range(k):
            o, i = f"o{s}_{q}", f"i{s+1}_{q}"
            oo, io = o in open_legs, i in open_legs
            if oo and io:
                continue
            if oo:
                pieces.append(qo.ChoiState(np.eye(2) / 2, [2], [i]))
            elif io:
                pieces.append(qo.ChoiState(np.eye(2), [2], [o]))
            else:
                pieces.append(qo.choi_of(refocus, (i, o)))
        ok = f"o{k}_{q}"
        if ok not in open_legs:
            pieces.append(qo.ChoiState(np.eye(2), [2], [ok]))
    T = pieces[0]
    for p in pieces[1:]:
        T = qo.link_product(T, p, [])
    out = qo.link_product(ups, T, T.labels)
    out = out.reorder(open_legs)
    tr = out.trace
    return qo.ChoiState(out.matrix * (4.0 / tr), out.dims, out.labels)


# --- checkpoints ------------------------------------------------------------

def save_gateset(gs: GateSet, fh_or_path, extra: dict | None = None) -> None:
    """Record sequence: a manifest record followed by one record per tensor."""
    n, k = gs.n_qubits, gs.n_steps
    manifest = {
        "n": n,
        "k": k,
        "chi_nu": gs.process.chi_nu,
        "chi_mu": gs.process.chi_mu,
        "chi_mu0": gs.process.chi_mu0,
        "chi_alpha": gs.process.chi_alpha,
        "chi_gamma": gs.chi_gamma,
        "sharing": {
            f"slot{s}_q{q}": f"pulse_{q}" for s in range(k) for q in range(n)
        },
    }
    if extra:
        manifest.update(extra)
    recs = [(ComplexTensor(np.zeros(0), ["empty"], name="manifest"), manifest)]
    for name, arr in gs.arrays().items():
        recs.append((ComplexTensor(arr, [f"ax{i}" for i in range(arr.ndim)], name=name), None))
    if isinstance(fh_or_path, (str, bytes)) or hasattr(fh_or_path, "__fspath__"):
        with open(fh_or_path, "wb") as fh:
            write_records(fh, recs)
    else:
        write_records(fh_or_path, recs)


def load_gateset(fh_or_path) -> tuple[GateSet, dict]:
    if isinstance(fh_or_path, (str, bytes)) or hasattr(fh_or_path, "__fspath__"):
        with open(fh_or_path, "rb") as fh:
            recs = read_records(fh)
    else:
        recs = read_records(fh_or_path)
    manifest = recs[0][1]
    arrs = {t.name: t.data for t, _ in recs[1:]}
    return GateSet.from_arrays(manifest["n"], manifest["k"], arrs), manifest


def gateset_bytes(gs: GateSet) -> bytes:
    buf = io.BytesIO()
    save_gateset(gs, buf)
    return buf.getvalue()
