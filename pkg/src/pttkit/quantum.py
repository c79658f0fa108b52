"""Quantum primitives: Paulis, Cliffords, the u3 pulse decomposition, Choi
states, link products and the distance measures used for validation.

Conventions
-----------
* ``R_Z(t) = diag(exp(-i t/2), exp(+i t/2))`` and ``R_X(t) = exp(-i t X / 2)``.
* ``u3(theta, phi, lam) = R_Z(phi + 3pi) R_X(pi/2) R_Z(theta + pi) R_X(pi/2) R_Z(lam)``,
  i.e. every single-qubit gate costs two physical ``R_X(pi/2)`` pulses.
* Choi matrices use the unnormalised ``|Phi+> = sum_i |ii>``, output leg
  first: ``choi(L) = sum_ij L(|i><j|) (x) |i><j|``, so a trace-preserving
  channel has trace ``d``.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import hermitian_eig

I2 = np.eye(2, dtype=complex)
X = np.array([[0, 1], [1, 0]], dtype=complex)
Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
Z = np.array([[1, 0], [0, -1]], dtype=complex)
H = np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2)
S = np.diag([1, 1j]).astype(complex)
PAULIS = {"I": I2, "X": X, "Y": Y, "Z": Z}


def pauli(label: str) -> np.ndarray:
    """Tensor product of single-qubit Paulis in label order."""
    if not label:
        raise ValueError("empty Pauli label")
    out = np.ones((1, 1), dtype=complex)
    for ch in label:
        if ch not in PAULIS:
            raise ValueError(f"invalid Pauli character {ch!r}")
        out = np.kron(out, PAULIS[ch])
    return out


def rz(t: float) -> np.ndarray:
    return np.diag([np.exp(-0.5j * t), np.exp(0.5j * t)])


def rx(t: float) -> np.ndarray:
    c, s = np.cos(t / 2), np.sin(t / 2)
    return np.array([[c, -1j * s], [-1j * s, c]])


def ry(t: float) -> np.ndarray:
    c, s = np.cos(t / 2), np.sin(t / 2)
    return np.array([[c, -s], [s, c]], dtype=complex)


def u3_rz_angles(theta: float, phi: float, lam: float) -> tuple[float, float, float]:
    """The three virtual Z rotations, in time order, around the two pulses."""
    return lam, theta + np.pi, phi + 3 * np.pi


def u3(theta: float, phi: float, lam: float, pulse: np.ndarray | None = None) -> np.ndarray:
    """Hardware decomposition of a single-qubit gate.

    ``pulse`` replaces the ideal ``R_X(pi/2)`` (used by the noisy simulator).
    """
    p = rx(np.pi / 2) if pulse is None else pulse
    a, b, c = u3_rz_angles(theta, phi, lam)
    return rz(c) @ p @ rz(b) @ p @ rz(a)


def equal_up_to_phase(a: np.ndarray, b: np.ndarray, tol: float = 1e-9) -> bool:
    """``|Tr(a^dag b)| / d == 1`` for unitaries ``a`` and ``b``."""
    d = a.shape[0]
    return abs(abs(np.trace(a.conj().T @ b)) / d - 1.0) < tol


def zyz_angles(U: np.ndarray) -> tuple[float, float, float]:
    """Angles with ``u3(theta, phi, lam)`` equal to ``U`` up to global phase."""
    U = np.asarray(U, dtype=complex)
    V = U / np.sqrt(np.linalg.det(U))
    theta = 2 * np.arctan2(abs(V[1, 0]), abs(V[0, 0]))
    if abs(V[0, 0]) < 1e-12:
        lam = 0.0
        phi = 2 * np.angle(V[1, 0])
    elif abs(V[1, 0]) < 1e-12:
        phi = 0.0
        lam = -2 * np.angle(V[0, 0])
    else:
        s = -2 * np.angle(V[0, 0])  # phi + lam
        t = 2 * np.angle(V[1, 0])  # phi - lam
        phi, lam = (s + t) / 2, (s - t) / 2
    return float(theta), float(phi), float(lam)


def _generate_cliffords() -> list[np.ndarray]:
    found = [I2.copy()]
    frontier = [I2.copy()]
    while frontier:
        nxt = []
        for U in frontier:
            for g in (H, S):
                V = g @ U
                if not any(equal_up_to_phase(V, W) for W in found):
                    found.append(V)
                    nxt.append(V)
        frontier = nxt
    return found


_CLIFFORDS = _generate_cliffords()
_CLIFFORD_ANGLES = [zyz_angles(C) for C in _CLIFFORDS]


def single_qubit_cliffords() -> list[np.ndarray]:
    """The 24 single-qubit Cliffords (index 0 is the identity), generated from H and S."""
    return [C.copy() for C in _CLIFFORDS]


def clifford_angles(i: int) -> tuple[float, float, float]:
    """Canonical ``(theta, phi, lam)`` of Clifford ``i``."""
    return _CLIFFORD_ANGLES[i]


NAMED_GATES = {
    "I": I2,
    "X": X,
    "Y": Y,
    "Z": Z,
    "H": H,
    "S": S,
    "X90": rx(np.pi / 2),
    "Y90": ry(np.pi / 2),
}


def gate_angles(spec: dict) -> tuple[float, float, float]:
    """u3 angles for a gate spec ``{"kind": "clifford"|"u3"|"named", ...}``."""
    kind = spec["kind"]
    if kind == "clifford":
        return clifford_angles(int(spec["i"]))
    if kind == "u3":
        return float(spec["theta"]), float(spec["phi"]), float(spec["lam"])
    if kind == "named":
        return zyz_angles(NAMED_GATES[spec["name"]])
    raise ValueError(f"unknown gate kind {kind!r}")


def gate_unitary(spec: dict) -> np.ndarray:
    return u3(*gate_angles(spec))


MEAS_ROTATION = {"Z": I2, "X": H, "Y": H @ S.conj().T}


def measurement_rotation(basis: str) -> np.ndarray:
    """Unitary applied before a Z measurement to measure in ``basis``."""
    return MEAS_ROTATION[basis]


# --- Choi states ---------------------------------------------------------

@dataclass
class ChoiState:
    """Hermitian operator on an ordered list of legs.

    ``matrix`` has shape ``(prod(dims), prod(dims))`` with legs in ``labels`` order.
    """

    matrix: np.ndarray
    dims: list[int]
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=complex)
        self.dims = [int(d) for d in self.dims]
        if not self.labels:
            self.labels = [f"l{i}" for i in range(len(self.dims))]
        D = int(np.prod(self.dims)) if self.dims else 1
        if self.matrix.shape != (D, D):
            raise ValueError("matrix shape does not match leg dims")
        if len(set(self.labels)) != len(self.labels) or len(self.labels) != len(self.dims):
            raise ValueError("labels must be distinct, one per leg")

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix).real)

    def tensor(self) -> np.ndarray:
        return self.matrix.reshape(self.dims + self.dims)

    def is_psd(self, tol: float = 1e-9) -> bool:
        return bool(np.linalg.eigvalsh(0.5 * (self.matrix + self.matrix.conj().T)).min() >= -tol)

    def reorder(self, labels: Sequence[str]) -> "ChoiState":
        perm = [self.labels.index(l) for l in labels]
        n = len(perm)
        t = self.tensor().transpose(perm + [p + n for p in perm])
        dims = [self.dims[p] for p in perm]
        D = int(np.prod(dims))
        return ChoiState(t.reshape(D, D), dims, list(labels))


@dataclass
class POVM:
    effects: list[np.ndarray]

    def __post_init__(self):
        total = sum(self.effects)
        if np.abs(total - np.eye(total.shape[0])).max() > 1e-9:
            raise ValueError("POVM effects do not sum to identity")


def choi_of(channel, labels: Sequence[str] = ("out", "in")) -> ChoiState:
    """Choi state of a unitary (2-D array) or a Kraus list."""
    if isinstance(channel, np.ndarray) and channel.ndim == 2:
        kraus = [channel]
    else:
        kraus = [np.asarray(k, dtype=complex) for k in channel]
    shape = kraus[0].shape
    if any(k.shape != shape for k in kraus):
        raise ValueError("Kraus operators have mismatched dimensions")
    dout, din = shape
    M = np.zeros((dout * din, dout * din), dtype=complex)
    for K in kraus:
        v = K.reshape(-1)  # v[o*din + i] = K[o, i] = (K (x) I)|Phi+>
        M += np.outer(v, v.conj())
    return ChoiState(M, [dout, din], list(labels))


def apply_kraus(kraus, rho: np.ndarray) -> np.ndarray:
    return sum(K @ rho @ K.conj().T for K in kraus)


def partial_trace(c: ChoiState, legs: Sequence[str]) -> ChoiState:
    """Trace out the named legs; remaining legs keep their order."""
    for l in legs:
        if l not in c.labels:
            raise ValueError(f"unknown leg {l!r}")
    n = len(c.dims)
    letters = string.ascii_letters
    ket = [letters[i] for i in range(n)]
    bra = [letters[n + i] for i in range(n)]
    for i, l in enumerate(c.labels):
        if l in legs:
            bra[i] = ket[i]
    keep = [i for i, l in enumerate(c.labels) if l not in legs]
    out = "".join(ket[i] for i in keep) + "".join(bra[i] for i in keep)
    t = np.einsum("".join(ket) + "".join(bra) + "->" + out, c.tensor())
    dims = [c.dims[i] for i in keep]
    D = int(np.prod(dims)) if dims else 1
    return ChoiState(t.reshape(D, D), dims, [c.labels[i] for i in keep])


def link_product(a: ChoiState, b: ChoiState, shared: Sequence[str] | None = None) -> ChoiState:
    """Link product ``Tr_s[(a^{T_s} (x) 1)(1 (x) b)]`` over the shared legs.

    Legs are matched by label; by default every label present in both.
    The output lists ``a``'s remaining legs, then ``b``'s.
    """
    if shared is None:
        shared = [l for l in a.labels if l in b.labels]
    for l in shared:
        if l not in a.labels or l not in b.labels:
            raise ValueError(f"leg {l!r} is not shared")
        if a.dims[a.labels.index(l)] != b.dims[b.labels.index(l)]:
            raise ValueError(f"leg {l!r} has mismatched dimensions")
    clash = (set(a.labels) & set(b.labels)) - set(shared)
    if clash:
        raise ValueError(f"legs {sorted(clash)} appear in both factors but are not linked")
    letters = iter(string.ascii_letters)
    ka = {l: next(letters) for l in a.labels}
    ba = {l: next(letters) for l in a.labels}
    # C[a b; a'' b''] = sum_{y,s} A[a y; a'' s] B[y b; s b'']
    kb = {l: (ka[l] if l in shared else next(letters)) for l in b.labels}
    bb = {l: (ba[l] if l in shared else next(letters)) for l in b.labels}
    ra = [l for l in a.labels if l not in shared]
    rb = [l for l in b.labels if l not in shared]
    spec = (
        "".join(ka[l] for l in a.labels) + "".join(ba[l] for l in a.labels) + ","
        + "".join(kb[l] for l in b.labels) + "".join(bb[l] for l in b.labels) + "->"
        + "".join(ka[l] for l in ra) + "".join(kb[l] for l in rb)
        + "".join(ba[l] for l in ra) + "".join(bb[l] for l in rb)
    )
    t = np.einsum(spec, a.tensor(), b.tensor())
    dims = [a.dims[a.labels.index(l)] for l in ra] + [b.dims[b.labels.index(l)] for l in rb]
    D = int(np.prod(dims)) if dims else 1
    return ChoiState(t.reshape(D, D), dims, ra + rb)


# --- distances -------------------------------------------------------------

def _clean_prob(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if (p < -1e-12).any():
        raise ValueError("probability entry below -1e-12")
    p = np.clip(p, 0.0, None)
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("probabilities do not sum to 1")
    return p / p.sum()


def hellinger_distance(p, q) -> float:
    """``sqrt(1/2 sum (sqrt p - sqrt q)^2)``."""
    p, q = np.asarray(p), np.asarray(q)
    if p.shape != q.shape:
        raise ValueError("length mismatch")
    p, q = _clean_prob(p), _clean_prob(q)
    return float(np.sqrt(0.5 * np.sum((np.sqrt(p) - np.sqrt(q)) ** 2)))


def _psd_sqrt(rho: np.ndarray) -> np.ndarray:
    w, V = hermitian_eig(rho, tol=1e-8)
    if w.min() < -1e-8:
        raise ValueError("input is not positive semidefinite")
    return (V * np.sqrt(np.clip(w, 0, None))) @ V.conj().T


def uhlmann_fidelity(rho: np.ndarray, sigma: np.ndarray) -> float:
    """``(Tr sqrt(sqrt(rho) sigma sqrt(rho)))^2``."""
    r = _psd_sqrt(rho)
    m = r @ sigma @ r
    w = np.linalg.eigvalsh(0.5 * (m + m.conj().T))
    return float(np.clip(np.sum(np.sqrt(np.clip(w, 0, None))) ** 2, 0.0, 1.0))


def trace_distance(a: np.ndarray, b: np.ndarray) -> float:
    """``1/2 ||a - b||_1`` for Hermitian ``a``, ``b``."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("dimension mismatch")
    w, _ = hermitian_eig(a - b)
    return float(0.5 * np.abs(w).sum())


def average_gate_fidelity(U: np.ndarray, kraus) -> float:
    """Average gate fidelity of a channel against a target unitary."""
    d = U.shape[0]
    f_pro = sum(abs(np.trace(U.conj().T @ K)) ** 2 for K in kraus) / d**2
    return float((d * f_pro + 1) / (d + 1))


def von_neumann_entropy(rho: np.ndarray) -> float:
    """Entropy in nats of a (trace-normalised) density matrix."""
    w = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))
    w = w[w > 1e-15]
    return float(-np.sum(w * np.log(w)))


def haar_unitary(d: int, rng: np.random.Generator) -> np.ndarray:
    z = (rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    return q * (np.diag(r) / np.abs(np.diag(r)))
