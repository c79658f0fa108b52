"""Consumers of a fitted gate set.

Validation reports, mutual-information maps between dynamical maps, noise
aware two-qubit decompositions, randomised-benchmarking forecasts and
dynamical-decoupling design.  All channel evaluations contract the LPDO
chain directly (no dense process tensor), so they scale to long windows.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np
from scipy.optimize import curve_fit, minimize

from . import autodiff as ad
from . import model as mdl
from . import quantum as qo
from .noise import CircuitRecord, NoiseModel, derived_rng, pulse_unitaries

CNOT = np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=complex)


# --- validation -----------------------------------------------------------

def reconstruction_report(gs: mdl.GateSet, records: Sequence[CircuitRecord]) -> dict:
    """Per-circuit Hellinger distance between model predictions and observed frequencies."""
    if not records:
        raise ValueError("no validation circuits")
    n = gs.n_qubits
    pred = mdl.predict_distributions(gs, [r.circuit for r in records], normalise=True)
    dists = []
    for p, r in zip(pred, records):
        f = np.zeros(2**n)
        for bits, c in r.counts.items():
            f[int(bits, 2)] = c
        dists.append(qo.hellinger_distance(p, f / f.sum()))
    d = np.array(dists)
    q1, med, q3 = np.percentile(d, [25, 50, 75])
    return {"distances": d.tolist(), "median": float(med), "q1": float(q1), "q3": float(q3), "mean": float(d.mean())}


# --- mutual information ---------------------------------------------------

@dataclass
class MIMap:
    """Mutual information (nats) between pairs of dynamical maps ``(qubit, step)``."""

    entries: dict = field(default_factory=dict)

    def __getitem__(self, key):
        a, b = key
        if (a, b) in self.entries:
            return self.entries[(a, b)]
        return self.entries[(b, a)]

    def slots(self) -> list[tuple[int, int]]:
        return sorted({s for pair in self.entries for s in pair})

    def matrix(self) -> np.ndarray:
        sl = self.slots()
        m = np.zeros((len(sl), len(sl)))
        for (a, b), v in self.entries.items():
            i, j = sl.index(a), sl.index(b)
            m[i, j] = m[j, i] = v
        return m

    def to_json(self) -> dict:
        return {"entries": [{"a": list(a), "b": list(b), "mi": v} for (a, b), v in self.entries.items()]}

    def to_text(self) -> str:
        buf = io.StringIO()
        sl = self.slots()
        buf.write("# slots " + " ".join(f"q{q}s{j}" for q, j in sl) + "\n")
        np.savetxt(buf, self.matrix(), fmt="%.12e")
        return buf.getvalue()


def mutual_information(joint: np.ndarray, dims: tuple[int, int]) -> float:
    """``S(A) + S(B) - S(AB)`` of a normalised bipartite state."""
    da, db = dims
    r = joint.reshape(da, db, da, db)
    ra = np.einsum("abcb->ac", r)
    rb = np.einsum("abad->bd", r)
    mi = qo.von_neumann_entropy(ra) + qo.von_neumann_entropy(rb) - qo.von_neumann_entropy(joint)
    if mi < -1e-10:
        raise ValueError(f"negative mutual information {mi}")
    return max(mi, 0.0)


def mutual_information_map(dense: qo.ChoiState, refocus: np.ndarray | None = None) -> MIMap:
    """MI between every pair of single-qubit dynamical maps of a dense process tensor.

    Other slots are fed the refocusing gate (X unless given).  The log is
    natural, so a perfectly correlated classical bit gives ``ln 2``.
    """
    k = (len(dense.dims) - 1) // 2
    n = int(round(np.log2(dense.dims[0])))
    slots = [(q, j) for j in range(1, k + 1) for q in range(n)]
    out = MIMap()
    for a, b in combinations(slots, 2):
        cm = mdl.conditional_marginal(dense, (a[0], b[0]), (a[1], b[1]), refocus)
        out.entries[(a, b)] = mutual_information(cm.matrix / np.trace(cm.matrix).real, (4, 4))
    return out


# --- effective channels through the network -----------------------------------

def _gate_tensors_np(W: np.ndarray, angles: np.ndarray) -> np.ndarray:
    ph = mdl._rz_phases(np.asarray(angles, dtype=float).reshape(-1, 3))
    return np.einsum("go,oamr,ga,ailm,gi->goilr", ph[:, 2], W, ph[:, 1], W, ph[:, 0])


def layer_tensors(gs: mdl.GateSet, angles: np.ndarray) -> np.ndarray:
    """(B, n, 3) angles -> (B, D, D, Gamma, Gamma) joint gate tensors, qubit 0 major."""
    angles = np.asarray(angles, dtype=float)
    acc = _gate_tensors_np(gs.pulses[0], angles[:, 0])
    for q in range(1, gs.n_qubits):
        G = _gate_tensors_np(gs.pulses[q], angles[:, q])
        B = acc.shape[0]
        acc = np.einsum("zailr,zbjms->zabijlmrs", acc, G)
        s = acc.shape
        acc = acc.reshape(B, s[1] * s[2], s[3] * s[4], s[5] * s[6], s[7] * s[8])
    return acc


class ChannelChain:
    """System channel from leg ``i_1`` to leg ``o_c`` of a gate set.

    The initial output leg ``o_0`` and every step after ``c`` are traced.
    Free gate layers sit after each of the steps ``1..c-1``; optionally one
    more acts on the input before step 1 (``pre``) and one after step ``c``
    (``post``).  All layers are evaluated through the gate set's pulse
    tensors and share one control-bond chain.
    """

    def __init__(self, gs: mdl.GateSet, n_steps: int | None = None, pre: bool = False, post: bool = False):
        self.gs = gs
        n, k = gs.n_qubits, gs.n_steps
        c = k if n_steps is None else n_steps
        if not 0 <= c <= k:
            raise ValueError("window out of range")
        self.n, self.k, self.c, self.D = n, k, c, 2**n
        self.pre = pre
        self.post = post and c >= 1
        tape = ad.Tape()
        psi, phis = mdl.process_supersites(mdl._nodes(tape, gs.process.arrays()), n, k)
        self.psi = psi.value
        self.phis = [p.value for p in phis]
        R = np.eye(self.phis[-1].shape[3], dtype=complex)
        for j in range(k, c, -1):
            ph = self.phis[j - 1]
            R = np.einsum("oilr,rs,oims->lm", ph, R, ph.conj()) / self.D
        w, V = np.linalg.eigh(0.5 * (R + R.conj().T))
        keep = w > 1e-14 * max(1.0, w.max())
        self.right = V[:, keep] * np.sqrt(w[keep])
        b = gs.gamma0[0]
        for q in range(1, n):
            b = np.kron(b, gs.gamma0[q])
        self.b = b

    @property
    def n_slots(self) -> int:
        return int(self.pre) + max(self.c - 1, 0) + int(self.post)

    def kraus(self, angles: np.ndarray) -> np.ndarray:
        """Kraus operators ``(B, K, D, D)`` for angle batches ``(B, n_slots, n, 3)``."""
        angles = np.asarray(angles, dtype=float)
        if angles.ndim == 3:
            angles = angles[None]
        B, D = angles.shape[0], self.D
        if angles.shape[1:] != (self.n_slots, self.n, 3):
            raise ValueError(f"expected angles of shape (B, {self.n_slots}, {self.n}, 3)")
        slot = 0
        if self.pre:
            L = layer_tensors(self.gs, angles[:, slot])
            slot += 1
            h = np.einsum("zaxgh,g->zaxh", L, self.b)
        else:
            h = np.einsum("ax,h->axh", np.eye(D), self.b)[None].repeat(B, axis=0)
        # attach the initial site: nu bond and the traced (o_0, mu_0) Kraus pair
        K0 = np.transpose(self.psi, (1, 0, 2)).reshape(self.psi.shape[1], -1)
        h = np.einsum("zaxh,vK->zaxhvK", h, K0)
        for j in range(1, self.c + 1):
            h = np.einsum("oilr,zixglK->zoxgrK", self.phis[j - 1], h)
            if j < self.c or self.post:
                L = layer_tensors(self.gs, angles[:, slot])
                slot += 1
                h = np.einsum("zaogh,zoxgrK->zaxhrK", L, h)
        h = np.einsum("zaxgvK,vr->zgrKax", h, self.right)
        return h.reshape(B, -1, D, D)

    def choi(self, angles: np.ndarray) -> np.ndarray:
        """Unnormalised Choi matrices ``(B, D*D, D*D)``, output leg first."""
        K = self.kraus(angles)
        v = K.reshape(K.shape[0], K.shape[1], -1)
        return np.einsum("zka,zkb->zab", v, v.conj())


def overlap_error(kraus: np.ndarray, U: np.ndarray) -> np.ndarray:
    """``1 - Re Tr(E U^dag)/d^2`` on superoperators, i.e. one minus the process fidelity."""
    d = U.shape[0]
    ov = np.einsum("ax,zkax->zk", U.conj(), kraus)
    return 1.0 - np.sum(np.abs(ov) ** 2, axis=1) / d**2


def _fd_minimize(fun_batch, x0: np.ndarray, h: float = 1e-6, maxiter: int = 500, gtol: float = 1e-10):
    """L-BFGS with central-difference gradients evaluated in one batch."""
    nx = x0.size
    eye = np.eye(nx) * h

    def fg(x):
        pts = np.vstack([x[None], x[None] + eye, x[None] - eye])
        v = fun_batch(pts)
        return float(v[0]), (v[1 : 1 + nx] - v[1 + nx :]) / (2 * h)

    res = minimize(fg, x0, jac=True, method="L-BFGS-B", options={"maxiter": maxiter, "gtol": gtol, "ftol": 1e-15})
    return res.x, float(fg(res.x)[0])


# --- SU(4) decomposition --------------------------------------------------------

def cnot_noise_model(n_cnots: int = 3, epsilon: float = 0.0) -> NoiseModel:
    """Two qubits, no environment, CNOT steps; pulses over-rotated by ``epsilon``."""
    from .noise import ControlProfile

    rho = np.zeros((4, 4), dtype=complex)
    rho[0, 0] = 1
    prof = ControlProfile("coherent_offset", epsilon=epsilon) if epsilon else ControlProfile()
    return NoiseModel(2, [], [CNOT.copy() for _ in range(n_cnots)], rho, prof)


@dataclass
class DecompositionResult:
    target: np.ndarray
    angles: np.ndarray  # (4, 2, 3): local layers before, between and after the CNOTs
    error: float
    naive_angles: np.ndarray
    naive_error: float
    deltas: dict = field(default_factory=dict)
    best_cnot_count: int | None = None

    def to_json(self) -> dict:
        return {
            "target_re": self.target.real.tolist(),
            "target_im": self.target.imag.tolist(),
            "angles": self.angles.tolist(),
            "error": self.error,
            "naive_angles": self.naive_angles.tolist(),
            "naive_error": self.naive_error,
            "deltas": {str(k): v for k, v in self.deltas.items()},
            "best_cnot_count": self.best_cnot_count,
        }


def _check_unitary(U: np.ndarray) -> None:
    U = np.asarray(U)
    if U.shape != (4, 4) or np.abs(U.conj().T @ U - np.eye(4)).max() > 1e-9:
        raise ValueError("target must be a 4x4 unitary")


def _best_of_starts(chain: ChannelChain, U: np.ndarray, starts: Sequence[np.ndarray], maxiter=500, stop_below=None):
    shape = (chain.n_slots, chain.n, 3)

    def f(X):
        return overlap_error(chain.kraus(X.reshape((-1,) + shape)), U)

    best_x, best_v = None, np.inf
    for x0 in starts:
        v0 = float(f(x0.reshape(1, -1))[0])
        if v0 < best_v:
            best_x, best_v = x0.reshape(shape), v0
        x, v = _fd_minimize(f, x0.reshape(-1), maxiter=maxiter)
        if v < best_v:
            best_x, best_v = x.reshape(shape), v
        if stop_below is not None and best_v < stop_below:
            break
    return best_x, best_v


def naive_su4_angles(target: np.ndarray, seed=0, n_starts: int = 20, tol: float = 1e-10) -> tuple[np.ndarray, float]:
    """Local angles decomposing ``target`` with three ideal CNOTs."""
    _check_unitary(target)
    gs0 = mdl.exact_gateset(cnot_noise_model(3))
    chain = ChannelChain(gs0, 3, pre=True, post=True)
    rng = np.random.default_rng(seed)
    starts = [rng.uniform(0, 2 * np.pi, size=(4, 2, 3)) for _ in range(n_starts)]
    return _best_of_starts(chain, target, starts, stop_below=tol)


def optimize_su4(
    gs: mdl.GateSet,
    target: np.ndarray,
    seed=0,
    n_random: int = 2,
    cnot_counts: Sequence[int] | None = None,
    naive: tuple[np.ndarray, float] | None = None,
) -> DecompositionResult:
    """Noise-aware local angles for a three-CNOT template.

    ``gs`` is a 2-qubit, 3-step gate set whose steps are the entangling
    gates.  The search starts from the ideal-CNOT decomposition plus
    ``n_random`` random points.  With ``cnot_counts`` the best error using
    fewer entangling steps (later steps traced out) is also reported.
    """
    _check_unitary(target)
    if gs.n_qubits != 2 or gs.n_steps != 3:
        raise ValueError("optimize_su4 needs a 2-qubit, 3-step gate set")
    rng = np.random.default_rng(seed)
    x_naive, _ = naive if naive is not None else naive_su4_angles(target, seed=rng.integers(2**31))
    chain = ChannelChain(gs, 3, pre=True, post=True)
    naive_err = float(overlap_error(chain.kraus(x_naive[None]), target)[0])
    starts = [x_naive] + [rng.uniform(0, 2 * np.pi, size=x_naive.shape) for _ in range(n_random)]
    x, err = _best_of_starts(chain, target, starts)
    res = DecompositionResult(np.asarray(target), x, err, x_naive, naive_err)
    if cnot_counts:
        for c in cnot_counts:
            if c == 3:
                res.deltas[3] = err
                continue
            ch = ChannelChain(gs, c, pre=True, post=True)
            st = [rng.uniform(0, 2 * np.pi, size=(ch.n_slots, 2, 3)) for _ in range(max(3, n_random))]
            res.deltas[c] = _best_of_starts(ch, target, st)[1]
        res.best_cnot_count = int(min(res.deltas, key=res.deltas.get))
    return res


def su4_channel(gs: mdl.GateSet, angles: np.ndarray) -> np.ndarray:
    """Kraus operators of the three-CNOT template with the given local angles."""
    return ChannelChain(gs, 3, pre=True, post=True).kraus(np.asarray(angles)[None])[0]


# --- randomised benchmarking forecast ------------------------------------------

def superoperator(kraus: np.ndarray) -> np.ndarray:
    """Row-major vectorised superoperator ``sum_k K (x) conj(K)``."""
    return np.einsum("kab,kcd->acbd", kraus, kraus.conj()).reshape(kraus.shape[1] ** 2, -1)


def depolarising_superoperator(d: int, lam: float) -> np.ndarray:
    vec_id = np.eye(d).reshape(-1)
    return (1 - lam) * np.eye(d * d) + lam * np.outer(vec_id, vec_id) / d


def rb_curve_predict(
    channels: Sequence[tuple[np.ndarray, np.ndarray]],
    lengths: Sequence[int],
    n_sequences: int = 20,
    seed=0,
    extra_depolarising: float = 0.0,
) -> dict:
    """Survival probabilities of random sequences of noisy gates followed by an ideal inverse.

    ``channels`` lists ``(ideal unitary, Kraus operators)`` pairs, e.g. from
    :func:`su4_channel` with optimised or naive angles.  The decay is fitted
    to ``A p^m + B``.
    """
    rng = np.random.default_rng(seed)
    d = channels[0][0].shape[0]
    sops = [superoperator(K) for _, K in channels]
    if extra_depolarising:
        dep = depolarising_superoperator(d, extra_depolarising)
        sops = [dep @ S for S in sops]
    rho0 = np.zeros((d, d), dtype=complex)
    rho0[0, 0] = 1
    surv = np.zeros((len(lengths), n_sequences))
    for a, m in enumerate(lengths):
        for s in range(n_sequences):
            idx = rng.integers(len(channels), size=m)
            v = rho0.reshape(-1)
            U = np.eye(d, dtype=complex)
            for i in idx:
                v = sops[i] @ v
                U = channels[i][0] @ U
            r = v.reshape(d, d)
            r = U.conj().T @ r @ U
            surv[a, s] = float(np.real(r[0, 0]))
    mean = surv.mean(axis=1)
    L = np.asarray(lengths, dtype=float)

    def model(m, A, p, B):
        return A * p**m + B

    if np.abs(mean - 1).max() < 1e-12:
        A, p, B = 0.0, 1.0, 1.0
    else:
        (A, p, B), _ = curve_fit(model, L, mean, p0=(1 - 1 / d, 0.95, 1 / d), bounds=([-2, 0, -1], [2, 1, 2]), maxfev=20000)
    r = (d - 1) * (1 - p) / d
    return {
        "lengths": list(map(int, lengths)),
        "survival": mean.tolist(),
        "survival_std": surv.std(axis=1).tolist(),
        "A": float(A),
        "p": float(p),
        "B": float(B),
        "avg_gate_fidelity": float(1 - r),
    }


# --- dynamical decoupling -----------------------------------------------------

_TILES = {"xy4": "XYXY", "xy8": "XYXYYXYX"}


def tiled_angles(n_slots: int, n_qubits: int = 1, tiling: str = "xy4") -> np.ndarray:
    """Pulse tiling repeated over the slots, identity padded to whole tiles."""
    tile = _TILES[tiling]
    full = (n_slots // len(tile)) * len(tile)
    out = np.zeros((n_slots, n_qubits, 3))
    for s in range(full):
        out[s, :] = qo.zyz_angles(qo.pauli(tile[s % len(tile)]))
    return out


@dataclass
class DDResult:
    window: tuple[int, int]
    angles: np.ndarray  # (j - 1, n, 3)
    distance: float
    idle_distance: float
    xy4_distance: float
    xy4_angles: np.ndarray

    def to_json(self) -> dict:
        return {
            "window": list(self.window),
            "angles": self.angles.tolist(),
            "distance": self.distance,
            "idle_distance": self.idle_distance,
            "xy4_distance": self.xy4_distance,
        }


def _choi_distance_to_identity(chain: ChannelChain, X: np.ndarray) -> np.ndarray:
    C = chain.choi(X)
    D = chain.D
    phi = np.eye(D).reshape(-1)
    diff = C / D - np.outer(phi, phi) / D
    w = np.linalg.eigvalsh(0.5 * (diff + np.swapaxes(diff.conj(), -1, -2)))
    return 0.5 * np.abs(w).sum(axis=1)


def optimize_dd(gs: mdl.GateSet, window: int | None = None, n_random: int = 5, seed=0, tiling: str = "xy4") -> DDResult:
    """Gates in slots ``1..j-1`` that bring the window channel closest to the identity.

    The objective is the trace distance between the normalised Choi state of
    the channel from ``i_1`` to ``o_j`` and that of the identity.  Starts:
    idle, the pulse tiling and ``n_random`` random points.
    """
    j = gs.n_steps if window is None else window
    if not 1 <= j <= gs.n_steps:
        raise ValueError("window out of range")
    chain = ChannelChain(gs, j)
    shape = (chain.n_slots, gs.n_qubits, 3)

    def f(X):
        return _choi_distance_to_identity(chain, X.reshape((-1,) + shape))

    idle = np.zeros(shape)
    xy = tiled_angles(chain.n_slots, gs.n_qubits, tiling)
    d_idle = float(f(idle[None])[0])
    d_xy = float(f(xy[None])[0])
    best = (idle, d_idle) if d_idle <= d_xy else (xy, d_xy)
    if chain.n_slots:
        rng = np.random.default_rng(seed)
        starts = [idle, xy] + [rng.uniform(0, 2 * np.pi, size=shape) for _ in range(n_random)]
        for x0 in starts:
            x, v = _fd_minimize(f, x0.reshape(-1), maxiter=300)
            if v < best[1]:
                best = (x.reshape(shape), v)
    return DDResult((0, j), best[0], best[1], d_idle, d_xy, xy)


def final_system_states(model: NoiseModel, rho_s: np.ndarray, angles: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """System state after injecting ``rho_s`` at ``i_1`` and running steps ``1..j``.

    ``angles`` holds ``j - 1`` gate layers applied between the steps with the
    model's physical pulses (over-rotation ``eps``).
    """
    n, dE = model.n_system_qubits, model.d_env
    dS = 2**n
    env = np.einsum("aiaj->ij", model.initial_SE_state.reshape(dS, dE, dS, dE))
    rho = np.kron(rho_s, env)
    j = len(angles) + 1
    pulses = [pulse_unitaries(model, q, np.array([eps]))[0] for q in range(n)]
    from .noise import _embed

    for s in range(j):
        U = model.step_unitaries[s]
        rho = U @ rho @ U.conj().T
        if s < j - 1:
            for q in range(n):
                a, b, c = qo.u3_rz_angles(*angles[s][q])
                for op in (_embed(qo.rz(a), q, n, dE), pulses[q], _embed(qo.rz(b), q, n, dE), pulses[q], _embed(qo.rz(c), q, n, dE)):
                    rho = op @ rho @ op.conj().T
    return np.einsum("iaja->ij", rho.reshape(dS, dE, dS, dE))


def dd_state_protection_eval(model: NoiseModel, dd: DDResult, n_states: int = 50, seed=0) -> dict:
    """Trace distance between prepared and final states for idle, tiling and optimised gates."""
    n = model.n_system_qubits
    dS = 2**n
    rng = derived_rng(seed, 0, "analysis")
    eps = model.control_profile.epsilon if model.control_profile.kind == "coherent_offset" else 0.0
    seqs = {"idle": np.zeros_like(dd.angles), "xy4": dd.xy4_angles, "optimised": dd.angles}
    out = {k: [] for k in seqs}
    for _ in range(n_states):
        U = qo.haar_unitary(dS, rng)
        rho = np.outer(U[:, 0], U[:, 0].conj())
        for name, ang in seqs.items():
            fin = final_system_states(model, rho, ang, eps)
            out[name].append(min(1.0, qo.trace_distance(fin, rho)))
    res = {k: np.array(v) for k, v in out.items()}
    res["median"] = {k: float(np.median(v)) for k, v in out.items()}
    return res


def write_report(obj: dict, path: str) -> None:
    """JSON report; lists of per-item values also go to a sibling CSV."""
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o))
    cols = {k: v for k, v in obj.items() if isinstance(v, (list, np.ndarray))}
    if cols and path.endswith(".json"):
        n = max(len(v) for v in cols.values())
        with open(path[:-5] + ".csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(cols))
            for i in range(n):
                w.writerow([(list(v)[i] if i < len(v) else "") for v in cols.values()])
