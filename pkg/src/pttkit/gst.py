"""Toy single-qubit linear-inversion gate set tomography.

Everything lives in the normalised Pauli transfer representation
(basis ``sigma_i / sqrt(2)``), so ``p = <<E| G ... |rho>>``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import quantum as qo

FIDUCIALS: list[tuple[str, ...]] = [(), ("X90",), ("Y90",), ("X90", "X90")]
GATE_NAMES = ("I", "X90", "Y90")
_BASIS = [qo.pauli(c) / np.sqrt(2) for c in "IXYZ"]


def ptm(kraus) -> np.ndarray:
    """Real 4x4 transfer matrix of a single-qubit channel."""
    kraus = [np.asarray(k) for k in (kraus if isinstance(kraus, (list, tuple)) else [kraus])]
    R = np.zeros((4, 4))
    for j, Pj in enumerate(_BASIS):
        out = qo.apply_kraus(kraus, Pj)
        for i, Pi in enumerate(_BASIS):
            R[i, j] = np.trace(Pi @ out).real
    return R


def vec(op: np.ndarray) -> np.ndarray:
    return np.array([np.trace(P @ op).real for P in _BASIS])


@dataclass
class ToyGateSet:
    rho: np.ndarray
    effect: np.ndarray
    gates: dict[str, np.ndarray] = field(default_factory=dict)

    def sequence(self, names: Sequence[str]) -> np.ndarray:
        """Transfer matrix of ``names`` applied left to right in time."""
        out = np.eye(4)
        for nm in names:
            out = self.gates[nm] @ out
        return out


def ideal_toy_gateset() -> ToyGateSet:
    return ToyGateSet(
        vec(np.diag([1.0, 0.0])),
        vec(np.diag([1.0, 0.0])),
        {"I": np.eye(4), "X90": ptm(qo.rx(np.pi / 2)), "Y90": ptm(qo.ry(np.pi / 2))},
    )


def depolarise(gs: ToyGateSet, lam: float, spam: float = 0.0) -> ToyGateSet:
    dep = np.diag([1.0, 1 - lam, 1 - lam, 1 - lam])
    sdep = np.diag([1.0, 1 - spam, 1 - spam, 1 - spam])
    return ToyGateSet(sdep @ gs.rho, sdep @ gs.effect, {k: dep @ v for k, v in gs.gates.items()})


def gauge_transform(gs: ToyGateSet, M: np.ndarray) -> ToyGateSet:
    Mi = np.linalg.inv(M)
    return ToyGateSet(Mi @ gs.rho, gs.effect @ M, {k: Mi @ v @ M for k, v in gs.gates.items()})


def toy_probabilities(gs: ToyGateSet, fiducials=FIDUCIALS, gate_names=GATE_NAMES) -> tuple[np.ndarray, np.ndarray]:
    """``p[i, j, mu] = <<E|F_i G_mu F_j|rho>>`` and the Gram matrix ``g[i, j] = <<E|F_i F_j|rho>>``."""
    F = [gs.sequence(f) for f in fiducials]
    N = len(F)
    p = np.zeros((N, N, len(gate_names)))
    g = np.zeros((N, N))
    for i in range(N):
        for j in range(N):
            g[i, j] = gs.effect @ F[i] @ F[j] @ gs.rho
            for m, nm in enumerate(gate_names):
                p[i, j, m] = gs.effect @ F[i] @ gs.gates[nm] @ F[j] @ gs.rho
    return p, g


@dataclass
class LinearInversionResult:
    gates: ToyGateSet
    condition: float


def linear_inversion_estimate(
    p: np.ndarray,
    g: np.ndarray,
    gate_names=GATE_NAMES,
    max_condition: float = 1e8,
) -> LinearInversionResult:
    """Gate set up to gauge from ``p[i, j, mu]`` and the Gram matrix ``g``.

    With ``A`` the fiducial effects and ``C`` the fiducial states,
    ``g = A C`` and the estimate is ``C^-1 G C = g^-1 B_mu``,
    ``C^-1 rho = g^-1 A rho`` and ``<<E| C``.  The first fiducial must be
    empty so that ``A rho`` and ``<<E| C`` are a column and row of ``g``.
    """
    cond = float(np.linalg.cond(g))
    if not np.isfinite(cond) or cond > max_condition:
        raise ValueError(f"Gram matrix is singular (condition number {cond:.3g})")
    gi = np.linalg.inv(g)
    gates = {nm: gi @ p[:, :, m] for m, nm in enumerate(gate_names)}
    return LinearInversionResult(ToyGateSet(gi @ g[:, 0], g[0, :].copy(), gates), cond)


def reproduction_error(est: ToyGateSet, p: np.ndarray, fiducials=FIDUCIALS, gate_names=GATE_NAMES) -> float:
    """Largest deviation between the estimate's predictions and ``p``."""
    q, _ = toy_probabilities(est, fiducials, gate_names)
    return float(np.abs(q - p).max())
