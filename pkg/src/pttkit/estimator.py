"""Regularised maximum-likelihood fitting of a gate set.

The objective on a minibatch is::

    CE + kappa * (causality_pen + tp_pen)

``CE`` is the negative log-likelihood of the counts under the per-circuit
renormalised model probabilities, divided by the number of shots in the
batch, with probabilities clamped below at 1e-12.  ``causality_pen`` and
``tp_pen`` are sums of squared Pauli expectations over freshly sampled
constraint sets, plus a squared deviation of the trace from its causal value
(see :mod:`pttkit.model`).
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .noise import CircuitDataset, CircuitRecord

P_FLOOR = 1e-12


def read_config_file(path) -> dict:
    """Load a JSON or TOML (by ``.toml`` suffix) config file."""
    path = str(path)
    if path.endswith(".toml"):
        try:
            import tomllib
        except ImportError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path) as fh:
        return json.load(fh)


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class FitConfig:
    """Fit settings.

    ``lr_final`` (if set) decays the learning rate geometrically to that value
    at ``max_iters``.  ``tp_circuits`` is the number of circuits of each
    minibatch whose outcome-summed testers get a constraint set;
    ``m_causal_tester`` is the size of each of those sets (defaults to
    ``m_causal``).  ``ce_scale`` is ``"per_shot"`` or ``"sum"``.
    ``penalty_trace_normalised`` evaluates the constraint values on the
    unit-trace process and tester, which keeps the penalty curvature
    comparable to the per-shot cross-entropy.
    """

    m_batch: int = 1000
    m_causal: int = 200
    kappa: float = 1.0
    adam: AdamConfig = field(default_factory=AdamConfig)
    max_iters: int = 1000
    val_every: int = 25
    window: int = 8
    tol: float = 1e-6
    seed: int = 0
    learn_process: bool = True
    learn_pulses: bool = True
    learn_povm: bool = True
    learn_control_bonds: bool = True
    tp_circuits: int = 8
    m_causal_tester: int | None = None
    lr_final: float | None = None
    ce_scale: str = "per_shot"
    renormalise: bool = True
    normalise_gauge: bool = True
    penalty_trace_normalised: bool = True

    def __post_init__(self):
        if isinstance(self.adam, dict):
            self.adam = AdamConfig(**self.adam)
        for name in ("m_batch", "m_causal", "max_iters", "val_every", "window"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.kappa < 0:
            raise ValueError("kappa must be nonnegative")
        if self.ce_scale not in ("per_shot", "sum"):
            raise ValueError("ce_scale must be 'per_shot' or 'sum'")

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown FitConfig field(s): {sorted(bad)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "FitConfig":
        d = read_config_file(path)
        return cls.from_dict(d.get("fit", d))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FitTrace:
    iteration: list[int] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    cross_entropy: list[float] = field(default_factory=list)
    causality_pen: list[float] = field(default_factory=list)
    tp_pen: list[float] = field(default_factory=list)
    val_cross_entropy: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    COLUMNS = ("iteration", "objective", "cross_entropy", "causality_pen", "tp_pen", "val_cross_entropy", "seconds")

    def append(self, **row) -> None:
        for c in self.COLUMNS:
            getattr(self, c).append(row[c])

    def __len__(self) -> int:
        return len(self.iteration)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for i in range(len(self)):
                w.writerow([getattr(self, c)[i] for c in self.COLUMNS])

    def validation_points(self) -> tuple[np.ndarray, np.ndarray]:
        it = np.array(self.iteration)
        v = np.array(self.val_cross_entropy, dtype=float)
        ok = np.isfinite(v)
        return it[ok], v[ok]


# --- objective ----------------------------------------------------------------

def _as_batch(batch) -> mdl.PreparedBatch:
    if isinstance(batch, mdl.PreparedBatch):
        return batch
    recs = list(batch)
    if not recs:
        raise ValueError("empty batch")
    if isinstance(recs[0], CircuitRecord):
        return mdl.prepare_batch([r.circuit for r in recs], [r.counts for r in recs])
    return mdl.prepare_batch([c for c, _ in recs], [n for _, n in recs])


def cross_entropy_node(P: dict, batch: mdl.PreparedBatch, renormalise: bool = True, scale: str = "per_shot"):
    p = mdl.forward_probabilities(P, batch)
    if renormalise:
        p = ad.divide(p, ad.reshape(ad.total(p, axis=1), (-1, 1)))
    logp = ad.log(ad.clamp_min(p, P_FLOOR))
    ce = ad.scale(ad.einsum("cx,cx->", batch.counts, logp), -1.0)
    if scale == "per_shot":
        ce = ad.scale(ce, 1.0 / batch.counts.sum())
    return ce


@dataclass
class Constraints:
    """Constraint sets for one objective evaluation."""

    process: object  # ConstraintBatch or list of PauliConstraint
    tp_circuits: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    tester: list = field(default_factory=list)


def sample_constraints(batch: mdl.PreparedBatch, m_causal: int, tp_circuits: int, m_tester: int, rng) -> Constraints:
    proc = mdl.sample_causality_batch(batch.n, batch.k, m_causal, rng)
    nt = min(tp_circuits, batch.size)
    idx = np.sort(rng.choice(batch.size, size=nt, replace=False)) if nt else np.zeros(0, dtype=np.int64)
    tester = [mdl.sample_tester_batch(batch.n, batch.k, m_tester, rng) for _ in idx]
    return Constraints(proc, idx, tester)


def _objective(P: dict, batch, cons: Constraints, kappa: float, renormalise=True, scale="per_shot", trace_normalised=False):
    ce = cross_entropy_node(P, batch, renormalise, scale)
    terms = {"cross_entropy": float(ce.value), "causality_pen": 0.0, "tp_pen": 0.0}
    total = ce
    if kappa > 0:
        if cons.process is not None and len(cons.process):
            cp = mdl.causality_penalty_node(P, batch.n, batch.k, cons.process, trace_normalised)
            terms["causality_pen"] = float(cp.value)
            total = ad.add(total, ad.scale(cp, kappa))
        if len(cons.tp_circuits):
            tp = mdl.tp_penalty_node(P, batch, cons.tp_circuits, cons.tester, trace_normalised)
            terms["tp_pen"] = float(tp.value)
            total = ad.add(total, ad.scale(tp, kappa))
    terms["objective"] = float(total.value)
    return total, terms


def objective(
    gs: mdl.GateSet,
    batch,
    constraints: Constraints | None = None,
    kappa: float = 1.0,
    renormalise=True,
    scale="per_shot",
    detail=False,
    trace_normalised=False,
):
    """Objective value (and its terms if ``detail``)."""
    b = _as_batch(batch)
    cons = constraints if constraints is not None else Constraints([])
    tape = ad.Tape()
    P = mdl._nodes(tape, gs.arrays())
    _, terms = _objective(P, b, cons, kappa, renormalise, scale, trace_normalised)
    return terms if detail else terms["objective"]


def gradient(
    gs: mdl.GateSet,
    batch,
    constraints: Constraints | None = None,
    kappa: float = 1.0,
    renormalise=True,
    scale="per_shot",
    trace_normalised=False,
):
    """``(value, grads)`` with ``grads[name] = dL/dRe + 1j dL/dIm`` for every tensor."""
    b = _as_batch(batch)
    cons = constraints if constraints is not None else Constraints([])
    tape = ad.Tape()
    arrs = gs.arrays()
    P = mdl._nodes(tape, arrs)
    total, terms = _objective(P, b, cons, kappa, renormalise, scale, trace_normalised)
    tape.backward(total)
    grads = {}
    for k, node in P.items():
        g = node.grad
        grads[k] = np.zeros_like(arrs[k]) if g is None else np.asarray(g, dtype=complex).reshape(arrs[k].shape)
    return terms["objective"], grads


def gradient_check(
    gs: mdl.GateSet,
    batch,
    h: float = 1e-6,
    constraints: Constraints | None = None,
    kappa: float = 1.0,
    max_entries: int | None = None,
    seed=0,
    trace_normalised=False,
) -> dict:
    """Compare analytic gradients with central differences.

    Returns the worst relative error over real parameters whose gradient
    magnitude exceeds 1e-8, together with the number of entries checked.
    """
    b = _as_batch(batch)
    _, grads = gradient(gs, b, constraints, kappa, trace_normalised=trace_normalised)
    arrs = gs.arrays()
    entries = [(name, i, part) for name, a in arrs.items() for i in range(a.size) for part in (0, 1)]
    rng = np.random.default_rng(seed)
    if max_entries is not None and len(entries) > max_entries:
        pick = rng.choice(len(entries), size=max_entries, replace=False)
        entries = [entries[p] for p in sorted(pick)]
    n, k = gs.n_qubits, gs.n_steps
    worst, checked = 0.0, 0
    for name, i, part in entries:
        g = grads[name].reshape(-1)[i]
        ga = g.real if part == 0 else g.imag
        step = h if part == 0 else 1j * h
        vals = []
        for sgn in (1, -1):
            a2 = dict(arrs)
            x = arrs[name].copy().reshape(-1)
            x[i] += sgn * step
            a2[name] = x.reshape(arrs[name].shape)
            vals.append(objective(mdl.GateSet.from_arrays(n, k, a2), b, constraints, kappa, trace_normalised=trace_normalised))
        fd = (vals[0] - vals[1]) / (2 * h)
        if max(abs(ga), abs(fd)) > 1e-8:
            checked += 1
            worst = max(worst, abs(fd - ga) / max(abs(ga), abs(fd)))
    return {"max_rel_error": worst, "checked": checked}


# --- Adam ----------------------------------------------------------------------

def adam_step(params: dict, grads: dict, state: dict | None, cfg: AdamConfig, lr: float | None = None):
    """One bias-corrected Adam step; real and imaginary parts are separate parameters."""
    state = {"t": 0, "m": {}, "v": {}} if state is None else state
    t = state["t"] + 1
    lr = cfg.lr if lr is None else lr
    new = {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            new[k] = p
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {k}")
        gr = np.ascontiguousarray(g, dtype=complex).view(np.float64)
        m = state["m"].get(k, np.zeros_like(gr))
        v = state["v"].get(k, np.zeros_like(gr))
        m = cfg.beta1 * m + (1 - cfg.beta1) * gr
        v = cfg.beta2 * v + (1 - cfg.beta2) * gr * gr
        mhat = m / (1 - cfg.beta1**t)
        vhat = v / (1 - cfg.beta2**t)
        upd = lr * mhat / (np.sqrt(vhat) + cfg.eps)
        pr = np.ascontiguousarray(p, dtype=complex).view(np.float64) - upd
        new[k] = pr.view(np.complex128).reshape(p.shape)
        state["m"][k], state["v"][k] = m, v
    state["t"] = t
    return new, state


# --- fitting ------------------------------------------------------------------

def learnable_mask(name: str, cfg: FitConfig) -> bool:
    if name.startswith(("psi0_", "phi")):
        return cfg.learn_process
    if name.startswith("pulse_"):
        return cfg.learn_pulses
    if name.startswith("gamma0_"):
        return cfg.learn_control_bonds
    if name.startswith("povm_"):
        return cfg.learn_povm
    return True


def _subset(b: mdl.PreparedBatch, idx: np.ndarray) -> mdl.PreparedBatch:
    return mdl.PreparedBatch(b.n, b.k, b.gate_angles, b.gate_idx[idx], b.layer_keys, b.layer_idx[idx], b.bases[idx], b.counts[idx])


def empirical_entropy(records: Sequence[CircuitRecord]) -> float:
    """Per-shot entropy of the empirical outcome distributions."""
    tot, n = 0.0, 0
    for r in records:
        c = np.array(list(r.counts.values()), dtype=float)
        c = c[c > 0]
        tot -= float(np.sum(c * np.log(c / c.sum())))
        n += int(c.sum())
    return tot / n


def validation_cross_entropy(gs: mdl.GateSet, batch) -> float:
    b = _as_batch(batch)
    tape = ad.Tape()
    return float(cross_entropy_node(mdl._nodes(tape, gs.arrays()), b).value)


def normalise_gauge(gs: mdl.GateSet) -> mdl.GateSet:
    """Rescale so that ``Tr Upsilon = D^k``, moving the inverse factor into the tester."""
    out = gs.copy()
    n, k = gs.n_qubits, gs.n_steps
    tape = ad.Tape()
    P = mdl._nodes(tape, out.process.arrays())
    tr = float(mdl.process_pauli_values(P, n, k, [], with_identity=True).value[-1])
    if tr <= 0:
        return out
    c = (2**n) ** k / tr
    out.process.psi0[0] = out.process.psi0[0] * np.sqrt(c)
    out.gamma0[0] = out.gamma0[0] / np.sqrt(c)
    return out


def fit(dataset: CircuitDataset, gs0: mdl.GateSet, config: FitConfig, callback=None, log=None):
    """Stochastic regularised maximum-likelihood fit.

    Returns the snapshot with the lowest validation cross-entropy (gauge
    normalised) and the per-iteration trace.
    """
    train = dataset.split("train")
    if not train:
        raise ValueError("dataset has no training circuits")
    val = dataset.split("validation") or train[: min(100, len(train))]
    rng = np.random.default_rng(config.seed)
    full = _as_batch(train)
    vb = _as_batch(val)
    params = gs0.copy().arrays()
    n, k = gs0.n_qubits, gs0.n_steps
    mask = {name: learnable_mask(name, config) for name in params}
    state = None
    trace = FitTrace()
    best = (np.inf, gs0.copy())
    history: list[float] = []
    m_tester = config.m_causal_tester or config.m_causal
    t0 = time.perf_counter()
    decay = 1.0
    if config.lr_final is not None and config.max_iters > 1:
        decay = (config.lr_final / config.adam.lr) ** (1.0 / (config.max_iters - 1))
    for it in range(config.max_iters):
        bsz = min(config.m_batch, full.size)
        idx = np.sort(rng.choice(full.size, size=bsz, replace=False))
        batch = _subset(full, idx)
        cons = sample_constraints(batch, config.m_causal, config.tp_circuits, m_tester, rng) if config.kappa > 0 else Constraints([])
        gs = mdl.GateSet.from_arrays(n, k, params)
        tape = ad.Tape()
        P = mdl._nodes(tape, params)
        total, terms = _objective(P, batch, cons, config.kappa, config.renormalise, config.ce_scale, config.penalty_trace_normalised)
        tape.backward(total)
        grads = {name: (node.grad if node.grad is not None and mask[name] else None) for name, node in P.items()}
        grads = {kk: (np.asarray(v, dtype=complex).reshape(params[kk].shape) if v is not None else None) for kk, v in grads.items()}
        vce = float("nan")
        if it % config.val_every == 0 or it == config.max_iters - 1:
            vce = validation_cross_entropy(gs, vb)
            history.append(vce)
            if vce < best[0]:
                best = (vce, gs.copy())
        trace.append(
            iteration=it,
            objective=terms["objective"],
            cross_entropy=terms["cross_entropy"],
            causality_pen=terms["causality_pen"],
            tp_pen=terms["tp_pen"],
            val_cross_entropy=vce,
            seconds=time.perf_counter() - t0,
        )
        if log is not None and np.isfinite(vce):
            log(f"iter {it:5d} obj {terms['objective']:.6f} ce {terms['cross_entropy']:.6f} "
                f"caus {terms['causality_pen']:.2e} tp {terms['tp_pen']:.2e} val {vce:.6f}")
        if callback is not None:
            callback(it, terms, gs)
        if len(history) > config.window:
            recent = min(history[-config.window :])
            before = min(history[: -config.window])
            if before - recent < config.tol:
                break
        params, state = adam_step(params, grads, state, config.adam, lr=config.adam.lr * decay**it)
    final = mdl.GateSet.from_arrays(n, k, params)
    vce = validation_cross_entropy(final, vb)
    if vce < best[0]:
        best = (vce, final)
    out = normalise_gauge(best[1]) if config.normalise_gauge else best[1]
    return out, trace
