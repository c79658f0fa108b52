"""Time the compiled and pure-Python kernel backends on fit-sized problems.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 5] [--quick]

Each row reports the best-of-``repeat`` wall time per call for both backends
and their ratio.  The last row times one full objective gradient with each
backend selected through ``PTTKIT_KERNELS``.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from pttkit import _kernels_py, kernels
from pttkit.model import pauli_tables

try:
    from pttkit import _kernels as _compiled
except ImportError:
    _compiled = None


def _rand(rng, shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def chain_problem(n_rows, n_steps, dim, n_tables, rng):
    T = _rand(rng, (n_tables, dim, dim))
    R = _rand(rng, (4, dim, 2))
    idx = rng.integers(0, n_tables, size=(n_rows, n_steps))
    iR = rng.integers(0, 4, size=n_rows)
    g = _rand(rng, (n_rows, dim, 2))
    return (T, R, idx, iR), g


def pauli_problem(n_rows, n_sites, D, chi, rng):
    perm, phase = pauli_tables(int(np.log2(D)))
    sites = _rand(rng, (n_sites, D, D, chi, chi))
    site_idx = np.tile(np.arange(n_sites), (n_rows, 1))
    p_out = rng.integers(0, D * D, size=(n_rows, n_sites))
    p_in = rng.integers(0, D * D, size=(n_rows, n_sites))
    Lb = _rand(rng, (1, chi, chi))
    Rb = _rand(rng, (1, chi, chi))
    z = np.zeros(n_rows, dtype=np.int64)
    return (sites, site_idx, perm, phase, p_out, p_in, Lb, z, Rb, z), _rand(rng, (n_rows,))


def best_time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_rows(repeat, quick):
    rng = np.random.default_rng(0)
    scale = 0.2 if quick else 1.0
    cases = [
        ("chain_forward", lambda: chain_problem(int(1000 * scale), 5, 16, 200, rng), "chain"),
        ("pauli_forward", lambda: pauli_problem(int(200 * scale), 6, 4, 4, rng), "pauli"),
    ]
    rows = []
    for name, make, kind in cases:
        args, g = make()
        backends = [("python", _kernels_py)] + ([("cython", _compiled)] if _compiled is not None else [])
        for op in ("forward", "backward"):
            fn = getattr(kernels, f"{kind}_{op}")
            times = {}
            for label, impl in backends:
                call = (lambda: fn(*args, impl=impl)) if op == "forward" else (lambda: fn(*args, g, impl=impl))
                times[label] = best_time(call, repeat)
            rows.append((f"{kind}_{op}", times))
    return rows


_GRAD_SNIPPET = """
import time, numpy as np
from pttkit import estimator as E, model as M, noise as N
rng = np.random.default_rng(0)
gs = M.init_gateset(1, 5, chi_nu=2, chi_mu=2, chi_gamma=2, seed=0, scale=0.1)
circs = [N.random_circuit(1, 5, rng) for _ in range({m})]
b = M.prepare_batch(circs, [{{"0": 5, "1": 3}}] * len(circs))
cons = E.sample_constraints(b, 200, 8, 200, rng)
E.gradient(gs, b, cons)
best = 1e9
for _ in range({repeat}):
    t = time.perf_counter(); E.gradient(gs, b, cons); best = min(best, time.perf_counter() - t)
print(best)
"""


def gradient_row(repeat, quick):
    times = {}
    for label in ("python", "cython"):
        if label == "cython" and _compiled is None:
            continue
        env = dict(os.environ, PTTKIT_KERNELS=label)
        code = _GRAD_SNIPPET.format(m=200 if quick else 1000, repeat=repeat)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        times[label] = float(out.stdout.strip())
    return ("fit_gradient(k=5)", times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="smaller problems")
    args = ap.parse_args(argv)
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':<20} {'python [ms]':>12} {'cython [ms]':>12} {'speedup':>8}")
    for name, t in kernel_rows(args.repeat, args.quick) + [gradient_row(args.repeat, args.quick)]:
        py = t["python"] * 1e3
        cy = t.get("cython")
        if cy is None:
            print(f"{name:<20} {py:12.3f} {'n/a':>12} {'n/a':>8}")
        else:
            print(f"{name:<20} {py:12.3f} {cy * 1e3:12.3f} {py / (cy * 1e3):8.2f}")


if __name__ == "__main__":
    main()
