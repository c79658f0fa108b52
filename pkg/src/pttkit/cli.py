"""Command-line front end: simulate, fit, validate, analyse, optimise."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Any

import numpy as np

from . import analysis as an
from . import estimator as est
from . import gst
from . import model as mdl
from . import noise

log = logging.getLogger("pttkit")


class ConfigError(ValueError):
    """Schema violation; the message names the offending field."""


# --- config schema ----------------------------------------------------------

_NUM = (int, float)
SCHEMA: dict[str, dict[str, Any]] = {
    "model": {
        "n_system": int,
        "n_steps": int,
        "J_ranges": list,
        "dt": _NUM,
        "seed": int,
        "profile": dict,
    },
    "profile": {
        "kind": str,
        "epsilon": _NUM,
        "alpha": _NUM,
        "sigma": _NUM,
        "f_range": list,
        "crx_angle": _NUM,
        "env_target": int,
    },
    "dataset": {"n_train": int, "n_validation": int, "shots": int},
    "init": {"chi_nu": int, "chi_alpha": int, "chi_mu": int, "chi_gamma": int, "scale": _NUM, "seed": int},
    "fit": dict,
    "seed": int,
}


def _check_section(name: str, obj: dict, spec: dict) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{name}: expected an object")
    for key, val in obj.items():
        if key not in spec:
            raise ConfigError(f"{name}.{key}: unknown field")
        want = spec[key]
        if want is _NUM and isinstance(val, bool):
            raise ConfigError(f"{name}.{key}: expected a number")
        if not isinstance(val, want):
            raise ConfigError(f"{name}.{key}: expected {getattr(want, '__name__', 'number')}")


def validate_config(cfg: dict) -> dict:
    """Check a run config against the schema; raises :class:`ConfigError`."""
    if not isinstance(cfg, dict):
        raise ConfigError("config: expected an object")
    for key, val in cfg.items():
        if key not in SCHEMA:
            raise ConfigError(f"{key}: unknown section")
        if key == "seed":
            if not isinstance(val, int):
                raise ConfigError("seed: expected int")
        elif key == "fit":
            try:
                est.FitConfig.from_dict(val)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"fit: {exc}") from None
        else:
            _check_section(key, val, SCHEMA[key])
    prof = cfg.get("model", {}).get("profile")
    if prof is not None:
        _check_section("model.profile", prof, SCHEMA["profile"])
        try:
            noise.ControlProfile(**prof)
        except ValueError as exc:
            raise ConfigError(f"model.profile.kind: {exc}") from None
    for sec, key in (("model", "n_system"), ("model", "n_steps"), ("dataset", "shots"), ("dataset", "n_train")):
        if sec in cfg and key in cfg[sec] and cfg[sec][key] < 1:
            raise ConfigError(f"{sec}.{key}: must be positive")
    return cfg


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = est.read_config_file(path)
    except ValueError as exc:
        raise ConfigError(f"config: cannot parse {path}: {exc}") from None
    return validate_config(cfg)


def _workers(args) -> int:
    if args.workers is not None:
        return args.workers
    env = os.environ.get("PTTKIT_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError("PTTKIT_WORKERS: expected an integer") from None
    return 1


def _seed(args, cfg: dict, default: int = 0) -> int:
    return args.seed if args.seed is not None else cfg.get("seed", default)


def build_model(cfg: dict, seed: int) -> noise.NoiseModel:
    m = cfg.get("model", {})
    prof = m.get("profile", {})
    if "f_range" in prof:
        prof = dict(prof, f_range=tuple(prof["f_range"]))
    return noise.build_exchange_bath(
        m.get("n_system", 1),
        J_ranges=m.get("J_ranges", (0.1, 0.3)),
        dt=m.get("dt", 1.0),
        seed=m.get("seed", seed),
        n_steps=m.get("n_steps", 5),
        profile=noise.ControlProfile(**prof),
    )


def _write_json(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o))
    if path is None:
        print(text)
    else:
        with open(path, "w") as fh:
            fh.write(text + "\n")


# --- commands -------------------------------------------------------------

def cmd_simulate(args, cfg) -> int:
    seed = _seed(args, cfg)
    model = build_model(cfg, seed)
    ds_cfg = cfg.get("dataset", {})
    ds = noise.generate_dataset(
        model,
        ds_cfg.get("n_train", 100),
        ds_cfg.get("n_validation", 20),
        ds_cfg.get("shots", 1024),
        seed=seed,
        workers=_workers(args),
    )
    ds.meta["model_config"] = cfg.get("model", {})
    ds.save(args.out)
    log.info("wrote %d circuits to %s", len(ds.circuits), args.out)
    return 0


def _load_data(path: str) -> noise.CircuitDataset:
    try:
        return noise.CircuitDataset.load(path)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"data: {exc}") from None


def cmd_fit(args, cfg) -> int:
    ds = _load_data(args.data)
    seed = _seed(args, cfg)
    n, k = ds.meta["n_qubits"], ds.meta["n_steps"]
    init = cfg.get("init", {})
    if args.model:
        gs0, _ = mdl.load_gateset(args.model)
    else:
        gs0 = mdl.init_gateset(
            n,
            k,
            chi_nu=init.get("chi_nu", 2),
            chi_alpha=init.get("chi_alpha", 1),
            chi_mu=init.get("chi_mu", 2),
            chi_gamma=init.get("chi_gamma", 1),
            seed=init.get("seed", seed),
            scale=init.get("scale", 0.1),
        )
    fc = dict(cfg.get("fit", {}))
    fc.setdefault("seed", seed)
    config = est.FitConfig.from_dict(fc)
    gs, trace = est.fit(ds, gs0, config, log=log.info if args.verbose else None)
    mdl.save_gateset(gs, args.out, {"fit": config.to_dict()})
    if args.trace:
        trace.to_csv(args.trace)
    it, v = trace.validation_points()
    print(f"iterations {len(trace)}  best validation cross-entropy {v.min():.6f}")
    return 0


def cmd_predict(args, cfg) -> int:
    gs, _ = mdl.load_gateset(args.model)
    ds = _load_data(args.data)
    p = mdl.predict_distributions(gs, [r.circuit for r in ds.circuits], normalise=True)
    n = gs.n_qubits
    out = [
        {"circuit": r.circuit.to_json(), "split": r.split, "probabilities": {noise.bitstring(x, n): float(v) for x, v in enumerate(row)}}
        for r, row in zip(ds.circuits, p)
    ]
    _write_json(out, args.out)
    return 0


def cmd_validate(args, cfg) -> int:
    gs, _ = mdl.load_gateset(args.model)
    ds = _load_data(args.data)
    recs = ds.split("validation") or ds.circuits
    rep = an.reconstruction_report(gs, recs)
    rep["validation_cross_entropy"] = est.validation_cross_entropy(gs, recs)
    rep["data_entropy"] = est.empirical_entropy(recs)
    if args.out:
        an.write_report(rep, args.out)
    print(f"median Hellinger distance {rep['median']:.6g} (q1 {rep['q1']:.3g}, q3 {rep['q3']:.3g})")
    print(f"validation cross-entropy {rep['validation_cross_entropy']:.6f}  data entropy {rep['data_entropy']:.6f}")
    if args.threshold is not None and rep["median"] > args.threshold:
        print(f"FAIL: median above {args.threshold}")
        return 1
    return 0


def cmd_analyze_mi(args, cfg) -> int:
    gs, _ = mdl.load_gateset(args.model)
    refocus = {"X": None, "I": np.eye(2)}[args.refocus]
    mi = an.mutual_information_map(mdl.lpdo_to_dense(gs.process), refocus)
    if args.out:
        _write_json(mi.to_json(), args.out)
        with open(os.path.splitext(args.out)[0] + ".txt", "w") as fh:
            fh.write(mi.to_text())
    print(mi.to_text(), end="")
    return 0


def cmd_optimize_su4(args, cfg) -> int:
    if args.model:
        gs, _ = mdl.load_gateset(args.model)
    else:
        gs = mdl.exact_gateset(an.cnot_noise_model(3, args.epsilon))
    rng = np.random.default_rng(_seed(args, cfg))
    results = []
    for t in range(args.targets):
        U = noise.qo.haar_unitary(4, rng)
        r = an.optimize_su4(gs, U, seed=int(rng.integers(2**31)), cnot_counts=(0, 1, 2, 3) if args.cnot_counts else None)
        results.append(r.to_json())
        print(f"target {t}: naive {r.naive_error:.3e}  optimised {r.error:.3e}")
    better = sum(r["error"] < r["naive_error"] for r in results)
    print(f"optimised beats naive on {better}/{len(results)} targets")
    if args.out:
        _write_json(results, args.out)
    return 0


def cmd_optimize_dd(args, cfg) -> int:
    gs, _ = mdl.load_gateset(args.model)
    dd = an.optimize_dd(gs, args.window, n_random=args.random_starts, seed=_seed(args, cfg), tiling=args.tiling)
    rep = dd.to_json()
    if args.config and "model" in cfg:
        ev = an.dd_state_protection_eval(build_model(cfg, _seed(args, cfg)), dd, args.states, _seed(args, cfg))
        rep["state_protection"] = {k: (v.tolist() if hasattr(v, "tolist") else v) for k, v in ev.items()}
    print(f"idle {dd.idle_distance:.4e}  {args.tiling} {dd.xy4_distance:.4e}  optimised {dd.distance:.4e}")
    if args.out:
        _write_json(rep, args.out)
    return 0


def cmd_gradcheck(args, cfg) -> int:
    seed = _seed(args, cfg)
    rng = np.random.default_rng(seed)
    n, k = args.n, args.k
    gs = mdl.init_gateset(n, k, chi_nu=args.chi, chi_alpha=args.chi, chi_mu=args.chi, chi_gamma=args.chi_gamma, seed=rng, scale=0.3, pulse_scale=0.1)
    circs = [noise.random_circuit(n, k, rng) for _ in range(4)]
    counts = [{noise.bitstring(x, n): int(rng.integers(1, 100)) for x in range(2**n)} for _ in circs]
    batch = mdl.prepare_batch(circs, counts)
    cons = est.sample_constraints(batch, 20, 2, 10, rng)
    rep = est.gradient_check(gs, batch, args.h, cons, 1.0, max_entries=args.max_entries, seed=seed)
    print(f"max relative error {rep['max_rel_error']:.3e} over {rep['checked']} parameters")
    return 0 if rep["max_rel_error"] < 1e-5 else 1


def cmd_gst_toy(args, cfg) -> int:
    truth = gst.ideal_toy_gateset()
    if args.depolarising:
        truth = gst.depolarise(truth, args.depolarising, args.spam)
    p, g = gst.toy_probabilities(truth)
    res = gst.linear_inversion_estimate(p, g)
    err = gst.reproduction_error(res.gates, p)
    print(f"Gram condition number {res.condition:.4g}; max |p' - p| = {err:.3e}")
    if args.out:
        _write_json({"condition": res.condition, "max_error": err, "gates": res.gates.gates, "rho": res.gates.rho, "effect": res.gates.effect}, args.out)
    return 0 if err < 1e-10 else 1


# --- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or TOML run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="worker processes (default $PTTKIT_WORKERS or 1)")
    common.add_argument("--out")
    common.add_argument("--trace", help="fit trace CSV")
    common.add_argument("--verbose", "-v", action="store_true")

    p = argparse.ArgumentParser(prog="pttkit", description="Process-tensor tomography toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a circuit dataset")
    s.set_defaults(func=cmd_simulate, needs_out=True)

    s = sub.add_parser("fit", parents=[common], help="fit a gate set to a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--model", help="initial gate set checkpoint")
    s.set_defaults(func=cmd_fit, needs_out=True)

    s = sub.add_parser("predict", parents=[common], help="predict outcome distributions")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("validate", parents=[common], help="Hellinger reconstruction report")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--threshold", type=float, help="fail (exit 1) if the median distance exceeds this")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("analyze-mi", parents=[common], help="mutual-information map of a fitted process")
    s.add_argument("--model", required=True)
    s.add_argument("--refocus", choices=["X", "I"], default="X")
    s.set_defaults(func=cmd_analyze_mi)

    s = sub.add_parser("optimize-su4", parents=[common], help="noise-aware two-qubit decompositions")
    s.add_argument("--model", help="2-qubit 3-step gate set (default: simulated CNOT model)")
    s.add_argument("--epsilon", type=float, default=np.pi / 16, help="pulse over-rotation of the simulated model")
    s.add_argument("--targets", type=int, default=5)
    s.add_argument("--cnot-counts", action="store_true", help="also report errors with 0-3 CNOTs")
    s.set_defaults(func=cmd_optimize_su4)

    s = sub.add_parser("optimize-dd", parents=[common], help="design a decoupling sequence")
    s.add_argument("--model", required=True)
    s.add_argument("--window", type=int)
    s.add_argument("--tiling", choices=["xy4", "xy8"], default="xy4")
    s.add_argument("--random-starts", type=int, default=5)
    s.add_argument("--states", type=int, default=50)
    s.set_defaults(func=cmd_optimize_dd)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--k", type=int, default=2)
    s.add_argument("--chi", type=int, default=1)
    s.add_argument("--chi-gamma", type=int, default=1)
    s.add_argument("--h", type=float, default=1e-6)
    s.add_argument("--max-entries", type=int)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("gst-toy", parents=[common], help="toy linear-inversion gate set tomography")
    s.add_argument("--depolarising", type=float, default=0.0)
    s.add_argument("--spam", type=float, default=0.0)
    s.set_defaults(func=cmd_gst_toy)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "needs_out", False) and not args.out:
        parser.error(f"{args.command} requires --out")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"pttkit: config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"pttkit: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
