"""Command-line entry point: ``design``, ``worstcase`` and ``bench``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

import numpy as np

from .ambiguity import SampleSet, SinkhornConfig
from .bench import (
    DisturbanceModel,
    SweepConfig,
    design,
    monte_carlo_mse,
    run_sweep,
    write_results,
)
from .drse import InfeasibleRadiusError
from .sls import ClosedLoopMaps, LtvSystem, ObserverGain, build_sls_operators, load_system
from .worstcase import marginal_density, worst_case_mixture


def _load_sigma(path, n):
    if path is None:
        return np.eye(n)
    return np.loadtxt(path, delimiter=",", ndmin=2)


def _trace_rows(trace):
    for k, u, lo, g, w in zip(trace.k, trace.upper, trace.lower, trace.gap, trace.wall_time):
        yield {"k": k, "upper": u, "lower": lo, "gap": g, "wall_time": w}


def _write_trace(trace, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["k", "upper", "lower", "gap", "wall_time"])
        w.writeheader()
        w.writerows(_trace_rows(trace))


def cmd_design(args) -> int:
    sysm = load_system(args.system)
    ops = build_sls_operators(sysm)
    samples = SampleSet.from_csv(args.samples)
    Sigma = _load_sigma(args.sigma, ops.n_xi)
    try:
        d = design(args.method, ops, samples, args.theta, args.epsilon, Sigma, sys=sysm, kappa=args.kappa,
                   tol_gap=args.tol, max_iter=args.max_iter,
                   init="pole_placement" if args.init == "pole" else args.init)
    except InfeasibleRadiusError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    T, nx, ny = ops.T, ops.nx, ops.ny
    out = {
        "method": d.method,
        "theta": args.theta,
        "epsilon": args.epsilon,
        "objective": d.value,
        "lambda": d.lam,
        "status": d.status,
        "wall_time_s": d.wall_time_s,
        "gain": None if d.gain is None else d.gain.L.tolist(),
        "gain_blocks": None if d.gain is None else [
            {"i": sysm.t0 + i, "t": sysm.t0 + t, "L": d.gain.block(sysm.t0 + i, sysm.t0 + t).tolist()}
            for t in range(T) for i in range(t + 1)
        ],
        "Phi_x": d.maps.Phi_x.tolist(),
        "Phi_y": d.maps.Phi_y.tolist(),
        "dims": {"T": T, "nx": nx, "ny": ny, "n_xi": ops.n_xi},
        "trace": None if d.trace is None else d.trace.to_dict(),
        "system": sysm.to_dict(),
        "samples": samples.samples.tolist(),
        "Sigma": Sigma.tolist(),
    }
    if args.trace_csv and d.trace is not None:
        _write_trace(d.trace, args.trace_csv)
    text = json.dumps(out, indent=1)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        print(text)
    return 0


def _parse_grid(spec: str):
    try:
        lo, hi, steps = spec.split(":")
        return np.linspace(float(lo), float(hi), int(steps))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must be lo:hi:steps, got '{spec}'") from None


def cmd_worstcase(args) -> int:
    with open(args.design) as fh:
        doc = json.load(fh)
    if doc.get("method") != "sinkhorn" or not doc.get("epsilon"):
        print("error: the worst-case mixture needs a Sinkhorn design with eps > 0", file=sys.stderr)
        return 2
    sysm = LtvSystem.from_dict(doc["system"])
    ops = build_sls_operators(sysm)
    Phi = np.hstack([np.asarray(doc["Phi_x"]), np.asarray(doc["Phi_y"])])
    maps = ClosedLoopMaps.from_stacked(Phi, ops)
    samples = SampleSet(np.asarray(doc["samples"]))
    cfg = SinkhornConfig(doc["epsilon"], doc["theta"], np.asarray(doc["Sigma"]))
    mix = worst_case_mixture(maps, doc["lambda"], samples, cfg, ops)
    marg = marginal_density(mix, args.dim - 1)
    grid = args.grid
    dens = marg.density(grid)
    fh = sys.stdout if args.out is None else open(args.out, "w", newline="")
    try:
        w = csv.writer(fh)
        w.writerow([f"xi{args.dim}", "density"])
        for x, p in zip(grid, dens):
            w.writerow([repr(float(x)), repr(float(p))])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def cmd_sweep(args) -> int:
    cfg = SweepConfig.from_json(args.config)
    if args.workers is not None:
        cfg.workers = args.workers
    results = run_sweep(cfg)
    write_results(results, args.out)
    if args.trace_csv:
        with open(args.trace_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["theta", "epsilon", "k", "upper", "lower", "gap"])
            for r in results:
                if r.trace is None:
                    continue
                for k, u, lo, g in zip(r.trace.k, r.trace.upper, r.trace.lower, r.trace.gap):
                    w.writerow([r.theta, r.epsilon, k, u, lo, g])
    return 0


def cmd_mc(args) -> int:
    with open(args.gain) as fh:
        doc = json.load(fh)
    sysm = LtvSystem.from_dict(doc["system"])
    if doc.get("gain") is None:
        print("error: gain document holds no gain", file=sys.stderr)
        return 2
    gain = ObserverGain(np.asarray(doc["gain"]), sysm.T, sysm.nx, sysm.ny, sysm.t0)
    model = DisturbanceModel()
    if args.model:
        with open(args.model) as fh:
            model = DisturbanceModel.from_dict(json.load(fh))
    mean, se = monte_carlo_mse(gain, sysm, model, runs=args.runs, seed=args.seed)
    print(json.dumps({"mse_mean": mean, "mse_stderr": se, "runs": args.runs, "seed": args.seed}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sinkdrse", description="Distributionally robust state estimation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("design", help="design an estimator and print it as JSON")
    d.add_argument("method", choices=["h2", "wasserstein", "sinkhorn"])
    d.add_argument("--system", required=True)
    d.add_argument("--samples", required=True)
    d.add_argument("--theta", type=float, default=0.0)
    d.add_argument("--epsilon", type=float, default=0.0)
    d.add_argument("--kappa", type=float, default=None)
    d.add_argument("--tol", type=float, default=1e-5)
    d.add_argument("--max-iter", type=int, default=500)
    d.add_argument("--init", choices=["wasserstein", "pole"], default="wasserstein")
    d.add_argument("--sigma", default=None, help="reference covariance CSV (identity if omitted)")
    d.add_argument("--trace-csv", default=None)
    d.add_argument("--out", default=None)
    d.set_defaults(func=cmd_design)

    w = sub.add_parser("worstcase", help="worst-case marginal density on a grid, as CSV")
    w.add_argument("--design", required=True)
    w.add_argument("--dim", type=int, default=1, help="one-based coordinate")
    w.add_argument("--grid", type=_parse_grid, default=_parse_grid("-3:3:121"))
    w.add_argument("--out", default=None)
    w.set_defaults(func=cmd_worstcase)

    b = sub.add_parser("bench", help="case-study experiments")
    bsub = b.add_subparsers(dest="bench_command", required=True)
    s = bsub.add_parser("sweep")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--trace-csv", default=None)
    s.set_defaults(func=cmd_sweep)
    m = bsub.add_parser("mc")
    m.add_argument("--gain", required=True)
    m.add_argument("--runs", type=int, default=20000)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--model", default=None, help="disturbance model JSON")
    m.set_defaults(func=cmd_mc)
    return p


def _join_grid(argv):
    # "--grid -3:3:50" would read the value as an option
    out, it = [], iter(argv)
    for a in it:
        if a == "--grid":
            nxt = next(it, None)
            out.append(a if nxt is None else f"--grid={nxt}")
        else:
            out.append(a)
    return out


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(_join_grid(argv))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
