"""Command line entry point: ``flowsmp {simulate,bsde,lq,descend,verify}``.

Exit codes: 0 success, 1 a verify suite has failing checks, 2 bad
configuration or arguments, 3 numerical failure (``error.json`` is
written to the output directory).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import bsde_interaction as bsde
from .config import ConfigError, load_config
from .forward_flow import cost, resolve_workers, simulate, write_cost_json, write_trajectory_csv
from .io_utils import write_json
from .sheet_noise import make_basis
from .smp import descend, lq_solve, write_history_csv

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
SUITE_NAMES = ("sheet", "measures", "bsde", "smp", "lq")


def _scenario(args):
    cfg = load_config(args.config)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = args.out
    return cfg.with_overrides(**over) if over else cfg


def _outdir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _forward(cfg, workers):
    coeffs = cfg.coefficients()
    basis = make_basis("hermite", cfg.K)
    traj = simulate(cfg.mu0(), coeffs, cfg.control(), cfg.grid(), cfg.paths, basis=basis,
                    seed=cfg.seed, workers=workers)
    return coeffs, basis, traj


def cmd_simulate(cfg, workers):
    out = _outdir(cfg.out)
    coeffs, _, traj = _forward(cfg, workers)
    rep = cost(traj, coeffs)
    write_trajectory_csv(traj, out / "trajectory.csv")
    write_cost_json(rep, out / "cost.json")
    return EXIT_OK


def cmd_bsde(cfg, workers):
    out = _outdir(cfg.out)
    _, _, traj = _forward(cfg, workers)
    s = cfg["solver"]
    if s["bsde_driver"] == "linear":
        prob = bsde.linear_problem(traj, s["bsde_c"])
    else:
        prob = bsde.kernel_problem(traj)
    sol, rep = bsde.solve(prob, beta=s["beta"], tol=s["tol"], max_iter=s["max_iter"])
    extra = {"problem": prob.name, "L1": prob.L1, "L2": prob.L2,
             "y0_mean": sol.y[:, :, 0].mean(axis=0).tolist()}
    bsde.write_report_json(rep, out / "bsde_report.json", extra)
    bsde.write_solution_csv(sol, traj.grid, out / "bsde_solution.csv")
    return EXIT_OK


def cmd_lq(cfg, workers):
    if cfg.family != "lq":
        raise ConfigError(f"scenario.family: the lq subcommand needs family = lq, got {cfg.family}")
    out = _outdir(cfg.out)
    s = cfg["solver"]
    res = lq_solve(cfg.lq_params(), cfg.grid(), cfg.paths, K=cfg.K, seed=cfg.seed, mu0=cfg.mu0(),
                   theta=s["theta"], tol=s["lq_tol"], max_outer=s["max_outer"], alpha0=cfg.control(),
                   workers=workers, adjoint_tol=s["adjoint_tol"])
    report = res.as_dict()
    report["residual_threshold"] = s["residual_threshold"]
    report["residual_ok"] = res.residual.value < s["residual_threshold"]
    write_json(report, out / "lq_result.json")
    write_history_csv(res.history, out / "lq_history.csv")
    return EXIT_OK


def cmd_descend(cfg, workers):
    out = _outdir(cfg.out)
    s = cfg["solver"]
    res = descend(cfg.coefficients(), cfg.mu0(), cfg.control(), s["eta"], s["iters"], cfg.grid(),
                  cfg.paths, K=cfg.K, seed=cfg.seed, workers=workers, adjoint_tol=s["adjoint_tol"],
                  gtol=s["gtol"])
    last = res.history[-1]
    write_json({"alpha": res.control.values.tolist(), "J": last["J"], "stderr": last["stderr"],
                "grad_norm": last["grad_norm"], "iterations": last["iter"], "eta": res.eta,
                "aborted": res.aborted}, out / "descend_result.json")
    write_history_csv(res.history, out / "descend_history.csv",
                      ("iter", "J", "stderr", "grad_norm", "eta"))
    return EXIT_OK


def cmd_verify(args):
    from . import verify

    rep = verify.run_suite(args.suite)
    for c in rep.checks:
        print(c.line())
    out = _outdir(args.out or "out")
    write_json(rep.as_dict(), out / f"verify_{args.suite}.json")
    return EXIT_OK if rep.passed else EXIT_FAILED


COMMANDS = {"simulate": cmd_simulate, "bsde": cmd_bsde, "lq": cmd_lq, "descend": cmd_descend}


def build_parser():
    p = argparse.ArgumentParser(prog="flowsmp", description="Heavy-point flows driven by a Brownian sheet.")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (overrides scenario.out)")
    common.add_argument("--threads", type=int, help="worker threads (default: $FLOWSMP_THREADS or 1)")
    for name, help_ in (
        ("simulate", "forward simulation: trajectory.csv and cost.json"),
        ("bsde", "solve a backward equation with interaction over the labels"),
        ("lq", "fixed-point solve of the LQ problem"),
        ("descend", "steepest descent on the control"),
    ):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.add_argument("--config", required=True, help="scenario INI file")
        sp.add_argument("--seed", type=int, help="override scenario.seed")
    vp = sub.add_parser("verify", parents=[common], help="run a property suite")
    vp.add_argument("suite", help="one of: " + ", ".join(SUITE_NAMES))
    vp.add_argument("--config", help=argparse.SUPPRESS)
    vp.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    return p


def _numeric_failure(exc, out, command):
    print(f"flowsmp {command}: numerical failure: {exc}", file=sys.stderr)
    try:
        write_json({"command": command, "error": type(exc).__name__, "message": str(exc)},
                   _outdir(out) / "error.json")
    except OSError:
        pass
    return EXIT_NUMERIC


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        workers = resolve_workers(args.threads if args.threads is not None else os.environ.get("FLOWSMP_THREADS"))
    except ValueError as exc:
        print(f"flowsmp: --threads: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "verify":
        if args.suite not in SUITE_NAMES:
            print(f"flowsmp verify: unknown suite {args.suite!r} (expected one of {', '.join(SUITE_NAMES)})",
                  file=sys.stderr)
            return EXIT_CONFIG
        return cmd_verify(args)
    try:
        cfg = _scenario(args)
    except ConfigError as exc:
        print(f"flowsmp {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg, workers)
    except ConfigError as exc:
        print(f"flowsmp {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        return _numeric_failure(exc, cfg.out, args.command)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
