"""Command-line entry point.

Subcommands: ``generate``, ``solve``, ``partition-info`` and ``sweep-k``.
Exit codes: 0 converged (or success), 1 solver finished without
converging, 2 usage or I/O error.  Set ``PILM_LOG_LEVEL`` (e.g. ``DEBUG``)
to change log verbosity.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .blocks import assemble_blocks, split_jacobian, write_spy
from .errors import PilmError
from .gen import GenConfig, coordinate_error, generate
from .model import eval_RJ, load_problem, save_problem
from .outer import (
    DeltaSchedule, FullStep, LineSearch, Practical, SolverConfig, Termination, Theoretical,
    classical_lm_solve, config_to_dict, pilm_solve,
)
from .partition import (
    build_variable_graph, edge_cut, induce_residual_partition, partition_variables, reorder,
)
from .runtime import simulate_communication_volume

log = logging.getLogger("pilm")

EXIT_OK = 0
EXIT_NOT_CONVERGED = 1
EXIT_USAGE = 2

REPORT_FORMAT = "pilm-run-report"
REPORT_VERSION = 1

# raw timer names grouped into the report's phase breakdown
PHASE_GROUPS = {
    "partition": ("partition",),
    "evaluation": ("evaluate",),
    "assembly": ("split", "assemble", "coupling"),
    "damping": ("damping",),
    "factorization": ("factor",),
    "inner_solves": ("first_solve", "inner_step"),
    "line_search": ("line_search",),
}


class UsageError(Exception):
    """Bad arguments or unreadable input; maps to exit code 2."""


def _positive_int_list(text):
    try:
        vals = [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError as exc:
        raise UsageError(f"not a comma-separated integer list: {text!r}") from exc
    if not vals:
        raise UsageError("K list is empty")
    if any(v < 1 for v in vals):
        raise UsageError("every K must be at least 1")
    return vals


def _load(path):
    try:
        return load_problem(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot read problem file {path}: {exc}") from exc


def _write_json(path, obj):
    try:
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(args):
    cfg = GenConfig(
        n_hat=args.n_hat, seed=args.seed, grid_spacing=args.grid_spacing,
        sigma_angle=args.sigma_angle, angle_unit=args.angle_unit,
        avg_obs_per_point=args.avg_obs, noise_scale=args.noise_scale,
        decay_length=args.decay_length)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    p = generate(cfg)
    try:
        save_problem(p, args.output, include_truth=not args.no_truth)
    except OSError as exc:
        raise UsageError(f"cannot write {args.output}: {exc}") from exc
    counts = p.type_counts()
    print(f"wrote {args.output}: n={p.n} variables ({p.n_points} points), m={p.m} observations")
    print("type mix: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------

def _mu_mode(args):
    if args.mu_mode == "practical":
        return Practical(mu0=args.mu0, mu_min=args.mu_min, mu_max=args.mu_max)
    if args.mu_mode == "theoretical":
        return Theoretical(mu_min=args.mu_min, C_mu=args.c_mu, mu_max=args.mu_max)
    return DeltaSchedule(mu_bar=args.mu_bar, delta=args.delta, mu_max=args.mu_max)


def solver_config_from_args(args, K=None):
    sigma = None if args.no_sigma_rule else (0.68, 0.95, 0.995)
    cfg = SolverConfig(
        K=args.k if K is None else K, ell=args.ell, c=args.c, eps_rel=args.eps_rel,
        gamma=args.gamma, mu_mode=_mu_mode(args),
        alpha_mode=FullStep() if args.full_step else LineSearch(beta=args.beta),
        termination=Termination(grad_tol=args.grad_tol, grad_rtol=args.grad_rtol,
                                sigma_fractions=sigma, max_outer_iters=args.max_iters,
                                time_budget=args.time_budget),
        seed=args.seed, workers=args.workers, inner_eta=args.inner_eta)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def phase_breakdown(timings):
    out = {}
    for name, keys in PHASE_GROUPS.items():
        out[name] = float(sum(timings.get(k, 0.0) for k in keys))
    return out


def error_histogram(errors, bins=30):
    errors = np.asarray(errors, dtype=float)
    top = float(errors.max()) if errors.size and errors.max() > 0 else 1.0
    counts, edges = np.histogram(errors, bins=bins, range=(0.0, top))
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(len(counts))]


def build_report(p, res, algorithm, cfg, args_echo):
    wall = res.wall_time
    report = {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "pilm_version": __version__,
        "algorithm": algorithm,
        "config": config_to_dict(cfg),
        "arguments": args_echo,
        "problem": {"n": p.n, "m": p.m, "types": p.type_counts()},
        "status": str(res.status),
        "converged": res.status.converged,
        "iterations": res.iterations,
        "wall_time": {"total": wall, "phases": phase_breakdown(res.timings),
                      "raw": {k: float(v) for k, v in res.timings.items()}},
        "final": {"F": res.F, "grad_norm": res.grad_norm,
                  "within_sigma": list(res.within_sigma)},
        "coordinate_error": None,
        "partition": res.partition,
        "records": [r.to_dict() for r in res.records],
    }
    if p.ground_truth is not None:
        err0 = coordinate_error(p.coordinate_guess(), p.ground_truth)
        err = coordinate_error(res.x, p.ground_truth)
        report["coordinate_error"] = {"initial": err0.summary(), "final": err.summary()}
    return report


def write_fraction_csv(path, res):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "within_1", "within_2", "within_3"])
        for k, f in enumerate(res.fraction_history()):
            w.writerow([k] + [repr(float(v)) for v in f])


def write_histogram_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", "count"])
        for lo, hi, c in rows:
            w.writerow([repr(lo), repr(hi), c])


def cmd_solve(args):
    p = _load(args.problem)
    cfg = solver_config_from_args(args)
    solver = pilm_solve if args.algorithm == "pilm" else classical_lm_solve
    if args.algorithm == "lm" and cfg.K != 1:
        log.info("classical LM ignores K=%d", cfg.K)
    res = solver(p, cfg, log_path=args.log)
    report = build_report(p, res, args.algorithm, cfg, _args_echo(args))
    if args.report:
        _write_json(args.report, report)
    if args.csv_dir or args.plot_dir:
        out_dir = args.csv_dir or args.plot_dir
        os.makedirs(out_dir, exist_ok=True)
        frac_csv = os.path.join(out_dir, "sigma_fractions.csv")
        write_fraction_csv(frac_csv, res)
        hist_rows = None
        if p.ground_truth is not None:
            hist_rows = error_histogram(coordinate_error(res.x, p.ground_truth).errors)
            write_histogram_csv(os.path.join(out_dir, "coordinate_error_hist.csv"), hist_rows)
        if args.plot_dir:
            from . import plotting

            os.makedirs(args.plot_dir, exist_ok=True)
            plotting.plot_fractions(res.fraction_history(),
                                    os.path.join(args.plot_dir, "sigma_fractions.png"))
            if hist_rows is not None:
                plotting.plot_error_histogram(
                    hist_rows, os.path.join(args.plot_dir, "coordinate_error_hist.png"))
    summary = {"status": str(res.status), "iterations": res.iterations,
               "wall_time": round(res.wall_time, 4),
               "within_sigma": [round(v, 4) for v in res.within_sigma]}
    if report["coordinate_error"] is not None:
        summary["median_error"] = report["coordinate_error"]["final"]["median"]
    print(json.dumps(summary))
    return EXIT_OK if res.status.converged else EXIT_NOT_CONVERGED


def _args_echo(args):
    return {k: v for k, v in vars(args).items() if k != "func"}


# ---------------------------------------------------------------------------
# partition-info
# ---------------------------------------------------------------------------

def cmd_partition_info(args):
    p = _load(args.problem)
    if args.k > p.n_points:
        raise UsageError(f"K = {args.k} exceeds the number of points ({p.n_points})")
    graph = build_variable_graph(p)
    t0 = time.perf_counter()
    part = partition_variables(graph, args.k, seed=args.seed)
    elapsed = time.perf_counter() - t0
    part = induce_residual_partition(p, part.block_of, args.k)
    info = part.summary()
    info["edge_cut"] = int(edge_cut(graph, part.block_of))
    info["neighbors"] = [list(map(int, nb)) for nb in part.neighbors]
    info["partition_time"] = elapsed
    info["communication"] = simulate_communication_volume(part, n_iters=1, ell=args.ell)
    if args.spy:
        q, ro = reorder(p, part)
        R, J = eval_RJ(q, ro.to_new(p.coordinate_guess()))
        bs = assemble_blocks(split_jacobian(J, ro.partition, ro.var_offsets), R,
                             ro.partition, ro.var_offsets)
        write_spy(bs, args.spy)
    print(json.dumps(info, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep-k
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ["K", "repetition", "algorithm", "wall_time", "outer_iterations", "status",
                 "median_error"]


def cmd_sweep_k(args):
    k_list = _positive_int_list(args.k_list)
    if args.repetitions < 1:
        raise UsageError("repetitions must be at least 1")
    p = _load(args.problem)
    if max(k_list) > p.n_points:
        raise UsageError(f"K = {max(k_list)} exceeds the number of points ({p.n_points})")
    rows = []
    for K in k_list:
        # the same seed for every K keeps the comparison fair
        cfg = solver_config_from_args(args, K=K)
        for rep in range(args.repetitions):
            if K == 1 and not args.pilm_for_k1:
                algorithm, res = "lm", classical_lm_solve(p, cfg)
            else:
                algorithm, res = "pilm", pilm_solve(p, cfg)
            med = (coordinate_error(res.x, p.ground_truth).median
                   if p.ground_truth is not None else float("nan"))
            rows.append([K, rep, algorithm, res.wall_time, res.iterations, str(res.status), med])
            log.info("K=%d rep=%d %s %.3fs %d iterations", K, rep, res.status,
                     res.wall_time, res.iterations)
    out = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([r[0], r[1], r[2], repr(float(r[3])), r[4], r[5], repr(float(r[6]))])
    finally:
        if out is not sys.stdout:
            out.close()
    if args.plot_dir:
        from . import plotting

        os.makedirs(args.plot_dir, exist_ok=True)
        plotting.plot_sweep(rows, os.path.join(args.plot_dir, "sweep_k.png"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_solver_args(sp):
    sp.add_argument("--ell", type=int, default=5, help="inner iterations per step")
    sp.add_argument("--mu-mode", choices=("practical", "theoretical", "delta"),
                    default="practical")
    sp.add_argument("--mu0", type=float, default=None,
                    help="initial damping (practical); default max(1, ||R(x0)||)")
    sp.add_argument("--mu-min", type=float, default=1e-10)
    sp.add_argument("--mu-max", type=float, default=1e10)
    sp.add_argument("--c-mu", type=float, default=2.0, help="theoretical mode multiplier")
    sp.add_argument("--mu-bar", type=float, default=1.0, help="delta mode scale")
    sp.add_argument("--delta", type=float, default=1.0, help="delta mode exponent")
    sp.add_argument("--c", type=float, default=None, help="line-search constant")
    sp.add_argument("--eps-rel", type=float, default=1e-3, help="eps0 as a fraction of F(x0)")
    sp.add_argument("--gamma", type=float, default=0.9)
    sp.add_argument("--beta", type=float, default=0.5, help="backtracking factor")
    sp.add_argument("--full-step", action="store_true", help="always take alpha = 1")
    sp.add_argument("--inner-eta", type=float, default=None,
                    help="adaptive inner stopping: ||r|| <= eta*||g||")
    sp.add_argument("--grad-tol", type=float, default=None)
    sp.add_argument("--grad-rtol", type=float, default=None)
    sp.add_argument("--no-sigma-rule", action="store_true",
                    help="disable the 68/95/99.5 termination rule")
    sp.add_argument("--max-iters", type=int, default=200)
    sp.add_argument("--time-budget", type=_duration, default=None,
                    help="wall-clock budget, e.g. 30, 30s or 2m")
    sp.add_argument("--workers", type=int, default=None,
                    help="worker threads; default min(K, cores)")
    sp.add_argument("--seed", type=int, default=0)


def _duration(text):
    text = text.strip().lower()
    scale = 1.0
    if text.endswith("ms"):
        text, scale = text[:-2], 1e-3
    elif text.endswith("s"):
        text = text[:-1]
    elif text.endswith("m"):
        text, scale = text[:-1], 60.0
    elif text.endswith("h"):
        text, scale = text[:-1], 3600.0
    try:
        value = float(text) * scale
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad duration {text!r}") from exc
    if value <= 0:
        raise argparse.ArgumentTypeError("duration must be positive")
    return value


def build_parser():
    ap = argparse.ArgumentParser(prog="pilm", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"pilm {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic network-adjustment problem")
    g.add_argument("--n-hat", type=int, required=True, help="point count (perfect square)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--output", required=True)
    g.add_argument("--no-truth", action="store_true", help="omit ground truth from the file")
    g.add_argument("--grid-spacing", type=float, default=GenConfig.grid_spacing)
    g.add_argument("--sigma-angle", type=float, default=GenConfig.sigma_angle)
    g.add_argument("--angle-unit", default=GenConfig.angle_unit)
    g.add_argument("--avg-obs", type=float, default=GenConfig.avg_obs_per_point)
    g.add_argument("--noise-scale", type=float, default=GenConfig.noise_scale)
    g.add_argument("--decay-length", type=float, default=GenConfig.decay_length)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", help="run PILM or classical LM on a problem file")
    s.add_argument("problem")
    s.add_argument("--algorithm", choices=("pilm", "lm"), default="pilm")
    s.add_argument("--k", type=int, default=4, help="number of blocks")
    _add_solver_args(s)
    s.add_argument("--report", help="write the JSON run report here")
    s.add_argument("--log", help="write one JSON line per outer iteration here")
    s.add_argument("--csv-dir", help="directory for sigma-fraction and error-histogram CSVs")
    s.add_argument("--plot-dir", help="also render PNG figures here (needs matplotlib)")
    s.set_defaults(func=cmd_solve)

    pi = sub.add_parser("partition-info", help="partition a problem and print block statistics")
    pi.add_argument("problem")
    pi.add_argument("--k", type=int, required=True)
    pi.add_argument("--seed", type=int, default=0)
    pi.add_argument("--ell", type=int, default=5, help="inner steps for the volume estimate")
    pi.add_argument("--spy", help="write the P/B sparsity pattern CSV here")
    pi.set_defaults(func=cmd_partition_info)

    sw = sub.add_parser("sweep-k", help="time solves over a list of K values")
    sw.add_argument("problem")
    sw.add_argument("--k-list", required=True, help="comma-separated, e.g. 1,4,8,16")
    sw.add_argument("--repetitions", type=int, default=1)
    sw.add_argument("-o", "--output", help="CSV path (stdout when omitted)")
    sw.add_argument("--pilm-for-k1", action="store_true",
                    help="run PILM with K=1 instead of classical LM")
    sw.add_argument("--plot-dir", help="render the sweep figure here")
    _add_solver_args(sw)
    sw.set_defaults(func=cmd_sweep_k)
    return ap


def main(argv=None):
    level = os.environ.get("PILM_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pilm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PilmError as exc:
        print(f"pilm: solver error: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED


if __name__ == "__main__":
    sys.exit(main())
