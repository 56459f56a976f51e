"""Command-line front end.

Subcommands write their artifacts into ``--out`` (or the config's
``output_dir``):

* ``result.json``    deterministic summary (no wall-clock data)
* ``iterations.csv`` one row per outer iteration or optimizer step
* ``error_map.csv``  surrogate-mean vs full-model error on a grid
* ``timings.csv``    seconds per subroutine

Exit codes: 0 success, 1 invalid input, 2 runtime failure, 3 failed check.
"""
import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml
from pydantic import ValidationError

from . import __version__
from .adjoint import finite_difference_gradient, objective_and_gradient
from .config import load_config
from .sampling import (TIMING_KEYS, build_samples, full_factorial, prom_error_map,
                       reproject, run_adaptive, run_ffd_baseline, run_fd_optimization)
from .sbr import fit_operator_surrogate, thompson_draw

log = logging.getLogger("adaprom")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3
GRADIENT_TOL = 1e-5

ITERATION_COLUMNS = ("iteration", "p_found_1", "p_found_2", "rom_objective", "fom_objective",
                     "p_added_1", "p_added_2", "n_samples", "global_order", "degree",
                     "optimizer_evaluations", "distance_warning")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {v}")
    return v


def build_parser():
    p = _Parser(prog="adaprom", description="Adaptive sampling for parametric reduced "
                "models of vibrating structures.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", required=True,
                        help="YAML file, or a bundled name: beam, kelvin_cell")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--workers", type=_positive_int, default=None,
                        help="threads for independent full-order builds (default: CPU count)")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    common(sub.add_parser("run-adaptive", help="adaptive sampling run"))
    ffd = common(sub.add_parser("run-ffd-baseline", help="one-shot full-factorial baseline"))
    ffd.add_argument("--levels", type=_positive_int, default=10,
                     help="grid levels per parameter")
    fd = common(sub.add_parser("run-fd-opt", help="finite-difference optimization"))
    fd.add_argument("--level", choices=("FOM", "ROM"), default="FOM")
    gc = common(sub.add_parser("gradient-check", help="adjoint vs finite differences"))
    gc.add_argument("--trials", type=_positive_int, default=10)
    gc.add_argument("--flip-derivative-sign", action="store_true", help=argparse.SUPPRESS)
    return p


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _out_dir(args, cfg):
    out = Path(args.out or cfg.output_dir or f"results/{args.command}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, data):
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        if not np.isfinite(v):
            raise ValueError("non-finite value in result table")
        return repr(float(v))
    return v


def _write_iterations(path, records):
    rows = []
    for r in records:
        pa = r.p_added or [float("nan")] * len(r.p_found)
        row = [r.iteration, *r.p_found, r.rom_objective, r.fom_objective]
        row += ["" if np.isnan(v) else _fmt(v) for v in pa]
        row += [r.n_samples, r.global_order, r.degree, r.optimizer_evaluations,
                r.distance_warning]
        rows.append([x if isinstance(x, str) else _fmt(x) for x in row])
    _write_csv(path, ITERATION_COLUMNS, rows)


def _write_timings(path, totals):
    total = sum(totals.values()) or 1.0
    _write_csv(path, ("subroutine", "seconds", "percent"),
               [(k, f"{totals.get(k, 0.0):.6f}", f"{100 * totals.get(k, 0.0) / total:.2f}")
                for k in TIMING_KEYS])


def _write_error_map(path, result, model, cfg, spec):
    pts = full_factorial(model.lower, model.upper, cfg.adaptive.error_map_levels)
    err = prom_error_map(result.surrogate, model, pts, spec.grid)
    _write_csv(path, ("p_1", "p_2", "mean_relative_error"),
               [(_fmt(a), _fmt(b), _fmt(e)) for (a, b), e in zip(pts, err)])


def _run_header(args, cfg, seed):
    return {"command": args.command, "model": cfg.model.kind, "seed": seed,
            "config": cfg.model_dump(mode="json")}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_run_adaptive(args, cfg):
    seed = cfg.seed if args.seed is None else args.seed
    model = cfg.build_model()
    acfg = cfg.adaptive_config(seed=seed, workers=args.workers)
    res = run_adaptive(model, acfg)
    out = _out_dir(args, cfg)
    _write_json(out / "result.json", {**_run_header(args, cfg, seed), **res.to_dict()})
    _write_iterations(out / "iterations.csv", res.iterations)
    _write_error_map(out / "error_map.csv", res, model, cfg, acfg.objective)
    _write_timings(out / "timings.csv", res.timings)
    print(f"p* = {res.p_opt.tolist()}  objective = {res.objective:.6f}  "
          f"samples = {len(res.samples)}  ({res.stop_reason})")
    return EXIT_OK


def cmd_run_ffd_baseline(args, cfg):
    seed = cfg.seed if args.seed is None else args.seed
    model = cfg.build_model()
    acfg = cfg.adaptive_config(seed=seed, workers=args.workers)
    res = run_ffd_baseline(model, acfg, args.levels)
    out = _out_dir(args, cfg)
    data = {**_run_header(args, cfg, seed), **res.to_dict(), "levels": args.levels,
            "initial_samples": len(res.samples), "degree": res.iterations[0].degree}
    _write_json(out / "result.json", data)
    _write_iterations(out / "iterations.csv", res.iterations)
    _write_error_map(out / "error_map.csv", res, model, cfg, acfg.objective)
    _write_timings(out / "timings.csv", res.timings)
    print(f"{len(res.samples)} samples, degree {res.iterations[0].degree}: "
          f"p* = {res.p_opt.tolist()}  objective = {res.objective:.6f}")
    return EXIT_OK


def cmd_run_fd_opt(args, cfg):
    seed = cfg.seed if args.seed is None else args.seed
    model = cfg.build_model()
    acfg = cfg.adaptive_config(seed=seed, workers=args.workers)
    res = run_fd_optimization(model, acfg, level=args.level)
    out = _out_dir(args, cfg)
    _write_json(out / "result.json", {**_run_header(args, cfg, seed), "level": args.level,
                                      **res.to_dict()})
    _write_csv(out / "iterations.csv", ("iteration", "p_1", "p_2", "objective", "pg_norm"),
               [(t["iteration"], *map(_fmt, t["p"]), _fmt(t["f"]), _fmt(t["pg_norm"]))
                for t in res.trace])
    _write_csv(out / "timings.csv", ("subroutine", "seconds"),
               [("optimization", f"{res.wall_time - res.reduction_time:.6f}"),
                ("local_reduction", f"{res.reduction_time:.6f}")])
    print(f"{args.level} finite-difference run: p* = {res.p_opt.tolist()}  "
          f"objective = {res.objective:.6f}  evaluations = {res.n_objective}")
    return EXIT_OK


def gradient_check(model, acfg, trials, seed, flip=False, rel_step=1e-6):
    """Relative errors between adjoint and central-difference gradients on
    ``trials`` random (Thompson draw, interior point) pairs."""
    samples = build_samples(model, full_factorial(model.lower, model.upper, acfg.initial_levels),
                            acfg.irka, acfg.workers)
    reproject(samples, acfg.kappa)
    surrogate = fit_operator_surrogate(samples, model.normalization, acfg.sbr)
    norm = model.normalization
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    errors = []
    for t in range(trials):
        draw = thompson_draw(surrogate, seed, t)
        p = norm.from_unit(rng.uniform(0.05, 0.95, size=norm.d))
        _, g_adj = objective_and_gradient(draw, p, acfg.objective, _flip_derivative=flip)

        def value(q):
            return objective_and_gradient(draw, q, acfg.objective)[0]

        g_fd = finite_difference_gradient(value, p, rel_step * norm.width)
        errors.append(float(np.linalg.norm(g_adj - g_fd) / np.linalg.norm(g_fd)))
    return np.array(errors)


def cmd_gradient_check(args, cfg):
    seed = cfg.seed if args.seed is None else args.seed
    model = cfg.build_model()
    acfg = cfg.adaptive_config(seed=seed, workers=args.workers)
    err = gradient_check(model, acfg, args.trials, seed, flip=args.flip_derivative_sign)
    passed = bool(err.max() <= GRADIENT_TOL)
    out = _out_dir(args, cfg)
    _write_json(out / "result.json", {**_run_header(args, cfg, seed), "trials": args.trials,
                                      "max_relative_error": float(err.max()),
                                      "median_relative_error": float(np.median(err)),
                                      "tolerance": GRADIENT_TOL, "passed": passed,
                                      "relative_errors": err.tolist()})
    print(f"gradient check: max {err.max():.3e}, median {np.median(err):.3e} "
          f"-> {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if passed else EXIT_CHECK


COMMANDS = {"run-adaptive": cmd_run_adaptive, "run-ffd-baseline": cmd_run_ffd_baseline,
            "run-fd-opt": cmd_run_fd_opt, "gradient-check": cmd_gradient_check}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers is None:
        args.workers = os.cpu_count() or 1
    try:
        cfg = load_config(args.config)
    except (ValidationError, yaml.YAMLError, OSError, ValueError) as exc:
        print(f"invalid configuration {args.config}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        return COMMANDS[args.command](args, cfg)
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 2
        log.debug("runtime failure", exc_info=True)
        print(f"{args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
