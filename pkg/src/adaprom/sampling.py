"""Adaptive sampling loop for parametric reduced models and its baselines.

Each outer iteration fits matrix-entry surrogates on all current samples,
optimizes one Thompson draw of them, and adds the optimum as a new
full-order sample. Baselines: a full-factorial design reduced once, and
finite-difference optimization directly on the full or a per-point reduced
model.
"""
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import product

import numpy as np

from .adjoint import (EvaluationFailed, NondifferentiablePointError, ObjectiveSpec,
                      OptimizerConfig, evaluate_objective, optimize, optimize_finite_difference)
from .fem import InvalidGeometryError
from .mor import (IrkaConfig, SingularSystemError, global_basis, irka_second_order, project,
                  reproject_samples, transfer_function)
from .sbr import (InconsistentSamplesError, SbrConfig, adaptive_degree, evaluate_draw,
                  fit_operator_surrogate, thompson_draw)

log = logging.getLogger(__name__)

TIMING_KEYS = ("initial_sampling", "optimization", "sample_adding", "local_reduction",
               "model_training", "reprojection", "objective_check")


# ---------------------------------------------------------------------------
# Designs, distance guard, stopping rule
# ---------------------------------------------------------------------------

def full_factorial(lower, upper, levels):
    """Cartesian grid with ``levels`` equispaced values per dimension (endpoints included).

    ``levels`` may be an int or one int per dimension; a single level gives
    the box center. Points are ordered with the last coordinate varying fastest.
    """
    lo, hi = np.asarray(lower, float), np.asarray(upper, float)
    lv = np.broadcast_to(np.asarray(levels, int), lo.shape)
    if np.any(lv < 1):
        raise ValueError("levels must be >= 1")
    axes = [np.array([0.5 * (a + b)]) if n == 1 else np.linspace(a, b, n)
            for a, b, n in zip(lo, hi, lv)]
    return np.array(list(product(*axes)), float)


def _sphere_directions(d, n=64):
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        a = 2 * np.pi * np.arange(n) / n
        return np.stack([np.cos(a), np.sin(a)], axis=1)
    z = np.random.default_rng(12345).standard_normal((n * d, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def _coincident_direction(q, zlo, zhi):
    """Axis direction for a point sitting exactly on a sample.

    Faces the point lies on are kept: it moves along a coordinate that is not
    at a bound (or, in a corner, along the edge with the most room).
    """
    tol = 1e-12 * np.maximum(zhi - zlo, 1.0)
    pinned = (q <= zlo + tol) | (q >= zhi - tol)
    up, down = zhi - q, q - zlo
    room = np.maximum(up, down)
    candidates = np.flatnonzero(~pinned) if not np.all(pinned) else np.arange(q.size)
    j = candidates[np.argmax(room[candidates])]
    d = np.zeros(q.size)
    d[j] = 1.0 if up[j] >= down[j] else -1.0
    return d


def enforce_min_distance(p_new, points, threshold, lower, upper, units="normalized"):
    """Move ``p_new`` so that it is at least ``threshold`` away from every point.

    Distances are Euclidean in normalized coordinates (``units="normalized"``)
    or in raw parameter units (``units="raw"``). The point is pushed away from
    its nearest neighbour; if the box clips that move, it slides along the
    active faces, and failing that along other directions around the
    neighbour. Returns ``(point, warning)``; ``warning`` is True when no
    admissible point was found and the best effort is returned.
    """
    lo, hi = np.asarray(lower, float), np.asarray(upper, float)
    if units == "normalized":
        scale = hi - lo
    elif units == "raw":
        scale = np.ones_like(lo)
    else:
        raise ValueError(f"unknown distance units {units!r}")
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    pts = np.asarray(points, float).reshape(-1, lo.size)
    p_new = np.clip(np.asarray(p_new, float), lo, hi)
    if len(pts) == 0:
        return p_new, False
    zlo, zhi = np.zeros_like(lo), (hi - lo) / scale
    Z = (pts - lo) / scale
    z = (p_new - lo) / scale

    def gap(c):
        return float(np.min(np.linalg.norm(Z - c, axis=1)))

    if gap(z) >= threshold:
        return p_new, False
    ok = threshold * (1.0 - 1e-9)
    q = Z[np.argmin(np.linalg.norm(Z - z, axis=1))]
    away = z - q
    if np.linalg.norm(away) < 1e-14 * max(1.0, np.linalg.norm(zhi)):
        away = _coincident_direction(q, zlo, zhi)
    away = away / np.linalg.norm(away)

    dirs = [away]
    first = np.clip(q + threshold * away, zlo, zhi)
    pinned = (first <= zlo) | (first >= zhi)
    if np.any(pinned) and not np.all(pinned):
        face = np.where(pinned, 0.0, away)
        if np.linalg.norm(face) > 0:
            dirs.append(face / np.linalg.norm(face))
    axes = np.vstack([np.eye(lo.size), -np.eye(lo.size)])
    sph = _sphere_directions(lo.size)
    for block in (axes, sph):
        dirs.extend(block[np.argsort(-(block @ away), kind="stable")])

    best, best_gap = z, gap(z)
    for radius in threshold * np.array([1.0, 1.25, 1.5, 2.0, 3.0, 4.0]):
        for dvec in dirs:
            c = np.clip(q + radius * dvec, zlo, zhi)
            g = gap(c)
            if g >= ok:
                return lo + c * scale, False
            if g > best_gap:
                best, best_gap = c, g
    log.warning("could not place sample %.6g away from all others; best gap %.3g",
                threshold, best_gap)
    return lo + best * scale, True


def relative_improvements(history):
    h = np.asarray(history, float)
    return np.abs(np.diff(h)) / np.abs(h[:-1])


@dataclass(frozen=True)
class StopDecision:
    stop: bool
    reason: str


def stopping_check(history, tol, max_iters, pairs=2):
    """Stop once the last ``pairs`` relative improvements are all below ``tol``,
    or once ``len(history)`` reaches ``max_iters``."""
    if len(history) >= max_iters:
        return StopDecision(True, "iteration limit")
    if len(history) < pairs + 1:
        return StopDecision(False, "insufficient history")
    rel = relative_improvements(history[-(pairs + 1):])
    if np.all(rel < tol):
        return StopDecision(True, "converged")
    return StopDecision(False, "improving")


# ---------------------------------------------------------------------------
# Sample set
# ---------------------------------------------------------------------------

@dataclass
class ReducedSample:
    p: np.ndarray
    basis: object          # ReducedBasis from IRKA
    system: object = None  # full-order system, kept for reprojection
    rom: object = None     # reprojected onto the current global basis

    def summary(self, include_basis=False):
        out = {"p": [float(v) for v in self.p], "local_order": int(self.basis.r),
               "irka_iterations": int(self.basis.iterations),
               "irka_converged": bool(self.basis.converged)}
        if include_basis:
            out["basis"] = self.basis.V.tolist()
        return out


class SampleSet:
    """Ordered samples with pairwise-distinct parameter points."""

    def __init__(self, samples=()):
        self.samples = []
        for s in samples:
            self.append(s)

    def append(self, sample):
        p = np.asarray(sample.p, float)
        if any(np.array_equal(p, s.p) for s in self.samples):
            raise ValueError(f"duplicate sample point {p}")
        sample.p = p
        self.samples.append(sample)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def points(self):
        return np.array([s.p for s in self.samples])

    def to_dict(self, include_bases=False):
        return {"samples": [s.summary(include_bases) for s in self.samples]}

    def to_json(self, include_bases=False):
        return json.dumps(self.to_dict(include_bases), indent=1)


# ---------------------------------------------------------------------------
# Configuration and results
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdaptiveConfig:
    objective: ObjectiveSpec
    initial_levels: int = 2
    min_distance: float = 0.03
    distance_units: str = "normalized"
    improvement_tol: float = 1e-3
    stop_pairs: int = 2
    max_iterations: int = 50
    kappa: float = 0.9995
    irka: IrkaConfig = IrkaConfig()
    sbr: SbrConfig = SbrConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    seed: int = 0
    workers: int = None

    def __post_init__(self):
        if not self.min_distance > 0:
            raise ValueError("min_distance must be positive")
        if not 0 < self.kappa <= 1:
            raise ValueError("kappa must lie in (0, 1]")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.distance_units not in ("raw", "normalized"):
            raise ValueError("distance_units must be 'raw' or 'normalized'")


@dataclass
class IterationRecord:
    iteration: int
    p_found: list
    rom_objective: float
    fom_objective: float
    p_added: list
    n_samples: int
    global_order: int
    degree: int
    optimizer_evaluations: int
    distance_warning: bool
    timings: dict = field(default_factory=dict)

    def to_dict(self, timings=True):
        d = asdict(self)
        if not timings:
            d.pop("timings")
        return d


@dataclass
class RunResult:
    """``p_opt`` is the found point with the lowest full-model objective over all
    iterations, which need not be the last one."""
    p_opt: np.ndarray
    objective: float
    iterations: list
    samples: SampleSet
    stop_reason: str
    surrogate: object = None
    timings: dict = field(default_factory=dict)

    def to_dict(self, timings=False):
        """JSON-ready summary. Wall-clock timings are left out by default so the
        result is a deterministic function of the configuration."""
        out = {"p_opt": [float(v) for v in self.p_opt], "objective": float(self.objective),
               "stop_reason": self.stop_reason, "n_samples": len(self.samples),
               "iterations": [r.to_dict(timings) for r in self.iterations],
               "sample_set": self.samples.to_dict()}
        if timings:
            out["timings"] = dict(self.timings)
        return out


class _Clock:
    def __init__(self):
        self.totals = dict.fromkeys(TIMING_KEYS, 0.0)

    def timed(self, key, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        finally:
            self.totals[key] += time.perf_counter() - t0


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def build_sample(model, p, irka_config):
    """Assemble the full-order model at ``p`` and reduce it with IRKA."""
    system = model.build(p)
    basis = irka_second_order(system, irka_config)
    return ReducedSample(p=np.asarray(p, float), basis=basis, system=system)


def build_samples(model, points, irka_config, workers=None):
    """Build and reduce several samples; results keep the order of ``points``."""
    points = [np.asarray(p, float) for p in points]
    if workers == 1 or len(points) == 1:
        return [build_sample(model, p, irka_config) for p in points]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda p: build_sample(model, p, irka_config), points))


def reproject(samples, kappa):
    basis, r = global_basis([s.basis for s in samples], kappa)
    for s, rom in zip(samples, reproject_samples([s.system for s in samples], basis.V)):
        s.rom = rom
    return basis, r


def fom_objective(model, p, spec, system=None):
    system = system if system is not None else model.build(p)
    return evaluate_objective(system, spec)[0]


_SURROGATE_ERRORS = (InconsistentSamplesError, np.linalg.LinAlgError, ValueError,
                     EvaluationFailed, NondifferentiablePointError, FloatingPointError)


def _train_and_optimize(samples, model, config, iteration, clock, degree):
    surrogate = clock.timed("model_training", fit_operator_surrogate, samples,
                            model.normalization, config.sbr, degree)
    draw = clock.timed("model_training", thompson_draw, surrogate, config.seed, iteration)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, iteration, 1]))
    res = clock.timed("optimization", optimize, draw, config.objective, config.optimizer, rng=rng)
    if not np.isfinite(res.value):
        raise EvaluationFailed("optimizer returned a non-finite objective")
    return surrogate, res


def run_adaptive(model, config, callback=None, initial=None):
    """Adaptive sampling driven by ROM-level optimization of Thompson draws.

    ``initial`` optionally supplies already reduced samples (for instance
    from :func:`build_samples`) in place of the full-factorial start.
    """
    clock = _Clock()
    norm = model.normalization
    t0 = time.perf_counter()
    if initial is None:
        design = full_factorial(model.lower, model.upper, config.initial_levels)
        initial = build_samples(model, design, config.irka, config.workers)
    samples = SampleSet(initial)
    clock.totals["initial_sampling"] += time.perf_counter() - t0
    records, history = [], []
    stop = StopDecision(False, "")
    surrogate, p_opt, obj_opt = None, None, None
    for it in range(1, config.max_iterations + 1):
        before = dict(clock.totals)
        _, r_G = clock.timed("reprojection", reproject, samples.samples, config.kappa)
        degree = adaptive_degree(len(samples), norm.d, config.sbr.max_degree)
        while True:
            try:
                surrogate, res = _train_and_optimize(samples.samples, model, config, it,
                                                     clock, degree)
                break
            except _SURROGATE_ERRORS as exc:
                if degree <= 1:
                    raise
                log.warning("surrogate of degree %d failed (%s); retrying with %d",
                            degree, exc, degree - 1)
                degree -= 1
        p_found = res.p
        t1 = time.perf_counter()
        p_add, warn = enforce_min_distance(p_found, samples.points, config.min_distance,
                                           model.lower, model.upper, config.distance_units)
        clock.totals["sample_adding"] += time.perf_counter() - t1
        new = _add_sample(model, samples, p_add, config, clock)
        same = np.array_equal(new.p, p_found)
        f_val = clock.timed("objective_check", fom_objective, model, p_found,
                            config.objective, new.system if same else None)
        history.append(f_val)
        if obj_opt is None or f_val < obj_opt:  # keep the best point verified on the FOM
            p_opt, obj_opt = p_found, f_val
        rec = IterationRecord(
            iteration=it, p_found=[float(v) for v in p_found], rom_objective=float(res.value),
            fom_objective=float(f_val), p_added=[float(v) for v in new.p],
            n_samples=len(samples), global_order=int(r_G), degree=int(degree),
            optimizer_evaluations=int(res.n_objective), distance_warning=bool(warn),
            timings={k: clock.totals[k] - before[k] for k in TIMING_KEYS})
        records.append(rec)
        log.info("iteration %d: p* = %s, FOM objective %.6g, r_G = %d, %d samples",
                 it, rec.p_found, f_val, r_G, len(samples))
        if callback is not None:
            callback(rec)
        stop = stopping_check(history, config.improvement_tol, config.max_iterations,
                              config.stop_pairs)
        if stop.stop:
            break
    return RunResult(p_opt=np.asarray(p_opt), objective=float(obj_opt), iterations=records,
                     samples=samples, stop_reason=stop.reason, surrogate=surrogate,
                     timings=clock.totals)


def _add_sample(model, samples, p, config, clock):
    t0 = time.perf_counter()
    try:
        system = model.build(p)
    except (InvalidGeometryError, SingularSystemError) as exc:
        log.warning("full-order build failed at %s (%s); retrying once", p, exc)
        p, _ = enforce_min_distance(p, samples.points, 2 * config.min_distance,
                                    model.lower, model.upper, config.distance_units)
        system = model.build(p)
    clock.totals["sample_adding"] += time.perf_counter() - t0
    basis = clock.timed("local_reduction", irka_second_order, system, config.irka)
    sample = ReducedSample(p=np.asarray(p, float), basis=basis, system=system)
    samples.append(sample)
    return sample


# ---------------------------------------------------------------------------
# Baselines and diagnostics
# ---------------------------------------------------------------------------

def prom_error_map(surrogate, model, points, grid, systems=None):
    """Mean relative output error of the surrogate-mean ROM against the full model.

    ``systems`` optionally supplies pre-built full-order systems for ``points``.
    """
    draw = surrogate.mean_draw()
    s = grid.s
    errors = np.empty(len(points))
    for i, p in enumerate(points):
        sys_i = systems[i] if systems is not None else model.build(p)
        y = transfer_function(sys_i, s)
        y_r = transfer_function(evaluate_draw(draw, p), s)
        errors[i] = float(np.mean(np.abs(y_r - y) / np.abs(y)))
    return errors


def run_ffd_baseline(model, config, levels):
    """Reduce a full-factorial design once and optimize the surrogate mean."""
    clock = _Clock()
    t0 = time.perf_counter()
    design = full_factorial(model.lower, model.upper, levels)
    samples = SampleSet(build_samples(model, design, config.irka, config.workers))
    clock.totals["initial_sampling"] += time.perf_counter() - t0
    _, r_G = clock.timed("reprojection", reproject, samples.samples, config.kappa)
    degree = adaptive_degree(len(samples), model.d, config.sbr.max_degree)
    surrogate = clock.timed("model_training", fit_operator_surrogate, samples.samples,
                            model.normalization, config.sbr, degree)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0, 1]))
    res = clock.timed("optimization", optimize, surrogate.mean_draw(), config.objective,
                      config.optimizer, rng=rng)
    f_val = clock.timed("objective_check", fom_objective, model, res.p, config.objective)
    rec = IterationRecord(
        iteration=1, p_found=[float(v) for v in res.p], rom_objective=float(res.value),
        fom_objective=float(f_val), p_added=[], n_samples=len(samples), global_order=int(r_G),
        degree=int(degree), optimizer_evaluations=int(res.n_objective), distance_warning=False,
        timings=dict(clock.totals))
    return RunResult(p_opt=res.p, objective=float(f_val), iterations=[rec], samples=samples,
                     stop_reason="single pass", surrogate=surrogate, timings=clock.totals)


@dataclass
class FdRunResult:
    p_opt: np.ndarray
    objective: float
    n_objective: int
    n_gradient: int
    converged: bool
    message: str
    wall_time: float
    reduction_time: float
    trace: list

    def to_dict(self, timings=False):
        out = {"p_opt": [float(v) for v in self.p_opt], "objective": float(self.objective),
               "n_objective": int(self.n_objective), "n_gradient": int(self.n_gradient),
               "converged": bool(self.converged), "message": self.message, "trace": self.trace}
        if timings:
            out.update(wall_time=self.wall_time, reduction_time=self.reduction_time)
        return out


def run_fd_optimization(model, config, level="FOM", x0=None, rel_step=1e-6):
    """Optimize the full model (``level="FOM"``) or a freshly IRKA-reduced
    model at every point (``level="ROM"``) with finite-difference gradients."""
    level = level.upper()
    if level not in ("FOM", "ROM"):
        raise ValueError("level must be 'FOM' or 'ROM'")
    reduction = [0.0]

    def objective(p):
        system = model.build(p)
        if level == "ROM":
            t = time.perf_counter()
            system = project(system, irka_second_order(system, config.irka))
            reduction[0] += time.perf_counter() - t
        return evaluate_objective(system, config.objective)[0]

    t0 = time.perf_counter()
    res = optimize_finite_difference(objective, model.normalization, config.optimizer, x0=x0,
                                     seed=config.seed, rel_step=rel_step)
    return FdRunResult(p_opt=res.p, objective=res.value, n_objective=res.n_objective,
                       n_gradient=res.n_gradient, converged=res.converged, message=res.message,
                       wall_time=time.perf_counter() - t0, reduction_time=reduction[0],
                       trace=res.trace)


def fom_objective_grid(model, spec, levels):
    """Full-order objective on a ``levels``-per-dimension grid: ``(points, values)``."""
    pts = full_factorial(model.lower, model.upper, levels)
    return pts, np.array([fom_objective(model, p, spec) for p in pts])
