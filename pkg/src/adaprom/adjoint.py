"""Frequency-band objective, adjoint gradient and box-constrained optimizer.

The objective is the discrete L_k norm of the output over a frequency band,

    R(p) = (sum_i |y(p, s_i)|^k)^(1/k),

optionally minimized as ln R. Its gradient on a Thompson-sampled surrogate
is computed with one adjoint solve per frequency; the output is complex, so
the derivative of |y| uses Wirtinger calculus (d|y| = 2 Re[(ybar / 2|y|) dy]).
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from .mor import FrequencyGrid, ReducedSystem, SingularSystemError, reduced_solves, transfer_function
from .sbr import differentiate_draw, evaluate_draw

log = logging.getLogger(__name__)

ZERO_OUTPUT = 1e-300


class NondifferentiablePointError(ArithmeticError):
    """Some output vanishes, so |y| is not differentiable there."""


class OutsideDomainError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectiveSpec:
    """Frequency band ``[f_lo, f_hi]`` in Hz, ``n_points`` samples (1 Hz spacing by default)."""
    f_lo: float
    f_hi: float
    k: float = 1.0
    n_points: int = None
    log_objective: bool = True

    def __post_init__(self):
        if not self.f_lo < self.f_hi and not (self.n_points == 1 and self.f_lo == self.f_hi):
            raise ValueError("need f_lo < f_hi")
        if self.n_points is not None and self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        if not self.k >= 1:
            raise ValueError("norm order k must be >= 1")

    @property
    def grid(self):
        return FrequencyGrid.band(self.f_lo, self.f_hi, self.n_points)


@dataclass
class TotalSolve:
    """Per-frequency states, outputs and transposed-system solutions."""
    s: np.ndarray
    X: np.ndarray  # (ns, r) states
    Z: np.ndarray  # (ns, r) Ktilde^{-T} g^T
    y: np.ndarray  # (ns,) outputs
    R: float = None


@dataclass
class AdjointWorkspace:
    eta: np.ndarray          # (ns, r) adjoint vectors
    pseudo_load: np.ndarray  # (d, ns, r) -dKtilde/dp_j x


def lk_norm(magnitudes, k):
    m = np.asarray(magnitudes, float)
    if np.isinf(k):
        return float(m.max())
    # scale by the maximum to avoid overflow for large k
    top = m.max()
    if top == 0:
        return 0.0
    return float(top * np.sum((m / top) ** k) ** (1.0 / k))


def solve_total(rom, s_values):
    X, Z = reduced_solves(rom, s_values)
    return TotalSolve(s=np.asarray(s_values, complex), X=X, Z=Z, y=X @ rom.g)


def evaluate_objective(system, spec, grid=None):
    """``(R or ln R, TotalSolve)``; full-order systems are solved frequency by frequency."""
    s = (grid or spec.grid).s
    if isinstance(system, ReducedSystem):
        total = solve_total(system, s)
        y = total.y
    else:
        y = transfer_function(system, s)
        total = TotalSolve(s=s, X=None, Z=None, y=y)
    R = lk_norm(np.abs(y), spec.k)
    total.R = R
    if spec.log_objective:
        if R <= 0:
            raise NondifferentiablePointError("ln R undefined for a vanishing output")
        return float(np.log(R)), total
    return R, total


def dR_dx(y, g, k):
    """Adjoint right-hand sides ``(dR/dx_i)`` row by row, shape ``(ns, r)``.

    Row ``i`` is ``(sum_j |y_j|^k)^(1/k - 1) |y_i|^(k-1) * (ybar_i / (2 |y_i|)) * g``;
    the factor 1/2 is the Wirtinger derivative of |y| and is undone by the
    ``2 Re[.]`` in the final differential.
    """
    return dR_dy(y, k)[:, None] * np.asarray(g)[None, :]


def dR_dy(y, k):
    """Per-frequency Wirtinger coefficients of :func:`dR_dx` without ``g``."""
    y = np.asarray(y, complex)
    mag = np.abs(y)
    if np.any(mag < ZERO_OUTPUT):
        raise NondifferentiablePointError("output vanishes at some frequency")
    top = mag.max()
    q = mag / top
    S = np.sum(q ** k)
    # (sum |y|^k)^(1/k-1) |y_i|^(k-1) written in scaled form
    w = S ** (1.0 / k - 1.0) * q ** (k - 1.0)
    return w * 0.5 * np.conj(y) / mag


def objective_and_gradient(draw, p, spec, return_workspace=False, derivative=None,
                           _flip_derivative=False):
    """Objective and its adjoint gradient on a surrogate draw at ``p``."""
    norm = draw.normalization
    p = np.asarray(p, float)
    if not norm.contains(p):
        raise OutsideDomainError(f"p = {p} outside {norm.lower} .. {norm.upper}")
    rom = evaluate_draw(draw, p)
    value, total = evaluate_objective(rom, spec)
    c = dR_dy(total.y, spec.k)  # (ns,)
    eta = c[:, None] * total.Z  # Ktilde^T eta_i = c_i g^T
    dK, dC, dM = (derivative or differentiate_draw(draw))(p)  # (d, r, r)
    if _flip_derivative:
        dK, dC, dM = -dK, -dC, -dM
    s = total.s
    # dKtilde/dp_j x_i for every (j, i): (d, ns, r)
    dKx = (np.einsum("jab,ib->jia", dK, total.X)
           + s[None, :, None] * np.einsum("jab,ib->jia", dC, total.X)
           + (s * s)[None, :, None] * np.einsum("jab,ib->jia", dM, total.X))
    pseudo = -dKx
    # accumulate in frequency order for reproducibility
    contrib = np.einsum("ia,jia->ji", eta, pseudo)
    grad = 2.0 * np.real(np.cumsum(contrib, axis=1)[:, -1])
    if spec.log_objective:
        grad = grad / total.R
    if return_workspace:
        return value, grad, total, AdjointWorkspace(eta=eta, pseudo_load=pseudo)
    return value, grad


def adjoint_gradient(draw, p, spec):
    return objective_and_gradient(draw, p, spec)[1]


class CountingObjective:
    """Wraps an objective ``p -> float`` and counts its evaluations."""

    def __init__(self, fun):
        self.fun = fun
        self.count = 0

    def __call__(self, p):
        self.count += 1
        return self.fun(p)


def finite_difference_gradient(objective, p, step, lower=None, upper=None):
    """Central differences; ``step`` is a scalar or one step per parameter.

    With bounds, a stencil that would leave the box is shifted inside it, so
    every component still costs two evaluations.
    """
    p = np.asarray(p, float)
    h = np.broadcast_to(np.asarray(step, float), p.shape)
    lo = np.full(p.shape, -np.inf) if lower is None else np.asarray(lower, float)
    hi = np.full(p.shape, np.inf) if upper is None else np.asarray(upper, float)
    g = np.empty_like(p)
    for j in range(p.size):
        a, b = p.copy(), p.copy()
        a[j] = max(p[j] - h[j], lo[j])
        b[j] = min(p[j] + h[j], hi[j])
        g[j] = (objective(b) - objective(a)) / (b[j] - a[j])
    return g


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    """Projected BFGS settings. Tolerances refer to normalized coordinates."""
    gradient_tol: float = 1e-8
    max_iterations: int = 200
    armijo_c1: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 40
    n_starts: int = 1


@dataclass
class OptimizationResult:
    p: np.ndarray
    value: float
    converged: bool
    message: str
    iterations: int
    n_objective: int
    n_gradient: int
    trace: list = field(default_factory=list)


class EvaluationFailed(RuntimeError):
    pass


def _projected_gradient(x, g):
    return np.clip(x - g, 0.0, 1.0) - x


def minimize_box(fun_grad, x0, config=OptimizerConfig()):
    """Projected BFGS with Armijo backtracking on the unit box.

    ``fun_grad(x) -> (f, g)`` may raise; a failing trial point is treated as
    a rejected step.
    """

    def call(x):
        f, g = fun_grad(x)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            raise EvaluationFailed("non-finite objective or gradient")
        return float(f), np.asarray(g, float)

    x = np.clip(np.asarray(x0, float), 0.0, 1.0)
    f, g = call(x)
    n = x.size
    H = np.eye(n)
    trace = [{"iteration": 0, "x": x.tolist(), "f": f, "pg_norm": float(np.linalg.norm(_projected_gradient(x, g)))}]
    message = "iteration limit"
    converged = False
    it = 0
    for it in range(1, config.max_iterations + 1):
        pg = _projected_gradient(x, g)
        if np.linalg.norm(pg) < config.gradient_tol:
            converged, message = True, "projected gradient below tolerance"
            it -= 1
            break
        eps = 1e-12
        blocked = ((x <= eps) & (g > 0)) | ((x >= 1.0 - eps) & (g < 0))
        free = ~blocked
        d = np.zeros(n)
        Hf = H[np.ix_(free, free)]
        d[free] = -Hf @ g[free]
        if not g @ d < 0:
            H = np.eye(n)
            d = np.where(free, -g, 0.0)
        # keep the first trial inside a unit-length move
        dmax = np.max(np.abs(d))
        if dmax > 1.0:
            d = d / dmax
        a = 1.0
        accepted = False
        for _ in range(config.max_backtracks):
            xt = np.clip(x + a * d, 0.0, 1.0)
            step = xt - x
            if not np.any(step):
                break
            try:
                ft, gt = call(xt)
            except (EvaluationFailed, SingularSystemError, NondifferentiablePointError,
                    np.linalg.LinAlgError, FloatingPointError):
                a *= config.backtrack
                continue
            if ft <= f + config.armijo_c1 * (g @ step):
                accepted = True
                break
            a *= config.backtrack
        if not accepted:
            converged = bool(np.linalg.norm(pg) < np.sqrt(config.gradient_tol))
            message = "line search could not decrease the objective"
            break
        s = xt - x
        yv = gt - g
        sy = s @ yv
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            rho = 1.0 / sy
            V = np.eye(n) - rho * np.outer(s, yv)
            H = V @ H @ V.T + rho * np.outer(s, s)
        x, f, g = xt, ft, gt
        trace.append({"iteration": it, "x": x.tolist(), "f": f,
                      "pg_norm": float(np.linalg.norm(_projected_gradient(x, g)))})
    return x, f, g, converged, message, it, trace


def optimize(draw, spec, config=OptimizerConfig(), seed=0, rng=None, x0=None):
    """Minimize the (log-)objective of a surrogate draw over its parameter box.

    Starts from a uniform random point (``x0`` overrides, in raw units). With
    ``n_starts > 1`` the best of several starts is returned.
    """
    norm = draw.normalization
    rng = rng if rng is not None else np.random.default_rng(seed)
    counts = {"objective": 0, "gradient": 0}
    width = norm.width
    derivative = differentiate_draw(draw)

    def fun_grad(u):
        counts["objective"] += 1
        counts["gradient"] += 1
        value, grad = objective_and_gradient(draw, norm.from_unit(u), spec, derivative=derivative)
        return value, grad * width

    best = None
    for start in range(max(1, config.n_starts)):
        u0 = norm.to_unit(x0) if (x0 is not None and start == 0) else rng.uniform(size=norm.d)
        try:
            fun_grad(u0)
        except (SingularSystemError, NondifferentiablePointError, np.linalg.LinAlgError):
            log.warning("objective failed at start %s; resampling once", norm.from_unit(u0))
            u0 = rng.uniform(size=norm.d)
        x, f, g, conv, msg, it, trace = minimize_box(fun_grad, u0, config)
        if best is None or f < best[1]:
            best = (x, f, conv, msg, it, trace)
    x, f, conv, msg, it, trace = best
    for rec in trace:
        rec["p"] = norm.from_unit(rec.pop("x")).tolist()
    return OptimizationResult(p=norm.from_unit(x), value=f, converged=conv, message=msg,
                              iterations=it, n_objective=counts["objective"],
                              n_gradient=counts["gradient"], trace=trace)


def optimize_finite_difference(objective, normalization, config=OptimizerConfig(), x0=None,
                               seed=0, rel_step=1e-6):
    """Same optimizer as :func:`optimize`, driven by central-difference gradients.

    ``objective(p)`` takes raw parameters. Every call is counted, so
    ``n_objective`` includes the ``2 d`` evaluations per gradient.
    """
    counter = CountingObjective(objective)
    width = normalization.width
    lo, hi = normalization.lo, normalization.hi
    n_grad = [0]

    def fun_grad(u):
        p = normalization.from_unit(u)
        value = counter(p)
        n_grad[0] += 1
        g = finite_difference_gradient(counter, p, rel_step * width, lo, hi)
        return value, g * width

    rng = np.random.default_rng(seed)
    u0 = normalization.to_unit(x0) if x0 is not None else rng.uniform(size=normalization.d)
    x, f, g, conv, msg, it, trace = minimize_box(fun_grad, u0, config)
    for rec in trace:
        rec["p"] = normalization.from_unit(rec.pop("x")).tolist()
    return OptimizationResult(p=normalization.from_unit(x), value=f, converged=conv, message=msg,
                              iterations=it, n_objective=counter.count, n_gradient=n_grad[0],
                              trace=trace)
