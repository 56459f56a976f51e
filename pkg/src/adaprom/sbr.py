"""Sparse Bayesian regression of reduced-operator entries.

Every upper-triangle entry of the globally reprojected ``K_r``, ``C_r`` and
``M_r`` is modelled as a polynomial in the (unit-cube normalized) parameters
with Gaussian coefficients. Per-coefficient precisions are re-estimated from
the posterior and coefficients whose precision explodes are pruned. Thompson
sampling draws one coefficient vector per entry; the resulting deterministic
polynomials can be evaluated and differentiated exactly.
"""
import json
from dataclasses import dataclass, field, asdict
from itertools import combinations_with_replacement
from math import comb

import numpy as np

from .kernels import sbr_batch
from .mor import ReducedSystem

MATRIX_NAMES = ("K", "C", "M")


class InconsistentSamplesError(ValueError):
    pass


@dataclass(frozen=True)
class Normalization:
    """Affine map of the parameter box onto ``[0, 1]^d``."""
    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = np.asarray(self.lower, float)
        hi = np.asarray(self.upper, float)
        if lo.shape != hi.shape or np.any(hi <= lo) or not np.all(np.isfinite(hi - lo)):
            raise ValueError(f"invalid parameter box: {self.lower} .. {self.upper}")
        object.__setattr__(self, "lower", tuple(float(v) for v in lo))
        object.__setattr__(self, "upper", tuple(float(v) for v in hi))

    @property
    def lo(self):
        return np.array(self.lower)

    @property
    def hi(self):
        return np.array(self.upper)

    @property
    def width(self):
        return self.hi - self.lo

    @property
    def d(self):
        return len(self.lower)

    def to_unit(self, p):
        return (np.asarray(p, float) - self.lo) / self.width

    def from_unit(self, u):
        return self.lo + np.asarray(u, float) * self.width

    def contains(self, p, rtol=1e-12):
        p = np.asarray(p, float)
        slack = rtol * self.width
        return bool(np.all(p >= self.lo - slack) and np.all(p <= self.hi + slack))


class PolynomialBasis:
    """All monomials of total degree <= ``degree`` in ``d`` variables.

    Monomials are graded (constant first, then degree 1, ...), which keeps the
    constant in column 0.
    """

    def __init__(self, d, degree):
        if d < 1 or degree < 0:
            raise ValueError("need d >= 1 and degree >= 0")
        self.d = int(d)
        self.degree = int(degree)
        exps = []
        for deg in range(self.degree + 1):
            for combo in combinations_with_replacement(range(self.d), deg):
                e = [0] * self.d
                for j in combo:
                    e[j] += 1
                exps.append(e)
        self.exponents = np.array(exps, dtype=np.int64).reshape(-1, self.d)
        self._index = {tuple(e): i for i, e in enumerate(self.exponents)}
        self._diff = [self._diff_matrix(j) for j in range(self.d)]

    @classmethod
    def from_exponents(cls, exponents):
        exponents = np.asarray(exponents, np.int64)
        basis = cls(exponents.shape[1], int(exponents.sum(axis=1).max()))
        if not np.array_equal(basis.exponents, exponents):
            raise ValueError("exponent list is not a graded total-degree basis")
        return basis

    @property
    def n_f(self):
        return len(self.exponents)

    def __repr__(self):
        return f"PolynomialBasis(d={self.d}, degree={self.degree}, n_f={self.n_f})"

    def evaluate(self, x):
        """Feature matrix ``(K, n_f)`` at normalized points ``x`` ``(K, d)``."""
        x = np.atleast_2d(np.asarray(x, float))
        return np.prod(x[:, None, :] ** self.exponents[None, :, :], axis=2)

    def _diff_matrix(self, j):
        # D[k, i] = e_ij where monomial k = monomial i with exponent j lowered by one
        D = np.zeros((self.n_f, self.n_f))
        for i, e in enumerate(self.exponents):
            if e[j] > 0:
                lowered = e.copy()
                lowered[j] -= 1
                D[self._index[tuple(lowered)], i] = e[j]
        return D

    def derivative_matrix(self, j):
        """Map of coefficient vectors onto the coefficients of d/dx_j."""
        return self._diff[j]


def adaptive_degree(n_samples, d, max_degree=4):
    """Largest total degree whose monomial count does not exceed the sample count."""
    deg = 0
    while deg < max_degree and comb(deg + 1 + d, d) <= n_samples:
        deg += 1
    return deg


def design_matrix(points, basis, normalization=None):
    """``X[k, i] = f_i(normalize(p_k))``; points are used as-is without a normalization."""
    pts = np.atleast_2d(np.asarray(points, float))
    if pts.shape[0] < 1:
        raise ValueError("design matrix needs at least one point")
    x = pts if normalization is None else normalization.to_unit(pts)
    return basis.evaluate(x)


@dataclass(frozen=True)
class SbrConfig:
    """Hyperparameter initialization and iteration control.

    ``alpha_init`` and ``noise_init`` are in standardized target units when
    ``standardize`` is set (targets centred and scaled to unit spread).
    """
    alpha_init: float = 1e-2
    noise_init: float = 0.1
    max_sweeps: int = 200
    tol: float = 1e-4
    alpha_max: float = 1e9
    noise_floor: float = 1e-12
    update_hyperparameters: bool = True
    prune: bool = True
    standardize: bool = True
    max_degree: int = 4


@dataclass
class SbrPosterior:
    mean: np.ndarray
    covariance: np.ndarray
    alpha: np.ndarray
    noise_variance: float
    active: np.ndarray
    gamma: np.ndarray
    sweeps: int = 0

    def predict(self, X):
        return X @ self.mean


def _standardize(T):
    offset = T.mean(axis=1)
    scale = T.std(axis=1)
    scale = np.where(scale > 1e-14 * np.maximum(np.abs(offset), 1e-300), scale, 1.0)
    return (T - offset[:, None]) / scale[:, None], offset, scale


def _fit_batch(X, T, config):
    """Batched fit in raw target units; returns posterior arrays."""
    T = np.atleast_2d(np.asarray(T, float))
    if config.standardize:
        Tn, offset, scale = _standardize(T)
    else:
        Tn, offset, scale = T, np.zeros(len(T)), np.ones(len(T))
    mu, S, alpha, gamma, s2, active, sweeps = sbr_batch(
        X, Tn, alpha0=config.alpha_init, sigma2_0=config.noise_init,
        max_iter=config.max_sweeps, tol=config.tol, alpha_max=config.alpha_max,
        floor=config.noise_floor, update=config.update_hyperparameters, prune=config.prune)
    mu = mu * scale[:, None]
    # centring is absorbed by the constant monomial (column 0)
    mu[:, 0] += offset
    active = active.copy()
    # the constant carries the offset; it is inactive only when the two cancel
    active[:, 0] = np.abs(mu[:, 0]) > 1e-10 * (np.abs(offset) + scale)
    S = S * (scale ** 2)[:, None, None]
    return dict(mean=mu, covariance=S, alpha=alpha, gamma=gamma,
                noise_variance=s2 * scale ** 2, active=active, sweeps=sweeps)


def sbr_fit(X, a, config=SbrConfig()):
    """Single-target sparse Bayesian regression.

    With ``update_hyperparameters=False`` this is one closed-form posterior
    evaluation, ``mean = (X^T X + alpha sigma^2 I)^{-1} X^T a`` and
    ``cov = sigma^2 (X^T X + alpha sigma^2 I)^{-1}``.
    """
    X = np.atleast_2d(np.asarray(X, float))
    a = np.asarray(a, float).ravel()
    if X.shape[0] != a.size or X.shape[0] < 1:
        raise ValueError("X and targets disagree in sample count")
    if not np.all(np.isfinite(X)):
        raise ValueError("design matrix must be finite")
    out = _fit_batch(X, a[None], config)
    return SbrPosterior(mean=out["mean"][0], covariance=out["covariance"][0],
                        alpha=out["alpha"][0], noise_variance=float(out["noise_variance"][0]),
                        active=out["active"][0], gamma=out["gamma"][0],
                        sweeps=int(out["sweeps"][0]))


def _sqrt_factor(S):
    """Symmetric square-root factor ``L`` with ``L L^T = S`` for stacked PSD ``S``."""
    w, U = np.linalg.eigh(S)
    return U * np.sqrt(np.clip(w, 0.0, None))[..., None, :]


@dataclass
class OperatorSurrogate:
    """Per-entry regression posteriors for the upper triangles of K_r, C_r, M_r.

    Array attributes carry a leading axis of length 3 in the order
    :data:`MATRIX_NAMES`, then one row per upper-triangle entry in
    ``np.triu_indices(r)`` order.
    """
    basis: PolynomialBasis
    normalization: Normalization
    r: int
    f_r: np.ndarray
    g_r: np.ndarray
    mean: np.ndarray          # (3, ne, nf)
    covariance: np.ndarray    # (3, ne, nf, nf)
    alpha: np.ndarray = None
    noise_variance: np.ndarray = None
    active: np.ndarray = None
    factor: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.factor is None:
            self.factor = _sqrt_factor(self.covariance)

    @property
    def n_entries(self):
        return self.r * (self.r + 1) // 2

    @property
    def n_models(self):
        return 3 * self.n_entries

    def mean_draw(self):
        return SurrogateDraw(self, self.mean.copy(), seed=None)

    def posterior(self, matrix, i, j):
        """The :class:`SbrPosterior` of entry ``(i, j)`` of ``matrix`` ('K', 'C' or 'M')."""
        i, j = min(i, j), max(i, j)
        m = MATRIX_NAMES.index(matrix)
        e = _triu_position(self.r, i, j)
        return SbrPosterior(mean=self.mean[m, e], covariance=self.covariance[m, e],
                            alpha=self.alpha[m, e], noise_variance=float(self.noise_variance[m, e]),
                            active=self.active[m, e], gamma=None)

    def to_dict(self):
        return {
            "r": self.r,
            "exponents": self.basis.exponents.tolist(),
            "lower": list(self.normalization.lower),
            "upper": list(self.normalization.upper),
            "f_r": self.f_r.tolist(),
            "g_r": self.g_r.tolist(),
            "matrices": {
                name: {
                    "active": self.active[m].astype(int).tolist(),
                    "mean": self.mean[m].tolist(),
                    "covariance_factor": self.factor[m].tolist(),
                    "alpha": np.where(np.isfinite(self.alpha[m]), self.alpha[m], -1.0).tolist(),
                    "noise_variance": self.noise_variance[m].tolist(),
                }
                for m, name in enumerate(MATRIX_NAMES)
            },
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict())
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, data):
        basis = PolynomialBasis.from_exponents(data["exponents"])
        mats = [data["matrices"][n] for n in MATRIX_NAMES]
        factor = np.array([m["covariance_factor"] for m in mats])
        alpha = np.array([m["alpha"] for m in mats])
        alpha[alpha < 0] = np.inf
        return cls(basis=basis, normalization=Normalization(data["lower"], data["upper"]),
                   r=int(data["r"]), f_r=np.array(data["f_r"]), g_r=np.array(data["g_r"]),
                   mean=np.array([m["mean"] for m in mats]),
                   covariance=factor @ factor.transpose(0, 1, 3, 2),
                   alpha=alpha,
                   noise_variance=np.array([m["noise_variance"] for m in mats]),
                   active=np.array([m["active"] for m in mats], bool), factor=factor)

    @classmethod
    def from_json(cls, text_or_path):
        text = text_or_path
        if not text.lstrip().startswith("{"):
            with open(text_or_path) as fh:
                text = fh.read()
        return cls.from_dict(json.loads(text))


def _triu_position(r, i, j):
    # row-major index of (i, j), i <= j, in np.triu_indices(r) order
    return i * r - i * (i - 1) // 2 + (j - i)


def fit_operator_surrogate(samples, normalization, config=SbrConfig(), degree=None):
    """Fit one regression per upper-triangle entry of every reduced operator.

    Parameters
    ----------
    samples : sequence
        Objects with ``p`` (parameter point) and ``rom`` (:class:`ReducedSystem`
        in the shared global basis).
    normalization : Normalization
        Parameter box.
    degree : int, optional
        Polynomial degree; by default the largest total degree whose monomial
        count does not exceed the number of samples (capped at
        ``config.max_degree``).
    """
    if len(samples) < 1:
        raise ValueError("need at least one sample")
    r = samples[0].rom.n
    if any(s.rom.n != r for s in samples):
        raise InconsistentSamplesError(
            f"reduced orders differ across samples: {sorted({s.rom.n for s in samples})}")
    P = np.array([np.asarray(s.p, float) for s in samples])
    if degree is None:
        degree = adaptive_degree(len(samples), normalization.d, config.max_degree)
    basis = PolynomialBasis(normalization.d, degree)
    X = design_matrix(P, basis, normalization)
    iu = np.triu_indices(r)
    results = []
    for name in MATRIX_NAMES:
        T = np.array([getattr(s.rom, name)[iu] for s in samples]).T  # (ne, K)
        results.append(_fit_batch(X, T, config))
    stack = {k: np.stack([res[k] for res in results]) for k in results[0]}
    f_r = np.mean([s.rom.f for s in samples], axis=0)
    g_r = np.mean([s.rom.g for s in samples], axis=0)
    return OperatorSurrogate(basis=basis, normalization=normalization, r=r, f_r=f_r, g_r=g_r,
                             mean=stack["mean"], covariance=stack["covariance"],
                             alpha=stack["alpha"], noise_variance=stack["noise_variance"],
                             active=stack["active"])


def draw_rng(seed, iteration=0):
    """Generator for draw number ``iteration`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(iteration)]))


class SurrogateDraw:
    """Deterministic polynomial model of every reduced-operator entry."""

    def __init__(self, surrogate, coefficients, seed=None):
        self.surrogate = surrogate
        self.coefficients = np.asarray(coefficients, float)  # (3, ne, nf)
        if not np.all(np.isfinite(self.coefficients)):
            raise ValueError("draw produced non-finite coefficients")
        self.seed = seed
        self._iu = np.triu_indices(surrogate.r)

    @property
    def basis(self):
        return self.surrogate.basis

    @property
    def normalization(self):
        return self.surrogate.normalization

    @property
    def r(self):
        return self.surrogate.r

    def _assemble(self, entries):
        # entries (..., ne) -> symmetric (..., r, r)
        r = self.r
        A = np.zeros(entries.shape[:-1] + (r, r))
        A[..., self._iu[0], self._iu[1]] = entries
        A[..., self._iu[1], self._iu[0]] = entries
        return A

    def entries(self, p):
        phi = self.basis.evaluate(self.normalization.to_unit(p)[None])[0]
        return self.coefficients @ phi  # (3, ne)

    def operators(self, p):
        """``(K_r, C_r, M_r)`` at ``p``."""
        K, C, M = self._assemble(self.entries(p))
        return K, C, M

    def __call__(self, p):
        return evaluate_draw(self, p)


def thompson_draw(surrogate, seed, iteration=0):
    """One posterior realization of every coefficient vector.

    ``beta = mean + L z`` with ``L`` a symmetric square-root factor of the
    covariance and ``z`` standard normal; deterministic in ``(seed, iteration)``.
    """
    rng = draw_rng(seed, iteration)
    z = rng.standard_normal(surrogate.mean.shape)
    beta = surrogate.mean + np.einsum("mekl,mel->mek", surrogate.factor, z)
    return SurrogateDraw(surrogate, beta, seed=(seed, iteration))


def evaluate_draw(draw, p):
    K, C, M = draw.operators(p)
    return ReducedSystem(M=M, C=C, K=K, f=draw.surrogate.f_r.copy(), g=draw.surrogate.g_r.copy())


class DrawGradient:
    """Exact parameter derivatives of a :class:`SurrogateDraw`.

    ``coefficients[j]`` holds, per entry, the polynomial coefficients of the
    derivative with respect to the raw parameter ``p_j`` (normalization chain
    rule already applied).
    """

    def __init__(self, draw):
        self.draw = draw
        basis = draw.basis
        scale = 1.0 / draw.normalization.width
        self.coefficients = np.stack([
            (draw.coefficients @ basis.derivative_matrix(j).T) * scale[j]
            for j in range(basis.d)])  # (d, 3, ne, nf)

    def entries(self, p):
        phi = self.draw.basis.evaluate(self.draw.normalization.to_unit(p)[None])[0]
        return self.coefficients @ phi  # (d, 3, ne)

    def __call__(self, p):
        """``(dK, dC, dM)``, each of shape ``(d, r, r)``."""
        A = self.draw._assemble(self.entries(p))  # (d, 3, r, r)
        return A[:, 0], A[:, 1], A[:, 2]


def differentiate_draw(draw):
    return DrawGradient(draw)
