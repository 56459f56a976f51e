"""Frequency-domain solves, Galerkin projection, second-order IRKA and the
global basis used to put all samples into one coordinate system."""
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)


class SingularSystemError(np.linalg.LinAlgError):
    """The dynamic stiffness ``s^2 M + s C + K`` is singular at ``s``."""

    def __init__(self, s):
        super().__init__(f"dynamic stiffness is singular at s = {s}")
        self.s = s


@dataclass(frozen=True)
class FrequencyGrid:
    """Frequencies in Hz and the matching points ``s = 2*pi*i*f`` (rad/s)."""
    frequencies: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.frequencies, float)
        if f.ndim != 1 or f.size == 0:
            raise ValueError("frequency grid must be a non-empty 1-D array")
        if np.any(np.diff(f) <= 0):
            raise ValueError("frequencies must be strictly increasing")
        object.__setattr__(self, "frequencies", f)

    @classmethod
    def band(cls, f_lo, f_hi, n=None, spacing=1.0):
        """Equispaced band including both endpoints (1 Hz spacing unless ``n`` given)."""
        if n is None:
            n = int(round((f_hi - f_lo) / spacing)) + 1
        if n == 1:
            return cls(np.array([float(f_lo)]))
        return cls(np.linspace(f_lo, f_hi, n))

    @property
    def s(self):
        return 2j * np.pi * self.frequencies

    def __len__(self):
        return self.frequencies.size


@dataclass
class ReducedSystem:
    M: np.ndarray
    C: np.ndarray
    K: np.ndarray
    f: np.ndarray
    g: np.ndarray

    @property
    def n(self):
        return self.K.shape[0]

    def operators(self):
        return self.K, self.C, self.M


@dataclass
class ReducedBasis:
    """Orthonormal real basis ``V`` (n x r) plus IRKA bookkeeping when available."""
    V: np.ndarray
    shifts: np.ndarray = None
    iterations: int = 0
    converged: bool = False
    shift_changes: list = field(default_factory=list)
    V_ext: np.ndarray = field(default=None, repr=False)  # extended-precision copy of V

    @property
    def r(self):
        return self.V.shape[1]


@dataclass(frozen=True)
class IrkaConfig:
    order: int = 6
    tolerance: float = 1e-6
    max_iterations: int = 10
    initial_frequencies: tuple = None  # Hz; default linspace(-250, 250, order)

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("IRKA order must be >= 1")
        if not self.tolerance > 0:
            raise ValueError("IRKA tolerance must be positive")

    def initial_shifts(self):
        f0 = self.initial_frequencies
        if f0 is None:
            f0 = np.linspace(-250.0, 250.0, self.order)
        return 2j * np.pi * np.asarray(f0, float)


def _dynamic_stiffness(sys, s):
    A = sys.K + s * sys.C + (s * s) * sys.M
    return A.tocsc() if sp.issparse(A) else A


def _matvec_ext(A, x):
    """``A @ x`` for CSR ``A`` accumulated in extended precision."""
    prod = A.data.astype(np.longdouble) * x[A.indices]
    out = np.zeros(A.shape[0], dtype=x.dtype)
    filled = np.diff(A.indptr) > 0
    if prod.size:
        out[filled] = np.add.reduceat(prod, A.indptr[:-1][filled])
    return out


def _residual_ext(sys, s, x, b):
    xe = np.asarray(x, np.clongdouble)
    se = np.clongdouble(s)
    Ax = (_matvec_ext(sys.K.tocsr(), xe) + se * _matvec_ext(sys.C.tocsr(), xe)
          + se * se * _matvec_ext(sys.M.tocsr(), xe))
    return (b.astype(np.clongdouble) - Ax).astype(complex)


def solve_frequency_response(sys, s, rhs=None, refine=0, extended=False):
    """State ``x(s)`` and output ``y(s) = g x(s)`` for unit input.

    ``refine > 0`` adds steps of iterative refinement whose residuals and
    iterates are kept in extended precision; ``extended=True`` returns that
    iterate as ``clongdouble``. Near a lightly damped resonance the plain LU
    solution of a stiff frame is only accurate to about 1e-7.
    """
    s = complex(s)
    b = np.asarray(sys.f if rhs is None else rhs, complex)
    A = _dynamic_stiffness(sys, s)
    try:
        if sp.issparse(A):
            lu = spla.splu(A)
            x = lu.solve(b)
            if refine or extended:
                x = x.astype(np.clongdouble)
            for _ in range(refine):
                x = x + lu.solve(_residual_ext(sys, s, x, b))
        else:
            x = np.linalg.solve(A, b)
    except (RuntimeError, np.linalg.LinAlgError):
        raise SingularSystemError(s) from None
    if not np.all(np.isfinite(x)):
        raise SingularSystemError(s)
    y = complex(sys.g @ x)
    return (x if extended else np.asarray(x, complex)), y


def reduced_solves(rom, s_values):
    """Batched dense solves of a reduced system.

    Returns ``X`` (ns, r) states and ``Z`` (ns, r) with ``Ktilde(s)^{-1} g^T``;
    ``Ktilde`` is complex symmetric, so ``Z`` is also the transposed-system
    solution needed by the adjoint.
    """
    s = np.asarray(s_values, complex)
    A = (rom.K[None] + s[:, None, None] * rom.C[None]
         + (s * s)[:, None, None] * rom.M[None])
    B = np.stack([rom.f, rom.g], axis=1).astype(complex)
    try:
        sol = np.linalg.solve(A, np.broadcast_to(B, (len(s),) + B.shape))
    except np.linalg.LinAlgError:
        for si, Ai in zip(s, A):
            try:
                np.linalg.solve(Ai, B)
            except np.linalg.LinAlgError:
                raise SingularSystemError(si) from None
        raise
    if not np.all(np.isfinite(sol)):
        bad = s[~np.all(np.isfinite(sol), axis=(1, 2))][0]
        raise SingularSystemError(bad)
    return sol[:, :, 0], sol[:, :, 1]


def transfer_function(sys, s_values, refine=0):
    """Complex outputs ``y(s_i)`` for every point of ``s_values``."""
    s_values = np.atleast_1d(np.asarray(s_values, complex))
    if isinstance(sys, ReducedSystem):
        X, _ = reduced_solves(sys, s_values)
        return X @ sys.g
    return np.array([solve_frequency_response(sys, s, refine=refine)[1] for s in s_values])


def transfer_magnitudes(sys, grid):
    s = grid.s if isinstance(grid, FrequencyGrid) else np.asarray(grid, complex)
    return np.abs(transfer_function(sys, s))


def _matmat_ext(A, V):
    return np.column_stack([_matvec_ext(A, V[:, j]) for j in range(V.shape[1])])


def project(sys, V):
    """Galerkin projection of a full system onto the columns of ``V``.

    A :class:`ReducedBasis` that carries an extended-precision copy of its
    columns is projected in extended precision, so that interpolation at the
    expansion points survives rounding of the basis to double.
    """
    if isinstance(V, ReducedBasis) and V.V_ext is not None and sp.issparse(sys.K):
        Ve = V.V_ext

        def congruence(A):
            return np.asarray(Ve.T @ _matmat_ext(A.tocsr(), Ve), float)

        return ReducedSystem(M=congruence(sys.M), C=congruence(sys.C), K=congruence(sys.K),
                             f=np.asarray(Ve.T @ sys.f.astype(np.longdouble), float),
                             g=np.asarray(sys.g.astype(np.longdouble) @ Ve, float))
    V = V.V if isinstance(V, ReducedBasis) else np.asarray(V, float)

    def congruence(A):
        AV = A @ V
        return np.asarray(V.T @ AV)

    return ReducedSystem(M=congruence(sys.M), C=congruence(sys.C), K=congruence(sys.K),
                         f=V.T @ sys.f, g=sys.g @ V)


def orthonormalize(W, drop_tol=1e-12):
    """Orthonormal basis of ``span(W)`` via pivoted QR.

    Columns are scaled to unit norm first; directions whose pivot falls below
    ``drop_tol`` times the largest are treated as dependent and dropped.
    """
    extended = np.asarray(W).dtype == np.longdouble
    W = np.asarray(W, np.longdouble if extended else float)
    norms = np.sqrt(np.sum(W * W, axis=0))
    W = W[:, norms > 0] / norms[norms > 0]
    if W.shape[1] == 0:
        raise ValueError("cannot orthonormalize an all-zero block")
    if extended:
        return _gram_schmidt(W, drop_tol)
    Q, R, _ = sla.qr(W, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    return Q[:, d > drop_tol * d[0]]


def _gram_schmidt(W, drop_tol):
    # modified Gram-Schmidt, two passes, in the working precision of W;
    # columns are visited in the pivot order of a double-precision QR
    _, R, piv = sla.qr(np.asarray(W, float), mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    Q = []
    for j in piv[d > drop_tol * d[0]]:
        v = W[:, j].copy()
        for _ in range(2):
            for q in Q:
                v -= (q @ v) * q
        nv = np.sqrt(v @ v)
        if nv > drop_tol:
            Q.append(v / nv)
    return np.stack(Q, axis=1)


def shifted_solves(sys, shifts, retry_eps=None, refine=2):
    """Real and imaginary parts of ``(s^2 M + s C + K)^{-1} f`` at one
    representative per conjugate pair.

    Sparse systems are solved with ``refine`` extended-precision refinement
    steps and the columns are returned as ``longdouble``.
    """
    reps = _conjugate_representatives(shifts)
    ext = sp.issparse(sys.K) and refine > 0
    cols = []
    for s in reps:
        try:
            x, _ = solve_frequency_response(sys, s, refine=refine, extended=ext)
        except SingularSystemError:
            if retry_eps is None:
                raise
            x, _ = solve_frequency_response(sys, s + retry_eps, refine=refine, extended=ext)
        cols.append(x.real)
        if abs(s.imag) > 0:
            cols.append(x.imag)
    return np.column_stack(cols)


def _conjugate_representatives(shifts, rtol=1e-10):
    """Keep real shifts and the upper-half-plane member of each conjugate pair."""
    shifts = np.asarray(shifts, complex)
    out = []
    for s in shifts:
        if abs(s.imag) <= rtol * max(abs(s), 1.0):
            out.append(complex(s.real, 0.0))
        elif s.imag > 0:
            out.append(s)
        elif not np.any(np.abs(shifts - np.conj(s)) <= rtol * max(abs(s), 1.0)):
            out.append(np.conj(s))  # lone lower-half shift: use its mirror
    return np.array(out, complex)


def quadratic_eigenvalues(rom):
    """Eigenvalues of ``lambda^2 M + lambda C + K`` by companion linearization."""
    r = rom.n
    Minv_K = np.linalg.solve(rom.M, rom.K)
    Minv_C = np.linalg.solve(rom.M, rom.C)
    A = np.block([[np.zeros((r, r)), np.eye(r)], [-Minv_K, -Minv_C]])
    return np.linalg.eigvals(A)


def select_shifts(eigenvalues, r, rtol=1e-10):
    """Mirror images of the ``r`` eigenvalues closest to the imaginary axis.

    Ties in ``|Re|`` are broken by smaller ``|Im|``; complex-conjugate pairs
    stay together, so a pair straddling the cut is kept whole.
    """
    lam = np.asarray(eigenvalues, complex)
    cands = []
    for z in lam:
        if abs(z.imag) <= rtol * max(abs(z), 1.0):
            cands.append((abs(z.real), 0.0, [complex(z.real, 0.0)]))
        elif z.imag > 0:
            cands.append((abs(z.real), abs(z.imag), [z, np.conj(z)]))
    cands.sort(key=lambda c: (c[0], c[1]))
    chosen = []
    for _, _, members in cands:
        if len(chosen) >= r:
            break
        chosen.extend(members)
    return _sorted_shifts(-np.array(chosen))


def _sorted_shifts(s):
    s = np.asarray(s, complex)
    return s[np.lexsort((s.real, s.imag))]


def irka_second_order(sys, config):
    """Second-order IRKA with a one-sided (Galerkin) real basis.

    Returns the basis built from the last set of expansion points; the
    reduced transfer function interpolates the full one at those points.
    """
    sigma = _sorted_shifts(config.initial_shifts())
    changes = []
    V = V_ext = None
    used = sigma
    converged = False
    it = 0
    for it in range(1, config.max_iterations + 1):
        Q = orthonormalize(shifted_solves(sys, sigma, retry_eps=config.tolerance))
        V = np.ascontiguousarray(Q, dtype=float)
        V_ext = Q if Q.dtype == np.longdouble else None
        used = sigma
        rom = project(sys, V)
        new = select_shifts(quadratic_eigenvalues(rom), config.order)
        delta = np.inf if new.shape != sigma.shape else float(np.max(np.abs(new - sigma)))
        changes.append(delta)
        log.debug("IRKA iteration %d: shift change %.3e", it, delta)
        sigma = new
        if delta < config.tolerance:
            converged = True
            break
    return ReducedBasis(V=V, shifts=used, iterations=it, converged=converged,
                        shift_changes=changes, V_ext=V_ext)


def global_basis(local_bases, kappa=0.9995, rank_tol=1e-12):
    """Global basis from the SVD of all concatenated local bases.

    The order is the smallest ``j`` with ``cumsum(sigma)_j / sum(sigma) > kappa``,
    capped at the numerical rank (which is also used when no ``j`` qualifies,
    e.g. ``kappa = 1``).
    """
    if len(local_bases) == 0:
        raise ValueError("global_basis needs at least one local basis")
    if not 0 < kappa <= 1:
        raise ValueError("kappa must lie in (0, 1]")
    W = np.hstack([b.V if isinstance(b, ReducedBasis) else np.asarray(b) for b in local_bases])
    U, sv, _ = np.linalg.svd(W, full_matrices=False)
    rank = int(np.sum(sv > rank_tol * sv[0]))
    c = np.cumsum(sv)
    hit = np.nonzero(c / c[-1] > kappa)[0]
    r = rank if hit.size == 0 else min(int(hit[0]) + 1, rank)
    return ReducedBasis(V=np.ascontiguousarray(U[:, :r])), r


def reproject_samples(systems, V_G):
    return [project(sys, V_G) for sys in systems]
