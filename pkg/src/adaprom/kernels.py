"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Two loops dominate the runtime of an adaptive run:

* forming the 12x12 global stiffness/mass blocks of every beam element
  during FE assembly (thousands of elements per model, one model per sample);
* fitting one sparse Bayesian regression per reduced-operator entry
  (``3 * r(r+1)/2`` small fits per outer iteration, each iterated to
  convergence).

Each kernel exists twice. The ``*_numba`` variants loop entry by entry and
are compiled with :func:`numba.njit`; the ``*_numpy`` variants vectorize
over the batch dimension. :func:`element_matrices` and :func:`sbr_batch`
dispatch on :data:`adaprom._accel.USE_NUMBA`.
"""
import numpy as np

from ._accel import USE_NUMBA, njit


# ---------------------------------------------------------------------------
# Timoshenko beam element
# ---------------------------------------------------------------------------

def _fill_local(K, M, e, L, E, G, rho, A, Iy, Iz, J, kappa):
    # Local DOF order per node: u, v, w, rx, ry, rz.
    # Works for integer ``e`` with scalar properties (numba path) and for
    # ``e = slice(None)`` with array properties (numpy path).
    phi_z = 12.0 * E * Iz / (kappa * G * A * L * L)  # bending in x-y (v, rz)
    phi_y = 12.0 * E * Iy / (kappa * G * A * L * L)  # bending in x-z (w, ry)

    ka = E * A / L
    K[e, 0, 0] = ka
    K[e, 0, 6] = -ka
    K[e, 6, 0] = -ka
    K[e, 6, 6] = ka
    kt = G * J / L
    K[e, 3, 3] = kt
    K[e, 3, 9] = -kt
    K[e, 9, 3] = -kt
    K[e, 9, 9] = kt

    ma = rho * A * L / 6.0
    M[e, 0, 0] = 2.0 * ma
    M[e, 0, 6] = ma
    M[e, 6, 0] = ma
    M[e, 6, 6] = 2.0 * ma
    mt = rho * (Iy + Iz) * L / 6.0
    M[e, 3, 3] = 2.0 * mt
    M[e, 3, 9] = mt
    M[e, 9, 3] = mt
    M[e, 9, 9] = 2.0 * mt

    # two bending planes: (v, rz) with rz = dv/dx, (w, ry) with ry = -dw/dx
    for plane in range(2):
        if plane == 0:
            phi = phi_z
            I = Iz
            d0 = 1
            d1 = 5
            sg = 1.0
        else:
            phi = phi_y
            I = Iy
            d0 = 2
            d1 = 4
            sg = -1.0
        c = E * I / ((1.0 + phi) * L ** 3)
        kb00 = 12.0 * c
        kb01 = 6.0 * L * c
        kb11 = (4.0 + phi) * L * L * c
        kb13 = (2.0 - phi) * L * L * c

        ct = rho * A * L / (210.0 * (1.0 + phi) ** 2)
        mt00 = (70.0 * phi * phi + 147.0 * phi + 78.0) * ct
        mt01 = (35.0 * phi * phi + 77.0 * phi + 44.0) * L / 4.0 * ct
        mt02 = (35.0 * phi * phi + 63.0 * phi + 27.0) * ct
        mt03 = -(35.0 * phi * phi + 63.0 * phi + 26.0) * L / 4.0 * ct
        mt11 = (7.0 * phi * phi + 14.0 * phi + 8.0) * L * L / 4.0 * ct
        mt13 = -(7.0 * phi * phi + 14.0 * phi + 6.0) * L * L / 4.0 * ct

        cr = rho * I / (30.0 * (1.0 + phi) ** 2 * L)
        mr00 = 36.0 * cr
        mr01 = (3.0 - 15.0 * phi) * L * cr
        mr11 = (10.0 * phi * phi + 5.0 * phi + 4.0) * L * L * cr
        mr13 = (5.0 * phi * phi - 5.0 * phi - 1.0) * L * L * cr

        m00 = mt00 + mr00
        m01 = mt01 + mr01
        m02 = mt02 - mr00
        m03 = mt03 + mr01
        m11 = mt11 + mr11
        m13 = mt13 + mr13

        # indices of (deflection_1, slope_1, deflection_2, slope_2)
        i0 = d0
        i1 = d1
        i2 = d0 + 6
        i3 = d1 + 6
        # 4x4 blocks with the slope sign convention folded in
        K[e, i0, i0] = kb00
        K[e, i0, i1] = sg * kb01
        K[e, i0, i2] = -kb00
        K[e, i0, i3] = sg * kb01
        K[e, i1, i1] = kb11
        K[e, i1, i2] = -sg * kb01
        K[e, i1, i3] = kb13
        K[e, i2, i2] = kb00
        K[e, i2, i3] = -sg * kb01
        K[e, i3, i3] = kb11

        M[e, i0, i0] = m00
        M[e, i0, i1] = sg * m01
        M[e, i0, i2] = m02
        M[e, i0, i3] = sg * m03
        M[e, i1, i1] = m11
        M[e, i1, i2] = -sg * m03
        M[e, i1, i3] = m13
        M[e, i2, i2] = m00
        M[e, i2, i3] = -sg * m01
        M[e, i3, i3] = m11

        K[e, i1, i0] = K[e, i0, i1]
        K[e, i2, i0] = K[e, i0, i2]
        K[e, i3, i0] = K[e, i0, i3]
        K[e, i2, i1] = K[e, i1, i2]
        K[e, i3, i1] = K[e, i1, i3]
        K[e, i3, i2] = K[e, i2, i3]
        M[e, i1, i0] = M[e, i0, i1]
        M[e, i2, i0] = M[e, i0, i2]
        M[e, i3, i0] = M[e, i0, i3]
        M[e, i2, i1] = M[e, i1, i2]
        M[e, i3, i1] = M[e, i1, i3]
        M[e, i3, i2] = M[e, i2, i3]


_fill_local_nb = njit(_fill_local)


def element_frames(x1, x2):
    """Element lengths and local-to-global rotation matrices.

    Row ``k`` of ``R[e]`` is the k-th local axis in global coordinates. The
    local y axis is taken perpendicular to global z, or to global y for
    elements parallel to z.
    """
    d = np.asarray(x2, float) - np.asarray(x1, float)
    L = np.linalg.norm(d, axis=1)
    ex = d / np.where(L > 0, L, 1.0)[:, None]  # zero-length elements are rejected by callers
    ref = np.tile([0.0, 0.0, 1.0], (len(L), 1))
    vertical = np.abs(ex[:, 2]) > 0.99
    ref[vertical] = [0.0, 1.0, 0.0]
    ey = np.cross(ref, ex)
    n = np.linalg.norm(ey, axis=1)
    ey /= np.where(n > 0, n, 1.0)[:, None]
    ez = np.cross(ex, ey)
    return L, np.stack([ex, ey, ez], axis=1)


@njit
def _element_matrices_numba(L, R, E, G, rho, A, Iy, Iz, J, kappa):
    ne = L.shape[0]
    Kg = np.zeros((ne, 12, 12))
    Mg = np.zeros((ne, 12, 12))
    Kl = np.zeros((1, 12, 12))
    Ml = np.zeros((1, 12, 12))
    T = np.zeros((12, 12))
    for e in range(ne):
        Kl[:] = 0.0
        Ml[:] = 0.0
        _fill_local_nb(Kl, Ml, 0, L[e], E, G, rho, A, Iy, Iz, J, kappa)
        for b in range(4):
            for i in range(3):
                for j in range(3):
                    T[3 * b + i, 3 * b + j] = R[e, i, j]
        Kg[e] = T.T @ Kl[0] @ T
        Mg[e] = T.T @ Ml[0] @ T
    return Kg, Mg


def _element_matrices_numpy(L, R, E, G, rho, A, Iy, Iz, J, kappa):
    ne = L.shape[0]
    Kl = np.zeros((ne, 12, 12))
    Ml = np.zeros((ne, 12, 12))
    _fill_local(Kl, Ml, slice(None), L, E, G, rho, A, Iy, Iz, J, kappa)
    T = np.zeros((ne, 12, 12))
    for b in range(4):
        T[:, 3 * b:3 * b + 3, 3 * b:3 * b + 3] = R
    Tt = T.transpose(0, 2, 1)
    return Tt @ Kl @ T, Tt @ Ml @ T


def element_matrices(L, R, E, G, rho, A, Iy, Iz, J, kappa=5.0 / 6.0, use_numba=None):
    """Global-frame 12x12 stiffness and consistent mass of every element.

    Parameters
    ----------
    L : (ne,) array
        Element lengths.
    R : (ne, 3, 3) array
        Local-to-global rotations (rows are local axes).
    E, G, rho : float
        Young's modulus, shear modulus, density.
    A, Iy, Iz, J : float
        Section area, second moments about local y and z, torsion constant.
    kappa : float
        Shear correction factor.

    Returns
    -------
    K, M : (ne, 12, 12) arrays
    """
    use_numba = USE_NUMBA if use_numba is None else use_numba
    L = np.ascontiguousarray(L, dtype=float)
    R = np.ascontiguousarray(R, dtype=float)
    args = (float(E), float(G), float(rho), float(A), float(Iy), float(Iz), float(J), float(kappa))
    if use_numba:
        return _element_matrices_numba(L, R, *args)
    return _element_matrices_numpy(L, R, *args)


# ---------------------------------------------------------------------------
# Batched sparse Bayesian regression
# ---------------------------------------------------------------------------

@njit
def _sbr_batch_numba(X, T, alpha0, sigma2_0, max_iter, tol, alpha_max, floor,
                     update, prune):
    nb, K = T.shape
    nf = X.shape[1]
    XtX = X.T @ X
    mu = np.zeros((nb, nf))
    Sig = np.zeros((nb, nf, nf))
    alpha = np.empty((nb, nf))
    gamma = np.zeros((nb, nf))
    sigma2 = np.empty(nb)
    active = np.ones((nb, nf), dtype=np.bool_)
    n_iter = np.zeros(nb, dtype=np.int64)
    for b in range(nb):
        t = T[b]
        Xtt = X.T @ t
        a = np.full(nf, alpha0)
        s2 = sigma2_0
        act = np.ones(nf, dtype=np.bool_)
        upd = update
        it = 0
        while True:
            idx = np.nonzero(act)[0]
            na = idx.shape[0]
            Am = np.empty((na, na))
            for i in range(na):
                for j in range(na):
                    Am[i, j] = XtX[idx[i], idx[j]] / s2
                Am[i, i] += a[idx[i]]
            S = np.linalg.inv(Am)
            S = 0.5 * (S + S.T)
            m = np.zeros(na)
            for i in range(na):
                acc = 0.0
                for j in range(na):
                    acc += S[i, j] * Xtt[idx[j]]
                m[i] = acc / s2
            if not upd or it >= max_iter:
                break
            it += 1
            g = np.empty(na)
            for i in range(na):
                g[i] = 1.0 - a[idx[i]] * S[i, i]
            resid = t.copy()
            for i in range(na):
                resid -= X[:, idx[i]] * m[i]
            dof = K - g.sum()
            if dof < 1.0:
                dof = 1.0
            s2_new = (resid @ resid) / dof
            if s2_new < floor:
                s2_new = floor
            change = 0.0
            for i in range(na):
                k = idx[i]
                if m[i] == 0.0:
                    a_new = np.inf
                else:
                    a_new = g[i] / (m[i] * m[i])
                    if a_new < 0.0:
                        a_new = 0.0
                if np.isfinite(a_new) and a[k] > 0.0:
                    rel = abs(a_new - a[k]) / a[k]
                    if a_new < alpha_max and rel > change:
                        change = rel
                a[k] = a_new
                if prune and not (a_new < alpha_max):
                    act[k] = False
            s2 = s2_new
            if not act.any():
                # nothing relevant left: keep the constant term only
                act[0] = True
                a[0] = alpha0
                upd = False
                continue
            if change < tol:
                upd = False
        mu[b, idx] = m
        for i in range(na):
            gamma[b, idx[i]] = 1.0 - a[idx[i]] * S[i, i]
            for j in range(na):
                Sig[b, idx[i], idx[j]] = S[i, j]
        alpha[b] = a
        sigma2[b] = s2
        active[b] = act
        n_iter[b] = it
    return mu, Sig, alpha, gamma, sigma2, active, n_iter


def _sbr_batch_numpy(X, T, alpha0, sigma2_0, max_iter, tol, alpha_max, floor,
                     update, prune):
    nb, K = T.shape
    nf = X.shape[1]
    XtX = X.T @ X
    Xtt = T @ X  # (nb, nf)
    alpha = np.full((nb, nf), alpha0)
    sigma2 = np.full(nb, sigma2_0)
    active = np.ones((nb, nf), dtype=bool)
    running = np.full(nb, bool(update))
    n_iter = np.zeros(nb, dtype=np.int64)
    eye = np.eye(nf)

    def posterior(alpha, sigma2, active, Xtt):
        pair = active[:, :, None] & active[:, None, :]
        Am = XtX[None] / sigma2[:, None, None] + alpha[:, :, None] * eye
        Am = np.where(pair, Am, eye)  # inactive rows/cols -> identity block
        S = np.linalg.inv(Am)
        S = 0.5 * (S + S.transpose(0, 2, 1))
        S = np.where(pair, S, 0.0)
        m = np.einsum("bij,bj->bi", S, np.where(active, Xtt, 0.0)) / sigma2[:, None]
        return m, S

    mu, S = posterior(alpha, sigma2, active, Xtt)
    while running.any():
        rows = np.nonzero(running)[0]
        a = alpha[rows]
        act = active[rows]
        m = mu[rows]
        g = np.where(act, 1.0 - a * np.diagonal(S[rows], axis1=1, axis2=2), 0.0)
        resid = T[rows] - m @ X.T
        dof = np.maximum(K - g.sum(axis=1), 1.0)
        s2_new = np.maximum(np.einsum("bk,bk->b", resid, resid) / dof, floor)
        with np.errstate(divide="ignore", invalid="ignore"):
            a_new = np.where(m == 0.0, np.inf, np.maximum(g / (m * m), 0.0))
            rel = np.abs(a_new - a) / a
        counted = act & np.isfinite(a_new) & (a > 0.0) & (a_new < alpha_max)
        change = np.where(counted, rel, 0.0).max(axis=1)
        a = np.where(act, a_new, a)
        if prune:
            act = act & (a < alpha_max)
        n_iter[rows] += 1
        empty = ~act.any(axis=1)
        act[empty, 0] = True
        a[empty, 0] = alpha0
        alpha[rows] = a
        active[rows] = act
        sigma2[rows] = s2_new
        done = empty | (change < tol) | (n_iter[rows] >= max_iter)
        m_new, S_new = posterior(a, s2_new, act, Xtt[rows])
        mu[rows] = m_new
        S[rows] = S_new
        running[rows[done]] = False
    gamma = np.where(active, 1.0 - alpha * np.diagonal(S, axis1=1, axis2=2), 0.0)
    return mu, S, alpha, gamma, sigma2, active, n_iter


def sbr_batch(X, T, alpha0=1e-2, sigma2_0=0.1, max_iter=200, tol=1e-4,
              alpha_max=1e9, floor=1e-12, update=True, prune=True, use_numba=None):
    """Fit one sparse Bayesian regression per row of ``T`` on a shared design.

    Parameters
    ----------
    X : (K, nf) array
        Design matrix shared by every target.
    T : (nb, K) array
        One target vector per row.

    Returns
    -------
    mu, Sigma, alpha, gamma, sigma2, active, n_iter
        Posterior means ``(nb, nf)``, covariances ``(nb, nf, nf)`` (zero
        outside the active block), precisions, well-determinedness factors,
        noise variances ``(nb,)``, active masks and sweep counts.
    """
    use_numba = USE_NUMBA if use_numba is None else use_numba
    X = np.ascontiguousarray(X, dtype=float)
    T = np.ascontiguousarray(np.atleast_2d(T), dtype=float)
    args = (float(alpha0), float(sigma2_0), int(max_iter), float(tol),
            float(alpha_max), float(floor), bool(update), bool(prune))
    if use_numba:
        return _sbr_batch_numba(X, T, *args)
    return _sbr_batch_numpy(X, T, *args)
