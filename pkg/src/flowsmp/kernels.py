"""Hot numeric kernels.

Every kernel exists twice: a vectorised numpy reference (``*_np``) and a
numba-compiled loop (``*_nb``).  The public name dispatches to one of them
according to :data:`flowsmp._backend.USE_NUMBA`.  Both versions keep the
per-path arithmetic identical in order, so results do not depend on how
paths are batched.
"""

import numpy as np

from ._backend import USE_NUMBA, njit

__all__ = [
    "BACKEND",
    "euler_affine",
    "gaussian_mix",
    "bump_loadings",
    "quantile_plan",
    "weighted_sum",
]


def weighted_sum(x, w):
    """Sequential sum ``w[0]*x[...,0] + w[1]*x[...,1] + ...`` over the last axis.

    Accumulated left to right so each path's result is independent of the
    batch shape (no blocked or pairwise reduction).
    """
    out = w[0] * x[..., 0]
    for i in range(1, x.shape[-1]):
        out = out + w[i] * x[..., i]
    return out


# ----------------------------------------------------------------------
# Euler scheme for the affine (linear-quadratic) heavy-point system
# ----------------------------------------------------------------------
def euler_affine_np(x0, w, coef, alpha, xi, dt):
    A, B, C, D, F, H = coef
    P, M = xi.shape
    n = x0.shape[0]
    states = np.empty((P, n, M + 1))
    x = np.broadcast_to(x0, (P, n)).copy()
    states[:, :, 0] = x
    for j in range(M):
        xbar = weighted_sum(x, w)
        a = alpha[:, j]
        drift = A * x + (B * xbar + C * a)[:, None]
        scale = D * x + (F * xbar + H * a)[:, None]
        x = x + drift * dt + scale * xi[:, j][:, None]
        states[:, :, j + 1] = x
    return states


@njit
def euler_affine_nb(x0, w, coef, alpha, xi, dt):
    A, B, C, D, F, H = coef[0], coef[1], coef[2], coef[3], coef[4], coef[5]
    P, M = xi.shape
    n = x0.shape[0]
    states = np.empty((P, n, M + 1))
    x = np.empty(n)
    for p in range(P):
        for i in range(n):
            x[i] = x0[i]
            states[p, i, 0] = x0[i]
        for j in range(M):
            xbar = w[0] * x[0]
            for i in range(1, n):
                xbar = xbar + w[i] * x[i]
            a = alpha[p, j]
            mb = B * xbar + C * a
            ms = F * xbar + H * a
            for i in range(n):
                drift = A * x[i] + mb
                scale = D * x[i] + ms
                x[i] = x[i] + drift * dt + scale * xi[p, j]
                states[p, i, j + 1] = x[i]
    return states


# ----------------------------------------------------------------------
# Gaussian interaction  sum_l w_l K(x_i - a_l),  K(z) = exp(-z^2 * inv)
# ----------------------------------------------------------------------
def gaussian_mix_np(x, atoms, w, inv):
    """Return ``(value, dvalue/dx)`` with shapes of ``x`` (P, m)."""
    val = np.zeros(x.shape)
    der = np.zeros(x.shape)
    for l in range(atoms.shape[-1]):
        d = x - atoms[:, l][:, None]
        k = np.exp(-d * d * inv)
        val = val + w[l] * k
        der = der + w[l] * (-2.0 * inv * d * k)
    return val, der


@njit
def gaussian_mix_nb(x, atoms, w, inv):
    P, m = x.shape
    n = atoms.shape[1]
    val = np.zeros((P, m))
    der = np.zeros((P, m))
    for p in range(P):
        for i in range(m):
            v = 0.0
            g = 0.0
            for l in range(n):
                d = x[p, i] - atoms[p, l]
                k = np.exp(-d * d * inv)
                v = v + w[l] * k
                g = g + w[l] * (-2.0 * inv * d * k)
            val[p, i] = v
            der[p, i] = g
    return val, der


# ----------------------------------------------------------------------
# Closed-form Hermite coefficients of a Gaussian bump
#   J_k(c) = int exp(-a (c - r)^2) psi_k(r) dr,  psi_k orthonormal Hermite
# ----------------------------------------------------------------------
def bump_loadings_np(c, a, K):
    c = np.asarray(c, dtype=float)
    out = np.empty(c.shape + (K,))
    A = a + 0.5
    out[..., 0] = np.pi ** -0.25 * np.sqrt(np.pi / A) * np.exp(-a * c * c / (2.0 * A))
    if K > 1:
        out[..., 1] = 2.0 * a * c * out[..., 0] / ((1.0 + 2.0 * a) * np.sqrt(0.5))
    for k in range(1, K - 1):
        out[..., k + 1] = (
            2.0 * a * c * out[..., k] + (1.0 - 2.0 * a) * np.sqrt(k / 2.0) * out[..., k - 1]
        ) / ((1.0 + 2.0 * a) * np.sqrt((k + 1) / 2.0))
    return out


@njit
def _bump_loadings_flat_nb(c, a, K):
    N = c.shape[0]
    out = np.empty((N, K))
    A = a + 0.5
    j0 = np.pi ** -0.25 * np.sqrt(np.pi / A)
    for p in range(N):
        out[p, 0] = j0 * np.exp(-a * c[p] * c[p] / (2.0 * A))
        if K > 1:
            out[p, 1] = 2.0 * a * c[p] * out[p, 0] / ((1.0 + 2.0 * a) * np.sqrt(0.5))
        for k in range(1, K - 1):
            out[p, k + 1] = (
                2.0 * a * c[p] * out[p, k] + (1.0 - 2.0 * a) * np.sqrt(k / 2.0) * out[p, k - 1]
            ) / ((1.0 + 2.0 * a) * np.sqrt((k + 1) / 2.0))
    return out


def bump_loadings_nb(c, a, K):
    c = np.asarray(c, dtype=float)
    flat = _bump_loadings_flat_nb(np.ascontiguousarray(c.reshape(-1)), float(a), int(K))
    return flat.reshape(c.shape + (K,))


# ----------------------------------------------------------------------
# Monotone (quantile) coupling of two sorted 1-D discrete measures
# ----------------------------------------------------------------------
def quantile_plan_np(wa, wb):
    """Transport plan of the monotone coupling as ``(i, j, mass)`` triplets.

    ``wa`` and ``wb`` are the weights of the two measures with atoms already
    sorted.  Mass is split at the union of cumulative-weight breakpoints.
    """
    ca = np.cumsum(wa)
    cb = np.cumsum(wb)
    ca[-1] = cb[-1] = 1.0
    brk = np.union1d(ca, cb)
    lo = np.concatenate(([0.0], brk[:-1]))
    mass = brk - lo
    keep = mass > 0.0
    lo, brk, mass = lo[keep], brk[keep], mass[keep]
    mid = 0.5 * (lo + brk)
    i = np.minimum(np.searchsorted(ca, mid), len(wa) - 1)
    j = np.minimum(np.searchsorted(cb, mid), len(wb) - 1)
    return i.astype(np.int64), j.astype(np.int64), mass


@njit
def quantile_plan_nb(wa, wb):
    n = wa.shape[0]
    m = wb.shape[0]
    ii = np.empty(n + m, dtype=np.int64)
    jj = np.empty(n + m, dtype=np.int64)
    mass = np.empty(n + m)
    ra = wa[0]
    rb = wb[0]
    i = 0
    j = 0
    k = 0
    while i < n and j < m:
        step = ra if ra < rb else rb
        if step > 0.0:
            ii[k] = i
            jj[k] = j
            mass[k] = step
            k += 1
        ra -= step
        rb -= step
        if ra <= 1e-15 and i < n:
            i += 1
            if i < n:
                ra = wa[i]
        if rb <= 1e-15 and j < m:
            j += 1
            if j < m:
                rb = wb[j]
    return ii[:k], jj[:k], mass[:k]


if USE_NUMBA:
    BACKEND = "numba"
    euler_affine = euler_affine_nb
    gaussian_mix = gaussian_mix_nb
    bump_loadings = bump_loadings_nb
    quantile_plan = quantile_plan_nb
else:
    BACKEND = "numpy"
    euler_affine = euler_affine_np
    gaussian_mix = gaussian_mix_np
    bump_loadings = bump_loadings_np
    quantile_plan = quantile_plan_np
