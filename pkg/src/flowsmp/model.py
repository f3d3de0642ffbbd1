"""Coefficient families for the controlled flow with interaction.

A coefficient set describes

* the drift ``b(t, x, mu, alpha)``,
* the noise loadings ``g_k(t, x, mu, alpha)``, i.e. the basis coefficients
  of the spatial noise intensity ``sigma(t, x, mu, alpha, r)``,
* the running cost ``f(t, mu, alpha)`` and the terminal cost ``g(mu)``,

together with every partial derivative the maximum principle needs.

Array conventions (``P`` paths, ``m`` evaluation points, ``n`` atoms, ``K`` modes):
``x`` is ``(P, m)``, the measure is given by ``atoms`` ``(P, n)`` with fixed
``weights`` ``(n,)``, and the control ``alpha`` is ``(P,)``.  Lions
derivatives are returned evaluated at the atoms: ``drift_mu`` has shape
``(P, m, n)`` with entry ``[p, i, l] = b_mu(x_i, mu)(atom_l)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .measure_kit import DiscreteMeasure, w2
from .sheet_noise import BasisSet, GaussianBump, bump_coefficients, project_loading

__all__ = [
    "CoefficientSet",
    "FactoredCoefficients",
    "LqParams",
    "LqCoefficients",
    "KernelCoefficients",
    "ZeroCoefficients",
    "TerminalKind",
    "PhiKind",
    "LipschitzEstimate",
    "lq_coefficients",
    "kernel_coefficients",
    "lipschitz_probe",
]


class TerminalKind(str, enum.Enum):
    TARGET_RHO = "target_rho"
    SELF_SPREAD = "self_spread"


class PhiKind(str, enum.Enum):
    GAUSSIAN = "gaussian"  # exp(-r^2)
    UNIT = "unit"  # exp(-r^2) rescaled to unit L2 norm
    MODE = "mode"  # the first basis function itself


def _mean(atoms, weights):
    return kernels.weighted_sum(atoms, weights)


def _terminal_value(kind, atoms, weights, target_mean):
    xbar = _mean(atoms, weights)
    if kind is TerminalKind.TARGET_RHO:
        return 2.0 * (xbar - target_mean) ** 2
    dev = atoms - xbar[:, None]
    return 2.0 * kernels.weighted_sum(dev * dev, weights)


def _terminal_grad(kind, atoms, weights, target_mean):
    xbar = _mean(atoms, weights)
    if kind is TerminalKind.TARGET_RHO:
        return np.repeat((4.0 * (xbar - target_mean))[:, None], atoms.shape[1], axis=1)
    return 4.0 * (atoms - xbar[:, None])


class CoefficientSet:
    """Base class.  Subclasses implement the primitive evaluations.

    The ``*_mu_apply`` / ``*_mu_adjoint`` helpers contract the Lions
    derivative against a per-atom field; the defaults go through the dense
    ``(P, m, n)`` arrays and families may override them with cheaper forms.
    """

    name = "abstract"
    #: True when the drift/loadings are affine in (x, mean, alpha) with the
    #: loadings factored through a fixed profile (enables the fused kernel)
    affine = False

    # --- dynamics ------------------------------------------------------
    def drift(self, t, x, atoms, w, alpha):
        raise NotImplementedError

    def drift_x(self, t, x, atoms, w, alpha):
        raise NotImplementedError

    def drift_alpha(self, t, x, atoms, w, alpha):
        raise NotImplementedError

    def drift_mu(self, t, x, atoms, w, alpha):
        raise NotImplementedError

    def loadings(self, t, x, atoms, w, alpha, basis):
        raise NotImplementedError

    def loadings_x(self, t, x, atoms, w, alpha, basis):
        raise NotImplementedError

    def loadings_alpha(self, t, x, atoms, w, alpha, basis):
        raise NotImplementedError

    def loadings_mu(self, t, x, atoms, w, alpha, basis):
        raise NotImplementedError

    # --- costs -------------------------------------------------------
    def running(self, t, atoms, w, alpha):
        raise NotImplementedError

    def running_alpha(self, t, atoms, w, alpha):
        raise NotImplementedError

    def running_mu(self, t, atoms, w, alpha):
        raise NotImplementedError

    def terminal(self, atoms, w):
        raise NotImplementedError

    def terminal_mu(self, atoms, w):
        raise NotImplementedError

    @property
    def control_weight(self):
        """Curvature of the running cost in the control (used to normalise residuals)."""
        return 1.0

    # --- contractions with Lions derivatives -------------------------
    def drift_mu_apply(self, t, atoms, w, alpha, field):
        """``sum_l w_l b_mu(x_i)(x_l) field_l`` at every atom ``i``."""
        bm = self.drift_mu(t, atoms, atoms, w, alpha)
        return kernels.weighted_sum(bm * field[:, None, :], w)

    def drift_mu_adjoint(self, t, atoms, w, alpha, field):
        """``sum_i w_i b_mu(x_i)(x_l) field_i`` at every atom ``l`` (roles swapped)."""
        bm = self.drift_mu(t, atoms, atoms, w, alpha)
        return kernels.weighted_sum(np.swapaxes(bm, 1, 2) * field[:, None, :], w)

    def loadings_mu_apply(self, t, atoms, w, alpha, field, basis):
        gm = self.loadings_mu(t, atoms, atoms, w, alpha, basis)  # (P, n, n, K)
        return kernels.weighted_sum(np.moveaxis(gm * field[:, None, :, None], 2, -1), w)

    def loadings_mu_adjoint(self, t, atoms, w, alpha, q, basis):
        """``sum_i w_i sum_k g_mu,k(x_i)(x_l) q_ik`` at every atom ``l``."""
        gm = self.loadings_mu(t, atoms, atoms, w, alpha, basis)
        paired = _sum_modes(gm * q[:, :, None, :])  # (P, n_i, n_l)
        return kernels.weighted_sum(np.swapaxes(paired, 1, 2), w)

    # --- misc --------------------------------------------------------
    def diffusion(self, t, x, atoms, w, alpha, basis, dw):
        """``sum_k g_k dw_k`` with ``dw`` of shape ``(P, K)``; modes summed in order."""
        return _sum_modes(self.loadings(t, x, atoms, w, alpha, basis) * dw[:, None, :])

    def declared_lipschitz(self, basis):
        return math.inf


def _sum_modes(arr):
    out = arr[..., 0]
    for k in range(1, arr.shape[-1]):
        out = out + arr[..., k]
    return out


class FactoredCoefficients(CoefficientSet):
    """``sigma(t, x, mu, alpha, r) = phi(t, r) * s(t, x, mu, alpha)``.

    The profile is projected once per basis (it does not depend on time in
    the built-in families) and every loading is a scalar multiple of it.
    """

    def profile(self):
        raise NotImplementedError

    def phi_loadings(self, basis):
        cache = self.__dict__.setdefault("_phi_cache", {})
        key = id(basis)
        if key not in cache:
            cache[key] = (basis, _project_profile(self.profile(), basis))
        return cache[key][1]

    def scale(self, t, x, atoms, w, alpha):
        raise NotImplementedError

    def scale_x(self, t, x, atoms, w, alpha):
        raise NotImplementedError

    def scale_alpha(self, t, x, atoms, w, alpha):
        raise NotImplementedError

    def scale_mu(self, t, x, atoms, w, alpha):
        raise NotImplementedError

    def loadings(self, t, x, atoms, w, alpha, basis):
        return self.scale(t, x, atoms, w, alpha)[..., None] * self.phi_loadings(basis)

    def loadings_x(self, t, x, atoms, w, alpha, basis):
        return self.scale_x(t, x, atoms, w, alpha)[..., None] * self.phi_loadings(basis)

    def loadings_alpha(self, t, x, atoms, w, alpha, basis):
        return self.scale_alpha(t, x, atoms, w, alpha)[..., None] * self.phi_loadings(basis)

    def loadings_mu(self, t, x, atoms, w, alpha, basis):
        return self.scale_mu(t, x, atoms, w, alpha)[..., None] * self.phi_loadings(basis)


def _project_profile(profile, basis):
    if profile == "mode":
        g = np.zeros(basis.K)
        g[0] = 1.0
        return g
    return project_loading(profile, basis)


# ----------------------------------------------------------------------
# zero family (plumbing and trivial checks)
# ----------------------------------------------------------------------
class ZeroCoefficients(FactoredCoefficients):
    name = "zero"

    def profile(self):
        return "mode"

    def _z(self, x):
        return np.zeros(np.shape(x))

    def drift(self, t, x, atoms, w, alpha):
        return self._z(x)

    drift_x = drift_alpha = scale = scale_x = scale_alpha = drift

    def drift_mu(self, t, x, atoms, w, alpha):
        return np.zeros(np.shape(x) + (atoms.shape[-1],))

    scale_mu = drift_mu

    def running(self, t, atoms, w, alpha):
        return np.zeros(atoms.shape[0])

    running_alpha = running

    def running_mu(self, t, atoms, w, alpha):
        return self._z(atoms)

    def terminal(self, atoms, w):
        return np.zeros(atoms.shape[0])

    def terminal_mu(self, atoms, w):
        return self._z(atoms)

    def declared_lipschitz(self, basis):
        return 0.0


# ----------------------------------------------------------------------
# linear-quadratic family
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class LqParams:
    A: float = 0.0
    B: float = 0.0
    C: float = 0.0
    D: float = 0.0
    F: float = 0.0
    H: float = 0.0
    Q: float = 0.0
    S: float = 0.0
    R: float = 1.0
    phi_kind: PhiKind = PhiKind.GAUSSIAN
    nu: DiscreteMeasure = field(default_factory=lambda: DiscreteMeasure.dirac(0.0))
    terminal_kind: TerminalKind = TerminalKind.TARGET_RHO

    def __post_init__(self):
        for name in ("A", "B", "C", "D", "F", "H", "Q", "S", "R"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValueError(f"LQ parameter {name} must be finite, got {v!r}")
            object.__setattr__(self, name, float(v))
        if not self.R > 0:
            raise ValueError(f"LQ parameter R must be positive, got {self.R!r}")
        if self.Q < 0:
            raise ValueError(f"LQ parameter Q must be nonnegative, got {self.Q!r}")
        if self.S < 0:
            raise ValueError(f"LQ parameter S must be nonnegative, got {self.S!r}")
        object.__setattr__(self, "phi_kind", PhiKind(self.phi_kind))
        object.__setattr__(self, "terminal_kind", TerminalKind(self.terminal_kind))

    def replace(self, **kw):
        vals = {k: getattr(self, k) for k in self.__dataclass_fields__}
        vals.update(kw)
        return LqParams(**vals)


class LqCoefficients(FactoredCoefficients):
    """``b = Ax + B xbar + C alpha``, ``s = Dx + F xbar + H alpha``,
    ``f = (Q m2 + S xbar^2 + R alpha^2) / 2``."""

    name = "lq"
    affine = True

    def __init__(self, params: LqParams):
        self.p = params
        self.target_mean = params.nu.mean

    def profile(self):
        kind = self.p.phi_kind
        if kind is PhiKind.MODE:
            return "mode"
        bump = GaussianBump(0.0, 1.0, 1.0)
        if kind is PhiKind.UNIT:
            bump = GaussianBump(0.0, 1.0, 1.0 / math.sqrt(bump.norm_sq()))
        return bump

    @property
    def coef(self):
        p = self.p
        return np.array([p.A, p.B, p.C, p.D, p.F, p.H])

    def drift(self, t, x, atoms, w, alpha):
        p = self.p
        return p.A * x + (p.B * _mean(atoms, w) + p.C * alpha)[:, None]

    def drift_x(self, t, x, atoms, w, alpha):
        return np.full(np.shape(x), self.p.A)

    def drift_alpha(self, t, x, atoms, w, alpha):
        return np.full(np.shape(x), self.p.C)

    def drift_mu(self, t, x, atoms, w, alpha):
        return np.full(np.shape(x) + (atoms.shape[-1],), self.p.B)

    def scale(self, t, x, atoms, w, alpha):
        p = self.p
        return p.D * x + (p.F * _mean(atoms, w) + p.H * alpha)[:, None]

    def scale_x(self, t, x, atoms, w, alpha):
        return np.full(np.shape(x), self.p.D)

    def scale_alpha(self, t, x, atoms, w, alpha):
        return np.full(np.shape(x), self.p.H)

    def scale_mu(self, t, x, atoms, w, alpha):
        return np.full(np.shape(x) + (atoms.shape[-1],), self.p.F)

    # the Lions derivatives are constant, so every contraction is a mean
    def drift_mu_apply(self, t, atoms, w, alpha, field):
        return np.repeat((self.p.B * _mean(field, w))[:, None], atoms.shape[1], axis=1)

    drift_mu_adjoint = drift_mu_apply

    def loadings_mu_apply(self, t, atoms, w, alpha, field, basis):
        m = self.p.F * _mean(field, w)
        out = m[:, None, None] * self.phi_loadings(basis)
        return np.repeat(out, atoms.shape[1], axis=1)

    def loadings_mu_adjoint(self, t, atoms, w, alpha, q, basis):
        qbar = kernels.weighted_sum(np.swapaxes(q, 1, 2), w)  # (P, K)
        m = self.p.F * _sum_modes(qbar * self.phi_loadings(basis))
        return np.repeat(m[:, None], atoms.shape[1], axis=1)

    def running(self, t, atoms, w, alpha):
        p = self.p
        xbar = _mean(atoms, w)
        m2 = kernels.weighted_sum(atoms * atoms, w)
        return 0.5 * (p.Q * m2 + p.S * xbar * xbar + p.R * alpha * alpha)

    def running_alpha(self, t, atoms, w, alpha):
        return self.p.R * np.asarray(alpha, dtype=float)

    def running_mu(self, t, atoms, w, alpha):
        return self.p.Q * atoms + (self.p.S * _mean(atoms, w))[:, None]

    def terminal(self, atoms, w):
        return _terminal_value(self.p.terminal_kind, atoms, w, self.target_mean)

    def terminal_mu(self, atoms, w):
        return _terminal_grad(self.p.terminal_kind, atoms, w, self.target_mean)

    @property
    def control_weight(self):
        return self.p.R

    def declared_lipschitz(self, basis):
        p = self.p
        phi = float(np.linalg.norm(self.phi_loadings(basis)))
        return max(abs(p.A), abs(p.B), abs(p.C)) + phi * max(abs(p.D), abs(p.F), abs(p.H))


def lq_coefficients(params: LqParams) -> LqCoefficients:
    return LqCoefficients(params)


# ----------------------------------------------------------------------
# Gaussian-kernel interaction family
# ----------------------------------------------------------------------
class KernelCoefficients(CoefficientSet):
    """Drift ``int K(x - v) mu(dv) + c alpha`` with ``K(z) = exp(-z^2 / (2 width^2))``.

    The noise intensity is ``sigma * exp(-(x - r)^2)``: a bump that travels
    with the particle, so loadings are projected per particle (closed form,
    ``O(K)`` each) instead of once per step.
    """

    name = "kernel"

    def __init__(self, width=1.0, c=1.0, sigma=0.3, Q=0.0, R=1.0, nu=None,
                 terminal_kind=TerminalKind.TARGET_RHO):
        if not width > 0:
            raise ValueError(f"kernel width must be positive, got {width!r}")
        if not R > 0:
            raise ValueError(f"R must be positive, got {R!r}")
        self.width = float(width)
        self.c = float(c)
        self.sigma = float(sigma)
        self.Q = float(Q)
        self.R = float(R)
        self.nu = nu if nu is not None else DiscreteMeasure.dirac(0.0)
        self.target_mean = self.nu.mean
        self.terminal_kind = TerminalKind(terminal_kind)
        self.inv = 1.0 / (2.0 * self.width ** 2)

    def K(self, z):
        return np.exp(-z * z * self.inv)

    def dK(self, z):
        return -2.0 * self.inv * z * self.K(z)

    @property
    def sup_dK(self):
        return math.exp(-0.5) / self.width

    def drift(self, t, x, atoms, w, alpha):
        val, _ = kernels.gaussian_mix(x, atoms, w, self.inv)
        return val + (self.c * alpha)[:, None]

    def drift_x(self, t, x, atoms, w, alpha):
        return kernels.gaussian_mix(x, atoms, w, self.inv)[1]

    def drift_alpha(self, t, x, atoms, w, alpha):
        return np.full(np.shape(x), self.c)

    def drift_mu(self, t, x, atoms, w, alpha):
        return -self.dK(x[:, :, None] - atoms[:, None, :])

    def loadings(self, t, x, atoms, w, alpha, basis):
        return bump_coefficients(x, basis, 1.0, self.sigma)

    def loadings_x(self, t, x, atoms, w, alpha, basis):
        g = bump_coefficients(x, basis, 1.0, self.sigma, extra=1)
        K = basis.K
        k = np.arange(K)
        out = -np.sqrt((k + 1) / 2.0) * g[..., 1 : K + 1]
        out[..., 1:] += np.sqrt(k[1:] / 2.0) * g[..., : K - 1]
        return out / basis.scale

    def loadings_alpha(self, t, x, atoms, w, alpha, basis):
        return np.zeros(np.shape(x) + (basis.K,))

    def loadings_mu(self, t, x, atoms, w, alpha, basis):
        return np.zeros(np.shape(x) + (atoms.shape[-1], basis.K))

    def loadings_mu_apply(self, t, atoms, w, alpha, field, basis):
        return np.zeros(atoms.shape + (basis.K,))

    def loadings_mu_adjoint(self, t, atoms, w, alpha, q, basis):
        return np.zeros(atoms.shape)

    def running(self, t, atoms, w, alpha):
        m2 = kernels.weighted_sum(atoms * atoms, w)
        return 0.5 * (self.Q * m2 + self.R * alpha * alpha)

    def running_alpha(self, t, atoms, w, alpha):
        return self.R * np.asarray(alpha, dtype=float)

    def running_mu(self, t, atoms, w, alpha):
        return self.Q * atoms

    def terminal(self, atoms, w):
        return _terminal_value(self.terminal_kind, atoms, w, self.target_mean)

    def terminal_mu(self, atoms, w):
        return _terminal_grad(self.terminal_kind, atoms, w, self.target_mean)

    @property
    def control_weight(self):
        return self.R

    def declared_lipschitz(self, basis):
        return self.sup_dK + abs(self.c) + (math.pi / 2.0) ** 0.25 * abs(self.sigma)


def kernel_coefficients(width=1.0, c=1.0, **kw) -> KernelCoefficients:
    return KernelCoefficients(width=width, c=c, **kw)


# ----------------------------------------------------------------------
# sampled Lipschitz / growth probe
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class LipschitzEstimate:
    drift: float
    diffusion: float
    total: float
    growth: float


def lipschitz_probe(coeffs, basis, samples=200, seed=0, n_atoms=4, spread=2.0):
    """Largest sampled ratio ``|delta b| / (|dx| + W2(mu1, mu2) + |d alpha|)``.

    Pairs are drawn four ways: moving every slot at once, and moving only
    the state, only the measure (a random shift plus jitter of the atoms)
    or only the control.  The diffusion part uses the L2 norm of the loading
    difference (Parseval in the working basis).  ``growth`` is the largest
    ``(|b| + ||g||) / (1 + |x| + W2(mu, delta_0))`` seen, with controls
    drawn from ``[-1, 1]``.
    """
    if samples < 2:
        raise ValueError("need at least two samples")
    rng = np.random.default_rng(seed)
    w = np.full(n_atoms, 1.0 / n_atoms)
    S = samples
    x1 = rng.uniform(-spread, spread, (S, 1))
    a1 = rng.uniform(-spread, spread, (S, n_atoms))
    al1 = rng.uniform(-1.0, 1.0, S)
    mode = np.arange(S) % 4
    dx = rng.normal(0, 0.5, (S, 1)) * np.isin(mode, (0, 1))[:, None]
    shift = rng.normal(0, 0.5, (S, 1)) + rng.normal(0, 0.1, (S, n_atoms)) * (mode == 0)[:, None]
    da = shift * np.isin(mode, (0, 2))[:, None]
    dal = rng.normal(0, 0.5, S) * np.isin(mode, (0, 3))
    x2, a2, al2 = x1 + dx, a1 + da, al1 + dal

    def evals(x, a, al):
        b = coeffs.drift(0.0, x, a, w, al)[:, 0]
        g = coeffs.loadings(0.0, x, a, w, al, basis)[:, 0, :]
        return b, g

    b1, g1 = evals(x1, a1, al1)
    b2, g2 = evals(x2, a2, al2)
    dist = np.array(
        [
            abs(dx[s, 0]) + w2(DiscreteMeasure(a1[s], w), DiscreteMeasure(a2[s], w)) + abs(dal[s])
            for s in range(S)
        ]
    )
    ok = dist > 1e-12
    rb = np.abs(b1 - b2)[ok] / dist[ok]
    rg = np.linalg.norm(g1 - g2, axis=1)[ok] / dist[ok]
    size = 1.0 + np.abs(x1[:, 0]) + np.sqrt(np.mean(a1 * a1, axis=1))
    growth = (np.abs(b1) + np.linalg.norm(g1, axis=1)) / size
    return LipschitzEstimate(
        drift=float(rb.max(initial=0.0)),
        diffusion=float(rg.max(initial=0.0)),
        total=float((rb + rg).max(initial=0.0)),
        growth=float(growth.max()),
    )
