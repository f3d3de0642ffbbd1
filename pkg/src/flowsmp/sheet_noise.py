"""Truncated Brownian sheet on [0, T] x R.

The sheet is represented through an orthonormal basis ``e_k`` of L2(R) and
independent Wiener processes ``w_k``: a space-time integrand ``f(t, r)``
contributes ``sum_k int g_k(t) dw_k(t)`` with ``g_k(t) = int f(t, r) e_k(r) dr``.
Only the first ``K`` modes are kept.
"""

from __future__ import annotations

import enum
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

__all__ = [
    "BasisKind",
    "BasisSet",
    "TimeGrid",
    "SheetPath",
    "GaussianBump",
    "make_basis",
    "sample_sheet",
    "sample_increments",
    "coarsen_increments",
    "project_loading",
    "captured_fraction",
    "ito_integral",
    "ito_integrals",
    "dump_sheet",
    "load_sheet",
]

SHEET_MAGIC = b"SHT1"
_MASK64 = (1 << 64) - 1
_trapezoid = getattr(np, "trapezoid", None) or np.trapz  # renamed in numpy 2


class BasisKind(str, enum.Enum):
    HERMITE = "hermite"


def hermite_functions(r, K):
    """Orthonormal Hermite functions ``psi_0..psi_{K-1}`` at ``r``; shape ``r.shape + (K,)``."""
    r = np.asarray(r, dtype=float)
    out = np.empty(r.shape + (K,))
    out[..., 0] = np.pi ** -0.25 * np.exp(-0.5 * r * r)
    if K > 1:
        out[..., 1] = np.sqrt(2.0) * r * out[..., 0]
    for k in range(1, K - 1):
        out[..., k + 1] = (
            np.sqrt(2.0 / (k + 1)) * r * out[..., k] - np.sqrt(k / (k + 1.0)) * out[..., k - 1]
        )
    return out


@dataclass(frozen=True, eq=False)
class BasisSet:
    """First ``K`` functions of an orthonormal basis with a quadrature rule for ``dr``.

    ``e_k(r) = scale**-0.5 * psi_k(r / scale)``.  The quadrature is
    Gauss-Hermite with ``4K`` nodes, reweighted so that
    ``sum(weights * F(nodes))`` approximates ``int F(r) dr``.
    """

    kind: BasisKind
    K: int
    scale: float
    nodes: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        return hermite_functions(r / self.scale, self.K) / np.sqrt(self.scale)

    @property
    def support(self):
        return float(np.max(np.abs(self.nodes)))

    def integrate(self, values):
        """Quadrature of samples taken at :attr:`nodes` (last axis)."""
        return values @ self.weights

    def gram(self):
        E = self(self.nodes)
        return (E * self.weights[:, None]).T @ E

    def synthesize(self, coeffs, r):
        """Evaluate ``sum_k coeffs[..., k] e_k(r)``; returns ``coeffs.shape[:-1] + r.shape``."""
        E = self(r)
        return np.tensordot(coeffs, E, axes=([-1], [-1]))


def make_basis(kind="hermite", K=16, scale=1.0):
    kind = BasisKind(kind)
    if int(K) != K or K < 1:
        raise ValueError(f"basis size K must be a positive integer, got {K!r}")
    if not scale > 0:
        raise ValueError(f"basis scale must be positive, got {scale!r}")
    K = int(K)
    x, w = np.polynomial.hermite.hermgauss(4 * K)
    # weight e^{-x^2} folded back in so the rule integrates plain functions
    weights = scale * np.exp(np.log(w) + x * x)
    return BasisSet(kind, K, float(scale), scale * x, weights)


@dataclass(frozen=True)
class TimeGrid:
    T: float
    M: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"horizon T must be positive, got {self.T!r}")
        if int(self.M) != self.M or self.M < 1:
            raise ValueError(f"step count M must be a positive integer, got {self.M!r}")
        object.__setattr__(self, "M", int(self.M))
        object.__setattr__(self, "T", float(self.T))

    @property
    def dt(self):
        return self.T / self.M

    @property
    def nodes(self):
        return np.arange(self.M + 1) * self.dt

    def refine(self):
        return TimeGrid(self.T, 2 * self.M)


@dataclass(frozen=True, eq=False)
class SheetPath:
    """One realisation of the mode increments ``dw_k(t_j)``, shape ``(K, M)``."""

    increments: np.ndarray
    seed: int | None
    grid: TimeGrid
    path: int = 0

    def __post_init__(self):
        self.increments.setflags(write=False)

    @property
    def K(self):
        return self.increments.shape[0]


def _generator(seed, path):
    key = ((int(seed) & _MASK64) << 64) | (int(path) & _MASK64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_increments(grid, K, seed, paths=1, start=0):
    """Increments for paths ``start .. start+paths-1``; shape ``(paths, K, M)``.

    Each path owns a counter-based Philox stream keyed by ``(seed, path)`` and
    draws its ``K x M`` block mode-major, so any path is reproducible on its
    own and batching never changes the numbers.
    """
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    out = np.empty((paths, K, grid.M))
    sd = np.sqrt(grid.dt)
    for p in range(paths):
        out[p] = _generator(seed, start + p).standard_normal((K, grid.M)) * sd
    return out


def sample_sheet(grid, K, seed, path=0):
    return SheetPath(sample_increments(grid, K, seed, 1, path)[0], seed, grid, path)


def coarsen_increments(noise):
    """Sum consecutive pairs of steps (last axis), keeping the same realisation on a grid twice as coarse."""
    M = noise.shape[-1]
    if M % 2:
        raise ValueError("cannot coarsen an odd number of steps")
    return noise[..., 0::2] + noise[..., 1::2]


@dataclass(frozen=True)
class GaussianBump:
    """``amplitude * exp(-((r - center) / width)**2)`` - has a closed-form Hermite projection."""

    center: float = 0.0
    width: float = 1.0
    amplitude: float = 1.0

    def __call__(self, r):
        z = (np.asarray(r, dtype=float) - self.center) / self.width
        return self.amplitude * np.exp(-z * z)

    def norm_sq(self):
        return self.amplitude ** 2 * self.width * np.sqrt(np.pi / 2.0)


def bump_coefficients(center, basis, width=1.0, amplitude=1.0, extra=0):
    """Loadings of Gaussian bumps centred at ``center`` (any shape); ``K + extra`` modes."""
    a = basis.scale ** 2 / width ** 2
    c = np.asarray(center, dtype=float) / basis.scale
    return amplitude * np.sqrt(basis.scale) * kernels.bump_loadings(c, a, basis.K + extra)


def project_loading(f, basis):
    """Coefficients ``g_k = int f(r) e_k(r) dr`` for ``k < K``."""
    if isinstance(f, GaussianBump) and basis.kind is BasisKind.HERMITE:
        g = bump_coefficients(f.center, basis, f.width, f.amplitude)
    else:
        vals = np.asarray(f(basis.nodes), dtype=float)
        g = (basis(basis.nodes) * (vals * basis.weights)[:, None]).sum(axis=0)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite loading from quadrature")
    return g


def captured_fraction(f, basis, *, warn_below=None):
    """Share of ``int f^2 dr`` kept by the first ``K`` modes."""
    g = project_loading(f, basis)
    if isinstance(f, GaussianBump):
        total = f.norm_sq()
    else:
        # wide uniform grid; independent of the basis quadrature
        lo = -12.0 * max(basis.scale, 1.0) - 20.0
        r = np.linspace(lo, -lo, 40001)
        total = _trapezoid(np.asarray(f(r), dtype=float) ** 2, r)
    frac = float(g @ g / total) if total > 0 else 1.0
    if warn_below is not None and frac < warn_below:
        warnings.warn(
            f"spatial profile under-resolved: {frac:.4f} of its L2 mass captured by K={basis.K} modes",
            RuntimeWarning,
            stacklevel=2,
        )
    return frac


def ito_integral(loadings, sheet):
    """``sum_j sum_k g_k(t_j) dw_k(t_j)`` for a ``(K, M)`` loading table."""
    g = np.asarray(loadings, dtype=float)
    inc = sheet.increments if isinstance(sheet, SheetPath) else np.asarray(sheet)
    if g.shape != inc.shape:
        raise ValueError(f"loading shape {g.shape} does not match sheet shape {inc.shape}")
    return float(np.sum(g * inc))


def ito_integrals(loadings, noise, upto=None):
    """Batched integrals over paths: ``noise`` is ``(P, K, M)``.

    With ``upto`` the running integral at every node is returned, shape ``(P, M+1)``.
    """
    g = np.asarray(loadings, dtype=float)
    if g.shape != noise.shape[1:]:
        raise ValueError(f"loading shape {g.shape} does not match noise shape {noise.shape[1:]}")
    per_step = np.einsum("km,pkm->pm", g, noise)
    if upto is None:
        return per_step.sum(axis=1)
    out = np.zeros((noise.shape[0], noise.shape[2] + 1))
    np.cumsum(per_step, axis=1, out=out[:, 1:])
    return out


def dump_sheet(sheet, path):
    inc = np.ascontiguousarray(sheet.increments, dtype="<f8")
    K, M = inc.shape
    with open(path, "wb") as fh:
        fh.write(SHEET_MAGIC)
        fh.write(struct.pack("<QQd", K, M, sheet.grid.T))
        fh.write(inc.tobytes(order="C"))


def load_sheet(path):
    data = Path(path).read_bytes()
    if data[:4] != SHEET_MAGIC:
        raise ValueError(f"{path}: not a sheet dump (bad magic)")
    K, M, T = struct.unpack_from("<QQd", data, 4)
    body = np.frombuffer(data, dtype="<f8", offset=4 + 24)
    if body.size != K * M:
        raise ValueError(f"{path}: expected {K * M} increments, found {body.size}")
    return SheetPath(body.reshape(K, M).astype(float), None, TimeGrid(T, M))
