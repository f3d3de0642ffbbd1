"""Discrete measures on the line, transport distances and Lions derivatives.

Measures keep atom identity: atom ``i`` of a pushforward is the image of
atom ``i`` of the source, even when two images coincide.  Equality *as
measures* is the separate predicate :meth:`DiscreteMeasure.same_law`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels

__all__ = [
    "DiscreteMeasure",
    "Coupling",
    "pushforward",
    "w2",
    "w2_coupling",
    "rho_sq",
    "quadratic_kernel",
    "rho_grad_quadratic",
    "self_spread",
    "rho_grad_self",
    "lions_fd",
    "lions_pairing",
    "read_measure_csv",
    "write_measure_csv",
]

WEIGHT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        a = np.array(self.atoms, dtype=float).reshape(-1)
        w = np.array(self.weights, dtype=float).reshape(-1)
        if a.size < 1:
            raise ValueError("a measure needs at least one atom")
        if a.shape != w.shape:
            raise ValueError(f"{a.size} atoms but {w.size} weights")
        if not np.all(np.isfinite(a)):
            raise ValueError("atoms must be finite")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        if abs(math.fsum(w) - 1.0) > WEIGHT_TOL:
            raise ValueError(f"weights sum to {math.fsum(w)!r}, not 1")
        a.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "atoms", a)
        object.__setattr__(self, "weights", w)

    @classmethod
    def dirac(cls, x):
        return cls([x], [1.0])

    @classmethod
    def uniform(cls, atoms):
        atoms = np.asarray(atoms, dtype=float)
        return cls(atoms, np.full(atoms.size, 1.0 / atoms.size))

    def __len__(self):
        return self.atoms.size

    # moments accumulate left to right, the same arithmetic the flow uses for
    # its per-path empirical measures, so both bookkeepings agree bit for bit
    @property
    def mean(self):
        return float(kernels.weighted_sum(self.atoms, self.weights))

    @property
    def second_moment(self):
        return float(kernels.weighted_sum(self.atoms * self.atoms, self.weights))

    @property
    def variance(self):
        m = self.mean
        return math.fsum(self.weights * (self.atoms - m) ** 2)

    def with_atoms(self, atoms):
        return DiscreteMeasure(atoms, self.weights)

    def canonical(self):
        """Sorted distinct atoms with merged weights, dropping zero mass."""
        keep = self.weights > 0
        a, w = self.atoms[keep], self.weights[keep]
        uniq, inv = np.unique(a, return_inverse=True)
        merged = np.zeros(uniq.size)
        np.add.at(merged, inv, w)
        return uniq, merged

    def same_law(self, other, tol=1e-12):
        a1, w1 = self.canonical()
        a2, w2_ = other.canonical()
        return a1.shape == a2.shape and np.allclose(a1, a2, atol=tol, rtol=0) and np.allclose(
            w1, w2_, atol=tol, rtol=0
        )


@dataclass(frozen=True, eq=False)
class Coupling:
    """Joint weights ``plan[i, j]`` between the atoms of ``source`` and ``target``."""

    source: DiscreteMeasure
    target: DiscreteMeasure
    plan: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.plan, dtype=float)
        if P.shape != (len(self.source), len(self.target)):
            raise ValueError("plan shape does not match the marginals")
        if np.any(P < 0):
            raise ValueError("plan entries must be nonnegative")
        if not (
            np.allclose(P.sum(axis=1), self.source.weights, atol=1e-10, rtol=0)
            and np.allclose(P.sum(axis=0), self.target.weights, atol=1e-10, rtol=0)
        ):
            raise ValueError("plan marginals do not reproduce the measures")
        object.__setattr__(self, "plan", P)

    def cost(self):
        d = self.source.atoms[:, None] - self.target.atoms[None, :]
        return math.fsum((self.plan * d * d).ravel())


def pushforward(mu, fn):
    """Image of ``mu`` under ``fn`` with atom identity kept (no merging)."""
    img = np.asarray(fn(mu.atoms), dtype=float)
    if img.shape != mu.atoms.shape:
        img = np.array([float(fn(x)) for x in mu.atoms])
    if not np.all(np.isfinite(img)):
        bad = int(np.flatnonzero(~np.isfinite(img))[0])
        raise ValueError(f"map is not finite at atom {bad} (x={mu.atoms[bad]!r})")
    return DiscreteMeasure(img, mu.weights)


def _sorted_plan(mu, nu):
    ia = np.argsort(mu.atoms, kind="stable")
    ib = np.argsort(nu.atoms, kind="stable")
    i, j, mass = kernels.quantile_plan(
        np.ascontiguousarray(mu.weights[ia]), np.ascontiguousarray(nu.weights[ib])
    )
    return ia[i], ib[j], mass


def w2_coupling(mu, nu):
    """The monotone coupling, optimal for quadratic cost on the line."""
    i, j, mass = _sorted_plan(mu, nu)
    plan = np.zeros((len(mu), len(nu)))
    np.add.at(plan, (i, j), mass)
    return Coupling(mu, nu, plan)


def w2(mu, nu):
    if len(mu) == len(nu) and np.array_equal(mu.weights, nu.weights) and np.all(
        mu.weights == mu.weights[0]
    ):
        # equal weights: the sorted matching is a permutation; sum costs the same
        # way an assignment enumeration would, so results agree to the last bit
        a = np.sort(mu.atoms)
        b = np.sort(nu.atoms)
        cost = math.fsum(((a - b) ** 2).tolist()) * mu.weights[0]
        return math.sqrt(cost)
    i, j, mass = _sorted_plan(mu, nu)
    d = mu.atoms[i] - nu.atoms[j]
    return math.sqrt(max(math.fsum((mass * d * d).tolist()), 0.0))


def quadratic_kernel(z):
    return z * z


def rho_sq(mu, nu, gamma=quadratic_kernel):
    """``int int gamma(u - v) (mu - nu)(du) (nu - mu)(dv)`` up to sign convention.

    With the signed measure ``s = mu - nu`` this is ``-int int gamma(u-v) s(du) s(dv)``;
    for a conditionally negative definite ``gamma`` such as ``z**2`` the value
    is nonnegative.  Summed over the atom pairs of the joint support.
    """
    atoms = np.concatenate([mu.atoms, nu.atoms])
    signed = np.concatenate([mu.weights, -nu.weights])
    G = gamma(atoms[:, None] - atoms[None, :])
    terms = (signed[:, None] * signed[None, :] * G).ravel()
    return -math.fsum(terms.tolist())


def rho_grad_quadratic(mu, nu):
    """Lions derivative of ``rho_sq(., nu)`` with quadratic kernel; constant in the atom."""
    return 4.0 * (mu.mean - nu.mean)


def self_spread(mu):
    """``int int (u - v)^2 mu(du) mu(dv)`` which equals twice the variance."""
    return 2.0 * mu.variance


def rho_grad_self(mu, index):
    n = len(mu)
    if not -n <= index < n:
        raise IndexError(f"atom index {index} out of range for {n} atoms")
    return 4.0 * (mu.atoms[index] - mu.mean)


def lions_fd(h, mu, direction, eps=1e-4):
    """Central difference ``[h(X + eps Y) - h(X - eps Y)] / 2 eps`` of the lift of ``h``.

    ``h`` takes ``(atoms, weights)``; ``direction`` holds one real per atom.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    y = np.asarray(direction, dtype=float)
    if y.shape != mu.atoms.shape:
        raise ValueError("direction needs one entry per atom")
    hp = h(mu.atoms + eps * y, mu.weights)
    hm = h(mu.atoms - eps * y, mu.weights)
    if not (np.isfinite(hp) and np.isfinite(hm)):
        raise FloatingPointError("lifted function is not finite near the measure")
    return (hp - hm) / (2.0 * eps)


def lions_pairing(grad, mu, direction):
    """``sum_i p_i grad_i y_i`` -- the pairing a Lions derivative produces against a lifted direction."""
    g = np.broadcast_to(np.asarray(grad, dtype=float), mu.atoms.shape)
    return math.fsum((mu.weights * g * np.asarray(direction, dtype=float)).tolist())


def write_measure_csv(mu, path):
    with open(path, "w", newline="") as fh:
        fh.write("atom,weight\n")
        for a, w in zip(mu.atoms, mu.weights):
            fh.write(f"{a:.17g},{w:.17g}\n")


def read_measure_csv(path):
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(rows[0]) != {"atom", "weight"}:
        raise ValueError(f"{path}: expected header 'atom,weight'")
    return DiscreteMeasure([float(r["atom"]) for r in rows], [float(r["weight"]) for r in rows])
