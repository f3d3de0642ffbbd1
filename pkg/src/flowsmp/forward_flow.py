"""Euler scheme for the heavy-point flow, its first variation, and the cost.

Every atom of a path is driven by the same sheet realisation (common
noise); the measure entering the coefficients at step ``j`` is the
empirical measure of the atoms at ``t_j``.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels
from .io_utils import write_json, write_rows
from .measure_kit import DiscreteMeasure
from .model import CoefficientSet
from .sheet_noise import BasisSet, TimeGrid, captured_fraction, make_basis, sample_increments

__all__ = [
    "ControlPath",
    "FlowTrajectory",
    "VariationalTrajectory",
    "CostReport",
    "simulate",
    "simulate_variational",
    "cost",
    "path_costs",
    "resolve_workers",
    "write_trajectory_csv",
    "write_cost_json",
]


@dataclass(frozen=True, eq=False)
class ControlPath:
    """Control values on the grid steps: ``(M,)`` open-loop or ``(P, M)`` per path."""

    values: np.ndarray
    box: tuple | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim not in (1, 2):
            raise ValueError("control values must be (M,) or (paths, M)")
        if not np.all(np.isfinite(v)):
            raise ValueError("control values must be finite")
        if self.box is not None:
            lo, hi = self.box
            if lo > hi:
                raise ValueError(f"empty admissible box {self.box}")
            if np.any(v < lo) or np.any(v > hi):
                raise ValueError(f"control leaves the admissible box {self.box}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, value, M, box=None):
        return cls(np.full(M, float(value)), box)

    @classmethod
    def zeros(cls, M, box=None):
        return cls(np.zeros(M), box)

    @property
    def M(self):
        return self.values.shape[-1]

    @property
    def adapted(self):
        return self.values.ndim == 2

    def at(self, j):
        return self.values[..., j]

    def table(self, paths, start=0):
        """``(paths, M)`` view for paths ``start .. start + paths - 1``."""
        if self.adapted:
            return self.values[start : start + paths]
        return np.broadcast_to(self.values, (paths, self.M))

    def project(self, values=None):
        v = self.values if values is None else np.asarray(values, dtype=float)
        if self.box is not None:
            v = np.clip(v, *self.box)
        return ControlPath(v, self.box)

    def shifted(self, direction, eps):
        d = direction.values if isinstance(direction, ControlPath) else np.asarray(direction)
        return ControlPath(self.values + eps * d)

    def l2(self, dt):
        return math.sqrt(float(np.sum(self.values ** 2) * dt))


@dataclass(frozen=True, eq=False)
class FlowTrajectory:
    states: np.ndarray  # (P, n, M+1)
    mu0: DiscreteMeasure
    grid: TimeGrid
    control: ControlPath
    basis: BasisSet
    seed: int | None
    noise: np.ndarray | None  # (P, K, M)

    @property
    def paths(self):
        return self.states.shape[0]

    @property
    def weights(self):
        return self.mu0.weights

    @property
    def labels(self):
        return self.mu0.atoms

    @property
    def K(self):
        return self.basis.K

    def at(self, j):
        return self.states[:, :, j]

    def mean_path(self):
        """Cross-path samples of the mean position, ``(P, M+1)``."""
        return kernels.weighted_sum(np.swapaxes(self.states, 1, 2), self.weights)

    def empirical_measure(self, j, path=0):
        return DiscreteMeasure(self.states[path, :, j], self.weights)

    def increments(self):
        if self.noise is not None:
            return self.noise
        if self.seed is None:
            raise ValueError("trajectory has neither stored noise nor a seed to replay it")
        return sample_increments(self.grid, self.K, self.seed, self.paths)


@dataclass(frozen=True, eq=False)
class VariationalTrajectory:
    V: np.ndarray  # (P, n, M+1)
    direction: ControlPath
    base: FlowTrajectory


def resolve_workers(workers=None):
    if workers is None:
        workers = os.environ.get("FLOWSMP_THREADS", "1")
    workers = int(workers)
    if workers < 1:
        raise ValueError(f"worker count must be >= 1, got {workers}")
    return workers


def _chunks(P, workers):
    size = -(-P // workers)
    return [(s, min(P, s + size)) for s in range(0, P, size)]


def _check_finite(x, j, lo):
    if not np.all(np.isfinite(x)):
        p, i = np.argwhere(~np.isfinite(x))[0]
        raise FloatingPointError(
            f"non-finite state at step {j + 1}, atom {int(i)}, path {int(p) + lo}"
        )


def _simulate_chunk(lo, hi, mu0, coeffs, control, grid, basis, seed, noise):
    P = hi - lo
    dw = noise[lo:hi] if noise is not None else sample_increments(grid, basis.K, seed, P, lo)
    alpha = np.ascontiguousarray(control.table(P, lo))
    w = mu0.weights
    x0 = mu0.atoms
    if coeffs.affine:
        phi = coeffs.phi_loadings(basis)
        xi = phi[0] * dw[:, 0, :]
        for k in range(1, basis.K):
            xi = xi + phi[k] * dw[:, k, :]
        states = kernels.euler_affine(x0, w, coeffs.coef, alpha, np.ascontiguousarray(xi), grid.dt)
        if not np.all(np.isfinite(states)):
            j = int(np.argwhere(~np.isfinite(states))[0][2]) - 1
            _check_finite(states[:, :, j + 1], j, lo)
        return states, dw
    n = x0.size
    states = np.empty((P, n, grid.M + 1))
    x = np.broadcast_to(x0, (P, n)).copy()
    states[:, :, 0] = x
    dt = grid.dt
    for j in range(grid.M):
        t = j * dt
        a = alpha[:, j]
        b = coeffs.drift(t, x, x, w, a)
        s = coeffs.diffusion(t, x, x, w, a, basis, dw[:, :, j])
        x = x + b * dt + s
        _check_finite(x, j, lo)
        states[:, :, j + 1] = x
    return states, dw


def simulate(mu0, coeffs: CoefficientSet, control, grid, paths, K=16, seed=0, basis=None,
             workers=None, noise=None, keep_noise=True):
    """Simulate ``paths`` independent copies of the flow started from the atoms of ``mu0``.

    Paths are split into contiguous blocks handled by a thread pool; every
    path's arithmetic is independent of the split, so the result is the
    same for any worker count.  ``noise`` (``(paths, K, M)``) replays a given
    realisation instead of drawing from ``seed``.
    """
    if paths < 1:
        raise ValueError("paths must be >= 1")
    if isinstance(control, (int, float)):
        control = ControlPath.constant(control, grid.M)
    if control.M != grid.M:
        raise ValueError(f"control has {control.M} steps, grid has {grid.M}")
    if control.adapted and control.values.shape[0] != paths:
        raise ValueError("per-path control table does not match the path count")
    basis = basis or make_basis("hermite", K)
    if noise is not None and noise.shape != (paths, basis.K, grid.M):
        raise ValueError(f"noise shape {noise.shape} != {(paths, basis.K, grid.M)}")
    workers = resolve_workers(workers)
    blocks = _chunks(paths, workers)
    args = (mu0, coeffs, control, grid, basis, seed, noise)
    if len(blocks) == 1:
        results = [_simulate_chunk(*blocks[0], *args)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda b: _simulate_chunk(*b, *args), blocks))
    states = np.concatenate([r[0] for r in results], axis=0)
    if keep_noise:
        noise = noise if noise is not None else np.concatenate([r[1] for r in results], axis=0)
    return FlowTrajectory(states, mu0, grid, control, basis, seed, noise if keep_noise else None)


def loading_diagnostic(coeffs, basis, warn_below=0.99):
    """Captured fraction of the spatial profile for factored families (``None`` otherwise)."""
    profile = getattr(coeffs, "profile", None)
    if profile is None or profile() == "mode":
        return None
    return captured_fraction(profile(), basis, warn_below=warn_below)


def simulate_variational(base: FlowTrajectory, coeffs: CoefficientSet, direction) -> VariationalTrajectory:
    """First variation ``V`` of the flow along the control direction ``direction``.

    Coefficients are frozen along ``base`` and the same increments are replayed.
    """
    if base.noise is None and base.seed is None:
        raise ValueError("base trajectory carries no seed provenance; cannot replay its noise")
    if isinstance(direction, (int, float)):
        direction = ControlPath.constant(direction, base.grid.M)
    dw = base.increments()
    P, n, _ = base.states.shape
    grid, basis, w = base.grid, base.basis, base.weights
    alpha = base.control.table(P)
    beta = direction.table(P)
    V = np.zeros((P, n, grid.M + 1))
    v = np.zeros((P, n))
    dt = grid.dt
    for j in range(grid.M):
        t = j * dt
        x = base.states[:, :, j]
        a = alpha[:, j]
        bj = beta[:, j][:, None]
        drift = (
            coeffs.drift_x(t, x, x, w, a) * v
            + coeffs.drift_mu_apply(t, x, w, a, v)
            + coeffs.drift_alpha(t, x, x, w, a) * bj
        )
        load = (
            coeffs.loadings_x(t, x, x, w, a, basis) * v[..., None]
            + coeffs.loadings_mu_apply(t, x, w, a, v, basis)
            + coeffs.loadings_alpha(t, x, x, w, a, basis) * bj[..., None]
        )
        noise = load[..., 0] * dw[:, None, 0, j]
        for k in range(1, basis.K):
            noise = noise + load[..., k] * dw[:, None, k, j]
        v = v + drift * dt + noise
        V[:, :, j + 1] = v
    return VariationalTrajectory(V, direction, base)


@dataclass(frozen=True)
class CostReport:
    mean: float
    stderr: float
    paths: int
    dt: float

    def as_dict(self):
        return {"mean": self.mean, "stderr": self.stderr, "paths": self.paths, "dt": self.dt}


def path_costs(traj: FlowTrajectory, coeffs: CoefficientSet, control=None):
    """Per-path left-endpoint Riemann sum of the running cost plus the terminal cost."""
    control = control if control is not None else traj.control
    P = traj.paths
    alpha = control.table(P)
    w = traj.weights
    dt = traj.grid.dt
    acc = np.zeros(P)
    for j in range(traj.grid.M):
        acc = acc + coeffs.running(j * dt, traj.states[:, :, j], w, alpha[:, j]) * dt
    return acc + coeffs.terminal(traj.states[:, :, -1], w)


def cost(traj: FlowTrajectory, coeffs: CoefficientSet, control=None) -> CostReport:
    control = control if control is not None else traj.control
    if control.M != traj.grid.M:
        raise ValueError("control and trajectory live on different grids")
    with np.errstate(over="ignore", invalid="ignore"):
        c = path_costs(traj, coeffs, control)
    if not np.all(np.isfinite(c)):
        bad = int(np.flatnonzero(~np.isfinite(c))[0])
        raise FloatingPointError(f"cost is not finite on path {bad}")
    se = float(np.std(c, ddof=1) / math.sqrt(c.size)) if c.size > 1 else 0.0
    return CostReport(float(np.mean(c)), se, int(c.size), traj.grid.dt)


def write_trajectory_csv(traj: FlowTrajectory, path):
    P, n, M1 = traj.states.shape
    p, i, j = np.meshgrid(np.arange(P), np.arange(n), np.arange(M1), indexing="ij")
    write_rows(
        path,
        ["path", "atom", "time", "state"],
        [p, i, traj.grid.nodes[j], traj.states],
        ["%d", "%d", "%.17g", "%.17g"],
    )


def write_cost_json(report: CostReport, path):
    write_json(report.as_dict(), path)
