"""Backward SDEs with interaction on the simulated particle grid.

The equation is solved by Picard iteration.  One Picard sweep freezes the
previous iterate inside the driver and the interaction measures, then runs
the explicit backward scheme

    Y_j = E_j[Y_{j+1}] + f_j dt,
    z_{k,j} = E_j[(Y_{j+1} - E_j[Y_{j+1}]) dw_{k,j}] / dt,

with conditional expectations estimated by least squares across paths.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .forward_flow import FlowTrajectory
from .io_utils import write_json, write_rows
from .sheet_noise import GaussianBump, project_loading

__all__ = [
    "BsdeProblem",
    "BsdeSolution",
    "BetaNorm",
    "SolveReport",
    "Regressor",
    "interaction_measures",
    "picard_step",
    "solve",
    "beta_norm",
    "default_beta",
    "linear_problem",
    "kernel_problem",
    "label_interaction",
    "write_report_json",
    "write_solution_csv",
]

STD_FLOOR = 1e-12
RCOND = 1e-8


@dataclass(frozen=True, eq=False)
class BsdeSolution:
    y: np.ndarray  # (P, n, M+1)
    z: np.ndarray  # (P, n, M, K)

    @classmethod
    def zeros(cls, P, n, M, K):
        return cls(np.zeros((P, n, M + 1)), np.zeros((P, n, M, K)))

    def __sub__(self, other):
        return BsdeSolution(self.y - other.y, self.z - other.z)


@dataclass(eq=False)
class BsdeProblem:
    """Terminal values, driver and interaction maps on a simulated filtration.

    ``driver(j, y, z, my, mz)`` receives the frozen iterate at ``t_j``
    (``y`` is ``(P, n)``, ``z`` is ``(P, n, K)``) and the atoms of the
    interaction measures: ``my[p, u, v]`` is the image of atom ``v`` in the
    measure attached to atom ``u`` (weights are those of ``mu0``).  ``phi``
    and ``psi`` build those arrays; either may be ``None`` when the driver
    does not use it.
    """

    traj: FlowTrajectory
    terminal: np.ndarray
    driver: Callable
    phi: Callable | None = None
    psi: Callable | None = None
    L1: float = 1.0
    L2: float = 0.0
    name: str = "custom"
    _regressor: "Regressor | None" = field(default=None, repr=False)

    def __post_init__(self):
        self.terminal = np.asarray(self.terminal, dtype=float)
        P, n, _ = self.traj.states.shape
        if self.terminal.shape != (P, n):
            raise ValueError(f"terminal shape {self.terminal.shape} != {(P, n)}")
        if not np.all(np.isfinite(self.terminal)):
            raise FloatingPointError("non-finite terminal condition")

    @property
    def grid(self):
        return self.traj.grid

    @property
    def basis(self):
        return self.traj.basis

    @property
    def weights(self):
        return self.traj.weights

    @property
    def shape(self):
        P, n, _ = self.traj.states.shape
        return P, n, self.grid.M, self.basis.K

    @property
    def regressor(self):
        if self._regressor is None:
            self._regressor = Regressor(self.traj)
        return self._regressor


class Regressor:
    """Least-squares conditional expectations given the state at ``t_j``.

    For each atom the features are all monomials of total degree at most 2
    in the standardised (own position, mean position, second moment).
    Variables without cross-path spread are dropped, so a step where every
    path agrees (such as ``t_0``) reduces to the plain average.  Gram
    pseudo-inverses are cached per step.
    """

    def __init__(self, traj: FlowTrajectory):
        self.traj = traj
        self._cache = {}
        self.condition = {}

    def features(self, j):
        X = self.traj.states[:, :, j]
        P, n = X.shape
        w = self.traj.weights
        xbar = kernels.weighted_sum(X, w)
        m2 = kernels.weighted_sum(X * X, w)
        feats = np.zeros((n, P, 10))
        for i in range(n):
            cols = []
            for v in (X[:, i], xbar, m2):
                mu = v.mean()
                sd = v.std()
                if sd > STD_FLOOR * (1.0 + abs(mu)):
                    cols.append((v - mu) / sd)
            mono = [np.ones(P)] + cols
            for a in range(len(cols)):
                for b in range(a, len(cols)):
                    mono.append(cols[a] * cols[b])
            feats[i, :, : len(mono)] = np.column_stack(mono)
        return feats

    def _prepare(self, j):
        if j not in self._cache:
            F = self.features(j)
            P = F.shape[1]
            G = np.swapaxes(F, 1, 2) @ F / P
            Gi = np.linalg.pinv(G, rcond=RCOND, hermitian=True)
            ev = np.linalg.eigvalsh(G)
            big = ev[:, -1]
            small = np.where(ev > RCOND * big[:, None], ev, np.inf).min(axis=1)
            self.condition[j] = float(np.max(big / small))
            if not np.all(np.isfinite(Gi)):
                raise np.linalg.LinAlgError(
                    f"singular regression design at step {j} (condition {self.condition[j]:.3g})"
                )
            self._cache[j] = (F, Gi)
        return self._cache[j]

    def __call__(self, j, target):
        """Fitted ``E[target | F_{t_j}]``; ``target`` is ``(P, n)`` or ``(P, n, c)``."""
        F, Gi = self._prepare(j)
        P = F.shape[1]
        squeeze = target.ndim == 2
        T = np.moveaxis(target[..., None] if squeeze else target, 0, 1)  # (n, P, c)
        coef = Gi @ (np.swapaxes(F, 1, 2) @ T) / P
        fit = np.moveaxis(F @ coef, 0, 1)
        return fit[..., 0] if squeeze else fit


def interaction_measures(prob: BsdeProblem, j, y, z):
    my = prob.phi(j, y) if prob.phi is not None else None
    mz = prob.psi(j, z) if prob.psi is not None else None
    return my, mz


def picard_step(prev: BsdeSolution, prob: BsdeProblem) -> BsdeSolution:
    P, n, M, K = prob.shape
    if prev.y.shape != (P, n, M + 1) or prev.z.shape != (P, n, M, K):
        raise ValueError("previous iterate does not live on the problem grid")
    dt = prob.grid.dt
    dw = prob.traj.increments()
    reg = prob.regressor
    Y = np.empty((P, n, M + 1))
    Z = np.empty((P, n, M, K))
    Y[:, :, M] = prob.terminal
    for j in range(M - 1, -1, -1):
        nxt = Y[:, :, j + 1]
        cont = reg(j, nxt)
        Z[:, :, j, :] = reg(j, (nxt - cont)[:, :, None] * dw[:, None, :, j] / dt)
        yj, zj = prev.y[:, :, j], prev.z[:, :, j, :]
        my, mz = interaction_measures(prob, j, yj, zj)
        f = prob.driver(j, yj, zj, my, mz)
        Y[:, :, j] = cont + f * dt
        if not np.all(np.isfinite(Y[:, :, j])):
            raise FloatingPointError(f"non-finite backward value at step {j}")
    return BsdeSolution(Y, Z)


@dataclass(frozen=True)
class BetaNorm:
    """Squared exponentially weighted norm ``||.||_beta^2`` split into its y and z parts."""

    beta: float
    value: float
    y_part: float
    z_part: float

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")

    @property
    def norm(self):
        return math.sqrt(self.value)


def beta_norm(delta: BsdeSolution, weights, grid, beta) -> BetaNorm:
    if not beta > 0:
        raise ValueError("beta must be positive")
    t = grid.nodes
    ew = np.exp(beta * t)
    ysq = kernels.weighted_sum(np.swapaxes(delta.y ** 2, 1, 2), weights).mean(axis=0)
    yint = grid.dt * (np.sum(ew * ysq) - 0.5 * (ew[0] * ysq[0] + ew[-1] * ysq[-1]))
    zsq = np.sum(delta.z ** 2, axis=-1)  # Parseval in the working basis
    zsq = kernels.weighted_sum(np.swapaxes(zsq, 1, 2), weights).mean(axis=0)
    step = ew[:-1] * np.expm1(beta * grid.dt) / beta
    zint = float(np.sum(step * zsq))
    return BetaNorm(float(beta), float(yint + zint), float(yint), zint)


def default_beta(prob: BsdeProblem):
    """``2 L1 (1 + L2) (T + 1)``: twice the contraction threshold."""
    return 2.0 * max(prob.L1, 1e-12) * (1.0 + prob.L2) * (prob.grid.T + 1.0)


@dataclass
class SolveReport:
    beta: float
    tol: float
    converged: bool
    iterations: int
    sweeps: int
    deltas: list
    ratios: list
    bound: float

    def as_dict(self):
        hist = [
            {"iter": i + 1, "delta_beta_norm": d, "ratio": r}
            for i, (d, r) in enumerate(zip(self.deltas, self.ratios))
        ]
        return {
            "beta": self.beta,
            "tol": self.tol,
            "converged": self.converged,
            "iterations": self.iterations,
            "sweeps": self.sweeps,
            "contraction_bound": self.bound,
            "history": hist,
        }

    @property
    def max_ratio(self):
        r = [x for x in self.ratios if np.isfinite(x)]
        return max(r) if r else 0.0


def solve(prob: BsdeProblem, beta=None, tol=1e-6, max_iter=50, init=None):
    """Picard iteration from ``init`` (zero by default) until ``||update||_beta < tol``.

    ``deltas`` holds the squared beta-norms of successive updates and
    ``ratios`` their quotients, the quantity bounded by
    ``L1 (1 + L2) (T + 1) / beta`` in the contraction argument.
    ``iterations`` counts the sweeps needed to reach the returned fixed
    point; ``sweeps`` also counts the final sweep that confirmed it.
    """
    beta = default_beta(prob) if beta is None else float(beta)
    threshold = prob.L1 * (1.0 + prob.L2) * (prob.grid.T + 1.0)
    if beta <= threshold:
        warnings.warn(
            f"beta={beta:.4g} does not exceed L1(1+L2)(T+1)={threshold:.4g}; "
            "the contraction estimate does not apply",
            RuntimeWarning,
            stacklevel=2,
        )
    P, n, M, K = prob.shape
    cur = init if init is not None else BsdeSolution.zeros(P, n, M, K)
    deltas, ratios = [], []
    converged = False
    for sweep in range(1, max_iter + 1):
        new = picard_step(cur, prob)
        d = beta_norm(new - cur, prob.weights, prob.grid, beta).value
        ratios.append(d / deltas[-1] if deltas and deltas[-1] > 0 else float("nan"))
        deltas.append(d)
        cur = new
        if math.sqrt(d) < tol:
            converged = True
            break
    report = SolveReport(
        beta, tol, converged, max(sweep - 1, 0) if converged else sweep, sweep, deltas, ratios,
        threshold / beta,
    )
    if not converged:
        warnings.warn(f"Picard iteration did not converge in {max_iter} sweeps", RuntimeWarning,
                      stacklevel=2)
    return cur, report


# ----------------------------------------------------------------------
# built-in problem families
# ----------------------------------------------------------------------
def _terminal_from(traj, terminal):
    if terminal is None:
        return traj.states[:, :, -1].copy()
    if callable(terminal):
        vals = np.asarray(terminal(traj.states[:, :, -1], traj.labels), dtype=float)
        return np.broadcast_to(vals, traj.states.shape[:2]).copy()
    return np.broadcast_to(np.asarray(terminal, dtype=float), traj.states.shape[:2]).copy()


def linear_problem(traj, c=1.0, terminal=None):
    """Driver ``f = c y``; with deterministic terminal data the solution is ``xi e^{c (T - t)}``."""

    def driver(j, y, z, my, mz):
        return c * y

    return BsdeProblem(traj, _terminal_from(traj, terminal), driver, L1=c * c, L2=0.0,
                       name="linear")


def label_interaction(labels, width=1.0):
    d = labels[:, None] - labels[None, :]
    return np.exp(-d * d / (2.0 * width ** 2))


def kernel_problem(traj, a=0.5, kappa=0.5, gamma=0.3, zeta=0.0, lam_y=0.8, lam_u=0.5,
                   lam_z=0.8, width=1.0, terminal=None):
    """Interacting family with Gaussian label kernel ``K``.

    ``Phi(u, t, v, y) = lam_y y + lam_u K(u - v)`` and the r-integrated
    ``Psi`` aggregate is ``lam_z sum_k phi_k z_k`` with ``phi`` a unit-norm
    Gaussian profile.  The driver is
    ``a y + kappa mean(M^y) + gamma mean(M^z) + zeta sum_k phi_k z_k``.
    """
    basis = traj.basis
    bump = GaussianBump(0.0, 1.0, 1.0)
    bump = GaussianBump(0.0, 1.0, 1.0 / math.sqrt(bump.norm_sq()))
    phi = project_loading(bump, basis)
    Kuv = label_interaction(traj.labels, width)
    w = traj.weights

    def phi_map(j, y):
        return lam_y * y[:, None, :] + lam_u * Kuv[None, :, :]

    def psi_map(j, z):
        agg = lam_z * (z @ phi)
        return np.broadcast_to(agg[:, None, :], (agg.shape[0], agg.shape[1], agg.shape[1]))

    def driver(j, y, z, my, mz):
        out = a * y + kappa * kernels.weighted_sum(my, w) + gamma * kernels.weighted_sum(mz, w)
        if zeta:
            out = out + zeta * (z @ phi)
        return out

    pn = float(phi @ phi)
    L1 = a * a + kappa * kappa + gamma * gamma + zeta * zeta * pn
    sup_dk = math.exp(-0.5) / width
    L2 = max(2 * lam_y ** 2, 2 * (lam_u * sup_dk) ** 2, lam_z ** 2 * pn)
    return BsdeProblem(traj, _terminal_from(traj, terminal), driver, phi_map, psi_map, L1, L2,
                       name="kernel")


# ----------------------------------------------------------------------
# output
# ----------------------------------------------------------------------
def write_report_json(report: SolveReport, path, extra=None):
    d = report.as_dict()
    if extra:
        d.update(extra)
    write_json(d, path)


def write_solution_csv(sol: BsdeSolution, grid, path):
    P, n, M1 = sol.y.shape
    K = sol.z.shape[-1]
    p, i, j = np.meshgrid(np.arange(P), np.arange(n), np.arange(M1), indexing="ij")
    zfull = np.concatenate([sol.z, np.zeros((P, n, 1, K))], axis=2)
    cols = [p, i, grid.nodes[j], sol.y] + [zfull[..., k] for k in range(K)]
    header = ["path", "atom", "time", "y"] + [f"z_{k}" for k in range(K)]
    write_rows(path, header, cols, ["%d", "%d"] + ["%.17g"] * (2 + K))
