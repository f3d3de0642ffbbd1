"""Maximum principle: Hamiltonian, adjoint equation, gradients and the LQ solver.

Controls are deterministic open-loop paths.  The adjoint ``(p, q)`` solves
the backward equation with interaction whose driver collects the state and
measure partials of the Hamiltonian

    H(t, x, mu, alpha, p, q) = b p + sum_k g_k q_k + f,

and the derivative of the cost along a control direction ``beta`` is
``E sum_j dt beta_j int H_alpha(u, t_j) mu0(du)``.  In the discrete scheme
a change of ``alpha_j`` first moves the state at ``t_{j+1}``, so ``p`` enters
``H_alpha`` at the right end of each step while ``q`` (already defined per
step) is used as is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .bsde_interaction import BsdeProblem, BsdeSolution, SolveReport, solve
from .forward_flow import ControlPath, FlowTrajectory, cost, path_costs, simulate
from .io_utils import write_json, write_rows
from .measure_kit import DiscreteMeasure
from .model import CoefficientSet, LqCoefficients, LqParams, _sum_modes
from .sheet_noise import TimeGrid, make_basis

__all__ = [
    "HamiltonianEval",
    "AdjointSolution",
    "GateauxResult",
    "Stationarity",
    "DescendResult",
    "LqResult",
    "hamiltonian",
    "build_adjoint",
    "solve_adjoint",
    "alpha_gradient",
    "gateaux",
    "stationarity_residual",
    "descend",
    "lq_solve",
    "lq_mean_ode",
    "write_lq_result",
    "write_history_csv",
]


@dataclass(frozen=True, eq=False)
class HamiltonianEval:
    """Per-atom Hamiltonian and its partials; ``H_mu[p, i, l]`` is the measure
    derivative of atom ``i``'s Hamiltonian evaluated at atom ``l``."""

    value: np.ndarray
    H_x: np.ndarray
    H_alpha: np.ndarray
    H_mu: np.ndarray


def hamiltonian(coeffs: CoefficientSet, t, x, w, alpha, p, q, basis) -> HamiltonianEval:
    """Evaluate at the atoms ``x`` (``(P, n)``) with adjoint values ``p`` (``(P, n)``), ``q`` (``(P, n, K)``)."""
    alpha = np.asarray(alpha, dtype=float)
    b = coeffs.drift(t, x, x, w, alpha)
    g = coeffs.loadings(t, x, x, w, alpha, basis)
    f = coeffs.running(t, x, w, alpha)[:, None]
    value = b * p + _sum_modes(g * q) + f
    H_x = coeffs.drift_x(t, x, x, w, alpha) * p + _sum_modes(coeffs.loadings_x(t, x, x, w, alpha, basis) * q)
    H_alpha = (
        coeffs.drift_alpha(t, x, x, w, alpha) * p
        + _sum_modes(coeffs.loadings_alpha(t, x, x, w, alpha, basis) * q)
        + coeffs.running_alpha(t, x, w, alpha)[:, None]
    )
    bm = coeffs.drift_mu(t, x, x, w, alpha)
    gm = coeffs.loadings_mu(t, x, x, w, alpha, basis)
    H_mu = bm * p[:, :, None] + _sum_modes(gm * q[:, :, None, :]) + coeffs.running_mu(t, x, w, alpha)[:, None, :]
    return HamiltonianEval(value, H_x, H_alpha, H_mu)


@dataclass(frozen=True, eq=False)
class AdjointSolution:
    solution: BsdeSolution
    traj: FlowTrajectory
    report: SolveReport
    problem: BsdeProblem = field(repr=False)

    @property
    def p(self):
        return self.solution.y

    @property
    def q(self):
        return self.solution.z


def _adjoint_constants(coeffs, traj):
    """Rough Lipschitz constants of the adjoint driver, for the beta-norm weight."""
    P, n, M1 = traj.states.shape
    w, basis = traj.weights, traj.basis
    alpha = traj.control.table(P)
    L1 = 0.0
    for j in sorted({0, (M1 - 1) // 2, M1 - 2}):
        x = traj.states[:, :, j]
        a = alpha[:, j]
        bx = np.max(np.abs(coeffs.drift_x(j, x, x, w, a)))
        gx = np.max(np.linalg.norm(coeffs.loadings_x(j, x, x, w, a, basis), axis=-1))
        bm = np.max(np.abs(coeffs.drift_mu(j, x, x, w, a)))
        gm = np.max(np.linalg.norm(coeffs.loadings_mu(j, x, x, w, a, basis), axis=-1))
        L1 = max(L1, bx ** 2 + gx ** 2 + bm ** 2 + gm ** 2)
    return L1, 1.0


def build_adjoint(traj: FlowTrajectory, coeffs: CoefficientSet, control=None) -> BsdeProblem:
    """Adjoint problem along ``traj``.

    Terminal value ``g_mu(mu_T)(X(u, T))``; driver at atom ``u``::

        b_x p(u) + sum_k g_x,k q_k(u)
          + sum_v w_v [b_mu(X_v)(X_u) p(v) + sum_k g_mu,k(X_v)(X_u) q_k(v)]
          + f_mu(X_u)

    The measure terms pair atom ``v``'s Hamiltonian derivative at atom
    ``u`` and integrate over ``v``; they are computed directly rather than
    through interaction measures, so ``phi`` and ``psi`` stay unset.
    """
    control = control if control is not None else traj.control
    P = traj.paths
    w, basis, dt = traj.weights, traj.basis, traj.grid.dt
    alpha = control.table(P)
    states = traj.states
    frozen = {}

    def parts(j):
        if j not in frozen:
            x = states[:, :, j]
            a = alpha[:, j]
            t = j * dt
            frozen[j] = (
                coeffs.drift_x(t, x, x, w, a),
                coeffs.loadings_x(t, x, x, w, a, basis),
                coeffs.running_mu(t, x, w, a),
            )
        return frozen[j]

    def driver(j, y, z, my, mz):
        bx, gx, fmu = parts(j)
        x = states[:, :, j]
        a = alpha[:, j]
        t = j * dt
        return (
            bx * y
            + _sum_modes(gx * z)
            + coeffs.drift_mu_adjoint(t, x, w, a, y)
            + coeffs.loadings_mu_adjoint(t, x, w, a, z, basis)
            + fmu
        )

    L1, L2 = _adjoint_constants(coeffs, traj)
    terminal = coeffs.terminal_mu(states[:, :, -1], w)
    return BsdeProblem(traj, terminal, driver, None, None, L1, L2, name="adjoint")


def solve_adjoint(traj, coeffs, control=None, tol=1e-8, max_iter=60, init=None, beta=None):
    prob = build_adjoint(traj, coeffs, control)
    sol, rep = solve(prob, beta=beta, tol=tol, max_iter=max_iter, init=init)
    if not rep.converged:
        raise ArithmeticError(f"adjoint equation did not converge in {max_iter} sweeps")
    return AdjointSolution(sol, traj, rep, prob)


def alpha_gradient(adj: AdjointSolution, coeffs: CoefficientSet, control=None):
    """Per-path ``int H_alpha(u, t_j) mu0(du)`` for every step, shape ``(P, M)``."""
    traj = adj.traj
    control = control if control is not None else traj.control
    P, n, M1 = traj.states.shape
    w, basis, dt = traj.weights, traj.basis, traj.grid.dt
    alpha = control.table(P)
    out = np.empty((P, M1 - 1))
    for j in range(M1 - 1):
        x = traj.states[:, :, j]
        a = alpha[:, j]
        t = j * dt
        per_atom = coeffs.drift_alpha(t, x, x, w, a) * adj.p[:, :, j + 1] + _sum_modes(
            coeffs.loadings_alpha(t, x, x, w, a, basis) * adj.q[:, :, j, :]
        )
        out[:, j] = kernels.weighted_sum(per_atom, w) + coeffs.running_alpha(t, x, w, a)
    return out


def _stderr(x):
    return float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0


@dataclass(frozen=True)
class GateauxResult:
    hamiltonian_form: float
    fd_form: float
    hamiltonian_stderr: float
    fd_stderr: float

    @property
    def combined_stderr(self):
        return math.hypot(self.hamiltonian_stderr, self.fd_stderr)


def gateaux(coeffs, mu0, alpha, beta, grid, paths, K=16, seed=0, basis=None, eps=1e-3,
            workers=None, adjoint_tol=1e-8):
    """Directional derivative of the cost at ``alpha`` along ``beta``, computed two ways.

    The finite difference uses the same sheet increments for ``alpha +- eps beta``.
    """
    basis = basis or make_basis("hermite", K)
    traj = simulate(mu0, coeffs, alpha, grid, paths, basis=basis, seed=seed, workers=workers)
    adj = solve_adjoint(traj, coeffs, alpha, tol=adjoint_tol)
    grad = alpha_gradient(adj, coeffs, alpha)
    per_path = (grad * beta.table(paths)).sum(axis=1) * grid.dt
    kw = dict(basis=basis, seed=seed, workers=workers, noise=traj.noise)
    plus = simulate(mu0, coeffs, alpha.shifted(beta, eps), grid, paths, **kw)
    minus = simulate(mu0, coeffs, alpha.shifted(beta, -eps), grid, paths, **kw)
    fd = (path_costs(plus, coeffs) - path_costs(minus, coeffs)) / (2.0 * eps)
    return GateauxResult(float(per_path.mean()), float(fd.mean()), _stderr(per_path), _stderr(fd))


@dataclass(frozen=True)
class Stationarity:
    value: float
    stderr: float
    step: int
    per_step: np.ndarray = field(repr=False)


def stationarity_residual(adj: AdjointSolution, coeffs, control=None) -> Stationarity:
    """``max_j |E int H_alpha(u, t_j) mu0(du)|`` divided by the control weight."""
    g = alpha_gradient(adj, coeffs, control) / coeffs.control_weight
    m = g.mean(axis=0)
    j = int(np.argmax(np.abs(m)))
    return Stationarity(float(abs(m[j])), _stderr(g[:, j]), j, m)


@dataclass
class DescendResult:
    control: ControlPath
    history: list
    aborted: bool
    eta: float


def descend(coeffs, mu0, alpha0, eta, iters, grid, paths, K=16, seed=0, basis=None, workers=None,
            patience=5, max_halvings=3, adjoint_tol=1e-8, gtol=0.0):
    """Projected steepest descent ``alpha <- P_U[alpha - eta * grad]`` with common random numbers.

    If the cost rises ``patience`` times in a row the step is halved; after
    ``max_halvings`` halvings the search stops and is flagged as aborted.
    """
    if not eta > 0:
        raise ValueError("step size must be positive")
    basis = basis or make_basis("hermite", K)
    alpha = alpha0
    history = []
    init = None
    rises = halvings = 0
    noise = None
    prev_J = math.inf
    aborted = False
    for it in range(iters + 1):
        traj = simulate(mu0, coeffs, alpha, grid, paths, basis=basis, seed=seed, workers=workers,
                        noise=noise)
        noise = traj.noise
        rep = cost(traj, coeffs)
        adj = solve_adjoint(traj, coeffs, alpha, tol=adjoint_tol, init=init)
        init = adj.solution
        grad = alpha_gradient(adj, coeffs, alpha).mean(axis=0)
        gnorm = math.sqrt(float(np.sum(grad ** 2) * grid.dt))
        history.append({"iter": it, "J": rep.mean, "stderr": rep.stderr, "grad_norm": gnorm,
                        "eta": eta})
        if it == iters or gnorm <= gtol:
            break
        rises = rises + 1 if rep.mean > prev_J else 0
        prev_J = rep.mean
        if rises >= patience:
            halvings += 1
            if halvings > max_halvings:
                aborted = True
                break
            eta *= 0.5
            rises = 0
        alpha = alpha.project(alpha.values - eta * grad)
    return DescendResult(alpha, history, aborted, eta)


@dataclass
class LqResult:
    alpha: ControlPath
    J: float
    stderr: float
    residual: Stationarity
    outer_iters: int
    converged: bool
    adjoint: AdjointSolution
    traj: FlowTrajectory
    history: list

    def as_dict(self):
        return {
            "alpha_star": self.alpha.values.tolist(),
            "J_star": self.J,
            "stderr": self.stderr,
            "stationarity_residual": self.residual.value,
            "stationarity_stderr": self.residual.stderr,
            "outer_iters": self.outer_iters,
            "converged": self.converged,
        }


def lq_solve(params: LqParams, grid: TimeGrid, paths, K=16, seed=0, mu0=None, theta=0.5,
             tol=1e-4, max_outer=50, alpha0=None, basis=None, workers=None, adjoint_tol=1e-8,
             coeffs=None):
    """Damped fixed-point iteration on the averaged control law.

    Each outer step simulates under ``alpha``, solves the adjoint and sets
    ``alpha_new = alpha - mean(int H_alpha mu0(du)) / R``, which for the
    LQ family is ``-(C pbar + H sum_k phi_k qbar_k) / R``; then
    ``alpha <- (1 - theta) alpha + theta alpha_new``.  Stops when
    ``max_t |delta alpha| < tol``.  Should ``|delta alpha|`` grow three
    times in a row, ``theta`` is halved.
    """
    coeffs = coeffs or LqCoefficients(params)
    basis = basis or make_basis("hermite", K)
    mu0 = mu0 if mu0 is not None else DiscreteMeasure.dirac(0.0)
    alpha = alpha0 if alpha0 is not None else ControlPath.zeros(grid.M)
    R = coeffs.control_weight
    history = []
    init = None
    noise = None
    converged = False
    growth = 0
    last_delta = math.inf
    for outer in range(1, max_outer + 2):
        traj = simulate(mu0, coeffs, alpha, grid, paths, basis=basis, seed=seed, workers=workers,
                        noise=noise)
        noise = traj.noise
        adj = solve_adjoint(traj, coeffs, alpha, tol=adjoint_tol, init=init)
        init = adj.solution
        grad = alpha_gradient(adj, coeffs, alpha).mean(axis=0)
        rep = cost(traj, coeffs)
        resid = float(np.max(np.abs(grad))) / R
        if converged or outer > max_outer:
            history.append({"iter": outer, "J": rep.mean, "residual": resid, "delta_alpha": 0.0})
            break
        target = alpha.values - grad / R
        new = alpha.project((1.0 - theta) * alpha.values + theta * target)
        delta = float(np.max(np.abs(new.values - alpha.values)))
        history.append({"iter": outer, "J": rep.mean, "residual": resid, "delta_alpha": delta})
        growth = growth + 1 if delta > last_delta else 0
        last_delta = delta
        if growth >= 3:
            theta *= 0.5
            growth = 0
        alpha = new
        if delta < tol:
            converged = True
    stat = stationarity_residual(adj, coeffs, alpha)
    n_outer = len(history) - 1
    return LqResult(alpha, rep.mean, rep.stderr, stat, n_outer, converged, adj, traj, history)


def lq_mean_ode(params: LqParams, alpha, u_mean, grid: TimeGrid):
    """Explicit Euler for ``d m = ((A + B) m + C alpha) dt``; returns ``m`` at every node."""
    a = alpha.values if isinstance(alpha, ControlPath) else np.broadcast_to(alpha, (grid.M,))
    if a.ndim != 1:
        raise ValueError("the mean equation needs a deterministic control")
    m = np.empty(grid.M + 1)
    m[0] = u_mean
    k = params.A + params.B
    for j in range(grid.M):
        m[j + 1] = m[j] + (k * m[j] + params.C * a[j]) * grid.dt
    return m


def write_lq_result(res: LqResult, path):
    write_json(res.as_dict(), path)


def write_history_csv(history, path, columns=("iter", "J", "residual", "delta_alpha")):
    cols = [[row[c] for row in history] for c in columns]
    fmts = ["%d" if c == "iter" else "%.17g" for c in columns]
    write_rows(path, list(columns), cols, fmts)
