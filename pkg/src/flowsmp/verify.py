"""Property checks behind ``flowsmp verify`` and the acceptance tests.

Every check reports the measured value next to the bound it is compared
against, so a log line is self-explanatory.  Suites:

``sheet``     isometry and correlation structure of the truncated sheet
``measures``  transport, the quadratic target distance and Lions derivatives
``bsde``      Picard contraction and Lipschitz propagation in the label
``smp``       first variation and the two derivative formulas
``lq``        the LQ fixed point and the mean-equation oracle
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import bsde_interaction as bsde
from .forward_flow import ControlPath, cost, path_costs, simulate, simulate_variational
from .measure_kit import (
    DiscreteMeasure,
    lions_fd,
    lions_pairing,
    rho_grad_quadratic,
    rho_sq,
    w2,
)
from .model import LqCoefficients, LqParams, kernel_coefficients
from .sheet_noise import (
    GaussianBump,
    TimeGrid,
    bump_coefficients,
    ito_integrals,
    make_basis,
    project_loading,
    sample_increments,
)
from .smp import descend, gateaux, lq_mean_ode, lq_solve

__all__ = ["Check", "SuiteReport", "SUITES", "run_suite", "demo_lq_params", "smooth_control"]


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    bound: float
    detail: str = ""
    informational: bool = False

    def as_dict(self):
        d = {"name": self.name, "status": self._status(), "value": self.value, "bound": self.bound}
        if self.detail:
            d["detail"] = self.detail
        return d

    def _status(self):
        if self.informational:
            return "info"
        return "pass" if self.passed else "fail"

    def line(self):
        return f"[{self._status().upper():4s}] {self.name}: value={self.value:.6g} bound={self.bound:.6g}" + (
            f" ({self.detail})" if self.detail else ""
        )


@dataclass
class SuiteReport:
    suite: str
    checks: list = field(default_factory=list)

    @property
    def passed(self):
        return all(c.passed for c in self.checks if not c.informational)

    def as_dict(self):
        return {"suite": self.suite, "passed": self.passed, "checks": [c.as_dict() for c in self.checks]}


def _se(x):
    return float(np.std(x, ddof=1) / math.sqrt(x.size))


# ----------------------------------------------------------------------
# shared scenarios
# ----------------------------------------------------------------------
def demo_lq_params(**kw):
    base = dict(A=-0.5, B=0.3, C=0.8, D=0.3, F=0.2, H=0.4, Q=0.5, S=0.2, R=2.0,
                phi_kind="gaussian", nu=DiscreteMeasure.dirac(1.0), terminal_kind="target_rho")
    base.update(kw)
    return LqParams(**base)


DEMO_MU0 = DiscreteMeasure([-1.0, 0.0, 1.5], [0.3, 0.5, 0.2])


def smooth_control(rng, M, T=1.0, scale=1.0):
    """Random ``a0 + a1 t + a2 sin(pi t)`` sampled at the left step ends."""
    t = np.arange(M) * (T / M)
    a = rng.normal(0.0, scale, 3)
    return ControlPath(a[0] + a[1] * t + a[2] * np.sin(np.pi * t / T))


# ----------------------------------------------------------------------
# criterion 1-2: sheet
# ----------------------------------------------------------------------
def check_isometry(n=10_000, seed=11, K=4, M=50, T=1.0):
    grid = TimeGrid(T, M)
    basis = make_basis("hermite", K)
    t = grid.nodes[:-1]
    # deterministic loadings: a bump drifting in space, amplitude varying in time
    g = np.stack([project_loading(GaussianBump(np.sin(s), 1.0, 1.0 + s), basis) for s in t], axis=1)
    noise = sample_increments(grid, K, seed, n)
    I = ito_integrals(g, noise)
    target = float(np.sum(g * g) * grid.dt)
    sq = I * I
    unit = np.zeros((K, M))
    unit[0] = 1.0
    Iu = ito_integrals(unit, noise)
    return [
        Check("isometry: second moment", abs(sq.mean() - target) <= 3 * _se(sq),
              abs(sq.mean() - target), 3 * _se(sq), f"E[I^2]={sq.mean():.6g}, analytic={target:.6g}"),
        Check("isometry: zero mean", abs(I.mean()) <= 3 * _se(I), abs(I.mean()), 3 * _se(I)),
        Check("unit loading: variance T", abs(np.var(Iu, ddof=1) - T) <= 3 * _se((Iu - Iu.mean()) ** 2),
              abs(np.var(Iu, ddof=1) - T), 3 * _se((Iu - Iu.mean()) ** 2)),
    ]


def check_correlation(n=10_000, seed=12, K=16, M=20, T=1.0, u=0.0, v=1.0):
    grid = TimeGrid(T, M)
    basis = make_basis("hermite", K)
    norm = 1.0 / math.sqrt(GaussianBump().norm_sq())
    f1 = GaussianBump(u, 1.0, norm)
    f2 = GaussianBump(v, 1.0, norm)
    inner = math.exp(-((u - v) ** 2) / 2.0)  # int f1 f2 dr for unit-norm Gaussian bumps
    g1 = np.repeat(project_loading(f1, basis)[:, None], M, axis=1)
    g2 = np.repeat(project_loading(f2, basis)[:, None], M, axis=1)
    noise = sample_increments(grid, K, seed, n)
    B1 = ito_integrals(g1, noise)
    B2 = ito_integrals(g2, noise)
    prod = (B1 - B1.mean()) * (B2 - B2.mean())
    cov = float(prod.sum() / (n - 1))
    checks = [
        Check("correlation: cov(B1,B2) = T int f1 f2", abs(cov - T * inner) <= 3 * _se(prod),
              abs(cov - T * inner), 3 * _se(prod), f"cov={cov:.6g}, T*inner={T * inner:.6g}"),
    ]
    # frozen particles at u, v with intensity exp(-(x - r)^2)
    gu = bump_coefficients(u, basis)
    gv = bump_coefficients(v, basis)
    derived = math.sqrt(math.pi / 2.0) * math.exp(-((u - v) ** 2) / 2.0)
    alt = math.sqrt(math.pi) * math.exp(-((u - v) ** 2))
    Bu = ito_integrals(np.repeat(gu[:, None], M, axis=1), noise)
    Bv = ito_integrals(np.repeat(gv[:, None], M, axis=1), noise)
    prod = (Bu - Bu.mean()) * (Bv - Bv.mean())
    rate = float(prod.sum() / (n - 1)) / T
    se = _se(prod) / T
    checks += [
        Check("frozen Gaussian loadings: projected rate", abs(gu @ gv - derived) <= 1e-3 * derived,
              abs(gu @ gv - derived), 1e-3 * derived, "sum_k g_k(u) g_k(v) vs (pi/2)^(1/2) exp(-(u-v)^2/2)"),
        Check("frozen Gaussian loadings: MC covariance rate", abs(rate - derived) <= 3 * se,
              abs(rate - derived), 3 * se, f"rate={rate:.6g}, derived={derived:.6g}"),
        Check("alternative constant pi^(1/2) exp(-(u-v)^2) (unconfirmed)", abs(rate - alt) <= 3 * se,
              abs(rate - alt), 3 * se, f"alternative={alt:.6g}; not used as an oracle",
              informational=True),
    ]
    return checks


# ----------------------------------------------------------------------
# criterion 3-4: measures
# ----------------------------------------------------------------------
def brute_force_w2(a, b):
    """Minimum over all permutation couplings, the vertices of the equal-weight transport polytope."""
    n = len(a)
    wt = 1.0 / n
    best = math.inf
    for perm in itertools.permutations(range(n)):
        c = math.fsum(((a - b[list(perm)]) ** 2).tolist()) * wt
        best = min(best, c)
    return math.sqrt(best)


def check_transport(seed=13, per_size=60):
    rng = np.random.default_rng(seed)
    worst = 0.0
    count = 0
    for n in range(1, 6):
        for r in range(per_size):
            if r % 3 == 0:
                a = rng.integers(-3, 4, n).astype(float)  # ties included
                b = rng.integers(-3, 4, n).astype(float)
            else:
                a = rng.normal(0, 2, n)
                b = rng.normal(0, 2, n)
            got = w2(DiscreteMeasure.uniform(a), DiscreteMeasure.uniform(b))
            ref = brute_force_w2(a, b)
            worst = max(worst, abs(got - ref))
            count += 1
    checks = [Check(f"w2 sorted coupling == brute force ({count} equal-weight instances)", worst == 0.0,
                    worst, 0.0)]
    sym = tri = ident = 0.0
    for _ in range(per_size):
        m1, m2, m3 = (_random_measure(rng, int(rng.integers(1, 7))) for _ in range(3))
        d12, d21 = w2(m1, m2), w2(m2, m1)
        sym = max(sym, abs(d12 - d21))
        tri = max(tri, d12 - w2(m1, m3) - w2(m3, m2))
        ident = max(ident, w2(m1, m1))
    checks += [
        Check("w2 symmetry", sym <= 1e-12, sym, 1e-12),
        Check("w2 triangle inequality (worst excess)", tri <= 1e-12, tri, 1e-12),
        Check("w2 vanishes on the diagonal", ident <= 1e-12, ident, 1e-12),
    ]
    return checks


def _random_measure(rng, n):
    w = rng.dirichlet(np.ones(n))
    w[-1] = 1.0 - math.fsum(w[:-1])
    return DiscreteMeasure(rng.normal(0, 1.5, n), w)


def check_rho(seed=14, trials=100):
    rng = np.random.default_rng(seed)
    ident = grad_err = 0.0
    conv = mid = math.inf
    for _ in range(trials):
        mu = _random_measure(rng, int(rng.integers(1, 7)))
        nu = _random_measure(rng, int(rng.integers(1, 7)))
        ident = max(ident, abs(rho_sq(mu, nu) - 2.0 * (mu.mean - nu.mean) ** 2))

        m5 = _random_measure(rng, 5)
        y = rng.normal(0, 1, 5)
        h = lambda x, w: rho_sq(DiscreteMeasure(x, w), nu)  # noqa: E731
        fd = lions_fd(h, m5, y, 1e-4)
        an = lions_pairing(rho_grad_quadratic(m5, nu), m5, y)
        grad_err = max(grad_err, abs(fd - an))

        x1 = m5.atoms
        x2 = x1 + rng.normal(0, 1, 5)
        mu1, mu2 = m5, m5.with_atoms(x2)
        mu3 = m5.with_atoms(0.5 * (x1 + x2))
        lhs = rho_sq(mu2, nu) - rho_sq(mu1, nu)
        rhs = lions_pairing(rho_grad_quadratic(mu1, nu), mu1, x2 - x1)
        conv = min(conv, lhs - rhs)
        mid = min(mid, rho_sq(mu1, nu) + rho_sq(mu2, nu) - 2.0 * rho_sq(mu3, nu))
    return [
        Check("rho^2 quadratic identity 2(dmean)^2", ident <= 1e-12, ident, 1e-12),
        Check("rho^2 gradient vs lifted finite difference", grad_err <= 1e-6, grad_err, 1e-6),
        Check("convexity inequality: min of lhs - rhs (lower bound)", conv >= -1e-12, conv, -1e-12),
        Check("midpoint inequality: min gap (lower bound)", mid >= -1e-12, mid, -1e-12),
    ]


def check_lions_example(seed=15, trials=100, width=1.0):
    rng = np.random.default_rng(seed)
    kc = kernel_coefficients(width=width, c=0.0)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 7))
        mu = _random_measure(rng, n)
        u = rng.normal(0, 1.5)
        y = rng.normal(0, 1, n)
        zero = np.zeros(1)

        def h(x, w):
            return float(kc.drift(0.0, np.array([[u]]), x[None, :], w, zero)[0, 0])

        fd = lions_fd(h, mu, y, 1e-4)
        bm = kc.drift_mu(0.0, np.array([[u]]), mu.atoms[None, :], mu.weights, zero)[0, 0]
        an = lions_pairing(bm, mu, y)
        worst = max(worst, abs(fd - an))
    return [Check("kernel Lions derivative -K'(u-x) vs lifted finite difference", worst <= 1e-5,
                  worst, 1e-5)]


# ----------------------------------------------------------------------
# criterion 5-6: backward equation
# ----------------------------------------------------------------------
def _kernel_traj(paths, seed, mu0=DEMO_MU0, M=40, K=4, T=1.0, control=0.2, sigma=0.3):
    grid = TimeGrid(T, M)
    kc = kernel_coefficients(1.0, 1.0, sigma=sigma)
    return simulate(mu0, kc, ControlPath.constant(control, M), grid, paths, K=K, seed=seed)


def check_contraction(paths=2000, seed=16, tol=1e-6, max_iter=15):
    traj = _kernel_traj(paths, seed)
    checks = []
    for prob in (bsde.linear_problem(traj, 1.0), bsde.kernel_problem(traj)):
        beta = bsde.default_beta(prob)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            _, rep = bsde.solve(prob, beta=beta, tol=tol, max_iter=max_iter + 1)
        bound = rep.bound + 0.1
        checks.append(Check(f"{prob.name}: max Picard delta ratio", rep.max_ratio <= bound,
                            rep.max_ratio, bound, f"beta={beta:.4g}"))
        ok = rep.converged and rep.iterations <= max_iter
        checks.append(Check(f"{prob.name}: iterations to tol {tol:g}", ok, rep.iterations, max_iter,
                            "" if rep.converged else "not converged"))
    return checks


def check_lipschitz_propagation(paths=2000, seed=17, n_atoms=8, T=1.0):
    mu0 = DiscreteMeasure.uniform(np.linspace(-1.5, 1.5, n_atoms))
    traj = _kernel_traj(paths, seed, mu0=mu0)
    prob = bsde.kernel_problem(traj)
    sol, rep = bsde.solve(prob, tol=1e-8, max_iter=60)
    u = traj.labels
    iu, iv = np.triu_indices(n_atoms, 1)
    du2 = (u[iu] - u[iv]) ** 2
    xi = prob.terminal
    M1 = float(np.max(np.mean((xi[:, iu] - xi[:, iv]) ** 2, axis=0) / du2))
    slopes = []
    for j in range(traj.grid.M + 1):
        dy2 = np.mean((sol.y[:, iu, j] - sol.y[:, iv, j]) ** 2, axis=0)
        slopes.append(float(dy2 @ du2 / (du2 @ du2)))
    C = (M1 + (1.0 + prob.L2) * T / 2.0) * math.exp((2.0 * prob.L1 + 0.5) * T)
    smax = max(slopes)
    return [Check("sup_t fitted slope of E|y(u)-y(v)|^2 vs |u-v|^2", smax <= C and np.isfinite(smax),
                  smax, C, f"M1={M1:.4g}, slopes from {min(slopes):.4g} to {smax:.4g}")]


# ----------------------------------------------------------------------
# criterion 7-8: variational process and derivative formulas
# ----------------------------------------------------------------------
def check_variational(paths=2000, seed=18, eps=(0.2, 0.1, 0.05), M=40, K=4):
    grid = TimeGrid(1.0, M)
    kc = kernel_coefficients(1.0, 1.0, sigma=0.4)
    t = np.arange(M) * grid.dt
    alpha = ControlPath(0.3 * np.sin(np.pi * t))
    beta = ControlPath(1.0 + t)
    base = simulate(DEMO_MU0, kc, alpha, grid, paths, K=K, seed=seed)
    V = simulate_variational(base, kc, beta).V
    w = DEMO_MU0.weights
    errs = []
    for e in eps:
        pert = simulate(DEMO_MU0, kc, alpha.shifted(beta, e), grid, paths, K=K, seed=seed,
                        noise=base.noise)
        d = (pert.states - base.states) / e - V
        errs.append(float(np.mean(np.sum(d[:, :, 1:] ** 2, axis=2) @ w) * grid.dt))
    mono = all(a > b for a, b in zip(errs, errs[1:]))
    slope = float(np.polyfit(np.log(eps), np.log(errs), 1)[0])
    return [
        Check("variational error decreases with eps", mono, errs[-1], errs[0],
              "errors " + ", ".join(f"{x:.3g}" for x in errs)),
        Check("variational error log-log slope", slope >= 0.8, slope, 0.8),
    ]


def check_gateaux(pairs=10, paths=4000, seed=19, M=40, K=4):
    rng = np.random.default_rng(seed)
    params = demo_lq_params()
    lq = LqCoefficients(params)
    grid = TimeGrid(1.0, M)
    basis = make_basis("hermite", K)
    checks = []
    for k in range(pairs):
        a = smooth_control(rng, M, scale=0.5)
        b = smooth_control(rng, M, scale=1.0)
        g = gateaux(lq, DEMO_MU0, a, b, grid, paths, basis=basis, seed=seed * 1000 + k)
        diff = abs(g.hamiltonian_form - g.fd_form)
        bound = max(0.05 * abs(g.fd_form), 3.0 * g.combined_stderr)
        checks.append(Check(f"Gateaux pair {k}: |hamiltonian - fd|", diff <= bound, diff, bound,
                            f"H-form={g.hamiltonian_form:.5g}, fd={g.fd_form:.5g}"))
    return checks


# ----------------------------------------------------------------------
# criterion 9-10: LQ
# ----------------------------------------------------------------------
def check_lq_optimality(paths=2000, seed=20, M=40, K=4, directions=20, descend_iters=200):
    params = demo_lq_params()
    lq = LqCoefficients(params)
    grid = TimeGrid(1.0, M)
    basis = make_basis("hermite", K)
    res = lq_solve(params, grid, paths, basis=basis, seed=seed, mu0=DEMO_MU0, tol=1e-4, max_outer=50)
    checks = [Check("lq_solve outer iterations (converged, max|dalpha|<1e-4)",
                    res.converged and res.outer_iters <= 50, res.outer_iters, 50)]
    st = res.residual
    checks.append(Check("stationarity residual vs 3 stderr", st.value < 3 * st.stderr, st.value,
                        3 * st.stderr))

    rng = np.random.default_rng(seed)
    J0 = res.J
    worst = math.inf
    for _ in range(directions):
        b = smooth_control(rng, M)
        tr = simulate(DEMO_MU0, lq, res.alpha.shifted(b, 0.1), grid, paths, basis=basis, seed=seed,
                      noise=res.traj.noise)
        worst = min(worst, cost(tr, lq).mean - J0)
    checks.append(Check(f"J(alpha*+0.1 beta) - J(alpha*) over {directions} directions",
                        worst >= -2 * res.stderr, worst, -2 * res.stderr))

    target = res.alpha.l2(grid.dt)
    d = descend(lq, DEMO_MU0, ControlPath.zeros(M), 0.3, descend_iters, grid, paths, basis=basis,
                seed=seed, gtol=0.01 * target)
    rel = ControlPath(d.control.values - res.alpha.values).l2(grid.dt) / target
    used = d.history[-1]["iter"]
    checks.append(Check("descend from zero: relative L2 distance to alpha*", rel <= 0.05 and used <= 200,
                        rel, 0.05, f"{used} iterations"))

    a0 = smooth_control(np.random.default_rng(seed + 1), M)
    res2 = lq_solve(params, grid, paths, basis=basis, seed=seed, mu0=DEMO_MU0, alpha0=a0)
    gap = ControlPath(res.alpha.values - res2.alpha.values).l2(grid.dt)
    checks.append(Check("two initialisations: L2 gap", gap < 1e-3, gap, 1e-3))
    return checks


def check_mean_ode(paths=4000, seed=21, M=40, K=4, every=5):
    params = demo_lq_params()
    lq = LqCoefficients(params)
    grid = TimeGrid(1.0, M)
    t = np.arange(M) * grid.dt
    alpha = ControlPath(0.5 + 0.5 * np.sin(2 * np.pi * t))
    traj = simulate(DEMO_MU0, lq, alpha, grid, paths, K=K, seed=seed)
    xbar = traj.mean_path()
    ode = lq_mean_ode(params, alpha, DEMO_MU0.mean, grid)
    worst = 0.0
    ok = True
    for j in range(0, M + 1, every):
        diff = abs(xbar[:, j].mean() - ode[j])
        se = _se(xbar[:, j])
        ok &= diff <= 3 * se + 1e-12
        worst = max(worst, diff / se if se > 0 else 0.0)
    return [Check("MC mean vs mean equation, worst |z| over every fifth node", ok, worst, 3.0)]


SUITES = {
    "sheet": [check_isometry, check_correlation],
    "measures": [check_transport, check_rho, check_lions_example],
    "bsde": [check_contraction, check_lipschitz_propagation],
    "smp": [check_variational, check_gateaux],
    "lq": [check_lq_optimality, check_mean_ode],
}


def run_suite(name) -> SuiteReport:
    if name not in SUITES:
        raise KeyError(name)
    rep = SuiteReport(name)
    for fn in SUITES[name]:
        rep.checks.extend(fn())
    return rep
