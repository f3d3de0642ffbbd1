import json
import math

import numpy as np
import pytest

from flowsmp import bsde_interaction as B
from flowsmp.forward_flow import ControlPath, simulate
from flowsmp.measure_kit import DiscreteMeasure, pushforward
from flowsmp.model import LqCoefficients, LqParams, ZeroCoefficients, kernel_coefficients
from flowsmp.sheet_noise import TimeGrid, coarsen_increments, make_basis, sample_increments


@pytest.fixture(scope="module")
def ktraj():
    mu = DiscreteMeasure([-1.0, 0.0, 1.5], [0.3, 0.5, 0.2])
    return simulate(mu, kernel_coefficients(sigma=0.4), ControlPath.constant(0.2, 20), TimeGrid(1.0, 20),
                    600, K=4, seed=21)


def zero_driver(j, y, z, my, mz):
    return np.zeros_like(y)


def test_zero_driver_keeps_terminal_constant(ktraj):
    prob = B.BsdeProblem(ktraj, np.broadcast_to(ktraj.labels ** 2, (600, 3)), zero_driver)
    sol, rep = B.solve(prob, tol=1e-12)
    assert rep.converged and rep.iterations == 1 and rep.sweeps == 2
    assert np.allclose(sol.y, (ktraj.labels ** 2)[None, :, None], atol=1e-12)
    assert np.max(np.abs(sol.z)) < 1e-10


def test_linear_driver_exponential(ktraj):
    c = 0.8
    prob = B.linear_problem(ktraj, c, terminal=lambda x, u: u)
    sol, rep = B.solve(prob, tol=1e-12, max_iter=80)
    t = ktraj.grid.nodes
    exact = ktraj.labels[None, :, None] * np.exp(c * (1.0 - t))[None, None, :]
    assert rep.converged
    assert np.max(np.abs(sol.y - exact)) <= 2 * c * c * np.max(np.abs(exact)) * ktraj.grid.dt


def test_terminal_validation(ktraj):
    with pytest.raises(ValueError, match="terminal shape"):
        B.BsdeProblem(ktraj, np.zeros((2, 3)), zero_driver)
    with pytest.raises(FloatingPointError):
        B.BsdeProblem(ktraj, np.full((600, 3), np.nan), zero_driver)
    assert B.linear_problem(ktraj, 1.0, terminal=2.0).terminal.shape == (600, 3)


@pytest.mark.parametrize("family", ["linear", "kernel"])
def test_contraction_ratio_within_bound(ktraj, family):
    prob = B.linear_problem(ktraj, 1.0) if family == "linear" else B.kernel_problem(ktraj)
    sol, rep = B.solve(prob, beta=B.default_beta(prob), tol=1e-6, max_iter=15)
    assert rep.bound == pytest.approx(0.5)
    assert rep.converged and rep.max_ratio <= rep.bound + 0.1


def test_fixed_point_residual(ktraj):
    prob = B.kernel_problem(ktraj)
    tol = 1e-7
    sol, rep = B.solve(prob, tol=tol, max_iter=40)
    again = B.picard_step(sol, prob)
    assert B.beta_norm(again - sol, prob.weights, prob.grid, rep.beta).norm < 2 * tol


def test_measure_map_is_pushforward(ktraj, rng):
    prob = B.kernel_problem(ktraj, lam_y=1.0, lam_u=0.0)
    y = rng.normal(size=(600, 3))
    z = rng.normal(size=(600, 3, 4))
    my, mz = B.interaction_measures(prob, 5, y, z)
    mu0 = ktraj.mu0
    for p in (0, 17):
        ref = pushforward(mu0, lambda v: y[p][np.searchsorted(mu0.atoms, v)])
        for u in range(3):
            assert np.array_equal(DiscreteMeasure(my[p, u], mu0.weights).atoms, ref.atoms)
    assert mz.shape == (600, 3, 3)


def test_initial_value_matches_fresh_sample_mean(ktraj):
    # with f = 0 the solution is a martingale, so Y_0 = E[xi]; check on independent paths
    prob = B.BsdeProblem(ktraj, ktraj.states[:, :, -1] ** 2, zero_driver)
    sol, _ = B.solve(prob, tol=1e-10)
    fresh = simulate(ktraj.mu0, kernel_coefficients(sigma=0.4), ControlPath.constant(0.2, 20),
                     TimeGrid(1.0, 20), 4000, K=4, seed=99)
    xi = fresh.states[:, :, -1] ** 2
    se = np.sqrt(xi.var(axis=0, ddof=1) / 4000 + sol.y[:, :, -1].var(axis=0, ddof=1) / 600)
    tstat = np.abs(sol.y[0, :, 0] - xi.mean(axis=0)) / se
    assert np.all(tstat < 3), tstat
    assert np.allclose(sol.y[:, :, 0], sol.y[:1, :, 0])


def test_degenerate_design_falls_back_to_average():
    mu = DiscreteMeasure([0.0, 1.0], [0.5, 0.5])
    tr = simulate(mu, ZeroCoefficients(), ControlPath.zeros(5), TimeGrid(1.0, 5), 30, K=2, seed=1)
    prob = B.linear_problem(tr, 0.5)
    sol, rep = B.solve(prob, tol=1e-12)
    assert rep.converged
    # no noise reaches the states: the fixed point is the implicit Euler recursion Y_j = Y_{j+1} + c Y_j dt
    exact = mu.atoms[:, None] * (1 - 0.5 * 0.2) ** -np.arange(5, -1, -1.0)
    assert np.allclose(sol.y, exact[None], rtol=1e-9)
    assert np.all(np.isfinite(list(prob.regressor.condition.values())))


def test_y_part_converges_at_first_order():
    cs = LqCoefficients(LqParams(A=-0.5, B=0.3, C=0.8, H=0.4))
    b = make_basis("hermite", 4)
    mu = DiscreteMeasure([-1.0, 0.0, 1.5], [0.3, 0.5, 0.2])
    P = 600
    noise = sample_increments(TimeGrid(1.0, 80), 4, 3, P)
    sols = {}
    for M in (80, 40, 20, 10):
        tr = simulate(mu, cs, ControlPath.constant(0.5, M), TimeGrid(1.0, M), P, basis=b, noise=noise)
        sols[M] = B.solve(B.linear_problem(tr, 1.0), tol=1e-10, max_iter=80)[0]
        if M > 10:
            noise = coarsen_increments(noise)
    errs = []
    for M in (10, 20, 40):
        fine = sols[2 * M]
        d = B.BsdeSolution(sols[M].y - fine.y[:, :, ::2], np.zeros_like(sols[M].z))
        errs.append(B.beta_norm(d, mu.weights, TimeGrid(1.0, M), 4.0).y_part ** 0.5)
    slope = np.polyfit(np.log([0.1, 0.05, 0.025]), np.log(errs), 1)[0]
    assert slope >= 0.8


def test_lipschitz_in_label_is_bounded_uniformly_in_time():
    from flowsmp.verify import check_lipschitz_propagation

    (chk,) = check_lipschitz_propagation(paths=600, seed=3, n_atoms=6)
    assert chk.passed, chk.line()


# -- beta norm --------------------------------------------------------
def test_beta_norm_of_zero_is_zero():
    g = TimeGrid(1.0, 10)
    assert B.beta_norm(B.BsdeSolution.zeros(3, 2, 10, 4), np.array([0.5, 0.5]), g, 2.0).value == 0.0


@pytest.mark.parametrize("beta", [0.5, 2.0, 5.0])
def test_beta_norm_of_constant_difference(beta):
    g = TimeGrid(1.0, 400)
    c = 1.7
    d = B.BsdeSolution(np.full((2, 1, 401), c), np.zeros((2, 1, 400, 3)))
    val = B.beta_norm(d, np.array([1.0]), g, beta)
    assert val.value == pytest.approx(c * c * math.expm1(beta) / beta, rel=1e-4)
    assert val.z_part == 0.0


def test_beta_norm_small_beta_limit(rng):
    g = TimeGrid(1.0, 10)
    d = B.BsdeSolution(rng.normal(size=(5, 2, 11)), rng.normal(size=(5, 2, 10, 3)))
    w = np.array([0.25, 0.75])
    ys = np.einsum("pij,i->j", d.y ** 2, w) / 5
    plain_y = g.dt * (ys[1:-1].sum() + 0.5 * (ys[0] + ys[-1]))
    plain_z = g.dt * np.einsum("pijk,i->", d.z ** 2, w) / 5
    assert B.beta_norm(d, w, g, 1e-9).value == pytest.approx(plain_y + plain_z, rel=1e-7)
    with pytest.raises(ValueError):
        B.beta_norm(d, w, g, 0.0)


def test_small_beta_warns(ktraj):
    prob = B.linear_problem(ktraj, 1.0)
    with pytest.warns(RuntimeWarning, match="contraction estimate"):
        B.solve(prob, beta=0.1, tol=1e-6)


def test_non_convergence_warns(ktraj):
    with pytest.warns(RuntimeWarning, match="did not converge"):
        _, rep = B.solve(B.kernel_problem(ktraj), tol=1e-14, max_iter=2)
    assert not rep.converged and rep.iterations == rep.sweeps == 2


def test_picard_step_shape_check(ktraj):
    with pytest.raises(ValueError):
        B.picard_step(B.BsdeSolution.zeros(2, 2, 2, 2), B.linear_problem(ktraj))


def test_exports(tmp_path):
    mu = DiscreteMeasure([0.0, 1.0], [0.5, 0.5])
    tr = simulate(mu, kernel_coefficients(), ControlPath.zeros(3), TimeGrid(1.0, 3), 5, K=2, seed=2)
    sol, rep = B.solve(B.kernel_problem(tr), tol=1e-8)
    B.write_report_json(rep, tmp_path / "r.json", {"problem": "kernel"})
    d = json.loads((tmp_path / "r.json").read_text())
    assert {"beta", "tol", "converged", "iterations", "contraction_bound", "history"} <= set(d)
    assert set(d["history"][0]) == {"iter", "delta_beta_norm", "ratio"} and d["history"][0]["ratio"] is None
    B.write_solution_csv(sol, tr.grid, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "path,atom,time,y,z_0,z_1"
    assert len(lines) == 1 + 5 * 2 * 4
    last = lines[4].split(",")  # path 0, atom 0, terminal node
    assert float(last[2]) == 1.0 and float(last[4]) == 0.0 and float(last[5]) == 0.0
