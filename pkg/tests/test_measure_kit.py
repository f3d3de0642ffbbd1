import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from flowsmp.measure_kit import (
    Coupling,
    DiscreteMeasure,
    lions_fd,
    lions_pairing,
    pushforward,
    read_measure_csv,
    rho_grad_quadratic,
    rho_grad_self,
    rho_sq,
    self_spread,
    w2,
    w2_coupling,
    write_measure_csv,
)
from flowsmp.verify import brute_force_w2

atoms = st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=6)


@st.composite
def measures(draw, max_size=6):
    a = draw(st.lists(st.floats(-10, 10), min_size=1, max_size=max_size))
    raw = np.array(draw(st.lists(st.floats(0.05, 1.0), min_size=len(a), max_size=len(a))))
    w = raw / raw.sum()
    w[-1] = 1.0 - math.fsum(w[:-1])
    assume(w[-1] >= 0)
    return DiscreteMeasure(a, w)


@pytest.mark.parametrize(
    "a, w, msg",
    [
        ([], [], "at least one"),
        ([0, 1], [1.0], "2 atoms but 1"),
        ([0, 1], [0.7, 0.7], "sum"),
        ([0, 1], [1.5, -0.5], "nonnegative"),
        ([np.nan], [1.0], "finite"),
    ],
)
def test_invalid_measures(a, w, msg):
    with pytest.raises(ValueError, match=msg):
        DiscreteMeasure(a, w)


def test_measure_is_immutable(mu3):
    with pytest.raises(ValueError):
        mu3.atoms[0] = 3.0


def test_moments(mu3):
    assert mu3.mean == pytest.approx(0.0)
    assert mu3.second_moment == pytest.approx(0.3 + 0.2 * 2.25)
    assert mu3.variance == pytest.approx(mu3.second_moment - mu3.mean ** 2)


def test_same_law_merges_and_sorts():
    a = DiscreteMeasure([1.0, 0.0, 1.0], [0.25, 0.5, 0.25])
    b = DiscreteMeasure([0.0, 1.0], [0.5, 0.5])
    assert a.same_law(b) and not a.same_law(DiscreteMeasure.dirac(0.0))


def test_pushforward_examples():
    mu = DiscreteMeasure([0.0, 1.0], [0.5, 0.5])
    assert pushforward(mu, lambda x: x).same_law(mu)
    assert pushforward(mu, lambda x: 2 * x).same_law(DiscreteMeasure([0.0, 2.0], [0.5, 0.5]))
    const = pushforward(mu, lambda x: 3.0)  # scalar-returning map, evaluated atom by atom
    assert np.all(const.atoms == 3.0) and np.array_equal(const.weights, mu.weights)
    assert const.mean == pytest.approx(3.0)


def test_pushforward_keeps_atom_identity_and_reports_bad_atom():
    mu = DiscreteMeasure([-1.0, 1.0], [0.3, 0.7])
    sq = pushforward(mu, np.square)
    assert len(sq) == 2 and np.array_equal(sq.weights, mu.weights)
    with pytest.raises(ValueError, match="atom 0"):
        pushforward(mu, lambda x: np.where(x < 0, np.inf, x))


def test_w2_examples():
    assert w2(DiscreteMeasure.dirac(0.0), DiscreteMeasure.dirac(1.0)) == 1.0
    mu = DiscreteMeasure([0.0, 1.0, 5.0], [0.2, 0.3, 0.5])
    assert w2(mu, mu) == 0.0


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
def test_w2_equal_weights_matches_enumeration_exactly(n):
    rng = np.random.default_rng(n)
    for _ in range(40):
        a, b = rng.normal(0, 3, n), rng.normal(0, 3, n)
        assert w2(DiscreteMeasure.uniform(a), DiscreteMeasure.uniform(b)) == brute_force_w2(a, b)


def test_w2_unequal_weights_against_linear_program():
    scipy_opt = pytest.importorskip("scipy.optimize")
    rng = np.random.default_rng(3)
    for _ in range(20):
        n, m = rng.integers(1, 6, 2)
        mu = DiscreteMeasure(rng.normal(size=n), rng.dirichlet(np.ones(n)))
        nu = DiscreteMeasure(rng.normal(size=m), rng.dirichlet(np.ones(m)))
        C = (mu.atoms[:, None] - nu.atoms[None, :]) ** 2
        A = np.vstack([np.kron(np.eye(n), np.ones(m)), np.kron(np.ones(n), np.eye(m))])
        res = scipy_opt.linprog(C.ravel(), A_eq=A, b_eq=np.concatenate([mu.weights, nu.weights]),
                                bounds=(0, None), method="highs")
        assert w2(mu, nu) == pytest.approx(math.sqrt(res.fun), abs=1e-7)
        cp = w2_coupling(mu, nu)
        assert cp.cost() == pytest.approx(res.fun, abs=1e-9)


@given(measures(), measures(), measures())
@settings(max_examples=150, deadline=None)
def test_w2_metric_axioms(a, b, c):
    assert w2(a, b) == w2(b, a)
    assert w2(a, c) <= w2(a, b) + w2(b, c) + 1e-10
    assert w2(a, a) == 0.0


def test_w2_separates_distinct_quantile_functions():
    a = DiscreteMeasure([0.0, 1.0], [0.5, 0.5])
    b = DiscreteMeasure([0.0, 1.0], [0.6, 0.4])
    assert w2(a, b) > 0


def test_coupling_validates_marginals(mu3):
    nu = DiscreteMeasure.dirac(0.0)
    Coupling(mu3, nu, mu3.weights[:, None])
    with pytest.raises(ValueError, match="marginals"):
        Coupling(mu3, nu, np.full((3, 1), 0.2))
    with pytest.raises(ValueError, match="shape"):
        Coupling(mu3, nu, np.ones((1, 3)))


def test_rho_sq_examples(mu3):
    assert rho_sq(mu3, mu3) == pytest.approx(0.0, abs=1e-15)
    assert rho_sq(DiscreteMeasure.dirac(0.0), DiscreteMeasure.dirac(1.0)) == 2.0


@given(measures(), measures())
@settings(max_examples=100, deadline=None)
def test_rho_sq_quadratic_identity(a, b):
    expected = 2 * (a.mean - b.mean) ** 2
    assert rho_sq(a, b) == pytest.approx(expected, abs=1e-12 * (1 + a.second_moment + b.second_moment))


def test_rho_grad_examples(mu3):
    assert rho_grad_quadratic(mu3, mu3) == 0.0
    assert rho_grad_quadratic(DiscreteMeasure.dirac(1.0), DiscreteMeasure.dirac(0.0)) == 4.0


def test_rho_grad_matches_lifted_difference():
    rng = np.random.default_rng(5)
    nu = DiscreteMeasure([0.5, 2.0], [0.4, 0.6])
    for _ in range(20):
        mu = DiscreteMeasure(rng.normal(size=5), rng.dirichlet(np.ones(5)))
        y = rng.normal(size=5)
        fd = lions_fd(lambda x, w: rho_sq(DiscreteMeasure(x, w), nu), mu, y)
        assert lions_pairing(rho_grad_quadratic(mu, nu), mu, y) == pytest.approx(fd, abs=1e-6)


def test_self_spread_and_its_gradient():
    mu = DiscreteMeasure([0.0, 2.0], [0.5, 0.5])
    assert self_spread(mu) == pytest.approx(2.0)
    assert rho_grad_self(mu, 0) == -4.0
    assert rho_grad_self(DiscreteMeasure.dirac(3.0), 0) == 0.0
    with pytest.raises(IndexError):
        rho_grad_self(mu, 2)


@given(measures())
@settings(max_examples=50, deadline=None)
def test_self_gradient_is_centred(mu):
    g = [rho_grad_self(mu, i) for i in range(len(mu))]
    assert abs(math.fsum(mu.weights * g)) < 1e-9 * (1 + np.max(np.abs(mu.atoms)))


def test_self_spread_gradient_matches_lifted_difference():
    rng = np.random.default_rng(8)
    mu = DiscreteMeasure(rng.normal(size=4), rng.dirichlet(np.ones(4)))
    y = rng.normal(size=4)
    fd = lions_fd(lambda x, w: self_spread(DiscreteMeasure(x, w)), mu, y)
    an = lions_pairing([rho_grad_self(mu, i) for i in range(4)], mu, y)
    assert an == pytest.approx(fd, abs=1e-7)


def test_lions_fd_of_the_mean(mu3):
    y = np.array([1.0, -2.0, 0.5])
    assert lions_fd(lambda x, w: float(w @ x), mu3, y) == pytest.approx(mu3.weights @ y, abs=1e-12)


def test_lions_fd_argument_checks(mu3):
    with pytest.raises(ValueError):
        lions_fd(lambda x, w: 0.0, mu3, np.zeros(3), eps=0.0)
    with pytest.raises(ValueError):
        lions_fd(lambda x, w: 0.0, mu3, np.zeros(2))


def test_csv_round_trip(tmp_path, mu3):
    p = tmp_path / "m.csv"
    write_measure_csv(mu3, p)
    assert p.read_text().splitlines()[0] == "atom,weight"
    back = read_measure_csv(p)
    assert np.array_equal(back.atoms, mu3.atoms) and np.array_equal(back.weights, mu3.weights)
    p.write_text("x,y\n1,1\n")
    with pytest.raises(ValueError, match="header"):
        read_measure_csv(p)
