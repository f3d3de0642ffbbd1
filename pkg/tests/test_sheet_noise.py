import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowsmp.sheet_noise import (
    GaussianBump,
    TimeGrid,
    bump_coefficients,
    captured_fraction,
    coarsen_increments,
    dump_sheet,
    ito_integral,
    ito_integrals,
    load_sheet,
    make_basis,
    project_loading,
    sample_increments,
    sample_sheet,
)


def test_first_hermite_function_is_normalised_gaussian():
    b = make_basis("hermite", 1)
    r = np.linspace(-3, 3, 7)
    assert np.allclose(b(r)[:, 0], np.pi ** -0.25 * np.exp(-r * r / 2), atol=0, rtol=1e-14)
    assert abs(b.integrate(b(b.nodes)[:, 0] ** 2) - 1.0) < 1e-10


@pytest.mark.parametrize("K", [1, 2, 8, 16, 24])
@pytest.mark.parametrize("scale", [0.5, 1.0, 2.0])
def test_gram_matrix_is_identity(K, scale):
    G = make_basis("hermite", K, scale).gram()
    assert np.max(np.abs(G - np.eye(K))) < 1e-8


@pytest.mark.parametrize("K", [4, 16])
def test_basis_decays_outside_support(K):
    b = make_basis("hermite", K)
    far = np.array([-1.0, 1.0]) * (3 * b.support + 20)
    assert np.max(np.abs(b(far))) < 1e-12


@pytest.mark.parametrize("bad", [dict(K=0), dict(K=-2), dict(K=2.5), dict(scale=0.0), dict(kind="fourier")])
def test_make_basis_rejects_bad_input(bad):
    kw = dict(kind="hermite", K=4, scale=1.0)
    kw.update(bad)
    with pytest.raises(ValueError):
        make_basis(**kw)


@pytest.mark.parametrize("T, M", [(0.0, 10), (-1.0, 10), (1.0, 0), (1.0, 2.5)])
def test_time_grid_validation(T, M):
    with pytest.raises(ValueError):
        TimeGrid(T, M)


def test_sheet_is_reproducible_and_read_only():
    g = TimeGrid(1.0, 100)
    a, b = sample_sheet(g, 4, 7), sample_sheet(g, 4, 7)
    assert np.array_equal(a.increments, b.increments)
    assert not np.array_equal(a.increments, sample_sheet(g, 4, 8).increments)
    with pytest.raises(ValueError):
        a.increments[0, 0] = 1.0


def test_batching_does_not_change_paths():
    g = TimeGrid(1.0, 10)
    full = sample_increments(g, 3, 5, paths=6)
    parts = np.concatenate([sample_increments(g, 3, 5, 2, s) for s in (0, 2, 4)])
    assert np.array_equal(full, parts)
    assert np.array_equal(full[3], sample_sheet(g, 3, 5, path=3).increments)


def test_increment_moments():
    g = TimeGrid(1.0, 100)
    n = 10_000
    dw = sample_increments(g, 2, 7, paths=n // 100)  # 100 paths x 100 steps per mode = 1e4 draws
    for k in range(2):
        x = dw[:, k, :].ravel()
        assert abs(x.mean()) < 3 * math.sqrt(g.dt / n)
        assert abs(x.var() / g.dt - 1) < 0.05


@pytest.mark.parametrize("k", [0, 1, 2, 5])
def test_projecting_a_basis_function_gives_a_unit_vector(k):
    b = make_basis("hermite", 8)
    g = project_loading(lambda r: b(r)[..., k], b)
    assert np.allclose(g, np.eye(8)[k], atol=1e-12)


def test_projecting_zero_gives_zero(basis4):
    assert np.array_equal(project_loading(lambda r: np.zeros_like(r), basis4), np.zeros(4))


def test_gaussian_bump_captured_mass():
    b = make_basis("hermite", 8)
    g = project_loading(GaussianBump(0.0), b)
    assert abs(g @ g - math.sqrt(math.pi / 2)) < 0.01 * math.sqrt(math.pi / 2)


@given(c=st.floats(-3, 3), width=st.floats(0.5, 2.0), scale=st.floats(0.5, 2.0))
@settings(max_examples=50, deadline=None)
def test_closed_form_bump_matches_fine_integration(c, width, scale):
    b = make_basis("hermite", 12, scale)
    bump = GaussianBump(c, width, 1.3)
    r = np.linspace(-40, 40, 160_001)
    ref = np.trapezoid(b(r) * bump(r)[:, None], r, axis=0)
    assert np.allclose(project_loading(bump, b), ref, atol=1e-9)


def test_quadrature_route_matches_closed_form_for_matched_width():
    b = make_basis("hermite", 12)
    bump = GaussianBump(0.7, 1.0, 1.3)
    quad = project_loading(lambda r: bump(r), b)  # a plain callable takes the quadrature route
    assert np.allclose(project_loading(bump, b), quad, atol=1e-9)


def test_bump_coefficients_broadcast(basis4):
    c = np.array([[0.0, 1.0], [-1.0, 2.0]])
    out = bump_coefficients(c, basis4)
    assert out.shape == (2, 2, 4)
    assert np.allclose(out[1, 0], project_loading(GaussianBump(-1.0), basis4))


def test_captured_fraction_warns_when_under_resolved():
    b = make_basis("hermite", 2)
    with pytest.warns(RuntimeWarning, match="under-resolved"):
        frac = captured_fraction(GaussianBump(3.0), b, warn_below=0.99)
    assert 0 <= frac < 0.99
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert captured_fraction(GaussianBump(0.0), make_basis("hermite", 16), warn_below=0.99) > 0.99


def test_captured_fraction_for_plain_callable():
    b = make_basis("hermite", 16)
    assert captured_fraction(lambda r: np.exp(-r * r), b) == pytest.approx(1.0, abs=1e-6)


def test_ito_integral_zero_and_shape_check(grid20, basis4):
    sheet = sample_sheet(grid20, 4, 1)
    assert ito_integral(np.zeros((4, 20)), sheet) == 0.0
    with pytest.raises(ValueError):
        ito_integral(np.zeros((3, 20)), sheet)


def test_batched_and_single_integrals_agree(grid20, rng):
    g = rng.normal(size=(4, 20))
    noise = sample_increments(grid20, 4, 3, paths=5)
    batch = ito_integrals(g, noise)
    for p in range(5):
        assert batch[p] == pytest.approx(ito_integral(g, noise[p]), rel=1e-13)
    run = ito_integrals(g, noise, upto=True)
    assert run.shape == (5, 21) and np.all(run[:, 0] == 0)
    assert np.allclose(run[:, -1], batch)


def test_unit_loading_isometry():
    g = TimeGrid(1.0, 20)
    noise = sample_increments(g, 2, 9, paths=10_000)
    unit = np.zeros((2, 20))
    unit[1] = 1.0
    I = ito_integrals(unit, noise)
    se = I.std() / 100
    assert abs(I.mean()) < 3 * se
    assert abs(I.var() - 1.0) < 3 * np.std(I * I) / 100


def test_disjoint_modes_are_uncorrelated():
    g = TimeGrid(1.0, 20)
    noise = sample_increments(g, 4, 10, paths=10_000)
    a = np.zeros((4, 20))
    b = np.zeros((4, 20))
    a[:2] = 1.0
    b[2:] = 1.0
    Ia, Ib = ito_integrals(a, noise), ito_integrals(b, noise)
    prod = (Ia - Ia.mean()) * (Ib - Ib.mean())
    assert abs(prod.mean()) < 3 * prod.std() / 100


def test_coarsening_keeps_the_realisation():
    g = TimeGrid(1.0, 8)
    fine = sample_increments(g.refine(), 2, 4, paths=3)
    coarse = coarsen_increments(fine)
    assert coarse.shape == (3, 2, 8)
    assert np.allclose(coarse.sum(axis=-1), fine.sum(axis=-1))
    with pytest.raises(ValueError):
        coarsen_increments(fine[..., :-1])


def test_binary_dump_round_trip(tmp_path):
    g = TimeGrid(2.0, 7)
    s = sample_sheet(g, 3, 11)
    path = tmp_path / "s.bin"
    dump_sheet(s, path)
    raw = path.read_bytes()
    assert raw[:4] == b"SHT1" and len(raw) == 4 + 24 + 8 * 21
    back = load_sheet(path)
    assert np.array_equal(back.increments, s.increments)
    assert back.grid == g
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        load_sheet(path)
