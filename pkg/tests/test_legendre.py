import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ma_forge.barriers import W_profile
from ma_forge.grid import ScalarField, TensorGrid
from ma_forge.legendre import (
    CoverageError,
    DualGrid,
    biconjugate,
    build_solution,
    legendre_brute,
    legendre_nd,
    llt_1d,
    refine_conjugate,
)

# 1D kernel


def test_llt_self_dual_quadratic():
    x = np.linspace(-2, 2, 41)
    p = x[10:31]
    assert np.allclose(llt_1d(x, 0.5 * x**2, p), 0.5 * p**2, atol=1e-15)


def test_llt_affine():
    x = np.linspace(-1, 1, 21)
    out = llt_1d(x, 0.7 * x + 0.2, [0.7, 1.7, -0.3])
    assert out[0] == pytest.approx(-0.2, abs=1e-15)
    assert out[1] == pytest.approx(1.0 - 0.2, abs=1e-15)  # attained at x = 1
    assert out[2] == pytest.approx(1.0 - 0.2, abs=1e-15)  # attained at x = -1


def test_llt_abs_is_indicator():
    x = np.linspace(-2, 2, 41)
    p = np.linspace(-1, 1, 11)
    assert np.allclose(llt_1d(x, np.abs(x), p), 0.0, atol=1e-15)


def test_llt_ties_go_left():
    x = np.array([-1.0, 0.0, 1.0])
    _, arg = llt_1d(x, np.zeros(3), [0.0], return_argmax=True)
    assert arg[0] == 0


def test_llt_errors():
    with pytest.raises(ValueError):
        llt_1d([], [], [0.0])
    with pytest.raises(ValueError):
        llt_1d([0.0, 0.0], [1.0, 2.0], [0.0])


@settings(max_examples=100)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=40), st.lists(st.floats(-5, 5), min_size=1, max_size=20))
def test_llt_matches_brute_force(vals, slopes):
    x = np.linspace(-1, 1, len(vals)) if len(vals) > 1 else np.zeros(1)
    v = np.array(vals)
    p = np.array(slopes)
    brute = np.max(p[:, None] * x[None] - v[None], axis=1)
    assert np.allclose(llt_1d(x, v, p), brute, rtol=0, atol=1e-12)


# n-dimensional transform


def quad(n, R, m, A=None):
    g = TensorGrid(n, R, m)
    A = np.eye(n) if A is None else A
    return ScalarField.from_function(g, lambda X: 0.5 * np.einsum("ij,jk,ik->i", X, A, X))


def test_quadratic_on_shared_lattice():
    f = quad(3, 2.0, 17)
    dual = DualGrid(TensorGrid(3, 1.0, 9))  # same spacing, slopes inside the range
    conj = legendre_nd(f, dual, require_coverage=False)
    P = dual.grid.points()
    assert np.allclose(conj.values.ravel(), 0.5 * (P**2).sum(axis=1), atol=1e-14)


def test_support_function_of_segment():
    g = TensorGrid(3, 1.0, 11)
    X = g.points()
    on = (np.abs(X[:, 0]) < 1e-12) & (np.abs(X[:, 1]) < 1e-12)
    f = ScalarField(g, np.where(on, 0.0, 1e6).reshape(g.shape))
    dual = DualGrid(TensorGrid(3, 3.0, 13))
    conj = legendre_nd(f, dual, require_coverage=False)
    P = dual.grid.points()
    assert np.allclose(conj.values.ravel(), np.abs(P[:, 2]), atol=1e-12)


def test_coverage_enforced():
    f = quad(2, 2.0, 17)
    with pytest.raises(CoverageError):
        legendre_nd(f, DualGrid(TensorGrid(2, 1.0, 9)))


@pytest.mark.parametrize("n,m", [(1, 33), (2, 33), (3, 13)])
def test_fast_equals_brute(n, m):
    rng = np.random.default_rng(n)
    g = TensorGrid(n, 1.0, m)
    f = ScalarField(g, rng.standard_normal(g.shape) + 3 * (g.points() ** 2).sum(axis=1).reshape(g.shape))
    dual = DualGrid.covering(f, m=m + 4)
    assert np.max(np.abs(legendre_nd(f, dual).values - legendre_brute(f, dual).values)) <= 1e-12


def test_argmax_attains_conjugate():
    rng = np.random.default_rng(3)
    g = TensorGrid(3, 1.0, 11)
    f = ScalarField(g, rng.uniform(0, 1, g.shape) + (g.points() ** 2).sum(axis=1).reshape(g.shape))
    dual = DualGrid.covering(f)
    conj, arg = legendre_nd(f, dual, return_argmax=True)
    X = g.points()
    P = dual.grid.points()
    attained = np.einsum("ij,ij->i", P, X[arg.ravel()]) - f.values.ravel()[arg.ravel()]
    assert np.allclose(attained, conj.values.ravel(), atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_order_reversing(seed):
    rng = np.random.default_rng(seed)
    g = TensorGrid(2, 1.0, 9)
    f = ScalarField(g, rng.uniform(0, 2, g.shape))
    h = ScalarField(g, f.values + rng.uniform(0, 1, g.shape))
    dual = DualGrid.box(2, 40.0, 17)
    a = legendre_nd(f, dual, require_coverage=False).values
    b = legendre_nd(h, dual, require_coverage=False).values
    assert np.all(a >= b)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_fenchel_young(seed):
    rng = np.random.default_rng(seed)
    g = TensorGrid(2, 1.0, 17)
    f = ScalarField(g, rng.uniform(-1, 1, g.shape) + 2 * (g.points() ** 2).sum(axis=1).reshape(g.shape))
    dual = DualGrid.covering(f)
    conj = legendre_nd(f, dual)
    i = rng.integers(0, g.size, 500)
    j = rng.integers(0, dual.grid.size, 500)
    gap = f.values.ravel()[i] + conj.values.ravel()[j] - np.einsum("ij,ij->i", g.points()[i], dual.grid.points()[j])
    assert gap.min() >= -1e-12


def test_fenchel_young_equality_at_gradient():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    f = quad(2, 1.0, 21, A)
    x = np.array([0.3, -0.2])
    dual = DualGrid(TensorGrid(2, 3.0, 31))
    p = A @ x  # = (0.5, -0.05): not a dual node, so use the refined value
    conj, arg = legendre_nd(f, dual, return_argmax=True)
    ref = refine_conjugate(f, dual, conj, arg)
    k = dual.grid.index_of(p)
    q = dual.grid.coordinate(k)
    exact = 0.5 * q @ np.linalg.solve(A, q)
    assert ref.values[k] == pytest.approx(exact, abs=1e-12)
    assert 0.5 * x @ A @ x + 0.5 * p @ np.linalg.solve(A, p) == pytest.approx(x @ p, abs=1e-14)


def test_max_of_affines_interpolates_segment():
    g = TensorGrid(2, 2.0, 41)
    g1, g2 = np.array([1.0, 0.0]), np.array([-0.5, 0.5])
    b1, b2 = 0.3, 0.1
    f = ScalarField.from_function(g, lambda X: np.maximum(X @ g1 - b1, X @ g2 - b2))
    dual = DualGrid(TensorGrid(2, 1.5, 61))
    for t in np.linspace(0, 1, 7):
        p = t * g1 + (1 - t) * g2
        val = np.max(g.points() @ p - f.values.ravel())
        assert val == pytest.approx(t * b1 + (1 - t) * b2, abs=1e-12)
    conj = legendre_nd(f, dual, require_coverage=False)
    k = dual.grid.index_of(g1)
    assert conj.values[k] == pytest.approx(b1, abs=1e-12)


# biconjugate


def test_biconjugate_of_convex_field():
    f = ScalarField.from_function(TensorGrid(2, 1.0, 33), lambda X: np.abs(X[:, 0]) + 0.5 * (X**2).sum(axis=1))
    ff = biconjugate(f)
    lip = 2.5
    assert np.max(np.abs(ff.values - f.values)) <= 2 * f.grid.h * lip
    assert np.all(ff.values <= f.values + 1e-12)


def test_biconjugate_double_well():
    g = TensorGrid(1, 2.0, 401)
    f = ScalarField.from_function(g, lambda X: (X[:, 0] ** 2 - 1) ** 2)
    ff = biconjugate(f, DualGrid(TensorGrid(1, 30.0, 4001)))
    x = g.axis()
    inside = np.abs(x) <= 1
    assert np.max(np.abs(ff.values[inside])) <= 1e-2
    outside = np.abs(x) >= 1.1
    assert np.max(np.abs(ff.values[outside] - f.values[outside])) <= 1e-2


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_biconjugate_below(seed):
    rng = np.random.default_rng(seed)
    f = ScalarField(TensorGrid(2, 1.0, 11), rng.uniform(-1, 1, (11, 11)))
    assert np.all(biconjugate(f).values <= f.values + 1e-12)


# refinement and the solution map


def test_refinement_recovers_off_lattice_quadratic():
    A = np.array([[1.5, 0.2, 0.0], [0.2, 1.0, 0.1], [0.0, 0.1, 0.8]])
    f = quad(3, 2.0, 33, A)
    dual = DualGrid(TensorGrid(3, 0.9, 13))  # slopes off the primal lattice
    conj, arg = legendre_nd(f, dual, return_argmax=True, require_coverage=False)
    P = dual.grid.points()
    exact = 0.5 * np.einsum("ij,ij->i", P, np.linalg.solve(A, P.T).T)
    ref = refine_conjugate(f, dual, conj, arg)
    assert np.max(np.abs(conj.values.ravel() - exact)) > 1e-4
    assert np.max(np.abs(ref.values.ravel() - exact)) < 1e-12


def test_refinement_leaves_kinks():
    f = ScalarField.from_function(TensorGrid(2, 1.0, 21), lambda X: np.abs(X).sum(axis=1))
    dual = DualGrid(TensorGrid(2, 1.0, 11))
    conj, arg = legendre_nd(f, dual, return_argmax=True, require_coverage=False)
    assert np.allclose(refine_conjugate(f, dual, conj, arg).values, conj.values, rtol=0, atol=1e-14)


def radial_conjugate(n, s):
    r = np.linspace(0, 6, 600_001)
    W = W_profile(n, r)
    return np.array([np.max(si * r - W) for si in s])


def test_solution_of_radial_barrier():
    g = TensorGrid(3, 3.0, 61)
    u_star = ScalarField(g, W_profile(3, g.radius()))
    dual = DualGrid(TensorGrid(3, 2.0, 41))
    u = build_solution(u_star, dual, refine=True)
    P = dual.grid.points()
    s = np.linalg.norm(P, axis=1)
    ref = radial_conjugate(3, np.unique(np.round(s, 12)))
    lookup = dict(zip(np.unique(np.round(s, 12)), ref))
    oracle = np.array([lookup[v] for v in np.round(s, 12)])
    assert np.max(np.abs(u.values.ravel() - oracle)) < 5 * g.h**2
    # the unit-ball subgradient at 0 shows up as a cone tip: u - u(0) ~ |p|
    small = (s > 0) & (s <= 0.3)
    slope = (u.values.ravel()[small] - u.values[(20, 20, 20)]) / s[small]
    assert np.all(np.abs(slope - 1.0) < 0.1)
