import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from penvi.core import Grid, ParameterError, SizeMismatchError
from penvi.operators import (MaterialLaw, build_operator, eval_a, eval_b,
                             eval_potential_A, power_stress,
                             power_stress_jacobian)


@pytest.fixture
def grid1d():
    return Grid((1.0,), (21,))


@pytest.fixture
def grid2d():
    return Grid((1.0, 1.5), (9, 13))


# --- apply_L -----------------------------------------------------------------

def test_gradient_of_constant_is_zero(grid1d):
    op = build_operator(grid1d, "gradient")
    assert np.allclose(op.apply(np.full(21, 3.7)), 0.0)


def test_gradient_exact_on_linear(grid1d):
    op = build_operator(grid1d, "gradient")
    x = grid1d.coords()[:, 0]
    lu = op.apply(x)
    assert np.allclose(lu[:, 0], 1.0, atol=1e-13)


def test_laplacian_exact_on_quadratic(grid1d):
    op = build_operator(grid1d, "laplacian")
    x = grid1d.coords()[:, 0]
    lu = op.apply(x**2)
    assert np.allclose(lu[:, 0], 2.0, atol=1e-10)
    assert op.n_points == 19


def test_gradient2d_exact_on_linear(grid2d):
    op = build_operator(grid2d, "gradient")
    c = grid2d.coords()
    u = 2.0 * c[:, 0] - 3.0 * c[:, 1]
    lu = op.apply(u)
    assert np.allclose(lu[:, 0], 2.0, atol=1e-12)
    assert np.allclose(lu[:, 1], -3.0, atol=1e-12)


def test_apply_grid_mismatch(grid1d):
    op = build_operator(grid1d, "gradient")
    with pytest.raises(SizeMismatchError):
        op.apply(np.zeros(20))


def test_laplacian_2d_unsupported(grid2d):
    with pytest.raises(ParameterError):
        build_operator(grid2d, "laplacian")


# --- adjoint -----------------------------------------------------------------

def _random_dirichlet(rng, grid):
    u = rng.normal(size=grid.n_nodes)
    u[grid.boundary_mask()] = 0.0
    return u


@pytest.mark.parametrize("kind,dim", [("gradient", 1), ("laplacian", 1),
                                      ("gradient", 2)])
def test_adjoint_identity_random_pairs(kind, dim):
    grid = Grid((1.0,), (17,)) if dim == 1 else Grid((1.0, 1.5), (7, 9))
    op = build_operator(grid, kind)
    rng = np.random.default_rng(42)
    w = grid.node_weight
    for _ in range(100):
        u = _random_dirichlet(rng, grid)
        q = rng.normal(size=(op.n_points, op.n_components))
        lhs = w * float(np.sum(op.apply(u) * q))
        rhs = w * float(np.dot(u, op.apply_adjoint(q)))
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_adjoint_matches_dense_transpose_oracle(grid1d):
    op = build_operator(grid1d, "gradient")
    dense = op.matrix.toarray()
    rng = np.random.default_rng(1)
    q = rng.normal(size=(op.n_points, 1))
    got = op.apply_adjoint(q)
    oracle = dense.T @ q.ravel()
    oracle[0] = oracle[-1] = 0.0
    assert np.allclose(got, oracle, atol=1e-14)


def test_adjoint_zero(grid1d):
    op = build_operator(grid1d, "gradient")
    assert np.allclose(op.apply_adjoint(np.zeros((20, 1))), 0.0)


def test_gradient_adjoint_is_negative_divergence(grid1d):
    # interior node i: (L* q)_i = -(q_{i+1/2} - q_{i-1/2}) / h
    op = build_operator(grid1d, "gradient")
    rng = np.random.default_rng(5)
    q = rng.normal(size=(20, 1))
    got = op.apply_adjoint(q)
    h = grid1d.spacing[0]
    for i in range(1, 20):
        assert np.isclose(got[i], -(q[i, 0] - q[i - 1, 0]) / h, atol=1e-12)
    assert got[0] == 0.0 and got[-1] == 0.0


def test_adjoint_vanishes_on_boundary_2d(grid2d):
    op = build_operator(grid2d, "gradient")
    rng = np.random.default_rng(2)
    q = rng.normal(size=(op.n_points, 2))
    out = op.apply_adjoint(q)
    assert np.all(out[grid2d.boundary_mask()] == 0.0)


# --- constitutive laws -------------------------------------------------------

def test_eval_a_zero_input():
    law = MaterialLaw(p=1.5, alpha=1.0, mu=0.0)
    out = eval_a(law, [0.5], 0.0, np.zeros(2))
    assert np.allclose(out, 0.0)


def test_eval_a_linear_case():
    law = MaterialLaw(p=2.0, alpha=1.0, mu=0.0)
    assert np.allclose(eval_a(law, [0.1], 0.0, np.array([3.0, 4.0])),
                       [3.0, 4.0])


def test_eval_a_cubic_case():
    # p = 3: |xi| = 5 so a(xi) = 5 xi
    law = MaterialLaw(p=3.0, alpha=1.0, mu=0.0)
    assert np.allclose(eval_a(law, [0.1], 0.0, np.array([3.0, 4.0])),
                       [15.0, 20.0])


def test_potential_values():
    law = MaterialLaw(p=2.0, alpha=1.0, mu=0.0)
    assert eval_potential_A(law, [0.0], 0.0, np.zeros(2)) == 0.0
    assert np.isclose(eval_potential_A(law, [0.0], 0.0, np.array([3.0, 4.0])),
                      12.5)


@pytest.mark.parametrize("p,mu", [(1.5, 1e-3), (2.0, 0.0), (3.0, 0.0),
                                  (4.0, 1e-2)])
def test_potential_gradient_matches_a(p, mu):
    # central differences of A against a, random points
    law = MaterialLaw(p=p, alpha=0.7, mu=mu)
    rng = np.random.default_rng(11)
    h = 1e-6
    for _ in range(20):
        xi = rng.normal(size=2) * 2.0
        if p < 2 and mu == 0.0 and np.linalg.norm(xi) < 1e-3:
            continue
        a_val = eval_a(law, [0.3], 0.0, xi)
        for comp in range(2):
            e = np.zeros(2)
            e[comp] = h
            fd = (eval_potential_A(law, [0.3], 0.0, xi + e)
                  - eval_potential_A(law, [0.3], 0.0, xi - e)) / (2 * h)
            assert abs(fd - a_val[comp]) <= 1e-6 * max(1.0, abs(a_val[comp]))


def test_eval_b():
    zero = MaterialLaw(p=2.0, b_kind="zero")
    lin = MaterialLaw(p=2.0, b_kind="linear", lam=2.0)
    assert eval_b(zero, 7.0) == 0.0
    assert eval_b(lin, -3.0) == -6.0


@settings(max_examples=100, deadline=None)
@given(st.floats(-100, 100), st.floats(-100, 100))
def test_b_monotone(e1, e2):
    law = MaterialLaw(p=2.0, b_kind="linear", lam=1.3)
    assert (eval_b(law, e1) - eval_b(law, e2)) * (e1 - e2) >= 0.0


# --- monotonicity and growth of a --------------------------------------------

@pytest.mark.parametrize("p", [1.5, 2.0, 3.0, 4.0])
def test_a_monotonicity_random(p):
    rng = np.random.default_rng(int(p * 10))
    n = 10_000
    xi1 = rng.normal(0, 2.0, size=(n, 2))
    xi2 = rng.normal(0, 2.0, size=(n, 2))
    s1 = power_stress(xi1, p, 0.0)
    s2 = power_stress(xi2, p, 0.0)
    prods = np.einsum("ij,ij->i", s1 - s2, xi1 - xi2)
    assert prods.min() >= -1e-12


def test_a_strong_monotonicity_p_ge_2():
    # (a(xi)-a(xi')).(xi-xi') >= a_* |xi-xi'|^p with measured a_* > 0
    rng = np.random.default_rng(9)
    for p in (2.0, 3.0, 4.0):
        xi1 = rng.normal(0, 1.5, size=(5000, 2))
        xi2 = rng.normal(0, 1.5, size=(5000, 2))
        s1 = power_stress(xi1, p, 0.0)
        s2 = power_stress(xi2, p, 0.0)
        prods = np.einsum("ij,ij->i", s1 - s2, xi1 - xi2)
        dists = np.sum((xi1 - xi2) ** 2, axis=1) ** (p / 2.0)
        mask = dists > 1e-12
        a_star = np.min(prods[mask] / dists[mask])
        assert a_star > 0.0


def test_a_strong_monotonicity_p_lt_2_weighted():
    # weighted form (|xi|+|xi'|)^(p-2) |xi-xi'|^2 for p < 2, mu = 0
    rng = np.random.default_rng(10)
    p = 1.5
    xi1 = rng.normal(0, 1.5, size=(5000, 2))
    xi2 = rng.normal(0, 1.5, size=(5000, 2))
    s1 = power_stress(xi1, p, 0.0)
    s2 = power_stress(xi2, p, 0.0)
    prods = np.einsum("ij,ij->i", s1 - s2, xi1 - xi2)
    m1 = np.linalg.norm(xi1, axis=1)
    m2 = np.linalg.norm(xi2, axis=1)
    weight = (m1 + m2) ** (p - 2.0) * np.sum((xi1 - xi2) ** 2, axis=1)
    mask = weight > 1e-12
    assert np.min(prods[mask] / weight[mask]) > 0.0


def test_a_growth_bound():
    # |a(xi)| <= a^* (|xi|^2 + mu^2)^((p-1)/2) with a^* = sup alpha
    rng = np.random.default_rng(12)
    for p, mu in ((1.5, 1e-4), (2.0, 0.0), (3.0, 1e-3)):
        xi = rng.normal(0, 3.0, size=(2000, 2))
        s = power_stress(xi, p, mu)
        lhs = np.linalg.norm(s, axis=1)
        rhs = (np.sum(xi**2, axis=1) + mu**2) ** ((p - 1.0) / 2.0)
        assert np.all(lhs <= rhs * (1.0 + 1e-12))


def test_stress_jacobian_matches_finite_differences():
    rng = np.random.default_rng(13)
    h = 1e-7
    for p, mu in ((1.5, 1e-2), (2.0, 0.0), (3.0, 0.0), (4.0, 1e-3)):
        xi = rng.normal(0, 1.0, size=(50, 2))
        blocks = power_stress_jacobian(xi, p, mu)
        for comp in range(2):
            e = np.zeros(2)
            e[comp] = h
            fd = (power_stress(xi + e, p, mu)
                  - power_stress(xi - e, p, mu)) / (2 * h)
            assert np.allclose(blocks[:, :, comp], fd, atol=1e-5, rtol=1e-5)


def test_material_law_validation():
    with pytest.raises(ParameterError):
        MaterialLaw(p=1.0)
    with pytest.raises(ParameterError):
        MaterialLaw(p=2.0, mu=-1e-3)
    with pytest.raises(ParameterError):
        MaterialLaw(p=2.0, b_kind="cubic")
    with pytest.raises(ParameterError):
        MaterialLaw(p=2.0, lam=-1.0)


def test_alpha_callable_sampled_at_points():
    law = MaterialLaw(p=2.0, alpha=lambda pts, t: 1.0 + pts[:, 0] + t)
    grid = Grid((1.0,), (11,))
    op = build_operator(grid, "gradient")
    vals = law.alpha_at(op.eval_points, 0.5)
    assert np.allclose(vals, 1.5 + op.eval_points[:, 0])


def test_resolve_mu_default():
    assert MaterialLaw(p=1.5).resolve_mu(2.0) == pytest.approx(2e-8)
    assert MaterialLaw(p=3.0).resolve_mu(2.0) == 0.0
    assert MaterialLaw(p=1.5, mu=1e-4).resolve_mu(2.0) == 1e-4
