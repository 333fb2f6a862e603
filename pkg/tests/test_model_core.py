from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cl_observer.lmi import ObserverGains
from cl_observer.model_core import (AffineModel, DomainError, JacobianBounds, OutOfDomainWarning,
                                    assemble_A, derive_jacobian_bounds, jac_g, jac_Y,
                                    lifted_terms, multiplier_matrices, quadratic_form,
                                    sector_residuals)
from cl_observer.models import linear_model

BOX = np.array([[-3.0, 3.0], [-3.0, 3.0]])
SYM_THETA = np.array([[-1, 1], [-1, 1], [-0.5, 0.5], [-0.5, 0.5]], dtype=float)
coord = st.floats(-3, 3, allow_nan=False)


def _zero_gains(n=2, q=1):
    z = np.zeros((n, q))
    return ObserverGains(np.eye(n), z, z, z, z, 1.0, -1.0)


def _dense_jacobian_oracle(density, theta_box, u_box):
    """Brute-force element-wise ranges of the lifted Jacobians of the benchmark.

    Central differences of vectorized re-implementations of Y and g, extremised
    over every vertex of the parameter and input boxes.
    """
    g1 = np.linspace(-3, 3, density)
    X1, X2 = np.meshgrid(g1, g1, indexing="ij")
    x1, x2 = X1.ravel(), X2.ravel()

    def Ytheta(a, b, th):
        c = np.cos(2 * a) + 2
        return np.stack([th[0] * b, th[1] * a + th[2] * b + th[3] * b * c * c])

    def gu(a, b, u):
        return np.stack([0 * a, (np.cos(2 * a) + 2) * u])

    h = 1e-6
    out = {}
    for name, fun, verts in (("y", Ytheta, itertools.product(*theta_box)),
                             ("g", gu, [u_box[0, 0], u_box[0, 1]])):
        lo = np.full((2, 2), np.inf)
        hi = np.full((2, 2), -np.inf)
        for v in verts:
            v = np.atleast_1d(v)
            v = v[0] if name == "g" else v
            d1 = (fun(x1 + h, x2, v) - fun(x1 - h, x2, v)) / (2 * h)
            d2 = (fun(x1, x2 + h, v) - fun(x1, x2 - h, v)) / (2 * h)
            J = np.stack([d1, d2], axis=1)  # (row, col, sample)
            lo = np.minimum(lo, J.min(axis=2))
            hi = np.maximum(hi, J.max(axis=2))
        out[name] = (lo, hi)
    return out


# ---------------------------------------------------------------- bounds

def test_theta1_entry_of_y_jacobian_is_widened_by_safety(model, wide_bounds):
    assert wide_bounds.K_y1[0, 1] == pytest.approx(-1.05, abs=1e-9)
    assert wide_bounds.K_y2[0, 1] == pytest.approx(1.05, abs=1e-9)


def test_bounds_match_dense_grid_oracle(model):
    ubox = np.array([[-450.0, 450.0]])
    b = derive_jacobian_bounds(model, BOX, ubox, SYM_THETA, grid_density=201, safety=0.0)
    ref = _dense_jacobian_oracle(201, SYM_THETA, ubox)
    for (lo, hi), K1, K2 in ((ref["y"], b.K_y1, b.K_y2), (ref["g"], b.K_g1, b.K_g2)):
        scale = 1 + np.abs(hi)
        np.testing.assert_allclose(K1, lo, atol=1e-5 * scale.max())
        np.testing.assert_allclose(K2, hi, atol=1e-5 * scale.max())
    np.testing.assert_array_equal(b.K_f1, 0)
    np.testing.assert_array_equal(b.K_f2, 0)


def test_double_density_resampling_stays_inside_widened_bounds(model):
    ubox = np.array([[-450.0, 450.0]])
    coarse = derive_jacobian_bounds(model, BOX, ubox, SYM_THETA, grid_density=51)
    fine = _dense_jacobian_oracle(101, SYM_THETA, ubox)
    for (lo, hi), K1, K2 in ((fine["y"], coarse.K_y1, coarse.K_y2),
                             (fine["g"], coarse.K_g1, coarse.K_g2)):
        tol = 1e-6 * (1 + np.abs(hi))
        assert np.all(lo >= K1 - tol)
        assert np.all(hi <= K2 + tol)


def test_constant_jacobian_is_exact_on_any_grid():
    F = np.array([[0.0, 1.0], [-2.0, -3.0]])
    Y0 = np.array([[1.0, 0.0], [0.0, 2.0]])
    m = linear_model(F, [[1.0, 0.0]], Y0=Y0)
    for dens in (2, 7):
        b = derive_jacobian_bounds(m, BOX, [[-1, 1]], [[-1, 1], [-1, 1]], grid_density=dens)
        np.testing.assert_array_equal(b.K_y1, 0)
        np.testing.assert_array_equal(b.K_y2, 0)
        np.testing.assert_array_equal(b.K_f1, F)
        np.testing.assert_array_equal(b.K_f2, F)
        np.testing.assert_array_equal(b.K_g1, 0)
        np.testing.assert_array_equal(b.K_g2, 0)


def test_nonfinite_callback_names_sample():
    def Y(x):
        return np.array([[1.0 / x[0] if x[0] != 0 else np.nan]])

    m = AffineModel(1, 1, 1, 1, Y=Y, f0=lambda x: np.zeros(1), g=lambda x: np.zeros((1, 1)),
                    C=[[1.0]])
    with pytest.raises(DomainError, match=r"x=\[0\.0\]"):
        derive_jacobian_bounds(m, [[-1, 1]], [[-1, 1]], [[0, 1]], grid_density=3)


def test_bounds_reject_inverted_intervals():
    z = np.zeros((1, 1))
    with pytest.raises(ValueError, match="exceeds"):
        JacobianBounds(np.ones((1, 1)), z, z, z, z, z, [[0, 1]], [[0, 1]], 1.0)


@settings(max_examples=60, deadline=None)
@given(coord, coord)
def test_analytic_jacobians_match_central_differences(model, a, b):
    x = np.array([a, b])
    h = 1e-5
    num = np.stack([(model.Y(x + h * e) - model.Y(x - h * e)) / (2 * h) for e in np.eye(2)],
                   axis=-1)
    np.testing.assert_allclose(jac_Y(model, x), num, rtol=1e-4, atol=1e-4 * (1 + np.abs(num).max()))
    num_g = np.stack([(model.g(x + h * e) - model.g(x - h * e)) / (2 * h) for e in np.eye(2)],
                     axis=-1)
    np.testing.assert_allclose(jac_g(model, x), num_g, rtol=1e-4, atol=1e-8)


# ---------------------------------------------------------------- A and lifted terms

def test_assemble_A_examples(bounds):
    z = np.zeros((2, 2))
    zero = JacobianBounds(z, z, z, z, z, z, BOX, [[-1, 1]], 1.0)
    np.testing.assert_array_equal(assemble_A(zero), z)
    b = JacobianBounds(np.array([[0, 1], [0, 0]]), np.array([[0, 1], [0, 0]]), np.eye(2),
                       np.eye(2), z, z, BOX, [[-1, 1]], 1.0)
    np.testing.assert_array_equal(assemble_A(b), [[1, 1], [0, 1]])
    np.testing.assert_array_equal(assemble_A(bounds),
                                  np.add(np.add(bounds.K_y1, bounds.K_f1), bounds.K_g1))


def test_lifted_terms_vanish_at_origin(model, bounds, theta_true):
    for term in lifted_terms(np.zeros(2), theta_true, np.zeros(1), model, bounds):
        np.testing.assert_array_equal(term, 0)


def test_lifted_terms_at_benchmark_point(model, bounds, theta_true):
    x = np.array([2.0, 2.0])
    Ft, F1, Gu = lifted_terms(x, theta_true, np.zeros(1), model, bounds)
    c = np.cos(4.0) + 2
    direct = np.array([2.0, -1.0 * 2 - 0.5 * 2 + 0.5 * 2 * c * c])
    np.testing.assert_allclose(assemble_A(bounds) @ x + Ft + F1 + Gu, direct, rtol=0, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(coord, coord, st.lists(st.floats(-2, 2), min_size=4, max_size=4),
       st.floats(-450, 450))
def test_reconstruction_identity(model, bounds, a, b, th, u):
    x = np.array([a, b])
    th = np.array(th)
    u = np.array([u])
    terms = lifted_terms(x, th, u, model, bounds)
    lhs = assemble_A(bounds) @ x + sum(terms)
    rhs = model.field(x, th, u)
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * (1 + np.linalg.norm(rhs) + 50 * np.linalg.norm(x))


def test_out_of_domain_warns_and_proceeds(model, bounds, theta_true):
    with pytest.warns(OutOfDomainWarning):
        terms = lifted_terms(np.array([4.0, 0.0]), theta_true, np.zeros(1), model, bounds)
    assert all(np.all(np.isfinite(t)) for t in terms)


# ---------------------------------------------------------------- multipliers and sectors

def test_zero_gap_multiplier_structure():
    K = np.array([[1.0, 2.0], [3.0, 4.0]])
    z = np.zeros((2, 2))
    b = JacobianBounds(K, K, z, 2 * np.eye(2), z, z, BOX, [[-1, 1]], 1.0)
    J = multiplier_matrices(b)
    expect_y = np.block([[z, z], [z, np.eye(2)]])
    np.testing.assert_array_equal(J.J_y, expect_y)
    j21, j22 = J.blocks("f")
    np.testing.assert_array_equal(j21, -np.eye(2))
    np.testing.assert_array_equal(J.J_f[:2, 2:], -np.eye(2))


def test_benchmark_multiplier_structure(bounds):
    J = multiplier_matrices(bounds)
    for Jk, (K1, K2) in zip(J.all(), ((bounds.K_y1, bounds.K_y2), (bounds.K_f1, bounds.K_f2),
                                      (bounds.K_g1, bounds.K_g2))):
        np.testing.assert_array_equal(Jk, Jk.T)
        np.testing.assert_array_equal(Jk[:2, :2], 0)
        np.testing.assert_array_equal(Jk[2:, 2:], np.eye(2))
        np.testing.assert_allclose(Jk[2:, :2], -(K2 - K1) / 2, rtol=0, atol=0)


def test_sector_residuals_vanish_at_zero_error(model, bounds, gains, theta_true):
    x = np.array([1.0, -0.5])
    s = sector_residuals(x, x, np.array([3.0]), theta_true, gains, model, bounds)
    for psi in (s.psi_y, s.psi_f, s.psi_g):
        np.testing.assert_array_equal(psi, 0)
    assert s.in_domain and np.all(s.forms <= 0)


def test_linear_plant_without_injection_gives_jacobian_times_error():
    F = np.array([[0.0, 1.0], [-2.0, -3.0]])
    m = linear_model(F, [[1.0, 0.0]])
    b = derive_jacobian_bounds(m, BOX, [[-1, 1]], [[-1, 1]], grid_density=3)
    rng = np.random.default_rng(0)
    for _ in range(50):
        x, xh = rng.uniform(-3, 3, 2), rng.uniform(-3, 3, 2)
        s = sector_residuals(x, xh, np.zeros(1), np.zeros(1), _zero_gains(), m, b)
        np.testing.assert_allclose(s.psi_f, (F - b.K_f1) @ (x - xh), atol=1e-14)
        assert np.all(s.forms <= 1e-12)


def test_sector_forms_are_nonpositive_in_box(model, bounds, gains):
    rng = np.random.default_rng(1)
    J = multiplier_matrices(bounds)
    worst, used = -np.inf, 0
    for _ in range(500):
        x = rng.uniform(-3, 3, 2)
        xh = x + rng.uniform(-0.01, 0.01, 2)
        th = rng.uniform(bounds.theta_box[:, 0], bounds.theta_box[:, 1])
        s = sector_residuals(x, xh, rng.uniform(-450, 450, 1), th, gains, model, bounds, J)
        if s.in_domain:
            used += 1
            worst = max(worst, s.forms.max())
    assert used > 100
    assert worst <= 1e-9


def test_out_of_box_injection_skips_forms(model, bounds, gains, theta_true):
    # a large output error pushes x_hat + l (y - C x_hat) far outside the box
    s = sector_residuals(np.array([2.9, 2.9]), np.array([-2.9, 2.9]), np.zeros(1), theta_true,
                         gains, model, bounds)
    assert not s.in_domain
    assert np.all(np.isnan(s.forms))


def test_quadratic_form_with_identity_transform():
    J = np.block([[np.zeros((1, 1)), -np.ones((1, 1))], [-np.ones((1, 1)), np.eye(1)]])
    # [e; psi] J [e; psi] = psi^2 - 2 e psi
    val = quadratic_form(J, np.zeros((1, 1)), np.ones((1, 1)), np.array([2.0]), np.array([3.0]))
    assert val == pytest.approx(9 - 12)


def test_shape_check_reports_callback():
    m = AffineModel(2, 1, 1, 1, Y=lambda x: np.zeros((2, 2)), f0=lambda x: np.zeros(2),
                    g=lambda x: np.zeros((2, 1)), C=[[1.0, 0.0]])
    with pytest.raises(ValueError, match="Y"):
        m.check_shapes(np.zeros(2))
    with pytest.raises(ValueError, match="C must be"):
        AffineModel(2, 1, 1, 1, Y=m.Y, f0=m.f0, g=m.g, C=[[1.0]])
