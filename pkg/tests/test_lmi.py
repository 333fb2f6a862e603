from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cl_observer.lmi import (LmiInfeasibleError, LmiProblem, ObserverGains, SolveTrace,
                             assemble_block, barrier_solve, solve_gains, split_certificates,
                             ultimate_bound_estimate, verify_gains)
from cl_observer.model_core import multiplier_matrices

cp = pytest.importorskip("cvxpy")

# a known feasible gain pair for the benchmark under different bounds
REF_P = np.array([[2.3886, -0.1840], [-0.1840, 0.0270]])
REF_L = np.array([[10.0671], [103.167]])
Z2 = np.zeros((2, 2))


def trivial_problem(**kw):
    return LmiProblem.from_gaps(-np.eye(2), np.eye(2), [Z2, Z2, Z2], 0.5, **kw)


def infeasible_problem():
    return LmiProblem.from_gaps(np.eye(2), np.zeros((1, 2)), [Z2, Z2, Z2], 1.0)


def cvxpy_solver(problem, eps=1e-4):
    """External SDP oracle with the same block, solved by an interior-point package."""
    n, q = problem.n, problem.q
    A, C = problem.A, problem.C
    P = cp.Variable((n, n), symmetric=True)
    R = cp.Variable((n, q))
    ls = [cp.Variable((n, q)) for _ in range(3)]
    J21, J22 = 0, 0
    for which, l in zip("yfg", ls):
        j21, j22 = problem.multipliers.blocks(which)
        J21 = J21 + j21 @ (np.eye(n) - l @ C)
        J22 = J22 + j22
    top = A.T @ P + P @ A - C.T @ R.T - R @ C + 2 * problem.alpha * P
    M = cp.bmat([[top, P - J21.T], [P - J21, -J22]])
    prob = cp.Problem(cp.Minimize(0), [(M + M.T) / 2 << -eps * np.eye(2 * n),
                                       P >> 1e-3 * np.eye(n)])
    prob.solve(solver="CLARABEL")
    if prob.status not in ("optimal", "optimal_inaccurate"):
        raise LmiInfeasibleError(f"oracle status {prob.status}", np.inf)
    return P.value, R.value, *[l.value for l in ls]


# ---------------------------------------------------------------- block assembly

def test_zero_gap_block_structure():
    pb = trivial_problem()
    z = np.zeros((2, 2))
    M = assemble_block(np.eye(2), z, z, z, z, pb)
    np.testing.assert_array_equal(M, np.block([[-np.eye(2), np.eye(2)],
                                               [np.eye(2), -3 * np.eye(2)]]))
    assert np.all(np.linalg.eigvalsh(M) < 0)


def test_block_matches_independent_reassembly(shipped, model):
    g, b = shipped.gains, shipped.bounds
    pb = shipped.problem()
    M = assemble_block(g.P, g.P @ g.L, g.l1, g.l2, g.l3, pb)
    C = model.C
    J = multiplier_matrices(b)
    n = 2
    # J21, J22 summed from the three multipliers directly
    J21 = sum(Jk[n:, :n] @ (np.eye(n) - l @ C) for Jk, l in zip(J.all(), (g.l1, g.l2, g.l3)))
    J22 = sum(Jk[n:, n:] for Jk in J.all())
    A = b.K_y1 + b.K_f1 + b.K_g1
    top = A.T @ g.P + g.P @ A - C.T @ (g.P @ g.L).T - (g.P @ g.L) @ C + 2 * g.alpha * g.P
    ref = np.block([[top, g.P - J21.T], [g.P - J21, -J22]])
    np.testing.assert_allclose(M, 0.5 * (ref + ref.T), rtol=1e-12, atol=1e-9)
    np.testing.assert_array_equal(M, M.T)


# ---------------------------------------------------------------- solving

def test_trivial_problem_is_recovered_quickly():
    trace = SolveTrace()
    gains = solve_gains(trivial_problem(), trace=trace)
    assert gains.certified_margin <= -1e-6
    assert np.linalg.eigvalsh(gains.P)[0] >= 1e-6
    assert trace.iterations <= 100
    assert verify_gains(gains, trivial_problem()).passed


def test_unstabilizable_problem_is_infeasible():
    with pytest.raises(LmiInfeasibleError) as exc:
        solve_gains(infeasible_problem())
    assert exc.value.best_margin > 0


def test_objective_is_monotone_along_barrier_iteration(shipped):
    trace = SolveTrace()
    barrier_solve(shipped.problem(), trace=trace, target=0.05)
    obj = np.array(trace.objective)
    assert obj.size > 2
    assert np.all(np.diff(obj) <= 0)
    assert obj[-1] <= -0.05


def test_solver_never_returns_uncertified_gains():
    def bad_solver(problem):
        z = np.zeros((2, 1))
        return np.eye(2), np.zeros((2, 1)), z, z, z

    pb = LmiProblem.from_gaps(np.eye(2), np.array([[1.0, 0.0]]), [Z2, Z2, Z2], 1.0)
    with pytest.raises(LmiInfeasibleError):
        solve_gains(pb, solver=bad_solver)


def test_external_oracle_agrees_on_feasibility(shipped):
    A = np.array([[0.0, 1.0], [-2.0, -3.0]])
    C = np.array([[1.0, 0.0]])
    gapped = LmiProblem.from_gaps(A, C, (0.2 * np.ones((2, 2)), Z2, Z2), 0.5)
    for pb in (trivial_problem(), gapped, shipped.problem()):
        ours = solve_gains(pb)
        theirs = solve_gains(pb, solver=cvxpy_solver)
        assert verify_gains(ours, pb).passed and verify_gains(theirs, pb).passed
    with pytest.raises(LmiInfeasibleError):
        cvxpy_solver(infeasible_problem())


# ---------------------------------------------------------------- verification

def test_shipped_gains_verify(shipped):
    rep = verify_gains(shipped.gains, shipped.problem())
    assert rep.passed
    assert rep.max_eig <= -1e-6 and rep.lambda_min_P >= 1e-6


def test_reference_P_is_positive_definite():
    ev = np.linalg.eigvalsh(REF_P)
    np.testing.assert_allclose(ev, [0.0128, 2.4026], atol=5e-4)


def test_negative_P_fails_with_diagnosis():
    z = np.zeros((2, 2))
    g = ObserverGains(-np.eye(2), z, z, z, z, 0.5, np.nan)
    rep = verify_gains(g, trivial_problem())
    assert not rep.passed
    assert rep.lambda_min_P < 0
    assert any("positive definite" in m for m in rep.messages)


def test_asymmetric_P_is_rejected():
    z = np.zeros((2, 2))
    g = ObserverGains(np.array([[1.0, 1e-6], [0.0, 1.0]]), z, z, z, z, 0.5, np.nan)
    with pytest.raises(ValueError, match="symmetric"):
        verify_gains(g, trivial_problem())


def test_gains_dict_round_trip(shipped):
    g = shipped.gains
    g2 = ObserverGains.from_dict(g.to_dict())
    for k in ("P", "L", "l1", "l2", "l3"):
        np.testing.assert_array_equal(getattr(g, k), getattr(g2, k))


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-3, 1.0))
def test_scaling_down_a_certificate_preserves_feasibility(c):
    # with zero gaps the off-diagonal block is c P while the corner stays -3 I,
    # so shrinking keeps the Schur complement negative
    pb = trivial_problem()
    z = np.zeros((2, 2))
    g = ObserverGains(c * np.eye(2), z, z, z, z, 0.5, np.nan)
    M = assemble_block(c * np.eye(2), c * z, z, z, z, pb)
    rep = verify_gains(g, LmiProblem.from_gaps(-np.eye(2), np.eye(2), [Z2, Z2, Z2], 0.5,
                                               margin=1e-9, p_floor=1e-9))
    assert rep.passed == bool(np.linalg.eigvalsh(M)[-1] <= -1e-9)
    assert rep.passed


def test_scaling_up_can_break_feasibility():
    # P = c I gives eigenvalues of [[-c, c], [c, -3]]; det < 0 once c > 3
    z = np.zeros((2, 2))
    g = ObserverGains(4.0 * np.eye(2), z, z, z, z, 0.5, np.nan)
    assert not verify_gains(g, trivial_problem()).passed


def test_split_certificates_are_reported(shipped, model):
    vals = split_certificates(shipped.gains, shipped.bounds, model.C)
    assert vals.shape == (3,) and np.all(np.isfinite(vals))


# ---------------------------------------------------------------- ultimate bound

def test_ultimate_bound_examples():
    assert ultimate_bound_estimate(np.eye(2), 2.0, 0.0, 1.0) == 0.0
    assert ultimate_bound_estimate(np.eye(2), 2.0, 1.0, 1.0) == pytest.approx(0.5)
    ev = np.linalg.eigvalsh(REF_P)
    xi = ev[-1] / (2.0 * ev[0])
    assert xi == pytest.approx(94.2, rel=0.02)
    assert ultimate_bound_estimate(REF_P, 2.0, 1.0, 1.0) == pytest.approx(
        np.sqrt(ev[-1] / ev[0]) * xi, rel=1e-12)


def test_ultimate_bound_rejects_singular_P():
    with pytest.raises(ValueError):
        ultimate_bound_estimate(np.diag([1.0, 0.0]), 2.0, 1.0, 1.0)


def test_problem_validation():
    with pytest.raises(ValueError, match="alpha"):
        LmiProblem.from_gaps(-np.eye(2), np.eye(2), [Z2, Z2, Z2], 0.0)
    with pytest.raises(ValueError, match="shapes"):
        LmiProblem.from_gaps(-np.eye(2), np.eye(3), [Z2, Z2, Z2], 1.0)


def test_reference_gains_do_not_certify_our_box(shipped):
    # this pair certifies a tighter bound box than the one shipped here
    g = ObserverGains(REF_P, REF_L, np.array([[1.0], [0.0]]), np.array([[1.0], [0.0]]),
                      np.array([[1.0], [0.0]]), 2.0, np.nan)
    assert not verify_gains(g, shipped.problem()).passed
