"""Observer gain synthesis by a small log-barrier semidefinite feasibility solver.

The decision variables (P, R, l1, l2, l3) enter the 2n x 2n block

    [[A^T P + P A - C^T R^T - R C + 2 alpha P,  P - J21^T],
     [P - J21,                                  -J22     ]]

affinely, so the block is ``F(z) = F0 + sum_i z_i F_i`` over a parameter
vector ``z``. Feasibility is sought by minimising its largest eigenvalue
``t`` with Newton steps on

    s t - logdet(t I - F(z)) - logdet(P(z) - eps_P I) - log(rho^2 - |z|^2)

for increasing ``s``, stopping as soon as ``t`` drops below the target margin.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import null_space

from .model_core import JacobianBounds, MultiplierMatrices, assemble_A, multiplier_matrices

log = logging.getLogger(__name__)


class LmiInfeasibleError(RuntimeError):
    """No certified gains were found; ``best_margin`` is the smallest max-eigenvalue seen."""

    def __init__(self, message: str, best_margin: float, iterations: int = 0):
        super().__init__(f"infeasible: {message} (best margin {best_margin:.3e})")
        self.best_margin = best_margin
        self.iterations = iterations


@dataclass(frozen=True)
class LmiProblem:
    A: np.ndarray
    C: np.ndarray
    multipliers: MultiplierMatrices
    alpha: float
    margin: float = 1e-6
    p_floor: float = 1e-6

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        n = A.shape[0]
        if A.shape != (n, n) or C.shape[1] != n:
            raise ValueError(f"inconsistent shapes A {A.shape}, C {C.shape}")
        for J in self.multipliers.all():
            if J.shape != (2 * n, 2 * n):
                raise ValueError(f"multiplier of shape {J.shape}, expected {(2 * n, 2 * n)}")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.margin > 0:
            raise ValueError("margin must be positive")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "C", C)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def q(self) -> int:
        return self.C.shape[0]

    @classmethod
    def from_bounds(cls, bounds: JacobianBounds, C, alpha: float, **kw) -> "LmiProblem":
        return cls(A=assemble_A(bounds), C=C, multipliers=multiplier_matrices(bounds),
                   alpha=alpha, **kw)

    @classmethod
    def from_gaps(cls, A, C, gaps, alpha: float, **kw) -> "LmiProblem":
        """Build multipliers directly from the three gap matrices ``K2 - K1``."""
        n = np.atleast_2d(A).shape[0]
        Js = []
        for G in gaps:
            G = np.asarray(G, dtype=float)
            Js.append(np.block([[np.zeros((n, n)), -G.T / 2], [-G / 2, np.eye(n)]]))
        return cls(A=A, C=C, multipliers=MultiplierMatrices(*Js), alpha=alpha, **kw)


@dataclass(frozen=True)
class ObserverGains:
    P: np.ndarray
    L: np.ndarray
    l1: np.ndarray
    l2: np.ndarray
    l3: np.ndarray
    alpha: float
    certified_margin: float

    def to_dict(self) -> dict:
        return {"P": self.P.tolist(), "L": self.L.tolist(), "l1": self.l1.tolist(),
                "l2": self.l2.tolist(), "l3": self.l3.tolist(), "alpha": self.alpha,
                "certified_margin": self.certified_margin}

    @classmethod
    def from_dict(cls, d: dict) -> "ObserverGains":
        arr = {k: np.atleast_2d(np.asarray(d[k], dtype=float)) for k in ("P", "L", "l1", "l2", "l3")}
        for k in ("L", "l1", "l2", "l3"):
            if arr[k].shape[0] == 1 and arr["P"].shape[0] > 1:
                arr[k] = arr[k].T
        return cls(**arr, alpha=float(d["alpha"]), certified_margin=float(d["certified_margin"]))


def assemble_block(P, R, l1, l2, l3, problem: LmiProblem) -> np.ndarray:
    n = problem.n
    C = problem.C
    A = problem.A
    eye = np.eye(n)
    J21 = np.zeros((n, n))
    J22 = np.zeros((n, n))
    for which, l in (("y", l1), ("f", l2), ("g", l3)):
        j21, j22 = problem.multipliers.blocks(which)
        J21 = J21 + j21 @ (eye - l @ C)
        J22 = J22 + j22
    top = A.T @ P + P @ A - C.T @ R.T - R @ C + 2.0 * problem.alpha * P
    M = np.block([[top, P - J21.T], [P - J21, -J22]])
    return 0.5 * (M + M.T)


# --------------------------------------------------------------------------
# verification


@dataclass
class MarginReport:
    max_eig: float
    lambda_min_P: float
    margin: float
    passed: bool
    messages: list = field(default_factory=list)

    def __str__(self):
        status = "pass" if self.passed else "fail"
        extra = "; ".join(self.messages)
        return (f"{status}: max_eig={self.max_eig:.6e} lambda_min(P)={self.lambda_min_P:.6e}"
                + (f" ({extra})" if extra else ""))


def verify_gains(gains: ObserverGains, problem: LmiProblem) -> MarginReport:
    P = np.asarray(gains.P, dtype=float)
    skew = np.max(np.abs(P - P.T)) if P.size else 0.0
    if skew > 1e-10:
        raise ValueError(f"P is not symmetric (max asymmetry {skew:.3e})")
    P = 0.5 * (P + P.T)
    R = P @ gains.L
    M = assemble_block(P, R, gains.l1, gains.l2, gains.l3, problem)
    max_eig = float(np.linalg.eigvalsh(M)[-1])
    lam_P = float(np.linalg.eigvalsh(P)[0])
    msgs = []
    if lam_P < problem.p_floor:
        msgs.append(f"P not positive definite: lambda_min(P)={lam_P:.3e} < {problem.p_floor:g}")
    if max_eig > -problem.margin:
        msgs.append(f"block not negative definite with margin {problem.margin:g}")
    return MarginReport(max_eig, lam_P, problem.margin, passed=not msgs, messages=msgs)


def split_certificates(gains: ObserverGains, bounds: JacobianBounds, C) -> np.ndarray:
    """Largest eigenvalues of the three per-nonlinearity sub-inequalities.

    Each splits ``L C`` evenly into thirds. They are sufficient, not
    necessary, for the aggregated block and are reported for inspection only.
    """
    C = np.atleast_2d(C)
    n = C.shape[1]
    P = gains.P
    LC3 = gains.L @ C / 3.0
    J = multiplier_matrices(bounds)
    out = []
    for K1, Jk, l in ((bounds.K_y1, J.J_y, gains.l1), (bounds.K_f1, J.J_f, gains.l2),
                      (bounds.K_g1, J.J_g, gains.l3)):
        Ak = K1 - LC3
        left = np.block([[Ak.T @ P + P @ Ak, P], [P, np.zeros((n, n))]])
        T = np.eye(2 * n)
        T[:n, :n] -= l @ C
        M = left - T.T @ Jk @ T
        out.append(np.linalg.eigvalsh(0.5 * (M + M.T))[-1])
    return np.array(out)


def ultimate_bound_estimate(P, alpha: float, F_bar: float, theta_err_bound: float) -> float:
    """Ultimate bound ``sqrt(lmax/lmin) * lmax F_bar |theta_err| / (alpha lmin)`` on the state error."""
    ev = np.linalg.eigvalsh(np.asarray(P, dtype=float))
    lmin, lmax = ev[0], ev[-1]
    if lmin <= 0:
        raise ValueError(f"P must be positive definite (lambda_min={lmin:.3e})")
    if alpha <= 0 or F_bar < 0:
        raise ValueError("need alpha > 0 and F_bar >= 0")
    xi = lmax * F_bar * theta_err_bound / (alpha * lmin)
    return float(np.sqrt(lmax / lmin) * xi)


# --------------------------------------------------------------------------
# barrier solver


class _Param:
    """Affine map from a flat vector z to (P, R, l1, l2, l3)."""

    def __init__(self, n: int, C: np.ndarray, injection: str):
        q = C.shape[0]
        self.n, self.q = n, q
        self.injection = injection
        if injection == "output" and np.linalg.matrix_rank(C) < q:
            log.info("C lacks full row rank; falling back to free injection gains")
            self.injection = injection = "free"
        if injection == "output":
            self.l_base = np.linalg.pinv(C)
            N = null_space(C)
        elif injection == "free":
            self.l_base = np.zeros((n, q))
            N = np.eye(n)
        else:
            raise ValueError(f"unknown injection mode {injection!r}")
        self.N = N
        self.sizes = [n * (n + 1) // 2, n * q] + [N.shape[1] * q] * 3
        self.dim = sum(self.sizes)
        self._iu = np.triu_indices(n)

    def unpack(self, z):
        n, q = self.n, self.q
        i = 0
        k = self.sizes[0]
        P = np.zeros((n, n))
        P[self._iu] = z[i:i + k]
        P = P + np.triu(P, 1).T
        i += k
        R = z[i:i + n * q].reshape(n, q)
        i += n * q
        ls = []
        r = self.N.shape[1]
        for _ in range(3):
            V = z[i:i + r * q].reshape(r, q)
            ls.append(self.l_base + self.N @ V)
            i += r * q
        return P, R, ls[0], ls[1], ls[2]

    def pack_identity_P(self, scale: float = 1.0):
        z = np.zeros(self.dim)
        diag = np.flatnonzero(self._iu[0] == self._iu[1])
        z[diag] = scale
        return z


@dataclass
class SolveTrace:
    objective: list = field(default_factory=list)  # best max-eigenvalue so far, per accepted step
    raw: list = field(default_factory=list)  # max-eigenvalue at each accepted iterate
    iterations: int = 0
    barrier_param: float = 0.0


def _chol_or_none(S):
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        return None


def _barrier_parts(Lc, dS):
    # G_i = L^{-1} S_i L^{-T}; grad_i = -tr G_i, hess_ij = <G_i, G_j>
    Li = np.linalg.inv(Lc)
    G = np.einsum("ab,ibc,dc->iad", Li, dS, Li)
    grad = -np.einsum("iaa->i", G)
    hess = np.einsum("iab,jab->ij", G, G)
    return grad, hess


def barrier_solve(problem: LmiProblem, injection: str = "output", target: Optional[float] = None,
                  radius: float = 1e4, max_newton: int = 400, p_scale: float = 1.0,
                  trace: Optional[SolveTrace] = None):
    """Return ``(P, R, l1, l2, l3)`` with block max-eigenvalue <= -target.

    Raises :class:`LmiInfeasibleError` when the duality bound shows the
    target cannot be reached inside the ball of radius ``radius``, or when
    the iteration budget is exhausted.
    """
    n = problem.n
    target = 10 * problem.margin if target is None else target
    par = _Param(n, problem.C, injection)
    d = par.dim
    F0 = assemble_block(*par.unpack(np.zeros(d)), problem)
    Fi = np.empty((d, 2 * n, 2 * n))
    Pi = np.empty((d, n, n))
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        parts = par.unpack(e)
        Fi[i] = assemble_block(*parts, problem) - F0
        Pi[i] = parts[0]
    eps_P = problem.p_floor
    nu = 3 * n + 1  # barrier degree

    def blockF(z):
        return F0 + np.tensordot(z, Fi, axes=1)

    def phi(z, t, s):
        S1 = t * np.eye(2 * n) - blockF(z)
        S2 = np.tensordot(z, Pi, axes=1) - eps_P * np.eye(n)
        b = radius ** 2 - z @ z
        L1, L2 = _chol_or_none(S1), _chol_or_none(S2)
        if L1 is None or L2 is None or b <= 0:
            return np.inf
        return (s * t - 2 * np.sum(np.log(np.diag(L1))) - 2 * np.sum(np.log(np.diag(L2)))
                - np.log(b))

    z = par.pack_identity_P(p_scale)
    lam = np.linalg.eigvalsh(blockF(z))[-1]
    t = lam + 1.0
    s = 1.0
    trace = trace if trace is not None else SolveTrace()
    best, best_z = lam, z.copy()
    trace.objective.append(best)
    trace.raw.append(lam)
    newton = 0
    if best <= -target:
        return par.unpack(best_z)
    eye2 = np.eye(2 * n)
    dS1 = np.concatenate([-Fi, eye2[None]], axis=0)
    dS2 = np.concatenate([Pi, np.zeros((1, n, n))], axis=0)

    def finish(exc=None):
        trace.iterations, trace.barrier_param = newton, s
        if exc is not None:
            raise exc

    while True:
        centered = False
        for _ in range(80):
            S1 = t * eye2 - blockF(z)
            S2 = np.tensordot(z, Pi, axes=1) - eps_P * np.eye(n)
            g1, h1 = _barrier_parts(np.linalg.cholesky(S1), dS1)
            g2, h2 = _barrier_parts(np.linalg.cholesky(S2), dS2)
            b = radius ** 2 - z @ z
            grad = g1 + g2
            grad[-1] += s
            grad[:d] += 2 * z / b
            hess = h1 + h2
            hess[:d, :d] += 2 * np.eye(d) / b + 4 * np.outer(z, z) / b ** 2
            try:
                step = -np.linalg.solve(hess, grad)
            except np.linalg.LinAlgError:
                step = -np.linalg.lstsq(hess, grad, rcond=None)[0]
            dec = -grad @ step
            if dec / 2 < 1e-9:
                centered = True
                break
            f0 = phi(z, t, s)
            a = 1.0
            while a > 1e-12:
                zn, tn = z + a * step[:d], t + a * step[-1]
                fn = phi(zn, tn, s)
                if np.isfinite(fn) and fn <= f0 - 0.25 * a * dec:
                    break
                a *= 0.5
            else:
                break  # no progress possible at this s
            newton += 1
            z, t = zn, tn
            lam = np.linalg.eigvalsh(blockF(z))[-1]
            if lam < best:
                best, best_z = lam, z.copy()
            trace.objective.append(best)
            trace.raw.append(lam)
            if best <= -target:
                finish()
                return par.unpack(best_z)
            if newton >= max_newton:
                finish(LmiInfeasibleError("iteration budget exhausted", best, newton))
        if centered and t - nu / s > -target:
            finish(LmiInfeasibleError(
                f"duality bound {t - nu / s:.3e} above target -{target:g}", best, newton))
        if s > 1e14:
            finish(LmiInfeasibleError("barrier parameter exhausted", best, newton))
        s *= 8.0


Solver = Callable[[LmiProblem], tuple]


def solve_gains(problem: LmiProblem, solver: Optional[Solver] = None, **kw) -> ObserverGains:
    """Synthesise certified observer gains.

    ``solver`` maps a problem to ``(P, R, l1, l2, l3)``; the default is the
    built-in barrier method (extra keyword arguments are forwarded to it).
    The result is always re-verified; uncertified output raises
    :class:`LmiInfeasibleError`.
    """
    if problem.n > 16:
        raise ValueError("solver is intended for n <= 16")
    if solver is None:
        P, R, l1, l2, l3 = barrier_solve(problem, **kw)
    else:
        P, R, l1, l2, l3 = solver(problem)
    P = 0.5 * (P + P.T)
    try:
        L = np.linalg.solve(P, R)
    except np.linalg.LinAlgError:
        raise LmiInfeasibleError("singular P returned", np.inf) from None
    gains = ObserverGains(P=P, L=L, l1=np.asarray(l1), l2=np.asarray(l2), l3=np.asarray(l3),
                          alpha=problem.alpha, certified_margin=np.nan)
    report = verify_gains(gains, problem)
    if not report.passed:
        raise LmiInfeasibleError("; ".join(report.messages), report.max_eig)
    return ObserverGains(P=P, L=L, l1=gains.l1, l2=gains.l2, l3=gains.l3,
                         alpha=problem.alpha, certified_margin=report.max_eig)
