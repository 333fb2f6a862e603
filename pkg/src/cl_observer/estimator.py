"""Concurrent-learning parameter update with projection onto a ball, and the
least-squares gain update with forgetting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .history import HistoryStack
from .observer import regression_residual

# relative slack when deciding whether theta_hat sits on the projection boundary
BOUNDARY_RTOL = 1e-12


@dataclass
class ParamState:
    theta_hat: np.ndarray
    Gamma: np.ndarray

    def __post_init__(self):
        self.theta_hat = np.asarray(self.theta_hat, dtype=float).ravel()
        self.Gamma = np.atleast_2d(np.asarray(self.Gamma, dtype=float))
        p = self.theta_hat.size
        if self.Gamma.shape != (p, p):
            raise ValueError(f"Gamma must be {p}x{p}, got {self.Gamma.shape}")


def phi(stack: HistoryStack, theta_hat) -> np.ndarray:
    """``sum_i sigma_i Y_i^T (dx_i - G_i - Y_i theta_hat)`` over the stack."""
    return stack.rhs - stack.info @ np.asarray(theta_hat, dtype=float)


def projection_active(theta_hat, v, theta_bar: float) -> bool:
    """True on the boundary of the ball when ``v`` points outward."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    on_boundary = np.linalg.norm(theta_hat) >= theta_bar * (1.0 - BOUNDARY_RTOL)
    return bool(on_boundary and float(v @ theta_hat) > 0.0)


def param_rhs(state: ParamState, stack: HistoryStack, k_theta: float, beta1: float,
              theta_bar: float):
    """``(d theta_hat/dt, d Gamma/dt)`` with one shared case guard."""
    return param_derivatives(state.theta_hat, state.Gamma, stack.info, stack.rhs, k_theta, beta1,
                             theta_bar)


def param_derivatives(th, G, info, rhs, k_theta, beta1, theta_bar):
    """Array-level form of :func:`param_rhs` taking the stack sums
    ``info = sum sigma Y^T Y`` and ``rhs = sum sigma Y^T (dx - G)`` directly."""
    v = k_theta * (G @ (rhs - info @ th))
    if projection_active(th, v, theta_bar):
        Gth = G @ th
        denom = float(th @ Gth)
        if not denom > 0:
            raise FloatingPointError("theta_hat^T Gamma theta_hat is not positive on the boundary")
        return v - Gth * (float(th @ v) / denom), np.zeros_like(G)
    dG = beta1 * G - k_theta * (G @ info @ G)
    return v, 0.5 * (dG + dG.T)


def theta_update(state: ParamState, stack: HistoryStack, k_theta: float, theta_bar: float
                 ) -> np.ndarray:
    return param_rhs(state, stack, k_theta, 0.0, theta_bar)[0]


def gamma_update(state: ParamState, stack: HistoryStack, k_theta: float, beta1: float,
                 theta_bar: float) -> np.ndarray:
    return param_rhs(state, stack, k_theta, beta1, theta_bar)[1]


def project_ball(theta, theta_bar: float) -> np.ndarray:
    """Radial clamp onto ``||theta|| <= theta_bar`` (removes integration overshoot)."""
    theta = np.asarray(theta, dtype=float)
    r = np.linalg.norm(theta)
    return theta * (theta_bar / r) if r > theta_bar else theta


def param_error_diag(theta_hat, theta_true, stack: HistoryStack, Gamma, k_theta: float
                     ) -> np.ndarray:
    """Predicted ``d theta_tilde/dt = -k Gamma Psi theta_tilde - k Gamma Q`` (interior case).

    ``Q = sum sigma_i Y_i^T E_i`` with ``E_i`` the regression residuals under
    the true parameters. Test-only.
    """
    theta_true = np.asarray(theta_true, dtype=float)
    th_err = theta_true - np.asarray(theta_hat, dtype=float)
    Q = np.zeros(stack.p)
    for e in stack.entries:
        E = regression_residual(e.Y_win, e.G_win, e.dx_win, theta_true)
        Q += e.sigma(stack.kappa) * (e.Y_win.T @ E)
    Gamma = np.asarray(Gamma, dtype=float)
    return -k_theta * (Gamma @ (stack.info @ th_err)) - k_theta * (Gamma @ Q)
