"""State estimator with output-injected lifted nonlinearities, plus the integral states
that produce windowed regression data."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .lmi import ObserverGains
from .model_core import (AffineModel, F_1, F_theta, G_u, JacobianBounds, OutOfDomainWarning,
                         assemble_A, in_box)


@dataclass
class ObserverState:
    """``x_hat`` (n), ``I_Y`` (n x p) and ``I_fgu`` (n)."""

    x_hat: np.ndarray
    I_Y: np.ndarray
    I_fgu: np.ndarray

    @classmethod
    def initial(cls, x_hat0, p: int) -> "ObserverState":
        x_hat0 = np.asarray(x_hat0, dtype=float)
        n = x_hat0.size
        return cls(x_hat0.copy(), np.zeros((n, p)), np.zeros(n))

    @staticmethod
    def size(n: int, p: int) -> int:
        return n + n * p + n

    def pack(self) -> np.ndarray:
        return np.concatenate([self.x_hat, self.I_Y.ravel(), self.I_fgu])

    @classmethod
    def unpack(cls, v, n: int, p: int) -> "ObserverState":
        v = np.asarray(v, dtype=float)
        return cls(v[:n], v[n:n + n * p].reshape(n, p), v[n + n * p:n + n * p + n])


def injected_points(x_hat, y, gains: ObserverGains, C):
    """The three arguments ``x_hat + l_k (y - C x_hat)``."""
    e = np.atleast_1d(y) - C @ x_hat
    return x_hat + gains.l1 @ e, x_hat + gains.l2 @ e, x_hat + gains.l3 @ e


def estimate_field(x_hat, y, u, theta_hat, gains: ObserverGains, model: AffineModel,
                   bounds: JacobianBounds, A) -> np.ndarray:
    """``d x_hat/dt`` without input checks (inner-loop form)."""
    e = y - model.C @ x_hat
    return (A @ x_hat + F_theta(x_hat + gains.l1 @ e, theta_hat, model, bounds)
            + F_1(x_hat + gains.l2 @ e, model, bounds) + G_u(x_hat + gains.l3 @ e, u, model, bounds)
            + gains.L @ e)


def observer_rhs(t, obs: ObserverState, y, u, theta_hat, gains: ObserverGains,
                 model: AffineModel, bounds: JacobianBounds, A=None, warn: bool = True
                 ) -> ObserverState:
    """Time derivative of the observer and its integral states.

    Only the measured output ``y`` and the input ``u`` enter; the plant state
    is never read. ``A`` may be passed precomputed.
    """
    x_hat = np.asarray(obs.x_hat, dtype=float)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    theta_hat = np.asarray(theta_hat, dtype=float)
    if not (np.all(np.isfinite(x_hat)) and np.all(np.isfinite(y)) and np.all(np.isfinite(u))
            and np.all(np.isfinite(theta_hat))):
        raise ValueError(f"non-finite observer input at t={t}")
    C = model.C
    A = assemble_A(bounds) if A is None else A
    if warn and not all(in_box(a, bounds.domain_box)
                        for a in (x_hat, *injected_points(x_hat, y, gains, C))):
        warnings.warn(f"injected argument outside domain box at t={t:.6g}", OutOfDomainWarning,
                      stacklevel=2)
    dx = estimate_field(x_hat, y, u, theta_hat, gains, model, bounds, A)
    return ObserverState(dx, model.Y(x_hat), model.f0(x_hat) + model.g(x_hat) @ u)


def window_regressor(traj, t: float, T: float, n: int, p: int, offset: int = 0):
    """Windowed regression triple ``(Y_win, G_win, dx_win)`` over ``[t - T, t]``.

    ``traj`` is any callable time -> flat state in which the observer block
    ``[x_hat, I_Y, I_fgu]`` starts at ``offset``.
    """
    if T < 0:
        raise ValueError("window length must be non-negative")
    if t < T:
        raise ValueError(f"window needs t >= T (t={t}, T={T})")
    if T == 0:
        return np.zeros((n, p)), np.zeros(n), np.zeros(n)
    m = ObserverState.size(n, p)
    now = ObserverState.unpack(np.asarray(traj(t))[offset:offset + m], n, p)
    then = ObserverState.unpack(np.asarray(traj(t - T))[offset:offset + m], n, p)
    return now.I_Y - then.I_Y, now.I_fgu - then.I_fgu, now.x_hat - then.x_hat


def regression_residual(Y_win, G_win, dx_win, theta_true) -> np.ndarray:
    """``dx_win - Y_win theta - G_win`` (test-only: needs the true parameters)."""
    return np.asarray(dx_win) - np.asarray(Y_win) @ np.asarray(theta_true) - np.asarray(G_win)
