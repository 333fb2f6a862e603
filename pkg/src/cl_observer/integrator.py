"""Dormand-Prince 5(4) integration with dense output, clock events and delayed lookup."""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class StiffnessError(RuntimeError):
    """Step size fell below ``h_min``."""


class RetentionError(LookupError):
    """A delayed lookup reached before the retained history."""


class EventStormError(RuntimeError):
    pass


# Dormand-Prince tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array(_A[6] + [0.0])
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])
_D = np.array([-12715105075 / 11282082432, 0.0, 87487479700 / 32700410799,
               -10690763975 / 1880347072, 701980252875 / 199316789632,
               -1453857185 / 822651844, 69997945 / 29380423])
ORDER = 5


def dopri_step(rhs, t, y, h, k1):
    """One Dormand-Prince step. Returns ``(y_new, err_vec, K)`` with K the 7 stage slopes."""
    K = np.empty((7, y.size))
    K[0] = k1
    for i in range(1, 6):
        K[i] = rhs(t + _C[i] * h, y + h * (np.asarray(_A[i]) @ K[:i]))
    y_new = y + h * (_B[:6] @ K[:6])
    K[6] = rhs(t + h, y_new)
    err = h * (_E @ K)
    return y_new, err, K


def _dense_coeffs(y0, y1, h, K):
    ydiff = y1 - y0
    bspl = h * K[0] - ydiff
    return np.stack([y0, ydiff, bspl, ydiff - h * K[6] - bspl, h * (_D @ K)])


def _dense_eval(coef, s):
    s1 = 1.0 - s
    return coef[0] + s * (coef[1] + s1 * (coef[2] + s * (coef[3] + s1 * coef[4])))


@dataclass
class _Step:
    t0: float
    t1: float
    y0: np.ndarray
    y1: np.ndarray
    coef: np.ndarray

    def __call__(self, t):
        if t == self.t1:
            return self.y1.copy()
        if t == self.t0:
            return self.y0.copy()
        return _dense_eval(self.coef, (t - self.t0) / (self.t1 - self.t0))


class DenseTrajectory:
    """Accepted steps with their continuous extension.

    Evaluations before ``t0`` return the initial state (constant
    pre-history). When ``retention`` is set, steps ending more than
    ``retention`` before the latest time are discarded.
    """

    def __init__(self, t0: float, y0, retention: Optional[float] = None):
        self.t_initial = float(t0)
        self.y_initial = np.array(y0, dtype=float)
        self.retention = retention
        self._steps: list[_Step] = []
        self._starts: list[float] = []
        self._ends: list[float] = []
        self._horizon = float(t0)

    def __len__(self):
        return len(self._steps)

    @property
    def steps(self):
        return list(self._steps)

    @property
    def t_end(self) -> float:
        return self._steps[-1].t1 if self._steps else self.t_initial

    @property
    def y_end(self) -> np.ndarray:
        return self._steps[-1].y1.copy() if self._steps else self.y_initial.copy()

    @property
    def horizon(self) -> float:
        """Earliest time still evaluable (pre-history aside)."""
        return self._horizon

    def append(self, step: _Step):
        if self._steps and step.t0 != self._steps[-1].t1:
            raise ValueError("steps must be contiguous")
        if not step.t1 > step.t0:
            raise ValueError("steps must advance in time")
        self._steps.append(step)
        self._starts.append(step.t0)
        self._ends.append(step.t1)
        if self.retention is not None:
            k = bisect.bisect_left(self._ends, step.t1 - self.retention)
            if k >= 256:  # prune in batches
                self._horizon = self._steps[k].t0
                del self._steps[:k], self._starts[:k], self._ends[:k]

    def __call__(self, t: float) -> np.ndarray:
        t = float(t)
        if t < self.t_initial:
            return self.y_initial.copy()
        if not self._steps:
            if t == self.t_initial:
                return self.y_initial.copy()
            raise ValueError(f"t={t} beyond trajectory end {self.t_end}")
        if t < self._horizon:
            raise RetentionError(f"t={t} precedes retained history (starts at {self._horizon})")
        last = self._steps[-1]
        if t > last.t1:
            if t - last.t1 <= 1e-12 * max(1.0, abs(t)):
                return last.y1.copy()
            raise ValueError(f"t={t} beyond trajectory end {last.t1}")
        i = bisect.bisect_right(self._starts, t) - 1
        return self._steps[max(i, 0)](t)

    def sample(self, times) -> np.ndarray:
        return np.array([self(t) for t in times])


def delayed_eval(traj: DenseTrajectory, t: float, T: float) -> np.ndarray:
    """State at ``t - T`` (initial state for times before the start)."""
    if T < 0:
        raise ValueError("delay must be non-negative")
    return traj(t - T)


@dataclass
class Integrator:
    """Adaptive Dormand-Prince driver.

    Error per step is measured in the RMS norm scaled by
    ``atol + rtol * max(|y|, |y_new|)``; a step is accepted when that norm
    is at most 1.
    """

    rhs: Callable
    rtol: float = 1e-8
    atol: float = 1e-8
    h_min: float = 1e-10
    h_max: float = np.inf
    post_step: Optional[Callable] = None
    h: Optional[float] = None
    n_accepted: int = 0
    n_rejected: int = 0
    n_evals: int = 0
    _k1: Optional[np.ndarray] = field(default=None, repr=False)

    def _f(self, t, y):
        self.n_evals += 1
        return np.asarray(self.rhs(t, y), dtype=float)

    def _initial_step(self, t, y, f0, direction_span):
        sc = self.atol + self.rtol * np.abs(y)
        d0 = np.sqrt(np.mean((y / sc) ** 2))
        d1 = np.sqrt(np.mean((f0 / sc) ** 2))
        h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
        h0 = min(h0, direction_span)
        f1 = self._f(t + h0, y + h0 * f0)
        d2 = np.sqrt(np.mean(((f1 - f0) / sc) ** 2)) / h0
        if max(d1, d2) <= 1e-15:
            h1 = max(1e-6, h0 * 1e-3)
        else:
            h1 = (0.01 / max(d1, d2)) ** (1.0 / ORDER)
        return min(100 * h0, h1, direction_span, self.h_max)

    def reset(self):
        """Forget the FSAL slope (call after a discontinuous state change)."""
        self._k1 = None

    def advance(self, traj: DenseTrajectory, t_stop: float, stop_check=None):
        """Integrate from ``traj.t_end`` up to ``t_stop``.

        ``stop_check(t, y)`` is evaluated after each accepted step; a truthy
        result halts integration there. Returns the time reached.
        """
        t = traj.t_end
        y = traj.y_end
        if self._k1 is None:
            self._k1 = self._f(t, y)
        if self.h is None:
            self.h = self._initial_step(t, y, self._k1, t_stop - t)
        while t < t_stop:
            span = t_stop - t
            h = min(self.h, self.h_max)
            last = h >= span * (1 - 1e-12)
            if last:
                h = span
            if not t + h > t:
                raise StiffnessError(f"step size {h:.3e} lost in rounding at t={t:.17g}")
            y_new, err_vec, K = dopri_step(self._f, t, y, h, self._k1)
            sc = self.atol + self.rtol * np.maximum(np.abs(y), np.abs(y_new))
            err = np.sqrt(np.mean((err_vec / sc) ** 2)) if y.size else 0.0
            if not np.all(np.isfinite(y_new)):
                err = np.inf
            if err <= 1.0:
                t_new = t_stop if last else t + h
                if self.post_step is not None:
                    y_new = np.asarray(self.post_step(t_new, y_new), dtype=float)
                    K[6] = self._f(t_new, y_new)
                traj.append(_Step(t, t_new, y, y_new, _dense_coeffs(y, y_new, h, K)))
                t, y = t_new, y_new
                self._k1 = K[6]
                self.n_accepted += 1
                fac = 10.0 if err == 0 else min(10.0, max(0.2, 0.9 * err ** (-1.0 / ORDER)))
                if not (last and h < self.h):  # a clipped final step keeps the natural size
                    self.h = h * fac
                if stop_check is not None and stop_check(t, y):
                    return t
            else:
                self.n_rejected += 1
                fac = 0.2 if not np.isfinite(err) else max(0.2, 0.9 * err ** (-1.0 / ORDER))
                self.h = h * fac
                if self.h < self.h_min:
                    raise StiffnessError(f"step size {self.h:.3e} below h_min at t={t:.6g}")
        return t


def integrate(rhs, t0: float, t1: float, y0, tol: float = 1e-8, *, rtol=None, atol=None,
              h_min: float = 1e-10, h_max: float = np.inf, retention=None,
              post_step=None) -> DenseTrajectory:
    """Integrate ``y' = rhs(t, y)`` on ``[t0, t1]`` and return the dense trajectory."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    traj = DenseTrajectory(t0, y0, retention=retention)
    stepper = Integrator(rhs, rtol=tol if rtol is None else rtol, atol=tol if atol is None else atol,
                         h_min=h_min, h_max=h_max, post_step=post_step)
    stepper.advance(traj, t1)
    return traj


def integrate_fixed(rhs, t0: float, t1: float, y0, nsteps: int) -> np.ndarray:
    """Fixed-step propagation with the same tableau (for order checks)."""
    h = (t1 - t0) / nsteps
    y = np.array(y0, dtype=float)
    t = t0
    k1 = np.asarray(rhs(t, y), dtype=float)
    for _ in range(nsteps):
        y, _, K = dopri_step(rhs, t, y, h, k1)
        t += h
        k1 = K[6]
    return y


@dataclass
class EventRecord:
    t: float
    index: int
    info: object = None


def run_with_events(rhs, event_fn, t0: float, t1: float, y0, tol: float = 1e-8, *,
                    on_event=None, next_event_time=None, max_events: int = 10 ** 6,
                    retention=None, integrator: Optional[Integrator] = None, **kw):
    """Integrate while checking ``event_fn(t, y)`` at every accepted step.

    When ``next_event_time(t)`` is given, steps are clipped so the clock
    time it returns is hit exactly. On an event, ``on_event(t, y)`` may
    return a replacement state (or None) and may return information stored
    in the log; integration then resumes. Returns ``(trajectory, events)``.
    """
    traj = DenseTrajectory(t0, y0, retention=retention)
    stepper = integrator or Integrator(rhs, rtol=tol, atol=tol, **kw)
    events: list[EventRecord] = []
    t = t0
    while t < t1:
        t_stop = t1
        if next_event_time is not None:
            t_stop = min(t1, max(next_event_time(t), t))
            if t_stop <= t:
                t_stop = t1
        t = stepper.advance(traj, t_stop, stop_check=event_fn)
        y = traj.y_end
        if event_fn(t, y):
            if len(events) >= max_events:
                raise EventStormError(f"more than {max_events} events")
            info = None
            if on_event is not None:
                out = on_event(t, y)
                if isinstance(out, tuple):
                    new_y, info = out
                else:
                    new_y = out
                if new_y is not None and not np.array_equal(new_y, y):
                    # discontinuous update: a zero-length jump is not representable, so the
                    # last step's end state is replaced
                    last = traj._steps[-1] if traj._steps else None
                    if last is None:
                        traj.y_initial = np.array(new_y, dtype=float)
                    else:
                        last.y1 = np.array(new_y, dtype=float)
                    stepper.reset()
            events.append(EventRecord(t, len(events), info))
    return traj, events
