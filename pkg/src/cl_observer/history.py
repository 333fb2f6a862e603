"""History stacks of windowed regression data, the minimum-eigenvalue replacement
rule, and the event/purge scheduler."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

# slack for clock comparisons so ticks that land on t = k t* are not missed to rounding
CLOCK_EPS = 1e-9
FULL_RANK_TOL = 1e-12
# relative eigenvalue floor used by the replacement rule
NOISE_RTOL = 1e-12


@dataclass
class StackEntry:
    dx_win: np.ndarray
    Y_win: np.ndarray
    G_win: np.ndarray
    t_recorded: float

    def __post_init__(self):
        self.dx_win = np.asarray(self.dx_win, dtype=float).ravel()
        self.Y_win = np.atleast_2d(np.asarray(self.Y_win, dtype=float))
        self.G_win = np.asarray(self.G_win, dtype=float).ravel()
        if not (np.all(np.isfinite(self.dx_win)) and np.all(np.isfinite(self.Y_win))
                and np.all(np.isfinite(self.G_win))):
            raise ValueError(f"non-finite stack entry recorded at t={self.t_recorded}")

    def sigma(self, kappa: float) -> float:
        return 1.0 / (1.0 + kappa * float(np.sum(self.Y_win ** 2)))

    def weighted_gram(self, kappa: float) -> np.ndarray:
        return self.sigma(kappa) * (self.Y_win.T @ self.Y_win)

    def target(self) -> np.ndarray:
        """``dx_win - G_win``, the quantity regressed on ``Y_win``."""
        return self.dx_win - self.G_win


def _lam_min(M) -> float:
    if M.size == 0:
        return 0.0
    return float(np.linalg.eigvalsh(M)[0])


class HistoryStack:
    """Fixed-capacity store with a cached normalized information matrix.

    The cache (matrix, its minimum eigenvalue and the weighted right-hand
    side used by the update law) is rebuilt from scratch on every mutation.
    """

    def __init__(self, capacity: int, p: int, kappa: float = 1.0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if not kappa > 0:
            raise ValueError("kappa must be positive")
        self.capacity = int(capacity)
        self.p = int(p)
        self.kappa = float(kappa)
        self.entries: list[StackEntry] = []
        self._grams: list[np.ndarray] = []
        self._refresh()

    def __len__(self):
        return len(self.entries)

    @property
    def full(self) -> bool:
        return len(self.entries) >= self.capacity

    def _refresh(self):
        self.info = np.zeros((self.p, self.p))
        self.rhs = np.zeros(self.p)
        for e, W in zip(self.entries, self._grams):
            self.info += W
            self.rhs += e.sigma(self.kappa) * (e.Y_win.T @ e.target())
        self.info = 0.5 * (self.info + self.info.T)
        self.cached_lambda_min = max(_lam_min(self.info), 0.0) if self.entries else 0.0

    def append(self, entry: StackEntry):
        if self.full:
            raise OverflowError("stack is full")
        self.entries.append(entry)
        self._grams.append(entry.weighted_gram(self.kappa))
        self._refresh()

    def replace(self, j: int, entry: StackEntry):
        self.entries[j] = entry
        self._grams[j] = entry.weighted_gram(self.kappa)
        self._refresh()

    def clear(self):
        self.entries.clear()
        self._grams.clear()
        self._refresh()

    def copy(self) -> "HistoryStack":
        out = HistoryStack(self.capacity, self.p, self.kappa)
        out.entries = list(self.entries)
        out._grams = list(self._grams)
        out._refresh()
        return out

    def full_rank(self, c_lower: float = FULL_RANK_TOL) -> bool:
        """True when the normalized information matrix has ``lambda_min > c_lower``.

        The default threshold only screens out round-off.
        """
        return self.cached_lambda_min > c_lower


def info_matrix(stack: HistoryStack):
    """Normalized information matrix ``sum sigma_i Y_i^T Y_i`` and its ``lambda_min``."""
    M = np.zeros((stack.p, stack.p))
    for e in stack.entries:
        M += e.weighted_gram(stack.kappa)
    M = 0.5 * (M + M.T)
    return M, (max(_lam_min(M), 0.0) if stack.entries else 0.0)


@dataclass
class InsertDecision:
    action: str            # "append", "replace" or "reject"
    slot: Optional[int]
    lambda_before: float
    lambda_candidate: float  # best achievable lambda_min with the candidate in
    lambda_after: float


def best_replacement(stack: HistoryStack, candidate: StackEntry):
    """Slot maximizing ``lambda_min`` when the candidate replaces it, and that value."""
    Wc = candidate.weighted_gram(stack.kappa)
    best_j, best = None, -np.inf
    for j, Wj in enumerate(stack._grams):
        lam = _lam_min(stack.info - Wj + Wc)
        if lam > best:
            best_j, best = j, lam
    return best_j, best


def _above(lam: float, floor: float) -> float:
    return lam if lam > floor else 0.0


def try_insert(stack: HistoryStack, candidate: StackEntry, delta: float = 0.1) -> InsertDecision:
    """Append while not full, otherwise replace the best slot if the gain beats ``1 + delta``."""
    before = stack.cached_lambda_min
    if not stack.full:
        stack.append(candidate)
        lam = stack.cached_lambda_min
        return InsertDecision("append", len(stack) - 1, before, lam, lam)
    j, best = best_replacement(stack, candidate)
    # eigenvalues this small relative to the data are round-off; a swap must gain real information
    Wc = candidate.weighted_gram(stack.kappa)
    noise = NOISE_RTOL * max(float(np.trace(stack.info)), float(np.trace(Wc)))
    if _above(before, noise) < _above(best, noise) / (1.0 + delta):
        stack.replace(j, candidate)
        return InsertDecision("replace", j, before, best, stack.cached_lambda_min)
    return InsertDecision("reject", None, before, best, before)


@dataclass
class SchedulerState:
    t_star: float = 0.1
    T: float = 2.0
    lambda_star: float = 0.0
    xi_purge: float = 0.9
    dwell: float = 5.0
    delta: float = 0.1
    tau1: float = 0.0
    tau2: float = 0.0
    lambda_best: float = 0.0
    purges: int = 0
    events: int = 0

    def __post_init__(self):
        if not self.t_star > 0:
            raise ValueError("t_star must be positive")
        if not 0 < self.xi_purge <= 1:
            raise ValueError("xi_purge must lie in (0, 1]")
        if self.dwell < 0 or self.T < 0 or self.lambda_star < 0:
            raise ValueError("dwell, T and lambda_star must be non-negative")

    @property
    def rho(self) -> int:
        """Switching signal: one more than the number of purges."""
        return self.purges + 1

    def next_tick(self) -> float:
        return self.tau1 + self.t_star

    def tick_due(self, t: float) -> bool:
        return t - self.tau1 >= self.t_star * (1.0 - CLOCK_EPS)


@dataclass
class SchedulerAction:
    t: float
    ticked: bool = False
    event: bool = False
    insert: Optional[InsertDecision] = None
    purged: bool = False
    lambda_best: float = 0.0


def scheduler_step(sched: SchedulerState, t: float, main: HistoryStack, transient: HistoryStack,
                   candidate: Callable[[float], StackEntry]) -> SchedulerAction:
    """One pass of the event logic at time ``t``.

    Nothing happens before the sampling clock is due. A due tick before
    ``T`` only resets the clock. Otherwise the candidate from
    ``candidate(t)`` goes into the transient stack, ``lambda_best`` is
    raised when the transient stack's ``lambda_min`` improves on it by at
    least ``lambda_star``, and the main stack is overwritten by the
    transient one once that stack is informative (``lambda_min > 0`` and at
    least ``xi_purge * lambda_best``) and the dwell time has elapsed.
    """
    act = SchedulerAction(t, lambda_best=sched.lambda_best)
    if not sched.tick_due(t):
        return act
    act.ticked = True
    if t >= sched.T - CLOCK_EPS * max(1.0, sched.T):
        act.event = True
        sched.events += 1
        act.insert = try_insert(transient, candidate(t), sched.delta)
        lam_g = transient.cached_lambda_min
        if lam_g - sched.lambda_best >= sched.lambda_star:
            sched.lambda_best = max(sched.lambda_best, lam_g)
        if (transient.full_rank() and lam_g >= sched.xi_purge * sched.lambda_best
                and t - sched.tau2 >= sched.dwell * (1.0 - CLOCK_EPS)):
            main.entries = list(transient.entries)
            main._grams = list(transient._grams)
            main._refresh()
            transient.clear()
            sched.tau2 = t
            sched.purges += 1
            act.purged = True
            sched.lambda_best = max(sched.lambda_best, main.cached_lambda_min)
    sched.tau1 = t
    act.lambda_best = sched.lambda_best
    return act
