"""Closed-loop scenario runner: plant, observer, integral states and parameter
estimator co-integrated under the event scheduler, with CSV telemetry."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .estimator import param_derivatives, project_ball
from .history import HistoryStack, SchedulerState, StackEntry, scheduler_step
from .integrator import DenseTrajectory, Integrator, StiffnessError
from .lmi import ObserverGains
from .manifest import (GainsFile, ManifestError, ModelManifest, check_keys, get_field, load_gains,
                       load_json, load_model_manifest, parse_model_manifest, synthesize)
from .model_core import AffineModel, JacobianBounds, assemble_A, in_box
from .models import BENCHMARK_THETA, benchmark_model  # noqa: F401  (re-exported)
from .observer import ObserverState, estimate_field, window_regressor


# --------------------------------------------------------------------------
# controller


def benchmark_trajectory(t):
    """Desired ``x_d = -(1/3) cos 3t - (1/2) cos 2t`` and its derivative."""
    return (-np.cos(3.0 * t) / 3.0 - 0.5 * np.cos(2.0 * t),
            np.sin(3.0 * t) + np.sin(2.0 * t))


def constant_trajectory(value: float = 0.0):
    return lambda t: (value, 0.0)


def pd_controller(t, x, kp: float = 50.0, kd: float = 50.0, desired=benchmark_trajectory):
    """``u = -kp (x1 - x_d) - kd (x2 - xdot_d)``."""
    xd, xd_dot = desired(t)
    return np.array([-kp * (x[0] - xd) - kd * (x[1] - xd_dot)])


TRAJECTORIES = {"benchmark": lambda **kw: benchmark_trajectory, "constant": constant_trajectory}


# --------------------------------------------------------------------------
# scenario


@dataclass
class ControllerConfig:
    kp: float = 50.0
    kd: float = 50.0
    trajectory: str = "benchmark"
    value: float = 0.0

    def desired(self):
        if self.trajectory == "constant":
            return constant_trajectory(self.value)
        return benchmark_trajectory


@dataclass
class EstimatorConfig:
    N: int = 25
    k_theta: float = 50.0
    beta1: float = 0.5
    kappa: float = 1.0
    delta: float = 0.1
    T: float = 2.0
    t_star: float = 0.1
    lambda_star: float = 0.0
    xi_purge: float = 0.9
    dwell: float = 5.0
    theta_bar: float = 10.0
    Gamma0: float | list = 1.0


@dataclass
class Diagnostics:
    """Test-only switches. ``pin_theta`` fixes the estimate at the true value,
    ``freeze_stacks`` disables data collection, ``regress_from_plant``
    builds regression windows from the plant state instead of the estimate,
    ``x_hat0_spread`` randomizes the initial estimate (uses the seed)."""

    pin_theta: bool = False
    freeze_stacks: bool = False
    regress_from_plant: bool = False
    x_hat0_spread: float = 0.0


@dataclass
class Scenario:
    model: ModelManifest
    theta_true: np.ndarray
    x0: np.ndarray
    x_hat0: np.ndarray
    theta_hat0: np.ndarray
    gains_file: Optional[Path] = None
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    diagnostics: Diagnostics = field(default_factory=Diagnostics)
    t_final: float = 50.0
    tol: float = 1e-8
    output_dt: float = 0.01
    output: Optional[Path] = None
    seed: Optional[int] = None
    location: str = "<inline>"

    def validate(self):
        where = self.location
        est = self.estimator
        if not self.t_final > est.T:
            raise ManifestError(where, "t_final", f"must exceed the window length T={est.T}")
        for name in ("k_theta", "kappa", "t_star", "theta_bar", "beta1"):
            if not getattr(est, name) > 0:
                raise ManifestError(where, f"estimator.{name}", "must be positive")
        if est.N < 1:
            raise ManifestError(where, "estimator.N", "must be >= 1")
        if not 0 < est.xi_purge <= 1:
            raise ManifestError(where, "estimator.xi_purge", "must lie in (0, 1]")
        for name in ("delta", "T", "lambda_star", "dwell"):
            if getattr(est, name) < 0:
                raise ManifestError(where, f"estimator.{name}", "must be non-negative")
        if not self.tol > 0:
            raise ManifestError(where, "tol", "must be positive")
        if not self.output_dt > 0:
            raise ManifestError(where, "output_dt", "must be positive")
        if self.controller.kp < 0 or self.controller.kd < 0:
            raise ManifestError(where, "controller", "gains must be non-negative")
        if self.controller.trajectory not in TRAJECTORIES:
            raise ManifestError(where, "controller.trajectory",
                                f"unknown; known: {sorted(TRAJECTORIES)}")
        if np.linalg.norm(self.theta_hat0) > est.theta_bar:
            raise ManifestError(where, "initial.theta_hat0", "outside the projection ball")
        G = self.gamma0()
        if not np.allclose(G, G.T) or np.linalg.eigvalsh(0.5 * (G + G.T))[0] <= 0:
            raise ManifestError(where, "estimator.Gamma0", "must be symmetric positive definite")

    def gamma0(self) -> np.ndarray:
        p = self.theta_hat0.size
        g = np.asarray(self.estimator.Gamma0, dtype=float)
        if g.ndim == 0:
            return float(g) * np.eye(p)
        if g.shape != (p, p):
            raise ManifestError(self.location, "estimator.Gamma0", f"expected scalar or {p}x{p}")
        return g


def _sub(d, key, cls, where, kinds):
    sub = get_field(d, key, where, "dict", {})
    check_keys(sub, kinds, where, prefix=f"{key}.")
    kw = {}
    for k, kind in kinds.items():
        if k in sub:
            kw[k] = get_field(sub, k, where, kind, prefix=f"{key}.")
    return cls(**kw)


SCENARIO_KEYS = ("model", "model_manifest", "gains_file", "theta_true", "initial", "controller",
                 "estimator", "diagnostics", "t_final", "tol", "output_dt", "output", "seed",
                 "description")


def parse_scenario(d: dict, where="<inline>", base: Optional[Path] = None) -> Scenario:
    base = base or Path(".")
    check_keys(d, SCENARIO_KEYS, where)
    if "model_manifest" in d:
        mp = Path(get_field(d, "model_manifest", where, "str"))
        model = load_model_manifest(mp if mp.is_absolute() else base / mp)
    elif "model" in d:
        model = parse_model_manifest(get_field(d, "model", where, "dict"), where, base)
    else:
        raise ManifestError(where, "model_manifest", "missing (or give an inline 'model')")
    init = get_field(d, "initial", where, "dict")
    check_keys(init, ("x0", "x_hat0", "theta_hat0"), where, "initial.")
    gf = get_field(d, "gains_file", where, "str", None)
    out = get_field(d, "output", where, "str", None)
    sc = Scenario(
        model=model,
        theta_true=get_field(d, "theta_true", where, "array"),
        x0=get_field(init, "x0", where, "array", prefix="initial."),
        x_hat0=get_field(init, "x_hat0", where, "array", prefix="initial."),
        theta_hat0=get_field(init, "theta_hat0", where, "array", prefix="initial."),
        gains_file=None if gf is None else (Path(gf) if Path(gf).is_absolute() else base / gf),
        controller=_sub(d, "controller", ControllerConfig, where,
                        {"kp": "float", "kd": "float", "trajectory": "str", "value": "float"}),
        estimator=_sub(d, "estimator", EstimatorConfig, where,
                       {**{k: "float" for k in ("k_theta", "beta1", "kappa", "delta", "T", "t_star",
                                                 "lambda_star", "xi_purge", "dwell", "theta_bar")},
                        "N": "int", "Gamma0": None}),
        diagnostics=_sub(d, "diagnostics", Diagnostics, where,
                         {"pin_theta": "bool", "freeze_stacks": "bool",
                          "regress_from_plant": "bool", "x_hat0_spread": "float"}),
        t_final=get_field(d, "t_final", where, "float", 50.0),
        tol=get_field(d, "tol", where, "float", 1e-8),
        output_dt=get_field(d, "output_dt", where, "float", 0.01),
        output=None if out is None else Path(out),
        seed=get_field(d, "seed", where, "int", None),
        location=str(where),
    )
    sc.validate()
    return sc


def load_scenario(path) -> Scenario:
    path = Path(path)
    return parse_scenario(load_json(path), path, path.parent)


# --------------------------------------------------------------------------
# run log


@dataclass
class RunLog:
    t: np.ndarray
    x: np.ndarray
    x_hat: np.ndarray
    theta_hat: np.ndarray
    x_err_norm: np.ndarray
    theta_err_norm: np.ndarray
    lambda_main: np.ndarray
    lambda_transient: np.ndarray
    lambda_gamma: np.ndarray
    purge_count: np.ndarray
    event_count: np.ndarray
    # run summaries
    event_times: list = field(default_factory=list)
    event_entries: list = field(default_factory=list)  # every candidate window, kept or not
    purge_times: list = field(default_factory=list)
    main_lambda_history: list = field(default_factory=list)  # (t, lambda_min, purged)
    theta_norm_max: float = 0.0
    gamma_eig_min: float = np.inf
    gamma_eig_max: float = -np.inf
    gamma_asym_max: float = 0.0
    out_of_domain_steps: int = 0
    n_steps: int = 0
    main_stack: Optional[HistoryStack] = None
    transient_stack: Optional[HistoryStack] = None
    theta_bar: float = np.inf

    @property
    def full_rank(self) -> bool:
        return self.main_stack is not None and self.main_stack.full_rank()

    def columns(self):
        n, p = self.x.shape[1], self.theta_hat.shape[1]
        return (["t"] + [f"x{i + 1}" for i in range(n)] + [f"x_hat{i + 1}" for i in range(n)]
                + [f"theta_hat{i + 1}" for i in range(p)]
                + ["x_err_norm", "theta_err_norm", "lambda_min_main", "lambda_min_transient",
                   "lambda_min_gamma", "purge_count", "event_count"])

    def to_csv(self, path):
        lines = [",".join(self.columns())]
        for k in range(self.t.size):
            vals = ([self.t[k], *self.x[k], *self.x_hat[k], *self.theta_hat[k], self.x_err_norm[k],
                     self.theta_err_norm[k], self.lambda_main[k], self.lambda_transient[k],
                     self.lambda_gamma[k]])
            lines.append(",".join(f"{v:.17g}" for v in vals)
                         + f",{int(self.purge_count[k])},{int(self.event_count[k])}")
        Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# runner


@dataclass
class _Layout:
    n: int
    p: int

    def __post_init__(self):
        n, p = self.n, self.p
        self.x = slice(0, n)
        self.obs = slice(n, n + ObserverState.size(n, p))
        self.x_hat = slice(n, 2 * n)
        self.I_Y = slice(2 * n, 2 * n + n * p)
        self.I_fgu = slice(2 * n + n * p, 3 * n + n * p)
        self.theta = slice(3 * n + n * p, 3 * n + n * p + p)
        self.Gamma = slice(3 * n + n * p + p, 3 * n + n * p + p + p * p)
        self.size = self.Gamma.stop


def resolve_gains(sc: Scenario, model: Optional[AffineModel] = None):
    """Gains and bounds from the scenario's gains file, or synthesized from its model."""
    if sc.gains_file is not None:
        gf = load_gains(sc.gains_file)
    else:
        gf = synthesize(sc.model)
    return gf.gains, gf.bounds


def make_estimator_rhs(model: AffineModel, gains: ObserverGains, bounds: JacobianBounds,
                       main: HistoryStack, est: EstimatorConfig, pin_theta: bool = False):
    """Derivative of the estimator state ``[x_hat, I_Y, I_fgu, theta_hat, Gamma]``.

    The returned callable sees the plant only through the output ``y`` and
    the input ``u``. ``x_diag`` is the test-only hook that builds the
    integral states from the plant state instead of the estimate. The main
    stack is read live, so its sums must only change between steps.
    """
    n, p = model.n, model.p
    A = assemble_A(bounds)
    Yfun, f0, gfun = model.Y, model.f0, model.g
    k_theta, beta1, theta_bar = est.k_theta, est.beta1, est.theta_bar
    i_IY, i_If, i_th, i_G = n, n + n * p, 2 * n + n * p, 2 * n + n * p + p

    def est_rhs(t, zeta, y, u, x_diag=None):
        d = np.empty_like(zeta)
        x_hat = zeta[:n]
        th = zeta[i_th:i_G]
        d[:n] = estimate_field(x_hat, y, u, th, gains, model, bounds, A)
        xr = x_hat if x_diag is None else x_diag
        d[i_IY:i_If] = Yfun(xr).ravel()
        d[i_If:i_th] = f0(xr) + gfun(xr) @ u
        if pin_theta:
            d[i_th:] = 0.0
            return d
        try:
            dth, dG = param_derivatives(th, zeta[i_G:].reshape(p, p), main.info, main.rhs,
                                        k_theta, beta1, theta_bar)
        except FloatingPointError:
            # only reachable from a trial stage; NaN makes the step controller reject it
            dth, dG = np.full(p, np.nan), np.full((p, p), np.nan)
        d[i_th:i_G] = dth
        d[i_G:] = dG.ravel()
        return d

    return est_rhs


def run_scenario(sc: Scenario, gains: Optional[ObserverGains] = None,
                 bounds: Optional[JacobianBounds] = None, model: Optional[AffineModel] = None,
                 max_steps: int = 2_000_000) -> RunLog:
    """Integrate the closed loop to ``sc.t_final`` and return the telemetry.

    Between events the plant, observer, integral states, estimate and gain
    matrix form one ODE; the stacks only change at sampling ticks, and the
    integrator restarts its slope cache whenever the main stack is replaced.
    """
    sc.validate()
    model = model or sc.model.build_model()
    if gains is None or bounds is None:
        g2, b2 = resolve_gains(sc, model)
        gains = gains or g2
        bounds = bounds or b2
    n, p = model.n, model.p
    lay = _Layout(n, p)
    est = sc.estimator
    diag = sc.diagnostics
    theta_true = np.asarray(sc.theta_true, dtype=float)
    if theta_true.size != p:
        raise ManifestError(sc.location, "theta_true", f"expected {p} entries")
    C = model.C
    desired = sc.controller.desired()
    kp, kd = sc.controller.kp, sc.controller.kd
    main = HistoryStack(est.N, p, est.kappa)
    transient = HistoryStack(est.N, p, est.kappa)
    sched = SchedulerState(t_star=est.t_star, T=est.T, lambda_star=est.lambda_star,
                           xi_purge=est.xi_purge, dwell=est.dwell, delta=est.delta)

    x_hat0 = np.asarray(sc.x_hat0, dtype=float).copy()
    if diag.x_hat0_spread > 0:
        rng = np.random.default_rng(sc.seed)
        x_hat0 += rng.uniform(-diag.x_hat0_spread, diag.x_hat0_spread, size=n)
    theta0 = theta_true.copy() if diag.pin_theta else np.asarray(sc.theta_hat0, dtype=float)
    z0 = np.concatenate([sc.x0, ObserverState.initial(x_hat0, p).pack(), theta0,
                         sc.gamma0().ravel()])

    def control(t, x):
        return pd_controller(t, x, kp, kd, desired)

    est_rhs = make_estimator_rhs(model, gains, bounds, main, est, pin_theta=diag.pin_theta)
    sl_x, sl_e = lay.x, slice(n, lay.size)
    Yfun, f0, gfun = model.Y, model.f0, model.g
    from_plant = diag.regress_from_plant

    def rhs(t, z):
        if not np.isfinite(z).all():
            return np.full_like(z, np.nan)  # rejected trial stage
        x = z[sl_x]
        u = control(t, x)
        dz = np.empty_like(z)
        dz[sl_x] = Yfun(x) @ theta_true + f0(x) + gfun(x) @ u
        dz[sl_e] = est_rhs(t, z[sl_e], C @ x, u, x if from_plant else None)
        return dz

    log = RunLog(*([None] * 11), theta_bar=est.theta_bar)

    def post_step(t, z):
        z = z.copy()
        G = z[lay.Gamma].reshape(p, p)
        log.gamma_asym_max = max(log.gamma_asym_max, float(np.max(np.abs(G - G.T))))
        G = 0.5 * (G + G.T)
        z[lay.Gamma] = G.ravel()
        z[lay.theta] = project_ball(z[lay.theta], est.theta_bar)
        ev = np.linalg.eigvalsh(G)
        log.gamma_eig_min = min(log.gamma_eig_min, float(ev[0]))
        log.gamma_eig_max = max(log.gamma_eig_max, float(ev[-1]))
        log.theta_norm_max = max(log.theta_norm_max, float(np.linalg.norm(z[lay.theta])))
        if not in_box(z[lay.x], bounds.domain_box):
            log.out_of_domain_steps += 1
        log.n_steps += 1
        if log.n_steps > max_steps:
            raise StiffnessError(f"step budget {max_steps} exhausted at t={t:.6g}")
        return z

    traj = DenseTrajectory(0.0, z0, retention=est.T + 2.0 * est.t_star + 1.0)
    stepper = Integrator(rhs, rtol=sc.tol, atol=sc.tol, post_step=post_step)

    def candidate(t):
        Y_win, G_win, dx_win = window_regressor(traj, t, est.T, n, p, offset=n)
        if diag.regress_from_plant:
            dx_win = traj(t)[lay.x] - traj(t - est.T)[lay.x]
        entry = StackEntry(dx_win, Y_win, G_win, t)
        log.event_entries.append(entry)
        return entry

    n_out = int(np.floor(sc.t_final / sc.output_dt + 1e-9)) + 1
    rows = []
    k_next = 0

    def emit(t_reached):
        nonlocal k_next
        while k_next < n_out and k_next * sc.output_dt <= t_reached + 1e-12:
            tk = min(k_next * sc.output_dt, t_reached)
            z = traj(tk)
            G = z[lay.Gamma].reshape(p, p)
            rows.append((tk, z[lay.x].copy(), z[lay.x_hat].copy(), z[lay.theta].copy(),
                         main.cached_lambda_min, transient.cached_lambda_min,
                         float(np.linalg.eigvalsh(0.5 * (G + G.T))[0]), sched.purges, sched.events))
            k_next += 1

    emit(0.0)
    log.main_lambda_history.append((0.0, main.cached_lambda_min, False))
    t = 0.0
    while t < sc.t_final:
        t_stop = min(sc.t_final, sched.next_tick())
        t = stepper.advance(traj, t_stop)
        if sched.tick_due(t):
            if diag.freeze_stacks:
                sched.tau1 = t
            else:
                act = scheduler_step(sched, t, main, transient, candidate)
                if act.event:
                    log.event_times.append(t)
                if act.purged:
                    log.purge_times.append(t)
                    log.main_lambda_history.append((t, main.cached_lambda_min, True))
                    stepper.reset()
        emit(t)

    log.t = np.array([r[0] for r in rows])
    log.x = np.array([r[1] for r in rows])
    log.x_hat = np.array([r[2] for r in rows])
    log.theta_hat = np.array([r[3] for r in rows])
    log.x_err_norm = np.linalg.norm(log.x - log.x_hat, axis=1)
    log.theta_err_norm = np.linalg.norm(theta_true - log.theta_hat, axis=1)
    log.lambda_main = np.array([r[4] for r in rows])
    log.lambda_transient = np.array([r[5] for r in rows])
    log.lambda_gamma = np.array([r[6] for r in rows])
    log.purge_count = np.array([r[7] for r in rows], dtype=int)
    log.event_count = np.array([r[8] for r in rows], dtype=int)
    log.main_stack = main
    log.transient_stack = transient
    if sc.output is not None:
        log.to_csv(sc.output)
    return log


def benchmark_scenario(**overrides) -> Scenario:
    """The two-state benchmark with its default estimator settings."""
    manifest = ModelManifest(
        model="benchmark",
        domain_box=np.array([[-3.0, 3.0], [-3.0, 3.0]]),
        input_box=np.array([[-450.0, 450.0]]),
        theta_box=np.column_stack([BENCHMARK_THETA - 0.1 * np.abs(BENCHMARK_THETA),
                                   BENCHMARK_THETA + 0.1 * np.abs(BENCHMARK_THETA)]),
        alpha=2.0,
    )
    sc = Scenario(model=manifest, theta_true=BENCHMARK_THETA.copy(), x0=np.array([2.0, 2.0]),
                  x_hat0=np.array([2.5, 1.5]), theta_hat0=np.zeros(4))
    for k, v in overrides.items():
        if not hasattr(sc, k):
            raise AttributeError(k)
        setattr(sc, k, copy.deepcopy(v))
    sc.validate()
    return sc
