"""Affine plant description, Jacobian bounds, lifted rewriting and sector checks.

The plant is

    x' = Y(x) theta + f0(x) + g(x) u,    y = C x

and the observer works with the rewriting ``x' = A x + F_theta + F_1 + G_u``
where each nonlinear term has a Jacobian confined to ``[0, K2 - K1]``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

Box = np.ndarray  # shape (d, 2): rows of [lo, hi]


class DomainError(ValueError):
    """Raised when a model callback produces a non-finite value."""


class OutOfDomainWarning(UserWarning):
    """A state left the box on which the Jacobian bounds were derived."""


def as_box(box, dim: Optional[int] = None, name: str = "box") -> np.ndarray:
    b = np.atleast_2d(np.asarray(box, dtype=float))
    if b.ndim != 2 or b.shape[1] != 2:
        raise ValueError(f"{name} must be a list of [lo, hi] pairs, got shape {b.shape}")
    if dim is not None and b.shape[0] != dim:
        raise ValueError(f"{name} has {b.shape[0]} rows, expected {dim}")
    if np.any(b[:, 0] > b[:, 1]):
        raise ValueError(f"{name} has an empty interval (lo > hi)")
    return b


def in_box(x, box: np.ndarray, tol: float = 0.0) -> bool:
    x = np.asarray(x, dtype=float)
    return bool(np.all(x >= box[:, 0] - tol) and np.all(x <= box[:, 1] + tol))


@dataclass(frozen=True)
class AffineModel:
    """Callbacks and dimensions of an affine-in-parameters plant.

    ``dY``, ``df0`` and ``dg`` are optional analytic Jacobians with layouts
    ``dY(x)[j, i, k] = d Y[j, i] / d x[k]``, ``df0(x)[j, k]`` and
    ``dg(x)[j, l, k] = d g[j, l] / d x[k]``. When absent, central finite
    differences are used.
    """

    n: int
    m: int
    p: int
    q: int
    Y: Callable[[np.ndarray], np.ndarray]
    f0: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    C: np.ndarray
    dY: Optional[Callable] = None
    df0: Optional[Callable] = None
    dg: Optional[Callable] = None
    name: str = "model"

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        if C.shape != (self.q, self.n):
            raise ValueError(f"C must be {self.q}x{self.n}, got {C.shape}")
        C.setflags(write=False)
        object.__setattr__(self, "C", C)

    def field(self, x, theta, u) -> np.ndarray:
        """Right-hand side ``Y(x) theta + f0(x) + g(x) u``."""
        return self.Y(x) @ theta + self.f0(x) + self.g(x) @ np.atleast_1d(u)

    def check_shapes(self, x) -> None:
        x = np.asarray(x, dtype=float)
        for name, val, shape in (
            ("Y", self.Y(x), (self.n, self.p)),
            ("f0", self.f0(x), (self.n,)),
            ("g", self.g(x), (self.n, self.m)),
        ):
            if np.shape(val) != shape:
                raise ValueError(f"{name}(x) has shape {np.shape(val)}, expected {shape}")


@dataclass(frozen=True)
class JacobianBounds:
    K_y1: np.ndarray
    K_y2: np.ndarray
    K_f1: np.ndarray
    K_f2: np.ndarray
    K_g1: np.ndarray
    K_g2: np.ndarray
    domain_box: np.ndarray
    input_box: np.ndarray
    theta_ball_radius: float
    theta_box: Optional[np.ndarray] = None

    def __post_init__(self):
        for lo, hi in (("K_y1", "K_y2"), ("K_f1", "K_f2"), ("K_g1", "K_g2")):
            a = np.asarray(getattr(self, lo), dtype=float)
            b = np.asarray(getattr(self, hi), dtype=float)
            if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
                raise ValueError(f"{lo}/{hi} must be matching square matrices")
            if np.any(a > b):
                raise ValueError(f"{lo} exceeds {hi} element-wise")
            a.setflags(write=False)
            b.setflags(write=False)
            object.__setattr__(self, lo, a)
            object.__setattr__(self, hi, b)
        object.__setattr__(self, "domain_box", as_box(self.domain_box, self.n, "domain_box"))
        object.__setattr__(self, "input_box", as_box(self.input_box, name="input_box"))
        if self.theta_box is not None:
            object.__setattr__(self, "theta_box", as_box(self.theta_box, name="theta_box"))
        if not self.theta_ball_radius > 0:
            raise ValueError("theta_ball_radius must be positive")

    @property
    def n(self) -> int:
        return self.K_y1.shape[0]

    def gaps(self):
        return (self.K_y2 - self.K_y1, self.K_f2 - self.K_f1, self.K_g2 - self.K_g1)


@dataclass(frozen=True)
class MultiplierMatrices:
    J_y: np.ndarray
    J_f: np.ndarray
    J_g: np.ndarray

    def blocks(self, which: str):
        """Return the (2,1) and (2,2) n x n blocks of ``J_which``."""
        J = getattr(self, f"J_{which}")
        n = J.shape[0] // 2
        return J[n:, :n], J[n:, n:]

    def all(self):
        return (self.J_y, self.J_f, self.J_g)


# --------------------------------------------------------------------------
# Jacobians


def _fd_jacobian(fun, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fun(x), dtype=float)
    out = np.empty(f0.shape + (x.size,))
    for k in range(x.size):
        step = h * max(1.0, abs(x[k]))
        xp = x.copy()
        xm = x.copy()
        xp[k] += step
        xm[k] -= step
        out[..., k] = (np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2 * step)
    return out


def jac_Y(model: AffineModel, x) -> np.ndarray:
    if model.dY is not None:
        return np.asarray(model.dY(x), dtype=float)
    return _fd_jacobian(model.Y, x)


def jac_f0(model: AffineModel, x) -> np.ndarray:
    if model.df0 is not None:
        return np.asarray(model.df0(x), dtype=float)
    return _fd_jacobian(model.f0, x)


def jac_g(model: AffineModel, x) -> np.ndarray:
    if model.dg is not None:
        return np.asarray(model.dg(x), dtype=float)
    return _fd_jacobian(model.g, x)


def _linear_range(coef: np.ndarray, box: np.ndarray):
    # min / max of sum_i coef[..., i] * v_i over v in a box, attained at vertices
    lo = coef * box[:, 0]
    hi = coef * box[:, 1]
    return np.minimum(lo, hi).sum(axis=-1), np.maximum(lo, hi).sum(axis=-1)


def _grid(box: np.ndarray, density) -> np.ndarray:
    dens = np.broadcast_to(np.asarray(density, dtype=int), (box.shape[0],))
    if np.any(dens < 2):
        raise ValueError("grid_density must be at least 2 per axis")
    axes = [np.linspace(lo, hi, d) for (lo, hi), d in zip(box, dens)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def jacobian_ranges(model: AffineModel, points, input_box, theta_box):
    """Element-wise min/max of the three lifted Jacobians over sample points.

    Returns six n x n arrays ``(y_lo, y_hi, f_lo, f_hi, g_lo, g_hi)``. The Y
    entry is the Jacobian of ``x -> Y(x) theta`` (summed over the parameter
    index) extremised over the parameter box; likewise ``g(x) u`` over the
    input box.
    """
    n = model.n
    big = np.inf
    y_lo, f_lo, g_lo = (np.full((n, n), big) for _ in range(3))
    y_hi, f_hi, g_hi = (np.full((n, n), -big) for _ in range(3))
    for x in np.atleast_2d(points):
        dY = jac_Y(model, x)  # (n, p, n)
        df = jac_f0(model, x)  # (n, n)
        dg = jac_g(model, x)  # (n, m, n)
        for name, val in (("Y", dY), ("f0", df), ("g", dg)):
            if not np.all(np.isfinite(val)):
                raise DomainError(f"non-finite Jacobian of {name} at sample x={x.tolist()}")
        ylo, yhi = _linear_range(np.moveaxis(dY, 1, 2), theta_box)
        glo, ghi = _linear_range(np.moveaxis(dg, 1, 2), input_box)
        np.minimum(y_lo, ylo, out=y_lo)
        np.maximum(y_hi, yhi, out=y_hi)
        np.minimum(f_lo, df, out=f_lo)
        np.maximum(f_hi, df, out=f_hi)
        np.minimum(g_lo, glo, out=g_lo)
        np.maximum(g_hi, ghi, out=g_hi)
    return y_lo, y_hi, f_lo, f_hi, g_lo, g_hi


def derive_jacobian_bounds(
    model: AffineModel,
    domain_box,
    input_box,
    theta_box,
    grid_density=101,
    safety: float = 0.05,
    theta_ball_radius: Optional[float] = None,
) -> JacobianBounds:
    """Sample the Jacobians on a grid over ``domain_box`` and bound them.

    The parameter and input dependence is linear, so it is handled exactly
    at the box vertices; only the state is gridded. Each interval
    ``[lo, hi]`` is widened by ``safety/2 * (hi - lo)`` on both sides, so a
    constant Jacobian stays exact.

    Parameters
    ----------
    grid_density : int or sequence of int
        Samples per state axis (>= 2).
    safety : float
        Relative widening of the total interval width.
    theta_ball_radius : float, optional
        Radius used for projection; defaults to the norm of the farthest
        parameter-box vertex.
    """
    dbox = as_box(domain_box, model.n, "domain_box")
    ubox = as_box(input_box, model.m, "input_box")
    tbox = as_box(theta_box, model.p, "theta_box")
    pts = _grid(dbox, grid_density)
    for x in pts:
        for name, val in (("Y", model.Y(x)), ("f0", model.f0(x)), ("g", model.g(x))):
            if not np.all(np.isfinite(val)):
                raise DomainError(f"non-finite {name}(x) at sample x={x.tolist()}")
    ranges = jacobian_ranges(model, pts, ubox, tbox)
    widened = []
    for lo, hi in zip(ranges[0::2], ranges[1::2]):
        pad = 0.5 * safety * (hi - lo)
        widened += [lo - pad, hi + pad]
    if theta_ball_radius is None:
        theta_ball_radius = float(np.linalg.norm(np.abs(tbox).max(axis=1)))
    return JacobianBounds(*widened, domain_box=dbox, input_box=ubox,
                          theta_ball_radius=theta_ball_radius, theta_box=tbox)


# --------------------------------------------------------------------------
# Lifted rewriting


def assemble_A(bounds: JacobianBounds) -> np.ndarray:
    shapes = {bounds.K_y1.shape, bounds.K_f1.shape, bounds.K_g1.shape}
    if len(shapes) != 1:
        raise ValueError(f"bound matrices have mismatched shapes {shapes}")
    return bounds.K_y1 + bounds.K_f1 + bounds.K_g1


def F_theta(x, theta, model: AffineModel, bounds: JacobianBounds) -> np.ndarray:
    return -bounds.K_y1 @ x + model.Y(x) @ theta


def F_1(x, model: AffineModel, bounds: JacobianBounds) -> np.ndarray:
    return -bounds.K_f1 @ x + model.f0(x)


def G_u(x, u, model: AffineModel, bounds: JacobianBounds) -> np.ndarray:
    return -bounds.K_g1 @ x + model.g(x) @ np.atleast_1d(u)


def lifted_terms(x, theta, u, model: AffineModel, bounds: JacobianBounds):
    """Return ``(F_theta, F_1, G_u)`` at ``x``.

    ``A x + F_theta + F_1 + G_u`` reproduces the plant field. Evaluating
    outside the bound box issues an :class:`OutOfDomainWarning` and proceeds.
    """
    x = np.asarray(x, dtype=float)
    if not in_box(x, bounds.domain_box):
        warnings.warn(f"x={x.tolist()} outside domain box", OutOfDomainWarning, stacklevel=2)
    return (F_theta(x, theta, model, bounds), F_1(x, model, bounds), G_u(x, u, model, bounds))


# --------------------------------------------------------------------------
# Multipliers and sector forms


def _multiplier(K1, K2) -> np.ndarray:
    n = K1.shape[0]
    half = (K2 - K1) / 2.0
    return np.block([[np.zeros((n, n)), -half.T], [-half, np.eye(n)]])


def multiplier_matrices(bounds: JacobianBounds) -> MultiplierMatrices:
    return MultiplierMatrices(
        J_y=_multiplier(bounds.K_y1, bounds.K_y2),
        J_f=_multiplier(bounds.K_f1, bounds.K_f2),
        J_g=_multiplier(bounds.K_g1, bounds.K_g2),
    )


def quadratic_form(J: np.ndarray, l: np.ndarray, C: np.ndarray, x_err, psi) -> float:
    """``[x_err; psi]^T T^T J T [x_err; psi]`` with ``T = diag(I - l C, I)``."""
    n = C.shape[1]
    T = np.eye(2 * n)
    T[:n, :n] -= l @ C
    v = T @ np.concatenate([x_err, psi])
    return float(v @ J @ v)


@dataclass
class SectorSample:
    psi_y: np.ndarray
    psi_f: np.ndarray
    psi_g: np.ndarray
    forms: np.ndarray = field(default_factory=lambda: np.full(3, np.nan))
    in_domain: bool = True


def sector_residuals(x, x_hat, u, theta_hat, gains, model: AffineModel,
                     bounds: JacobianBounds, multipliers: Optional[MultiplierMatrices] = None
                     ) -> SectorSample:
    """Difference functions psi_y, psi_f, psi_g and their quadratic forms.

    The forms are only evaluated (``in_domain`` True) when x, x_hat and the
    three injected arguments all lie in the domain box; otherwise ``forms``
    is NaN.
    """
    x = np.asarray(x, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    C = model.C
    innov = C @ (x - x_hat)
    args = [x_hat + l @ innov for l in (gains.l1, gains.l2, gains.l3)]
    psi_y = F_theta(x, theta_hat, model, bounds) - F_theta(args[0], theta_hat, model, bounds)
    psi_f = F_1(x, model, bounds) - F_1(args[1], model, bounds)
    psi_g = G_u(x, u, model, bounds) - G_u(args[2], u, model, bounds)
    sample = SectorSample(psi_y, psi_f, psi_g)
    box = bounds.domain_box
    if not all(in_box(a, box) for a in [x, x_hat, *args]):
        sample.in_domain = False
        return sample
    J = multipliers or multiplier_matrices(bounds)
    x_err = x - x_hat
    sample.forms = np.array([
        quadratic_form(J.J_y, gains.l1, C, x_err, psi_y),
        quadratic_form(J.J_f, gains.l2, C, x_err, psi_f),
        quadratic_form(J.J_g, gains.l3, C, x_err, psi_g),
    ])
    return sample


def regressor_norm_bound(model: AffineModel, domain_box, grid_density=101) -> float:
    """Grid estimate of ``max ||Y(x)||_F`` over the box (the constant F-bar)."""
    pts = _grid(as_box(domain_box, model.n), grid_density)
    return float(max(np.linalg.norm(model.Y(x)) for x in pts))


def sample_box(rng: np.random.Generator, box: np.ndarray, size: int) -> np.ndarray:
    return rng.uniform(box[:, 0], box[:, 1], size=(size, box.shape[0]))


def bounds_to_dict(b: JacobianBounds) -> dict:
    d = {k: getattr(b, k).tolist() for k in ("K_y1", "K_y2", "K_f1", "K_f2", "K_g1", "K_g2")}
    d["domain_box"] = b.domain_box.tolist()
    d["input_box"] = b.input_box.tolist()
    d["theta_ball_radius"] = b.theta_ball_radius
    if b.theta_box is not None:
        d["theta_box"] = b.theta_box.tolist()
    return d


def bounds_from_dict(d: dict) -> JacobianBounds:
    kw = {k: np.asarray(d[k], dtype=float) for k in ("K_y1", "K_y2", "K_f1", "K_f2", "K_g1", "K_g2")}
    return JacobianBounds(**kw, domain_box=d["domain_box"], input_box=d["input_box"],
                          theta_ball_radius=float(d["theta_ball_radius"]),
                          theta_box=d.get("theta_box"))


def stack_boxes(*boxes: Sequence) -> np.ndarray:
    return np.vstack([as_box(b) for b in boxes])
