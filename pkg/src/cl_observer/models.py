"""Built-in plants, selectable by identifier from a JSON manifest."""
from __future__ import annotations

import numpy as np

from .model_core import AffineModel

BENCHMARK_THETA = np.array([1.0, -1.0, -0.5, 0.5])


def benchmark_model() -> AffineModel:
    """Two-state plant with four unknown parameters and output ``y = x1``.

    ``Y(x) = [[x2, 0, 0, 0], [0, x1, x2, x2 (cos 2x1 + 2)^2]]``,
    ``f0 = 0``, ``g(x) = [0, cos 2x1 + 2]``.
    """

    def Y(x):
        c = np.cos(2.0 * x[0]) + 2.0
        return np.array([[x[1], 0.0, 0.0, 0.0], [0.0, x[0], x[1], x[1] * c * c]])

    def f0(x):
        return np.zeros(2)

    def g(x):
        return np.array([[0.0], [np.cos(2.0 * x[0]) + 2.0]])

    def dY(x):
        c = np.cos(2.0 * x[0]) + 2.0
        d = np.zeros((2, 4, 2))
        d[0, 0, 1] = 1.0
        d[1, 1, 0] = 1.0
        d[1, 2, 1] = 1.0
        d[1, 3, 0] = -4.0 * x[1] * c * np.sin(2.0 * x[0])
        d[1, 3, 1] = c * c
        return d

    def df0(x):
        return np.zeros((2, 2))

    def dg(x):
        d = np.zeros((2, 1, 2))
        d[1, 0, 0] = -2.0 * np.sin(2.0 * x[0])
        return d

    return AffineModel(n=2, m=1, p=4, q=1, Y=Y, f0=f0, g=g, C=[[1.0, 0.0]],
                       dY=dY, df0=df0, dg=dg, name="benchmark")


def linear_model(F, C, Y0=None, B=None) -> AffineModel:
    """``x' = Y0 theta + F x + B u`` with constant matrices."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    n = F.shape[0]
    Y0 = np.zeros((n, 1)) if Y0 is None else np.atleast_2d(np.asarray(Y0, dtype=float))
    B = np.zeros((n, 1)) if B is None else np.atleast_2d(np.asarray(B, dtype=float))
    p, m = Y0.shape[1], B.shape[1]
    return AffineModel(
        n=n, m=m, p=p, q=C.shape[0],
        Y=lambda x: Y0, f0=lambda x: F @ x, g=lambda x: B, C=C,
        dY=lambda x: np.zeros((n, p, n)), df0=lambda x: F, dg=lambda x: np.zeros((n, m, n)),
        name="linear",
    )


MODELS = {
    "benchmark": lambda **kw: benchmark_model(),
    "linear": linear_model,
}


def get_model(model_id: str, params: dict | None = None) -> AffineModel:
    try:
        factory = MODELS[model_id]
    except KeyError:
        raise KeyError(f"unknown model id {model_id!r}; known: {sorted(MODELS)}") from None
    return factory(**(params or {}))
