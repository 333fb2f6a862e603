"""JSON file formats: model manifests, bounds files and gains files."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .lmi import LmiProblem, ObserverGains, solve_gains
from .model_core import (AffineModel, JacobianBounds, bounds_from_dict, bounds_to_dict,
                         derive_jacobian_bounds)
from .models import get_model


class ManifestError(ValueError):
    """Malformed input file; carries the offending field and file location."""

    def __init__(self, location, field_name: str, problem: str):
        self.location = str(location)
        self.field = field_name
        super().__init__(f"{self.location}: field '{field_name}': {problem}")


def load_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ManifestError(path, "<file>", f"cannot read ({exc.strerror})") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}:{exc.lineno}:{exc.colno}", "<json>", exc.msg) from None
    if not isinstance(data, dict):
        raise ManifestError(path, "<root>", "top level must be an object")
    return data


def dump_json(path, data: dict):
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


def get_field(d: dict, key: str, where, kind=None, default: Any = ..., prefix: str = ""):
    """Fetch ``d[key]`` checking its type; ``kind`` may be 'float', 'int', 'bool',
    'str', 'dict', 'array' or None."""
    name = f"{prefix}{key}"
    if key not in d:
        if default is ...:
            raise ManifestError(where, name, "missing")
        return default
    v = d[key]
    try:
        if kind == "float":
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise TypeError
            return float(v)
        if kind == "int":
            if isinstance(v, bool) or not isinstance(v, int):
                raise TypeError
            return v
        if kind == "bool":
            if not isinstance(v, bool):
                raise TypeError
            return v
        if kind == "str":
            if not isinstance(v, str):
                raise TypeError
            return v
        if kind == "dict":
            if not isinstance(v, dict):
                raise TypeError
            return v
        if kind == "array":
            a = np.asarray(v, dtype=float)
            if not np.all(np.isfinite(a)):
                raise ManifestError(where, name, "non-finite entries")
            return a
    except (TypeError, ValueError):
        raise ManifestError(where, name, f"expected {kind}, got {v!r}") from None
    return v


def check_keys(d: dict, allowed, where, prefix: str = ""):
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ManifestError(where, prefix + extra[0], "unknown field")


# --------------------------------------------------------------------------
# model manifest


MODEL_KEYS = ("model", "params", "domain_box", "input_box", "theta_box", "grid_density",
              "safety", "theta_ball_radius", "alpha", "injection", "bounds_file", "description")


@dataclass
class ModelManifest:
    model: str
    params: dict = field(default_factory=dict)
    domain_box: Optional[np.ndarray] = None
    input_box: Optional[np.ndarray] = None
    theta_box: Optional[np.ndarray] = None
    grid_density: int = 101
    safety: float = 0.05
    theta_ball_radius: Optional[float] = None
    alpha: float = 2.0
    injection: str = "output"
    bounds_file: Optional[Path] = None
    location: str = "<inline>"

    def build_model(self) -> AffineModel:
        try:
            return get_model(self.model, self.params)
        except KeyError as exc:
            raise ManifestError(self.location, "model", exc.args[0]) from None
        except (TypeError, ValueError) as exc:
            raise ManifestError(self.location, "params", str(exc)) from None

    def build_bounds(self, model: Optional[AffineModel] = None) -> JacobianBounds:
        if self.bounds_file is not None:
            return load_bounds(self.bounds_file)
        model = model or self.build_model()
        for name in ("domain_box", "input_box", "theta_box"):
            if getattr(self, name) is None:
                raise ManifestError(self.location, name, "required unless bounds_file is given")
        try:
            return derive_jacobian_bounds(model, self.domain_box, self.input_box, self.theta_box,
                                          grid_density=self.grid_density, safety=self.safety,
                                          theta_ball_radius=self.theta_ball_radius)
        except ValueError as exc:
            raise ManifestError(self.location, "domain_box", str(exc)) from None


def parse_model_manifest(d: dict, where="<inline>", base: Optional[Path] = None) -> ModelManifest:
    check_keys(d, MODEL_KEYS, where)
    bf = get_field(d, "bounds_file", where, "str", None)
    if bf is not None:
        bf = Path(bf) if base is None or Path(bf).is_absolute() else base / bf
    m = ModelManifest(
        model=get_field(d, "model", where, "str"),
        params=get_field(d, "params", where, "dict", {}),
        domain_box=get_field(d, "domain_box", where, "array", None),
        input_box=get_field(d, "input_box", where, "array", None),
        theta_box=get_field(d, "theta_box", where, "array", None),
        grid_density=get_field(d, "grid_density", where, "int", 101),
        safety=get_field(d, "safety", where, "float", 0.05),
        theta_ball_radius=get_field(d, "theta_ball_radius", where, "float", None),
        alpha=get_field(d, "alpha", where, "float", 2.0),
        injection=get_field(d, "injection", where, "str", "output"),
        bounds_file=bf,
        location=str(where),
    )
    if m.injection not in ("output", "free"):
        raise ManifestError(where, "injection", "must be 'output' or 'free'")
    if m.grid_density < 2:
        raise ManifestError(where, "grid_density", "must be >= 2")
    if not m.alpha >= 0:
        raise ManifestError(where, "alpha", "must be non-negative")
    return m


def load_model_manifest(path) -> ModelManifest:
    path = Path(path)
    return parse_model_manifest(load_json(path), path, path.parent)


# --------------------------------------------------------------------------
# bounds and gains files


def save_bounds(path, bounds: JacobianBounds):
    dump_json(path, {"bounds": bounds_to_dict(bounds)})


def load_bounds(path) -> JacobianBounds:
    d = load_json(path)
    b = get_field(d, "bounds", path, "dict")
    try:
        return bounds_from_dict(b)
    except KeyError as exc:
        raise ManifestError(path, f"bounds.{exc.args[0]}", "missing") from None
    except ValueError as exc:
        raise ManifestError(path, "bounds", str(exc)) from None


@dataclass
class GainsFile:
    gains: ObserverGains
    bounds: JacobianBounds
    model: str
    params: dict

    def problem(self, margin: float = 1e-6, p_floor: float = 1e-6) -> LmiProblem:
        C = get_model(self.model, self.params).C
        return LmiProblem.from_bounds(self.bounds, C, self.gains.alpha, margin=margin,
                                      p_floor=p_floor)


def save_gains(path, gf: GainsFile):
    dump_json(path, {"model": gf.model, "params": gf.params, "gains": gf.gains.to_dict(),
                     "bounds": bounds_to_dict(gf.bounds)})


def load_gains(path) -> GainsFile:
    d = load_json(path)
    check_keys(d, ("model", "params", "gains", "bounds"), path)
    g = get_field(d, "gains", path, "dict")
    try:
        gains = ObserverGains.from_dict(g)
    except KeyError as exc:
        raise ManifestError(path, f"gains.{exc.args[0]}", "missing") from None
    except (TypeError, ValueError) as exc:
        raise ManifestError(path, "gains", str(exc)) from None
    b = get_field(d, "bounds", path, "dict")
    try:
        bounds = bounds_from_dict(b)
    except KeyError as exc:
        raise ManifestError(path, f"bounds.{exc.args[0]}", "missing") from None
    except ValueError as exc:
        raise ManifestError(path, "bounds", str(exc)) from None
    return GainsFile(gains, bounds, get_field(d, "model", path, "str"),
                     get_field(d, "params", path, "dict", {}))


def synthesize(manifest: ModelManifest, **solver_kw) -> GainsFile:
    """Bounds from the manifest, then certified gains (raises on infeasibility)."""
    model = manifest.build_model()
    bounds = manifest.build_bounds(model)
    problem = LmiProblem.from_bounds(bounds, model.C, manifest.alpha)
    solver_kw.setdefault("injection", manifest.injection)
    gains = solve_gains(problem, **solver_kw)
    return GainsFile(gains, bounds, manifest.model, manifest.params)
