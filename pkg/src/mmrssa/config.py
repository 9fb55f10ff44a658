"""Versioned JSON run configuration with line-precise validation errors."""
from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from json.decoder import scanstring

import numpy as np

from .model import (SegwayParams, StaticModel, make_mode, segway_additive_model,
                    segway_multiplicative_model)
from .multiplicative import BilevelOptions
from .safety import GammaSpec, SafetyIndexParams, TiltIndex

SCHEMA_VERSION = 1
SOLVERS = ("additive", "multiplicative")


class ConfigError(ValueError):
    def __init__(self, message: str, path: str = "", line: int | None = None, source: str = "config"):
        self.path = path
        self.line = line
        where = source if line is None else f"{source}:{line}"
        super().__init__(f"{where}: {path + ': ' if path else ''}{message}")


# ------------------------------------------------------- position tracking

def _line_of(text: str, pos: int) -> int:
    return text.count("\n", 0, pos) + 1


def _skip_ws(text, i):
    while i < len(text) and text[i] in " \t\r\n":
        i += 1
    return i


def _locate(text: str):
    """Map of JSON paths ("a.b[2].c") to the line where each value starts."""
    decoder = json.JSONDecoder()
    lines = {}

    def walk(i, path):
        i = _skip_ws(text, i)
        lines[path] = _line_of(text, i)
        ch = text[i]
        if ch == "{":
            i = _skip_ws(text, i + 1)
            if text[i] == "}":
                return i + 1
            while True:
                key, i = scanstring(text, _skip_ws(text, i) + 1)
                i = _skip_ws(text, i) + 1  # colon
                i = walk(i, f"{path}.{key}" if path else key)
                i = _skip_ws(text, i)
                if text[i] == "}":
                    return i + 1
                i += 1
        if ch == "[":
            i = _skip_ws(text, i + 1)
            if text[i] == "]":
                return i + 1
            k = 0
            while True:
                i = walk(i, f"{path}[{k}]")
                k += 1
                i = _skip_ws(text, i)
                if text[i] == "]":
                    return i + 1
                i += 1
        _, end = decoder.raw_decode(text, i)
        return end

    walk(0, "")
    return lines


class _Doc:
    """Parsed document plus the line lookup used for error messages."""

    def __init__(self, data, lines, source):
        self.data = data
        self.lines = lines
        self.source = source

    def error(self, path, message):
        line = self.lines.get(path)
        probe = path
        while line is None and probe:
            probe = re.sub(r"(\.[^.\[]+|\[\d+\]|^[^.\[]+)$", "", probe)
            line = self.lines.get(probe)
        return ConfigError(message, path, line, self.source)


def _get(doc: _Doc, obj, path, key, kind, default=None, required=False):
    full = f"{path}.{key}" if path else key
    if obj is None or key not in obj:
        if required:
            raise doc.error(path, f"missing required field '{key}'")
        return default
    v = obj[key]
    if kind == "number":
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise doc.error(full, "expected a finite number")
        return float(v)
    if kind == "int":
        if isinstance(v, bool) or not isinstance(v, int):
            raise doc.error(full, "expected an integer")
        return v
    if kind == "str":
        if not isinstance(v, str):
            raise doc.error(full, "expected a string")
        return v
    if kind == "bool":
        if not isinstance(v, bool):
            raise doc.error(full, "expected true or false")
        return v
    if kind == "object":
        if not isinstance(v, dict):
            raise doc.error(full, "expected an object")
        return v
    if kind == "array":
        if not isinstance(v, list):
            raise doc.error(full, "expected an array")
        return v
    if kind == "vector":
        if not isinstance(v, list) or not all(isinstance(e, (int, float)) and not isinstance(e, bool)
                                              for e in v):
            raise doc.error(full, "expected an array of numbers")
        arr = np.asarray(v, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise doc.error(full, "entries must be finite")
        return arr
    if kind == "matrix":
        if (not isinstance(v, list) or not v or not all(isinstance(r, list) for r in v)
                or len({len(r) for r in v}) != 1):
            raise doc.error(full, "expected a rectangular array of rows")
        try:
            arr = np.asarray(v, dtype=float)
        except (TypeError, ValueError):
            raise doc.error(full, "matrix entries must be numbers") from None
        if not np.all(np.isfinite(arr)):
            raise doc.error(full, "entries must be finite")
        return arr
    raise AssertionError(kind)


def _no_extra(doc, obj, path, allowed):
    for key in obj:
        if key not in allowed:
            full = f"{path}.{key}" if path else key
            raise doc.error(full, f"unknown field '{key}'")


# --------------------------------------------------------------- sections

@dataclass
class RunConfig:
    raw: dict
    source: str
    model: object
    index: TiltIndex
    gamma: GammaSpec
    eps_f: float
    eps0: float
    seed: int
    solver: str
    bilevel: BilevelOptions
    sections: dict
    doc: object = field(default=None, repr=False)

    def section(self, name) -> dict:
        return self.sections.get(name, {})

    def canonical(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


_TOP = ("schema_version", "model", "safety_index", "gamma", "eps_f", "eps0", "seed", "solver",
        "solve", "simulate", "certify", "synthesize", "compare", "description")
_SEGWAY = ("m", "m0", "J0", "mL", "R", "K_m", "K_b", "grav")


def _model(doc, obj):
    path = "model"
    kind = _get(doc, obj, path, "kind", "str", required=True)
    bounds = _get(doc, obj, path, "control_bounds", "object", {})
    _no_extra(doc, bounds, f"{path}.control_bounds", ("lower", "upper"))
    if kind in ("segway_additive", "segway_multiplicative"):
        _no_extra(doc, obj, path, ("kind", "segway", "modes", "control_bounds"))
        seg = _get(doc, obj, path, "segway", "object", {})
        _no_extra(doc, seg, f"{path}.segway", _SEGWAY)
        vals = {k: _get(doc, seg, f"{path}.segway", k, "number") for k in _SEGWAY if k in seg}
        try:
            params = SegwayParams(**vals)
        except ValueError as exc:
            raise doc.error(f"{path}.segway", str(exc)) from None
        lo = _get(doc, bounds, f"{path}.control_bounds", "lower", "vector", np.array([-20.0]))
        hi = _get(doc, bounds, f"{path}.control_bounds", "upper", "vector", np.array([20.0]))
        for name, arr in (("lower", lo), ("upper", hi)):
            if arr.shape != (1,):
                raise doc.error(f"{path}.control_bounds.{name}", "the Segway has one control")
        modes = _get(doc, obj, path, "modes", "array", required=True)
        parsed = []
        for k, md in enumerate(modes):
            mp = f"{path}.modes[{k}]"
            if not isinstance(md, dict):
                raise doc.error(mp, "expected an object")
            w = _get(doc, md, mp, "weight", "number", required=True)
            if kind == "segway_additive":
                _no_extra(doc, md, mp, ("weight", "mu_d", "sigma_d"))
                mu = _get(doc, md, mp, "mu_d", "vector", required=True)
                sig = _get(doc, md, mp, "sigma_d", "matrix", required=True)
                if mu.shape != (4,):
                    raise doc.error(f"{mp}.mu_d", "expected 4 entries")
                if sig.shape != (4, 4):
                    raise doc.error(f"{mp}.sigma_d", "expected a 4x4 matrix")
                parsed.append((w, mu, sig))
            else:
                _no_extra(doc, md, mp, ("weight", "mu_k", "sigma_k"))
                mk = _get(doc, md, mp, "mu_k", "number", required=True)
                sk = _get(doc, md, mp, "sigma_k", "number", required=True)
                if sk < 0:
                    raise doc.error(f"{mp}.sigma_k", "must be nonnegative")
                parsed.append((w, mk, sk))
        build = segway_additive_model if kind == "segway_additive" else segway_multiplicative_model
        try:
            return build(params, parsed, lo[0], hi[0])
        except ValueError as exc:
            raise doc.error(f"{path}.modes", str(exc)) from None
    if kind == "static":
        _no_extra(doc, obj, path, ("kind", "modes", "control_bounds"))
        modes = _get(doc, obj, path, "modes", "array", required=True)
        parsed = []
        for k, md in enumerate(modes):
            mp = f"{path}.modes[{k}]"
            if not isinstance(md, dict):
                raise doc.error(mp, "expected an object")
            _no_extra(doc, md, mp, ("weight", "mu_f", "sigma_f", "mu_g", "sigma_g"))
            try:
                parsed.append(make_mode(
                    _get(doc, md, mp, "weight", "number", required=True),
                    _get(doc, md, mp, "mu_f", "vector", required=True),
                    _get(doc, md, mp, "sigma_f", "matrix"),
                    _get(doc, md, mp, "mu_g", "matrix"),
                    _get(doc, md, mp, "sigma_g", "matrix")))
            except ValueError as exc:
                raise doc.error(mp, str(exc)) from None
        if not parsed:
            raise doc.error(f"{path}.modes", "need at least one mode")
        m = parsed[0].m
        lo = _get(doc, bounds, f"{path}.control_bounds", "lower", "vector", np.full(m, -20.0))
        hi = _get(doc, bounds, f"{path}.control_bounds", "upper", "vector", np.full(m, 20.0))
        try:
            return StaticModel(parsed, lo, hi)
        except ValueError as exc:
            raise doc.error(f"{path}.modes", str(exc)) from None
    raise doc.error(f"{path}.kind", f"unknown model kind '{kind}'")


def _index(doc, data):
    if "safety_index" not in data or data["safety_index"] in (None, "phi0"):
        return TiltIndex(None)
    obj = _get(doc, data, "", "safety_index", "object")
    _no_extra(doc, obj, "safety_index", ("alpha", "k_v", "beta"))
    try:
        return TiltIndex(SafetyIndexParams(
            _get(doc, obj, "safety_index", "alpha", "number", required=True),
            _get(doc, obj, "safety_index", "k_v", "number", required=True),
            _get(doc, obj, "safety_index", "beta", "number", required=True)))
    except ValueError as exc:
        raise doc.error("safety_index", str(exc)) from None


def parse_config(text: str, source: str = "config") -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc.msg} (column {exc.colno})", line=exc.lineno,
                          source=source) from None
    doc = _Doc(data, _locate(text), source)
    if not isinstance(data, dict):
        raise doc.error("", "top level must be an object")
    _no_extra(doc, data, "", _TOP)
    version = _get(doc, data, "", "schema_version", "int", required=True)
    if version != SCHEMA_VERSION:
        raise doc.error("schema_version", f"unsupported schema version {version}; expected {SCHEMA_VERSION}")
    model = _model(doc, _get(doc, data, "", "model", "object", required=True))
    index = _index(doc, data)
    gam = _get(doc, data, "", "gamma", "object", {})
    _no_extra(doc, gam, "gamma", ("slope",))
    slope = _get(doc, gam, "gamma", "slope", "number", 1.0)
    if not slope > 0:
        raise doc.error("gamma.slope", "must be positive")
    eps_f = _get(doc, data, "", "eps_f", "number", 0.01)
    if not 0.0 < eps_f < 1.0:
        raise doc.error("eps_f", "must lie in (0, 1)")
    eps0 = _get(doc, data, "", "eps0", "number", 1e-6)
    if not eps0 > 0:
        raise doc.error("eps0", "must be positive")
    seed = _get(doc, data, "", "seed", "int", 0)
    if seed < 0:
        raise doc.error("seed", "must be nonnegative")
    sol = _get(doc, data, "", "solver", "object", {})
    _no_extra(doc, sol, "solver", ("default", "multiplicative"))
    solver = _get(doc, sol, "solver", "default", "str", "multiplicative")
    if solver not in SOLVERS:
        raise doc.error("solver.default", f"expected one of {SOLVERS}")
    mult = _get(doc, sol, "solver", "multiplicative", "object", {})
    fields = ("p_floor", "p_ceil", "fd_h", "max_iter", "step_tol", "lower_level")
    _no_extra(doc, mult, "solver.multiplicative", fields)
    kw = {}
    for key in fields:
        if key in mult:
            kind = "int" if key == "max_iter" else ("str" if key == "lower_level" else "number")
            kw[key] = _get(doc, mult, "solver.multiplicative", key, kind)
    try:
        bilevel = BilevelOptions(eps0=eps0, **kw)
    except ValueError as exc:
        raise doc.error("solver.multiplicative", str(exc)) from None
    sections = {}
    for name in ("solve", "simulate", "certify", "synthesize", "compare"):
        sections[name] = _get(doc, data, "", name, "object", {})
    cfg = RunConfig(data, source, model, index, GammaSpec(slope), eps_f, eps0, seed, solver,
                    bilevel, sections, doc)
    return cfg


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config(text, str(path))


def bundled_config(name: str) -> RunConfig:
    """One of the configurations shipped with the package, by file stem."""
    text = resources.files("mmrssa").joinpath("configs", f"{name}.json").read_text("utf-8")
    return parse_config(text, f"{name}.json")


def section_value(cfg: RunConfig, section: str, key: str, kind: str, default=None):
    """Typed read of an optional field in a command section."""
    doc = cfg.doc
    return _get(doc, cfg.section(section), section, key, kind, default)


def check_section(cfg: RunConfig, section: str, allowed):
    _no_extra(cfg.doc, cfg.section(section), section, allowed)


def section_error(cfg: RunConfig, path: str, message: str) -> ConfigError:
    return cfg.doc.error(path, message)
