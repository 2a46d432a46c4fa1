"""Run configuration documents (YAML) and their validation.

A configuration is one YAML mapping with the blocks ``domain``,
``coefficients``, ``noise``, ``scheme``, ``initial``, ``run`` and the
optional mode-specific ``ensemble``, ``convergence`` and ``picard``.  Every
error names the offending key path, e.g. ``coefficients.mu2``.

Coefficient and initial fields are numbers or expressions in ``x`` (and
``y`` in 2D) using + - * / **, parentheses, ``pi`` and ``cos``, ``sin``,
``exp``.
"""
from __future__ import annotations

import ast
import operator
from dataclasses import asdict, dataclass, fields

import numpy as np
import yaml

from .integrator import HARD, SMOOTH, SchemeConfig
from .model import COEFFICIENT_NAMES, COMPARTMENTS, CoefficientSet, make_state
from .noise import NoiseSpec
from .spectral import DomainGrid

MODES = ("simulate", "ensemble", "thresholds", "convergence", "picard")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}
_FUNCS = {"cos": np.cos, "sin": np.sin, "exp": np.exp}


def evaluate_expression(text: str, variables: dict, path: str = "") -> np.ndarray:
    """Evaluate a field expression with numpy arrays bound to ``variables``."""
    try:
        tree = ast.parse(str(text), mode="eval")
    except SyntaxError as exc:
        raise ConfigError(path, f"cannot parse expression {text!r}: {exc.msg}") from None

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
                and not isinstance(node.value, bool):
            return float(node.value)
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            v = ev(node.operand)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.Name):
            if node.id == "pi":
                return np.pi
            if node.id in variables:
                return variables[node.id]
            raise ConfigError(path, f"unknown name {node.id!r} in {text!r}")
        if (isinstance(node, ast.Call) and isinstance(node.func, ast.Name)
                and node.func.id in _FUNCS and len(node.args) == 1 and not node.keywords):
            return _FUNCS[node.func.id](ev(node.args[0]))
        raise ConfigError(path, f"unsupported syntax in {text!r}")

    with np.errstate(all="ignore"):
        return ev(tree)


def _number(value, path, positive=False, nonnegative=False, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(path, f"expected an integer, got {value!r}")
    v = int(value) if integer else float(value)
    if not np.isfinite(v):
        raise ConfigError(path, "must be finite")
    if positive and not v > 0:
        raise ConfigError(path, f"must be positive, got {v}")
    if nonnegative and v < 0:
        raise ConfigError(path, f"must be nonnegative, got {v}")
    return v


def _scalar_or_expr(value, path):
    if isinstance(value, str):
        return value
    return _number(value, path)


def _mapping(doc, path, allowed):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(path, "expected a mapping")
    for key in doc:
        if key not in allowed:
            where = f"{path}.{key}" if path else str(key)
            raise ConfigError(where, "unknown key")
    return doc


@dataclass(frozen=True)
class DomainBlock:
    dimension: int = 1
    points: int = 64


@dataclass(frozen=True)
class NoiseBlock:
    n: int = 16
    S: tuple = ("zero",)
    E: tuple = ("zero",)
    I: tuple = ("zero",)
    R: tuple = ("zero",)


@dataclass(frozen=True)
class SchemeBlock:
    dt: float = 1e-3
    T: float = 10.0
    clamp: str = HARD
    epsilon: float = 1e-3
    record_every: int = 100


@dataclass(frozen=True)
class RunBlock:
    mode: str = "simulate"
    paths: int = 100
    seed: int = 0
    output: str = "results"


@dataclass(frozen=True)
class EnsembleBlock:
    floor: float = 1e-3
    plateau_rtol: float = 0.05
    fit_window: tuple | None = None
    batch_size: int = 50


@dataclass(frozen=True)
class ConvergenceBlock:
    kind: str = "dt"
    levels: tuple = (0.004, 0.002, 0.001, 0.0005)
    time: float = 1.0
    paths: int = 100
    dt: float = 1e-3


@dataclass(frozen=True)
class PicardBlock:
    horizon: float = 0.1
    substeps: int = 20
    max_iter: int = 50
    tol: float = 1e-12
    reference_dt: float = 1e-4


DEFAULT_DIFFUSIVITY = 0.1


@dataclass(frozen=True)
class RunConfig:
    domain: DomainBlock = DomainBlock()
    coefficients: tuple = ()
    diffusivities: tuple = (DEFAULT_DIFFUSIVITY,) * 4
    noise: NoiseBlock = NoiseBlock()
    scheme: SchemeBlock = SchemeBlock()
    initial: tuple = ()
    run: RunBlock = RunBlock()
    ensemble: EnsembleBlock = EnsembleBlock()
    convergence: ConvergenceBlock = ConvergenceBlock()
    picard: PicardBlock = PicardBlock()

    # builders -----------------------------------------------------------
    def grid(self) -> DomainGrid:
        return DomainGrid(self.domain.points, self.domain.dimension)

    def _variables(self, grid):
        xy = grid.coords
        names = ("x", "y")[: grid.dimension]
        return {n: xy[:, d] for d, n in enumerate(names)}

    def field(self, value, grid, path):
        if isinstance(value, str):
            v = evaluate_expression(value, self._variables(grid), path)
        else:
            v = value
        v = np.broadcast_to(np.asarray(v, dtype=float), (grid.n_points,)).copy()
        if not np.all(np.isfinite(v)):
            raise ConfigError(path, f"expression {value!r} is not finite at every node")
        bad = np.flatnonzero(v < 0)
        if bad.size:
            node = int(bad[0])
            raise ConfigError(path, f"negative value {v[node]:g} at node {node} "
                                    f"(x={tuple(np.round(grid.coords[node], 6))})")
        return v

    def coefficient_set(self) -> CoefficientSet:
        grid = self.grid()
        values = dict(self.coefficients)
        arrays = {name: self.field(values.get(name, 0.0), grid, f"coefficients.{name}")
                  for name in COEFFICIENT_NAMES}
        return CoefficientSet(grid, diffusivities=self.diffusivities, **arrays)

    def initial_state(self) -> np.ndarray:
        grid = self.grid()
        values = dict(self.initial)
        return make_state(grid, *(self.field(values.get(c, 0.0), grid, f"initial.{c}")
                                  for c in COMPARTMENTS))

    def noise_spec(self) -> NoiseSpec:
        n = self.noise.n
        rows = []
        for comp in COMPARTMENTS:
            rule = getattr(self.noise, comp)
            kind = rule[0]
            if kind == "zero":
                rows.append(np.zeros(n))
            elif kind == "geometric":
                rows.append(rule[1] * rule[2] ** np.arange(n))
            else:
                vals = np.zeros(n)
                vals[: len(rule[1])] = rule[1]
                rows.append(vals)
        return NoiseSpec(np.array(rows).reshape(4, n))

    def scheme_config(self) -> SchemeConfig:
        s = self.scheme
        return SchemeConfig(s.dt, s.T, s.clamp, s.epsilon, s.record_every)

    # serialisation ------------------------------------------------------
    def to_dict(self) -> dict:
        def rule(r):
            if r[0] == "zero":
                return {"rule": "zero"}
            if r[0] == "geometric":
                return {"rule": "geometric", "a0": r[1], "ratio": r[2]}
            return {"rule": "list", "values": list(r[1])}

        d = {
            "domain": asdict(self.domain),
            "coefficients": dict(self.coefficients),
            "noise": {"n": self.noise.n, **{c: rule(getattr(self.noise, c)) for c in COMPARTMENTS}},
            "scheme": asdict(self.scheme),
            "initial": dict(self.initial),
            "run": asdict(self.run),
            "ensemble": asdict(self.ensemble),
            "convergence": asdict(self.convergence),
            "picard": asdict(self.picard),
        }
        for i, k in enumerate(self.diffusivities, start=1):
            d["coefficients"][f"k{i}"] = k
        d["convergence"]["levels"] = list(self.convergence.levels)
        fw = self.ensemble.fit_window
        d["ensemble"]["fit_window"] = None if fw is None else list(fw)
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _parse_rule(value, path, n):
    if value is None or value == 0 or value == "zero":
        return ("zero",)
    if isinstance(value, (list, tuple)):
        value = {"rule": "list", "values": list(value)}
    if not isinstance(value, dict):
        raise ConfigError(path, f"expected a noise rule, got {value!r}")
    kind = value.get("rule")
    if kind == "zero":
        _mapping(value, path, {"rule"})
        return ("zero",)
    if kind == "geometric":
        _mapping(value, path, {"rule", "a0", "ratio"})
        for key in ("a0", "ratio"):
            if key not in value:
                raise ConfigError(f"{path}.{key}", "missing")
        return ("geometric", _number(value["a0"], f"{path}.a0", nonnegative=True),
                _number(value["ratio"], f"{path}.ratio", nonnegative=True))
    if kind == "list":
        _mapping(value, path, {"rule", "values"})
        vals = value.get("values")
        if not isinstance(vals, (list, tuple)):
            raise ConfigError(f"{path}.values", "expected a list of weights")
        if len(vals) > n:
            raise ConfigError(f"{path}.values", f"{len(vals)} weights exceed truncation n={n}")
        return ("list", tuple(_number(v, f"{path}.values[{i}]", nonnegative=True)
                              for i, v in enumerate(vals)))
    raise ConfigError(f"{path}.rule", f"unknown noise rule {kind!r}")


def _block(cls, doc, path, converters):
    doc = _mapping(doc, path, {f.name for f in fields(cls)})
    kw = {}
    for key, value in doc.items():
        kw[key] = converters[key](value, f"{path}.{key}")
    return cls(**kw)


def parse_config(text) -> RunConfig:
    """Parse and validate a YAML document (or an already-loaded mapping)."""
    if isinstance(text, (str, bytes)):
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError("", f"not a valid YAML document: {exc}") from None
    else:
        doc = text
    doc = _mapping(doc, "", {"domain", "coefficients", "noise", "scheme", "initial", "run",
                             "ensemble", "convergence", "picard"})

    def integer(v, p, positive=True):
        return _number(v, p, positive=positive, integer=True)

    domain = _block(DomainBlock, doc.get("domain"), "domain",
                    {"dimension": integer, "points": integer})
    if domain.dimension not in (1, 2):
        raise ConfigError("domain.dimension", "must be 1 or 2")
    if domain.points < 2:
        raise ConfigError("domain.points", "must be at least 2")

    coef_doc = _mapping(doc.get("coefficients"), "coefficients",
                        set(COEFFICIENT_NAMES) | {"k1", "k2", "k3", "k4"})
    coefficients = tuple((name, _scalar_or_expr(coef_doc[name], f"coefficients.{name}"))
                         for name in COEFFICIENT_NAMES if name in coef_doc)
    diffusivities = tuple(
        _number(coef_doc.get(f"k{i}", DEFAULT_DIFFUSIVITY), f"coefficients.k{i}", positive=True)
        for i in range(1, 5))

    noise_doc = _mapping(doc.get("noise"), "noise", {"n", *COMPARTMENTS})
    n = integer(noise_doc.get("n", NoiseBlock.n), "noise.n", positive=False)
    if n < 0:
        raise ConfigError("noise.n", "must be nonnegative")
    if n > domain.points ** domain.dimension:
        raise ConfigError("noise.n", f"{n} modes exceed the grid resolution")
    noise = NoiseBlock(n, *(_parse_rule(noise_doc.get(c), f"noise.{c}", n) for c in COMPARTMENTS))

    def clamp_policy(v, p):
        if v not in (HARD, SMOOTH):
            raise ConfigError(p, f"must be {HARD!r} or {SMOOTH!r}")
        return v

    pos = lambda v, p: _number(v, p, positive=True)
    nonneg = lambda v, p: _number(v, p, nonnegative=True)
    scheme = _block(SchemeBlock, doc.get("scheme"), "scheme",
                    {"dt": pos, "T": nonneg, "clamp": clamp_policy, "epsilon": pos,
                     "record_every": integer})
    if scheme.T > 0 and scheme.dt > scheme.T:
        raise ConfigError("scheme.dt", f"dt={scheme.dt} exceeds T={scheme.T}")

    init_doc = _mapping(doc.get("initial"), "initial", set(COMPARTMENTS))
    initial = tuple((c, _scalar_or_expr(init_doc[c], f"initial.{c}")) for c in COMPARTMENTS if c in init_doc)

    def mode(v, p):
        if v not in MODES:
            raise ConfigError(p, f"must be one of {', '.join(MODES)}")
        return v

    def seed(v, p):
        v = _number(v, p, integer=True)
        if not 0 <= v < 2 ** 64:
            raise ConfigError(p, "seed must fit in an unsigned 64-bit integer")
        return v

    run = _block(RunBlock, doc.get("run"), "run",
                 {"mode": mode, "paths": integer, "seed": seed, "output": lambda v, p: str(v)})

    def window(v, p):
        if v is None:
            return None
        if not isinstance(v, (list, tuple)) or len(v) != 2:
            raise ConfigError(p, "expected [t_start, t_end]")
        a, b = (_number(x, p, nonnegative=True) for x in v)
        if not a < b:
            raise ConfigError(p, "window start must precede its end")
        return (a, b)

    ensemble = _block(EnsembleBlock, doc.get("ensemble"), "ensemble",
                      {"floor": nonneg, "plateau_rtol": nonneg, "fit_window": window,
                       "batch_size": integer})

    def kind(v, p):
        if v not in ("dt", "n"):
            raise ConfigError(p, "must be 'dt' or 'n'")
        return v

    def levels(v, p):
        if not isinstance(v, (list, tuple)) or len(v) < 2:
            raise ConfigError(p, "expected a list of at least two levels")
        return tuple(_number(x, f"{p}[{i}]", positive=True) for i, x in enumerate(v))

    convergence = _block(ConvergenceBlock, doc.get("convergence"), "convergence",
                         {"kind": kind, "levels": levels, "time": pos, "paths": integer, "dt": pos})
    if convergence.kind == "n":
        lv = []
        for i, x in enumerate(convergence.levels):
            if int(x) != x:
                raise ConfigError(f"convergence.levels[{i}]", "truncation levels must be integers")
            if x > n:
                raise ConfigError(f"convergence.levels[{i}]", f"level {int(x)} exceeds noise.n={n}")
            lv.append(int(x))
        convergence = ConvergenceBlock(convergence.kind, tuple(lv), convergence.time,
                                       convergence.paths, convergence.dt)

    picard = _block(PicardBlock, doc.get("picard"), "picard",
                    {"horizon": pos, "substeps": integer, "max_iter": integer, "tol": pos,
                     "reference_dt": pos})

    cfg = RunConfig(domain, coefficients, diffusivities, noise, scheme, initial, run,
                    ensemble, convergence, picard)
    # evaluate every field once so bad expressions fail at parse time
    cfg.coefficient_set()
    cfg.initial_state()
    return cfg


def replace_run(cfg: RunConfig, **changes) -> RunConfig:
    run = RunBlock(**{**asdict(cfg.run), **changes})
    return RunConfig(cfg.domain, cfg.coefficients, cfg.diffusivities, cfg.noise, cfg.scheme,
                     cfg.initial, run, cfg.ensemble, cfg.convergence, cfg.picard)
