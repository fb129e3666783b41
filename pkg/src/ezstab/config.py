"""Experiment configuration: a versioned YAML document validated before any compute.

Layout (all blocks required unless noted)::

    schema_version: 1
    preferences: {gamma: 2, psi: 2, delta: 0.1}
    model:
      family: rate-shift        # rate-shift | drift-shift | vol-shift | shift | factor-vol
      r: 0.02
      mu: 0.04                  # excess drift
      sigma: 0.2
      T: 1.0
      knobs: {a: 0.25}          # optional; family-specific
      eps0: 1.0                 # optional
    numerics:                   # optional block; every key optional
      seed: 20240601
      n_paths: 10000
      n_steps: 50
      basis_degree: 2
      truncation: {n_level: 100, m_level: 100}
      clamps: {delta_prime: 0.001, M: 500}
      y: 1.18                   # fixed dual variable; omit to scan
      y_grid: {n_points: 33, factor: 8}
      antithetic: false
    experiment:
      command: sweep            # optional; must match the CLI subcommand if given
      x: 1.0
      eps: 0.0                  # bracket
      eps_list: [0.2, 0.1, 0.05, 0.025, 0]
      deflator: one             # diagnostics: one | minimal-spd | optimizer
      assert: true
    output:                     # optional block
      directory: out
      formats: [csv, svg]
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError, EZError
from .market import PerturbationFamily, factor_vol_family, shift_family
from .preferences import EZPreferences

SCHEMA_VERSION = 1
COMMANDS = ("oracle", "bracket", "sweep", "diagnostics")
FAMILIES = ("rate-shift", "drift-shift", "vol-shift", "shift", "factor-vol")
DEFLATORS = ("one", "minimal-spd", "optimizer")

_DEFAULT_KNOBS = {
    "rate-shift": {"a": 0.25},
    "drift-shift": {"b": 0.05},
    "vol-shift": {"c": 0.25},
    "shift": {"a": 0.0, "b": 0.0, "c": 0.0},
    "factor-vol": {"loading": 1.0, "kappa": 2.0, "eta": 0.5, "rho": 0.5, "s0": 0.0},
}
_SHIFT_KNOBS = {"rate-shift": {"a"}, "drift-shift": {"b"}, "vol-shift": {"c"}, "shift": {"a", "b", "c"}}


def _number(block: dict, key: str, where: str, positive=False, nonneg=False, default=None, integer=False):
    if key not in block:
        if default is None:
            raise ConfigError(f"{where}.{key} is required")
        return default
    v = block[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}.{key} must be a number, got {v!r}")
    if integer and (not isinstance(v, int)):
        raise ConfigError(f"{where}.{key} must be an integer, got {v!r}")
    if positive and not v > 0:
        raise ConfigError(f"{where}.{key} must be positive, got {v!r}")
    if nonneg and not v >= 0:
        raise ConfigError(f"{where}.{key} must be nonnegative, got {v!r}")
    return int(v) if integer else float(v)


def _block(doc: dict, key: str, allowed: set, required: bool = True) -> dict:
    if key not in doc:
        if required:
            raise ConfigError(f"missing required block '{key}'")
        return {}
    b = doc[key]
    if b is None:
        b = {}
    if not isinstance(b, dict):
        raise ConfigError(f"block '{key}' must be a mapping")
    unknown = set(b) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in '{key}': {', '.join(sorted(map(str, unknown)))}")
    return b


@dataclass(frozen=True)
class ModelConfig:
    family: str
    r: float
    mu: float
    sigma: float
    T: float
    knobs: dict
    eps0: float

    def build(self) -> PerturbationFamily:
        if self.family == "factor-vol":
            return factor_vol_family(self.r, self.mu, self.sigma, eps0=self.eps0, name=self.family, **self.knobs)
        k = {"a": 0.0, "b": 0.0, "c": 0.0, **self.knobs}
        return shift_family(self.r, self.mu, self.sigma, eps0=self.eps0, name=self.family, **k)


@dataclass(frozen=True)
class NumericsConfig:
    seed: int = 20240601
    n_paths: int = 10_000
    n_steps: int = 50
    basis_degree: int = 2
    truncation: tuple | None = None
    delta_prime: float | None = None
    M: float | None = None
    y: float | None = None
    y_points: int = 33
    y_factor: float = 8.0
    antithetic: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    prefs: EZPreferences
    model: ModelConfig
    numerics: NumericsConfig
    command: str | None
    x: float
    eps: float
    eps_list: tuple
    deflator: str
    assert_: bool
    output_dir: str | None
    formats: tuple
    raw: dict = field(repr=False, default_factory=dict)

    def with_overrides(self, seed: int | None = None, output_dir: str | None = None) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        if seed is not None:
            raw.setdefault("numerics", {})
            raw["numerics"] = dict(raw["numerics"] or {}, seed=int(seed))
        if output_dir is not None:
            raw.setdefault("output", {})
            raw["output"] = dict(raw["output"] or {}, directory=str(output_dir))
        return parse_config(raw)

    def resolved(self) -> dict:
        """The document with defaults filled in; rerunning it reproduces the run."""
        out = copy.deepcopy(self.raw)
        n = self.numerics
        num = dict(out.get("numerics") or {})
        num.update(seed=n.seed, n_paths=n.n_paths, n_steps=n.n_steps, basis_degree=n.basis_degree,
                   antithetic=n.antithetic)
        out["numerics"] = num
        model = dict(out["model"])
        model["knobs"] = dict(self.model.knobs)
        model["eps0"] = self.model.eps0
        out["model"] = model
        return out


def parse_config(doc) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping at the top level")
    top = {"schema_version", "preferences", "model", "numerics", "experiment", "output"}
    unknown = set(doc) - top
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(map(str, unknown)))}")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {doc.get('schema_version')!r}")

    p = _block(doc, "preferences", {"gamma", "psi", "delta"})
    try:
        prefs = EZPreferences(*(_number(p, k, "preferences", positive=True) for k in ("gamma", "psi", "delta")))
    except EZError as exc:
        raise ConfigError(f"preferences: {exc}") from exc

    m = _block(doc, "model", {"family", "r", "mu", "sigma", "T", "knobs", "eps0"})
    fam = m.get("family")
    if fam not in FAMILIES:
        raise ConfigError(f"model.family must be one of {FAMILIES}, got {fam!r}")
    knobs_in = m.get("knobs") or {}
    if not isinstance(knobs_in, dict):
        raise ConfigError("model.knobs must be a mapping")
    allowed = _SHIFT_KNOBS.get(fam, set(_DEFAULT_KNOBS["factor-vol"]))
    bad = set(knobs_in) - allowed
    if bad:
        raise ConfigError(f"unknown knob(s) for family '{fam}': {', '.join(sorted(map(str, bad)))}")
    knobs = dict(_DEFAULT_KNOBS[fam])
    for k in knobs_in:
        knobs[k] = _number(knobs_in, k, "model.knobs")
    model = ModelConfig(
        family=fam, r=_number(m, "r", "model", nonneg=True), mu=_number(m, "mu", "model"),
        sigma=_number(m, "sigma", "model", positive=True), T=_number(m, "T", "model", positive=True),
        knobs=knobs, eps0=_number(m, "eps0", "model", positive=True, default=1.0),
    )

    n = _block(doc, "numerics", {"seed", "n_paths", "n_steps", "basis_degree", "truncation", "clamps", "y",
                                 "y_grid", "antithetic"}, required=False)
    trunc = None
    if "truncation" in n:
        t = _block(n, "truncation", {"n_level", "m_level"})
        trunc = (_number(t, "n_level", "numerics.truncation", positive=True),
                 _number(t, "m_level", "numerics.truncation", positive=True))
    cl = _block(n, "clamps", {"delta_prime", "M"}, required=False)
    yg = _block(n, "y_grid", {"n_points", "factor"}, required=False)
    anti = n.get("antithetic", False)
    if not isinstance(anti, bool):
        raise ConfigError("numerics.antithetic must be true or false")
    seed = _number(n, "seed", "numerics", nonneg=True, default=20240601, integer=True)
    numerics = NumericsConfig(
        seed=seed,
        n_paths=_number(n, "n_paths", "numerics", positive=True, default=10_000, integer=True),
        n_steps=_number(n, "n_steps", "numerics", positive=True, default=50, integer=True),
        basis_degree=_number(n, "basis_degree", "numerics", nonneg=True, default=2, integer=True),
        truncation=trunc,
        delta_prime=_number(cl, "delta_prime", "numerics.clamps", positive=True) if "delta_prime" in cl else None,
        M=_number(cl, "M", "numerics.clamps", positive=True) if "M" in cl else None,
        y=_number(n, "y", "numerics", positive=True) if "y" in n else None,
        y_points=_number(yg, "n_points", "numerics.y_grid", positive=True, default=33, integer=True),
        y_factor=_number(yg, "factor", "numerics.y_grid", positive=True, default=8.0),
        antithetic=anti,
    )
    if numerics.y_points < 3 or numerics.y_factor <= 1:
        raise ConfigError("numerics.y_grid needs n_points >= 3 and factor > 1")

    e = _block(doc, "experiment", {"command", "x", "eps", "eps_list", "deflator", "assert"})
    cmd = e.get("command")
    if cmd is not None and cmd not in COMMANDS:
        raise ConfigError(f"experiment.command must be one of {COMMANDS}, got {cmd!r}")
    eps_list = e.get("eps_list", [0.2, 0.1, 0.05, 0.025, 0.0])
    if not isinstance(eps_list, list) or not eps_list:
        raise ConfigError("experiment.eps_list must be a nonempty list")
    eps_vals = tuple(_number({"v": v}, "v", "experiment.eps_list", nonneg=True) for v in eps_list)
    if eps_vals[-1] != 0 or any(b >= a for a, b in zip(eps_vals, eps_vals[1:])):
        raise ConfigError("experiment.eps_list must be strictly decreasing and end with 0")
    eps = _number(e, "eps", "experiment", default=0.0)
    for v in eps_vals + (eps,):
        if not abs(v) < model.eps0:
            raise ConfigError(f"eps={v} outside the family range (-{model.eps0}, {model.eps0})")
    deflator = e.get("deflator", "optimizer")
    if deflator not in DEFLATORS:
        raise ConfigError(f"experiment.deflator must be one of {DEFLATORS}, got {deflator!r}")
    do_assert = e.get("assert", False)
    if not isinstance(do_assert, bool):
        raise ConfigError("experiment.assert must be true or false")

    o = _block(doc, "output", {"directory", "formats"}, required=False)
    formats = o.get("formats", ["csv", "svg"])
    if not isinstance(formats, list) or set(formats) - {"csv", "svg"}:
        raise ConfigError("output.formats must be a list drawn from [csv, svg]")
    odir = o.get("directory")
    if odir is not None and not isinstance(odir, str):
        raise ConfigError("output.directory must be a string")

    return ExperimentConfig(
        prefs=prefs, model=model, numerics=numerics, command=cmd,
        x=_number(e, "x", "experiment", positive=True, default=1.0), eps=eps, eps_list=eps_vals,
        deflator=deflator, assert_=do_assert, output_dir=odir, formats=tuple(formats), raw=copy.deepcopy(doc),
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return parse_config(doc)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.resolved(), sort_keys=True)
