"""Scenario configuration: defaults, YAML parsing and validation.

All keys are flat. Omitted keys take the values of the built-in 9-agent
scenario; unknown keys and out-of-range values are rejected with the path of
the offending field.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import yaml

MODES = ("coslas", "clkref", "locref")

# Initial layout of the built-in scenario (not published numerically; chosen
# to resemble a 50 m x 50 m area with anchors in three corners).
DEFAULT_POSITIONS = [
    [0.0, 0.0], [50.0, 0.0], [0.0, 50.0],
    [12.0, 14.0], [38.0, 12.0], [25.0, 25.0],
    [10.0, 38.0], [40.0, 40.0], [30.0, 34.0],
]
DEFAULT_VELOCITIES = [
    [0.0, 0.0], [0.0, 0.0], [0.0, 0.0],
    [0.4, 0.3], [-0.3, 0.4], [0.3, -0.3],
    [0.4, -0.2], [-0.4, -0.3], [-0.2, -0.4],
]


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the field path."""


@dataclass(frozen=True)
class ScenarioConfig:
    # network
    n_agents: int = 9
    area: tuple = (50.0, 50.0)
    radius: float = 40.0
    spatial_refs: tuple = (0, 1, 2)
    temporal_refs: tuple = (6,)
    positions: tuple = tuple(tuple(p) for p in DEFAULT_POSITIONS)
    velocities: tuple = tuple(tuple(v) for v in DEFAULT_VELOCITIES)
    # dynamics
    T: float = 1.0
    sigma1: float = 1e-6
    sigma2: float = 10e-6
    sigma_u2: float = 2.0
    truth_sigma_u2: float = 0.1
    truth_max_attempts: int = 1000
    # priors
    clock_mean: tuple = (0.0, 1.0)
    sigma_nu: float = 1.0
    sigma_lam: float = 150e-6
    sigma_x: float = 5.0
    sigma_xdot: float = 2.0
    # measurements
    K: int = 10
    sigma_v: float = 10e-9
    packet_spacing: float = 1e-3
    # message passing
    Q: int = 5
    tau: float = 2.0
    tau1: float = 15.0
    tau2: float = 40.0
    L_total: int = 1000
    mu_d: float = 27.0
    sigma_d: float = 10.0
    min_ess: float = 10.0
    belief_includes_prediction: bool = True
    constant_uninformative: bool = False
    # experiment
    mode: str = "coslas"
    runs: int = 20
    steps: int = 30
    seed: int = 0
    out: str = "out"
    per_iteration_metrics: bool = False
    dump_trace: bool = False

    def replace(self, **kw) -> "ScenarioConfig":
        return validate(dataclasses.replace(self, **kw))


_POSITIVE = ("radius", "T", "sigma1", "sigma2", "sigma_u2", "sigma_nu", "sigma_lam",
             "sigma_x", "sigma_xdot", "sigma_v", "packet_spacing", "tau", "tau1", "tau2",
             "sigma_d", "min_ess")
_NONNEG = ("truth_sigma_u2", "mu_d")
_MIN_INT = {"n_agents": 2, "truth_max_attempts": 1, "K": 1, "Q": 1, "L_total": 100,
            "runs": 1, "steps": 1, "seed": 0}


def _fail(path, msg):
    raise ConfigError(f"{path}: {msg}")


def _number(path, v):
    # YAML 1.1 reads exponent literals without a dot (1e-8) as strings.
    if isinstance(v, str):
        try:
            return float(v)
        except ValueError:
            pass
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        _fail(path, f"expected a number, got {type(v).__name__}")
    return float(v)


def _integer(path, v):
    if isinstance(v, bool) or not isinstance(v, int):
        _fail(path, f"expected an integer, got {type(v).__name__}")
    return v


def _vectors(path, v, n, dim):
    if not isinstance(v, (list, tuple)) or len(v) != n:
        _fail(path, f"expected a list of {n} entries")
    out = []
    for k, row in enumerate(v):
        if not isinstance(row, (list, tuple)) or len(row) != dim:
            _fail(f"{path}[{k}]", f"expected {dim} numbers")
        out.append(tuple(_number(f"{path}[{k}][{c}]", x) for c, x in enumerate(row)))
    return tuple(out)


def _coerce(name, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            _fail(name, f"expected true/false, got {type(value).__name__}")
        return value
    if isinstance(default, int):
        return _integer(name, value)
    if isinstance(default, float):
        return _number(name, value)
    if isinstance(default, str):
        if not isinstance(value, str):
            _fail(name, f"expected a string, got {type(value).__name__}")
        return value
    if name in ("spatial_refs", "temporal_refs"):
        if not isinstance(value, (list, tuple)):
            _fail(name, "expected a list of agent indices")
        return tuple(_integer(f"{name}[{k}]", x) for k, x in enumerate(value))
    if name in ("area", "clock_mean"):
        return _vectors(name, [value], 1, 2)[0]
    # positions / velocities: length checked in validate()
    if not isinstance(value, (list, tuple)):
        _fail(name, "expected a list of [x, y] pairs")
    return _vectors(name, value, len(value), 2)


def n_pairs(n: int) -> int:
    return n * (n - 1) // 2


def validate(cfg: ScenarioConfig) -> ScenarioConfig:
    for name in _POSITIVE:
        if not getattr(cfg, name) > 0:
            _fail(name, f"must be positive, got {getattr(cfg, name)}")
    for name in _NONNEG:
        if not getattr(cfg, name) >= 0:
            _fail(name, f"must be non-negative, got {getattr(cfg, name)}")
    for name, lo in _MIN_INT.items():
        if getattr(cfg, name) < lo:
            _fail(name, f"must be >= {lo}, got {getattr(cfg, name)}")
    if cfg.mode not in MODES:
        _fail("mode", f"must be one of {', '.join(MODES)}, got {cfg.mode!r}")
    if min(cfg.area) <= 0:
        _fail("area", "side lengths must be positive")
    if not cfg.clock_mean[1] > 0:
        _fail("clock_mean[1]", "prior lambda mean must be positive")
    for name in ("positions", "velocities"):
        if len(getattr(cfg, name)) != cfg.n_agents:
            _fail(name, f"expected {cfg.n_agents} entries, got {len(getattr(cfg, name))}")
    for name in ("spatial_refs", "temporal_refs"):
        for k, i in enumerate(getattr(cfg, name)):
            if not 0 <= i < cfg.n_agents:
                _fail(f"{name}[{k}]", f"agent index {i} out of range")
    if not cfg.temporal_refs:
        _fail("temporal_refs", "at least one temporal reference is required")
    if cfg.L_total // (cfg.n_agents) < 1:
        _fail("L_total", "too few particles for the number of agents")
    if n_pairs(cfg.n_agents) * (cfg.K + 1) * cfg.packet_spacing > cfg.T:
        _fail("packet_spacing", "packet exchanges do not fit into one time step")
    return cfg


def parse_config(document) -> ScenarioConfig:
    """Build a validated config from YAML text or an already-parsed mapping."""
    if isinstance(document, str):
        try:
            document = yaml.safe_load(document)
        except yaml.YAMLError as exc:
            raise ConfigError(f"<document>: not valid YAML ({exc})") from exc
    if document is None:
        document = {}
    if not isinstance(document, dict):
        raise ConfigError("<document>: expected a mapping of keys to values")
    defaults = ScenarioConfig()
    known = {f.name: getattr(defaults, f.name) for f in dataclasses.fields(ScenarioConfig)}
    kw = {}
    for key, value in document.items():
        if key not in known:
            _fail(str(key), "unknown key")
        kw[key] = _coerce(key, value, known[key])
    return validate(dataclasses.replace(defaults, **kw))


def load_config(path) -> ScenarioConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"<config>: cannot read {path} ({exc.strerror})") from exc


def to_document(cfg: ScenarioConfig) -> dict:
    """Plain mapping that :func:`parse_config` accepts back."""
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = [list(x) if isinstance(x, tuple) else x for x in v]
        out[f.name] = v
    return out
