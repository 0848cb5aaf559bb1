"""Experiment configuration: an INI file with fixed sections and keys.

Every key has a default except ``scenario``; unknown sections or keys are
errors.  ``serialize`` writes every field, so parse/serialize round-trips.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace

from .learner import LearnerConfig, StageBudgets
from .model import Dimensions
from .oracles import TrainConfig

__all__ = ["ExperimentConfig", "ConfigError", "parse_config", "parse_config_text", "serialize"]

SCENARIOS = ("synthetic-bilinear", "synthetic-fourier", "pendulum")
STRATEGIES = ("passive", "agnostic", "aware")
TARGET_KINDS = ("weak", "strong", "vector", "uniform")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TargetConfig:
    kind: str = "weak"
    vector: tuple = ()
    n_target: int = 2000
    dot_n_target: int = 200
    n_test: int = 4000


@dataclass(frozen=True)
class PendulumConfig:
    d_psi_x: int = 60
    k: int = 8
    radius: float = 1.5
    freq_scale: float = 1.0
    actual_target: tuple = (0.0, 0.0, 1.0, 0.5, 0.0, 0.0)
    horizon: int = 500
    kp: float = 15.0
    kd: float = 8.0


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    dims: Dimensions = field(default_factory=lambda: Dimensions(20, 20, 10, 10, 10, 2))
    conditioning: str = "well"
    kappa: float = 1.0
    sigma: float = 1.0
    freq_scale: float = 1.0
    target: TargetConfig = field(default_factory=TargetConfig)
    strategies: tuple = STRATEGIES
    budgets: StageBudgets = field(default_factory=lambda: StageBudgets(n0=400, n1_scale=100.0))
    train: TrainConfig = field(default_factory=TrainConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    pendulum: PendulumConfig = field(default_factory=PendulumConfig)
    seeds: tuple = tuple(range(10))
    grid_refine: int = 1
    output_dir: str = "results"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}")
        if not self.strategies:
            raise ConfigError("at least one strategy is required")
        if len(set(self.strategies)) != len(self.strategies):
            raise ConfigError("duplicate strategy in 'strategies'")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad:
            raise ConfigError(f"unknown strategies {bad}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.target.kind not in TARGET_KINDS:
            raise ConfigError(f"target kind must be one of {TARGET_KINDS}")
        if self.target.kind == "vector" and len(self.target.vector) != self.task_dim:
            raise ConfigError("target vector length must equal dims.d_w")
        if self.grid_refine < 1:
            raise ConfigError("grid_refine must be >= 1")
        if self.scenario == "synthetic-bilinear" and self.dims.d_psi_x != self.dims.d_x:
            raise ConfigError("synthetic-bilinear needs dims.d_psi_x == dims.d_x")

    @property
    def task_dim(self):
        return 6 if self.scenario == "pendulum" else self.dims.d_w

    def learner_config(self):
        return replace(self.learner, train=self.train)


def _parse_value(raw, kind, key):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "yes", "1", "on"):
                return True
            if raw.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind == "opt_float":
            return None if raw.lower() in ("", "none") else float(raw)
        if kind == "opt_int":
            return None if raw.lower() in ("", "none") else int(raw)
        if kind == "floats":
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if kind == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind == "strs":
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


def _fmt(value, kind):
    if value is None:
        return "none"
    if kind in ("floats", "ints", "strs"):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


SCHEMA = {
    "experiment": {
        "scenario": "str", "strategies": "strs", "seeds": "ints", "output_dir": "str",
        "grid_refine": "int",
    },
    "dims": {k: "int" for k in ("d_x", "d_psi_x", "d_w", "d_w_source", "d_psi_w", "k")},
    "truth": {"conditioning": "str", "kappa": "float", "sigma": "float", "freq_scale": "float"},
    "target": {"kind": "str", "vector": "floats", "n_target": "int", "dot_n_target": "int",
               "n_test": "int"},
    "budgets": {"n0": "int", "n1_scale": "float", "n2_policy": "str", "n2_fixed": "int",
                "beta1": "float", "beta2": "float", "beta3": "float", "epochs": "int",
                "budget_cap": "opt_int"},
    "train": {"am_iters": "int", "gd_steps": "int", "gd_lr": "float", "batch": "int",
              "ridge": "float", "seed": "int", "am_tol": "float"},
    "learner": {"clip_const": "float", "clip_gamma": "opt_float", "gate_threshold": "opt_float",
                "reuse_dot_target": "bool", "explore_oracle": "str", "exploit_oracle": "str",
                "passive_oracle": "str", "rank_tol": "float", "candidate_pool": "int",
                "search_rounds": "int", "search_pool": "int", "fw_iters": "int",
                "passive_tasks": "int"},
    "pendulum": {"d_psi_x": "int", "k": "int", "radius": "float", "freq_scale": "float",
                 "actual_target": "floats", "horizon": "int", "kp": "float", "kd": "float"},
}


def _build(values):
    """Assemble a config from ``{section: {key: parsed}}`` over the defaults."""
    exp = values.get("experiment", {})
    if "scenario" not in exp:
        raise ConfigError("missing required key 'experiment.scenario'")
    try:
        base_dims = Dimensions(20, 20, 10, 10, 10, 2)
        dims = values.get("dims", {})
        if dims:
            merged = {f.name: getattr(base_dims, f.name) for f in fields(Dimensions)}
            merged.update(dims)
            if merged["k"] > merged["d_psi_w"]:
                raise ConfigError("dims.k must not exceed dims.d_psi_w")
            base_dims = Dimensions(**merged)
        truth = values.get("truth", {})
        kw = dict(scenario=exp["scenario"], dims=base_dims, **truth)
        for key in ("strategies", "seeds", "output_dir", "grid_refine"):
            if key in exp:
                kw[key] = exp[key]
        kw["target"] = TargetConfig(**values.get("target", {}))
        kw["budgets"] = StageBudgets(**{"n0": 400, "n1_scale": 100.0, **values.get("budgets", {})})
        kw["train"] = TrainConfig(**values.get("train", {}))
        kw["learner"] = LearnerConfig(**values.get("learner", {}))
        kw["pendulum"] = PendulumConfig(**values.get("pendulum", {}))
        return ExperimentConfig(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_config_text(text) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    values = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key '{section}.{key}'")
            values.setdefault(section, {})[key] = _parse_value(raw, SCHEMA[section][key],
                                                               f"{section}.{key}")
    return _build(values)


def parse_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config_text(fh.read())


def _section_values(cfg: ExperimentConfig):
    yield "experiment", {"scenario": cfg.scenario, "strategies": cfg.strategies,
                         "seeds": cfg.seeds, "output_dir": cfg.output_dir,
                         "grid_refine": cfg.grid_refine}
    yield "dims", {k: getattr(cfg.dims, k) for k in SCHEMA["dims"]}
    yield "truth", {k: getattr(cfg, k) for k in SCHEMA["truth"]}
    for name, obj in (("target", cfg.target), ("budgets", cfg.budgets), ("train", cfg.train),
                      ("learner", cfg.learner), ("pendulum", cfg.pendulum)):
        yield name, {k: getattr(obj, k) for k in SCHEMA[name]}


def serialize(cfg: ExperimentConfig) -> str:
    out = io.StringIO()
    for section, vals in _section_values(cfg):
        out.write(f"[{section}]\n")
        for key, value in vals.items():
            out.write(f"{key} = {_fmt(value, SCHEMA[section][key])}\n")
        out.write("\n")
    return out.getvalue()
