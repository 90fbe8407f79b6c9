"""Flat, namespaced run configuration read from ``key = value`` text."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import sim
from .evaluate import WEIGHT_GRID, ExperimentSpec
from .planner import PlanConfig
from .vae import VaeConfig
from .world_model import DynamicsConfig, EncoderConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Key:
    default: object
    parse: object
    doc: str


_INF = float("inf")

KEYS: dict[str, Key] = {
    "seed": Key(0, int, "global seed; every stage derives its own seeds from it"),
    "env.kind": Key(sim.GRANULAR, str, "granular or rope"),
    "data.episodes": Key(0, int, "episodes to generate; 0 means 100 granular, 1000 rope"),
    "data.frames": Key(20, int, "actions per episode"),
    "data.grid": Key(32, int, "render resolution in pixels"),
    "data.policy": Key("gapped", str, "uniform or gapped"),
    "data.gap_lo": Key((0.0, -_INF, -_INF, -_INF), _floats, "gap box lower corner (exclusive)"),
    "data.gap_hi": Key((_INF,) * 4, _floats, "gap box upper corner (inclusive)"),
    "data.val_fraction": Key(0.1, float, "held-out episode fraction"),
    "encoder.latent_dim": Key(EncoderConfig.latent_dim, int, "latent size D"),
    "encoder.epochs": Key(EncoderConfig.epochs, int, "autoencoder epochs"),
    "encoder.batch": Key(EncoderConfig.batch, int, "autoencoder batch size"),
    "encoder.lr": Key(EncoderConfig.lr, float, "autoencoder learning rate"),
    "encoder.weight_decay": Key(EncoderConfig.weight_decay, float, "L2 on decoder weights"),
    "dynamics.window": Key(DynamicsConfig.window, int, "sliding window H"),
    "dynamics.frame_skip": Key(DynamicsConfig.frame_skip, int, "frame skip F"),
    "dynamics.hidden": Key(DynamicsConfig.hidden, int, "hidden units per layer"),
    "dynamics.residual": Key(DynamicsConfig.residual, _bool, "predict a change of the last latent"),
    "dynamics.epochs": Key(DynamicsConfig.epochs, int, "training epochs"),
    "dynamics.batch": Key(DynamicsConfig.batch, int, "batch size"),
    "dynamics.lr": Key(DynamicsConfig.lr, float, "learning rate"),
    "dynamics.dropout": Key(DynamicsConfig.dropout, float, "input dropout rate, 0 disables"),
    "vae.bottleneck": Key(VaeConfig.bottleneck, int, "code size M"),
    "vae.hidden": Key(VaeConfig.hidden, int, "hidden units"),
    "vae.beta": Key(VaeConfig.beta, float, "KL weight"),
    "vae.epochs": Key(VaeConfig.epochs, int, "training epochs"),
    "vae.batch": Key(VaeConfig.batch, int, "batch size"),
    "vae.lr": Key(VaeConfig.lr, float, "learning rate"),
    "plan.samples": Key(PlanConfig.samples, int, "CEM samples per iteration"),
    "plan.elites": Key(PlanConfig.elites, int, "CEM elites"),
    "plan.horizon": Key(PlanConfig.horizon, int, "model steps per plan"),
    "plan.weight": Key(PlanConfig.weight, float, "novelty weight for the plan command"),
    "plan.iterations": Key(PlanConfig.iterations, int, "max CEM iterations"),
    "plan.threshold": Key(PlanConfig.threshold, float, "stop when the mean moves less than this"),
    "plan.var_floor": Key(PlanConfig.var_floor, float, "minimum sampler variance"),
    "eval.weights": Key((0.0, 0.25), _floats, "weights compared by eval"),
    "eval.sweep_weights": Key(WEIGHT_GRID, _floats, "weights for sweep"),
    "eval.scenes": Key(5, int, "scenes per seed"),
    "eval.seeds": Key((0,), _ints, "scene seed bases"),
    "eval.budget": Key(10, int, "environment actions per MPC episode"),
    "eval.execute_per_replan": Key(1, int, "model steps executed between replans"),
    "eval.goal_actions": Key(3, int, "random pushes from start to goal"),
    "eval.record_seconds": Key(False, _bool, "write wall-clock into the results CSV"),
    "eval.ood_scenes": Key(50, int, "scenes in the OOD fixture"),
    "eval.ood_steps": Key(60, int, "gap actions per OOD scene"),
    "eval.ood_episodes": Key(30, int, "fresh in-distribution episodes for the OOD report"),
}


class RunConfig:
    """Resolved values for every key in ``KEYS``."""

    def __init__(self, values: dict | None = None):
        self._values = {k: spec.default for k, spec in KEYS.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            try:
                value = KEYS[key].parse(value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        self._values[key] = value

    def __getitem__(self, key: str):
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.dumps() == other.dumps()

    def dumps(self) -> str:
        return "".join(f"{k} = {_fmt(self._values[k])}\n" for k in KEYS)

    @classmethod
    def loads(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{source}:{n}: expected key = value")
            try:
                cfg.set(key.strip(), value.strip())
            except ConfigError as exc:
                raise ConfigError(f"{source}:{n}: {exc}") from None
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text(), str(path))

    # typed views

    def policy(self) -> ds.PolicySpec:
        return ds.PolicySpec(self["data.policy"], tuple(self["data.gap_lo"]), tuple(self["data.gap_hi"]))

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(**self._section("encoder"), seed=self["seed"])

    def dynamics(self) -> DynamicsConfig:
        return DynamicsConfig(**self._section("dynamics"), seed=self["seed"])

    def vae(self) -> VaeConfig:
        return VaeConfig(**self._section("vae"), seed=self["seed"])

    def plan(self, workers: int = 1) -> PlanConfig:
        return PlanConfig(**self._section("plan"), seed=self["seed"], workers=workers)

    def experiment(self, weights=None) -> ExperimentSpec:
        return ExperimentSpec(
            env=self["env.kind"],
            policy=self.policy(),
            weights=tuple(self["eval.weights"] if weights is None else weights),
            scenes=self["eval.scenes"],
            seeds=tuple(self["eval.seeds"]),
            budget=self["eval.budget"],
            execute_per_replan=self["eval.execute_per_replan"],
            goal_actions=self["eval.goal_actions"],
            plan=self.plan(),
            record_seconds=self["eval.record_seconds"],
        )

    def _section(self, prefix: str) -> dict:
        p = prefix + "."
        return {k[len(p) :]: v for k, v in self._values.items() if k.startswith(p)}


def describe() -> str:
    """Every key with its default and meaning, as a commented config file."""
    lines = []
    for k, spec in KEYS.items():
        lines.append(f"# {spec.doc}")
        lines.append(f"{k} = {_fmt(spec.default)}")
    return "\n".join(lines) + "\n"


def _check_policy_bounds(cfg: RunConfig) -> None:
    lo, hi = np.asarray(cfg["data.gap_lo"]), np.asarray(cfg["data.gap_hi"])
    if lo.shape != (4,) or hi.shape != (4,):
        raise ConfigError("data.gap_lo and data.gap_hi need four values each")
    if np.any(lo >= hi):
        raise ConfigError("data.gap_lo must lie below data.gap_hi on every coordinate")


def validate(cfg: RunConfig) -> RunConfig:
    if cfg["env.kind"] not in sim.KINDS:
        raise ConfigError(f"env.kind must be one of {sim.KINDS}, got {cfg['env.kind']!r}")
    if cfg["data.policy"] not in ("uniform", "gapped"):
        raise ConfigError(f"data.policy must be uniform or gapped, got {cfg['data.policy']!r}")
    _check_policy_bounds(cfg)
    if not 0 <= cfg["dynamics.dropout"] < 1:
        raise ConfigError("dynamics.dropout must lie in [0, 1)")
    try:
        cfg.plan()
        cfg.experiment()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg
