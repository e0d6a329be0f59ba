"""Plain-text experiment configuration.

Files are flat ``key = value`` lines with dotted keys; ``#`` starts a
comment line and blank lines are skipped. Every key has a typed default
below, unknown keys are rejected with their line number, and duplicates
are an error. ``serialize_config(parse_config(text))`` is stable, so an
effective config can be written next to run outputs and reread later.
"""

from __future__ import annotations

import numpy as np

from .diffusion import NoiseSchedule, ScoreNetwork, make_schedule
from .errors import ConfigError, ContractViolation
from .grpo import TrainerConfig
from .oracle import HarmonicChainOracle, LennardJonesOracle
from .rewards import RewardConfig

__all__ = [
    "DEFAULTS", "parse_config", "load_config", "serialize_config",
    "build_oracle", "build_schedule", "build_network",
    "build_trainer_config", "build_reward_config",
]

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "system.n_bodies": 5,
    "system.feature_dim": 2,
    "system.oracle.kind": "harmonic",
    "system.oracle.spring_constant": 1.0,
    "system.oracle.rest_length": 1.0,
    "system.oracle.epsilon": 1.0,
    "system.oracle.sigma": 1.0,
    "system.oracle.r_min_factor": 0.3,
    "system.oracle.below_min": "continue",
    "diffusion.steps": 1000,
    "diffusion.schedule": "polynomial_2",
    "diffusion.precision": 1e-5,
    "diffusion.ou_horizon": 5.0,
    "diffusion.layers": 3,
    "diffusion.hidden": 64,
    "pretrain.steps": 1500,
    "pretrain.batch_size": 32,
    "pretrain.learning_rate": 3e-3,
    "pretrain.final_lr_ratio": 1.0,
    "pretrain.jitter": 0.15,
    "train.learning_rate": 4e-6,
    "train.optimizer_eps": 1e-8,
    "train.clip_range": 2e-3,
    "train.kl_penalty_weight": 0.08,
    "train.adv_clip_max": 5.0,
    "train.max_grad_norm": 1.0,
    "train.epoch_per_rollout": 1,
    "train.micro_batch": 8,
    "train.iterations": 200,
    "train.advantage_eta": 1e-12,
    "train.pool_groups": False,
    "train.scheduler.warmup_steps": 60,
    "train.scheduler.total_steps": 1500,
    "train.scheduler.min_lr_ratio": 0.3,
    "dataloader.sample_group_size": 4,
    "dataloader.each_prompt_sample": 6,
    "reward.energy_adv_weight": 0.05,
    "reward.force_adv_weight": 1.0,
    "reward.force_clip_threshold": 2.0,
    "reward.energy_transform_clip": 5.0,
    "reward.shaping.gamma": 1.0,
    "reward.shaping.scheduler.skip_prefix": 700,
    "reward.shaping.force_potential": False,
    "reward.property.enabled": False,
    "reward.property.target": 1.0,
    "reward.property.weight": 0.0,
    "eval.samples": 512,
    "eval.quantile_step": 0.05,
    "eval.dump_samples": 0,
    "paths.out_dir": "out",
}


def _convert(key: str, raw: str, lineno: int):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if raw == "true":
            return True
        if raw == "false":
            return False
        raise ConfigError(f"expected true/false, got {raw!r}", line=lineno, key=key)
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"expected an integer, got {raw!r}",
                              line=lineno, key=key) from None
    if isinstance(default, float):
        try:
            value = float(raw)
        except ValueError:
            raise ConfigError(f"expected a number, got {raw!r}",
                              line=lineno, key=key) from None
        if not np.isfinite(value):
            raise ConfigError(f"value must be finite, got {raw!r}",
                              line=lineno, key=key)
        return value
    return raw


def parse_config(text: str) -> dict[str, object]:
    """Parse config text into the full effective key -> value map."""
    values = dict(DEFAULTS)
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", line=lineno)
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in DEFAULTS:
            raise ConfigError("unknown key", line=lineno, key=key)
        if key in seen:
            raise ConfigError("duplicate key", line=lineno, key=key)
        if not raw:
            raise ConfigError("missing value", line=lineno, key=key)
        seen.add(key)
        values[key] = _convert(key, raw, lineno)
    return values


def load_config(path: str) -> dict[str, object]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return parse_config(text)


def _format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(values: dict[str, object]) -> str:
    unknown = set(values) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    lines = [f"{key} = {_format_value(values[key])}"
             for key in sorted(values)]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Builders: turn the flat map into package objects, rejecting bad values
# with ConfigError so the CLI can map them to its configuration exit code.


def _positive(values: dict, key: str) -> float:
    v = values[key]
    if not v > 0:
        raise ConfigError("value must be positive", key=key)
    return float(v)


def build_oracle(values: dict[str, object]):
    kind = values["system.oracle.kind"]
    if kind == "harmonic":
        return HarmonicChainOracle(
            spring_constant=_positive(values, "system.oracle.spring_constant"),
            rest_length=_positive(values, "system.oracle.rest_length"))
    if kind == "lennard_jones":
        below = values["system.oracle.below_min"]
        if below not in ("continue", "error"):
            raise ConfigError("below_min must be continue or error",
                              key="system.oracle.below_min")
        sigma = _positive(values, "system.oracle.sigma")
        factor = _positive(values, "system.oracle.r_min_factor")
        return LennardJonesOracle(
            epsilon=_positive(values, "system.oracle.epsilon"),
            sigma=sigma, r_min=factor * sigma, below_min=below)
    raise ConfigError(f"unknown oracle kind {kind!r}", key="system.oracle.kind")


def build_schedule(values: dict[str, object]) -> NoiseSchedule:
    try:
        return make_schedule(
            int(values["diffusion.steps"]),
            kind=str(values["diffusion.schedule"]),
            precision=float(values["diffusion.precision"]),
            ou_horizon=float(values["diffusion.ou_horizon"]))
    except ContractViolation as exc:
        raise ConfigError(str(exc), key="diffusion.*") from None


def build_network(values: dict[str, object], schedule: NoiseSchedule,
                  seed: int) -> ScoreNetwork:
    layers = int(values["diffusion.layers"])
    hidden = int(values["diffusion.hidden"])
    d_h = int(values["system.feature_dim"])
    if layers < 1 or hidden < 1 or d_h < 1:
        raise ConfigError("network dimensions must be positive", key="diffusion.*")
    return ScoreNetwork(layers, hidden, d_h, schedule, seed=seed)


def build_trainer_config(values: dict[str, object], seed: int) -> TrainerConfig:
    steps = int(values["diffusion.steps"])
    skip = int(values["reward.shaping.scheduler.skip_prefix"])
    t_prefix = steps - skip
    if not 1 <= t_prefix <= steps:
        raise ConfigError(
            f"skip_prefix {skip} leaves no optimizable steps out of {steps}",
            key="reward.shaping.scheduler.skip_prefix")
    try:
        return TrainerConfig(
            learning_rate=float(values["train.learning_rate"]),
            clip_range=float(values["train.clip_range"]),
            kl_weight=float(values["train.kl_penalty_weight"]),
            adv_clip=float(values["train.adv_clip_max"]),
            max_grad_norm=float(values["train.max_grad_norm"]),
            epochs_per_rollout=int(values["train.epoch_per_rollout"]),
            micro_batch=int(values["train.micro_batch"]),
            iterations=int(values["train.iterations"]),
            n_groups=int(values["dataloader.sample_group_size"]),
            group_size=int(values["dataloader.each_prompt_sample"]),
            t_prefix=t_prefix,
            w_energy=float(values["reward.energy_adv_weight"]),
            w_force=float(values["reward.force_adv_weight"]),
            eta=float(values["train.advantage_eta"]),
            pool_groups=bool(values["train.pool_groups"]),
            optimizer_eps=float(values["train.optimizer_eps"]),
            warmup_steps=int(values["train.scheduler.warmup_steps"]),
            total_steps=int(values["train.scheduler.total_steps"]),
            min_lr_ratio=float(values["train.scheduler.min_lr_ratio"]),
            seed=seed,
        )
    except ContractViolation as exc:
        raise ConfigError(str(exc), key="train.*") from None


def build_reward_config(values: dict[str, object]) -> RewardConfig:
    try:
        return RewardConfig(
            energy_clip=float(values["reward.energy_transform_clip"]),
            force_clip=float(values["reward.force_clip_threshold"]),
            gamma=float(values["reward.shaping.gamma"]),
            use_force_shaping=bool(values["reward.shaping.force_potential"]),
            property_enabled=bool(values["reward.property.enabled"]),
            property_target=float(values["reward.property.target"]),
            property_weight=float(values["reward.property.weight"]),
        )
    except ContractViolation as exc:
        raise ConfigError(str(exc), key="reward.*") from None
