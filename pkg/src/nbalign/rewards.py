"""Reward signals for post-training: terminal scores and potential shaping.

Terminal rewards score only the final configuration: negative clamped
energy and negative squared rms force (after per-body clipping). To give
earlier steps credit, a potential over partial states is defined through
the denoised estimate of the final geometry; potential-based shaping
rewards then telescope into simple per-step returns without changing the
optimal policy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule, ScoreNetwork, predict_clean
from .errors import ContractViolation
from .nbody import Configuration, clip_force, rms_force

__all__ = [
    "RewardConfig", "RewardBundle", "terminal_rewards", "energy_potential",
    "shaping_potential", "force_shaping_potential", "shaped_returns",
    "radius_of_gyration", "property_reward",
]


@dataclass(frozen=True)
class RewardConfig:
    """Static reward settings (clipping scales, shaping discount, extras)."""

    energy_clip: float = 5.0
    force_clip: float = 2.0
    gamma: float = 1.0
    use_force_shaping: bool = False
    property_enabled: bool = False
    property_target: float = 1.0
    property_weight: float = 0.0

    def __post_init__(self):
        if self.energy_clip <= 0 or self.force_clip <= 0:
            raise ContractViolation("clipping scales must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ContractViolation("gamma must be in (0, 1]")


@dataclass(frozen=True)
class RewardBundle:
    """All reward pieces of one rollout.

    ``psi_table`` covers steps 0..T_prefix (entry 0 is the terminal
    state); ``energy_rtg[t-1]`` is the shaped return for step t;
    ``force_return`` is the terminal force reward, never positive.
    """

    psi_table: np.ndarray
    energy_rtg: np.ndarray
    force_return: float
    terminal_energy: float

    def __post_init__(self):
        psi = np.asarray(self.psi_table, dtype=np.float64)
        rtg = np.asarray(self.energy_rtg, dtype=np.float64)
        if psi.ndim != 1 or rtg.ndim != 1 or rtg.size != psi.size - 1:
            raise ContractViolation(
                "psi_table must cover steps 0..T_prefix and energy_rtg steps 1..T_prefix")
        if self.force_return > 0:
            raise ContractViolation("force return is a negated square, cannot be positive")
        object.__setattr__(self, "psi_table", psi)
        object.__setattr__(self, "energy_rtg", rtg)


def energy_potential(energy: float, energy_clip: float) -> float:
    """Potential value from an energy: minus the symmetric clamp."""
    return -float(np.clip(energy, -energy_clip, energy_clip))


def force_potential_value(forces: np.ndarray, force_clip: float) -> float:
    f = clip_force(forces, force_clip)
    r = rms_force(f)
    return -(r * r)


def terminal_rewards(oracle, z0: Configuration, force_clip: float = 2.0,
                     energy_clip: float = 5.0) -> tuple[float, float]:
    """(energy reward, force reward) of a final configuration.

    r_E = -clamp(E, +-energy_clip); r_F = -rms(clip(F))^2.
    """
    energy, forces = oracle.evaluate(z0)
    return energy_potential(energy, energy_clip), force_potential_value(forces, force_clip)


def shaping_potential(oracle, net: ScoreNetwork, z_t: Configuration, t: int,
                      schedule: NoiseSchedule, energy_clip: float = 5.0) -> float:
    """Potential of a partial state: minus clamped oracle energy of the
    denoised estimate. At t = 0 the state is final and used as is."""
    if t == 0:
        zhat = z_t
    else:
        zhat = predict_clean(net, z_t, t, schedule)
    energy, _ = oracle.evaluate(zhat)
    return energy_potential(energy, energy_clip)


def force_shaping_potential(oracle, net: ScoreNetwork, z_t: Configuration, t: int,
                            schedule: NoiseSchedule, force_clip: float = 2.0) -> float:
    """Force-based potential variant; disabled by default in training."""
    zhat = z_t if t == 0 else predict_clean(net, z_t, t, schedule)
    _, forces = oracle.evaluate(zhat)
    return force_potential_value(forces, force_clip)


def shaped_returns(psi: np.ndarray, gamma: float) -> np.ndarray:
    """Telescoped shaping return-to-go from a potential table.

    psi has entries for steps 0..T_prefix; the result G has one entry per
    step t = 1..T_prefix with G_t = gamma^t psi_0 - psi_t.
    """
    psi = np.asarray(psi, dtype=np.float64)
    if psi.ndim != 1 or psi.size < 2:
        raise ContractViolation("potential table needs entries for steps 0..T_prefix")
    if not 0.0 < gamma <= 1.0:
        raise ContractViolation("gamma must be in (0, 1]")
    t = np.arange(1, psi.size)
    return gamma ** t * psi[0] - psi[1:]


def radius_of_gyration(cfg: Configuration) -> float:
    centred = cfg.positions - cfg.positions.mean(axis=0)
    return float(np.sqrt((centred * centred).sum() / cfg.n_bodies))


def property_reward(cfg: Configuration, target: float) -> float:
    """Negative absolute miss of the radius of gyration against a target."""
    return -abs(radius_of_gyration(cfg) - target)
