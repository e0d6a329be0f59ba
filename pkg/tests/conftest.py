"""Shared fixtures: trained networks are expensive, so they are session-scoped.

The 5-body pipeline (pretrain + three post-training variants) backs the
end-to-end acceptance checks; the 2-body pipeline backs the tilt analysis.
Everything is seeded, so fixtures are bitwise stable across runs.
"""

import numpy as np
import pytest

from nbalign.diffusion import (ScoreNetwork, make_schedule,
                               near_minimum_generator, pretrain, sample_many)
from nbalign.grpo import TrainerConfig, train
from nbalign.oracle import HarmonicChainOracle
from nbalign.rewards import RewardConfig
from nbalign.rng import stream

# Desk-scale recipe used by all end-to-end fixtures.
HEADLINE = dict(
    learning_rate=1e-4, clip_range=2e-3, kl_weight=0.08, adv_clip=5.0,
    max_grad_norm=1.0, epochs_per_rollout=1, micro_batch=0, iterations=60,
    n_groups=4, group_size=6, t_prefix=30, w_energy=0.3, w_force=1.0,
    eta=1e-12, pool_groups=False, warmup_steps=6, total_steps=60,
    min_lr_ratio=0.3, optimizer_eps=1e-8, seed=0,
)


@pytest.fixture(scope="session")
def harmonic():
    return HarmonicChainOracle(spring_constant=1.0, rest_length=1.0)


@pytest.fixture(scope="session")
def schedule100():
    return make_schedule(100, "polynomial_2", 1e-5)


def _pretrain_net(oracle, n_bodies, schedule):
    net = ScoreNetwork(n_layers=3, hidden=64, d_h=2, schedule=schedule, seed=0)
    gen = near_minimum_generator(oracle, n_bodies, 2, jitter=0.15)
    losses = pretrain(net, gen, steps=6000, batch_size=32, learning_rate=3e-3,
                      rng=stream(0, "pretrain"), final_lr_ratio=0.1)
    return net, losses


def _posttrain(base_net, oracle, schedule, n_bodies, **overrides):
    net = base_net.copy()
    cfg = TrainerConfig(**{**HEADLINE, **overrides})
    result = train(net, oracle, schedule, n_bodies, cfg, RewardConfig())
    assert result.status == "ok", result.metrics[-1]
    return net, result


@pytest.fixture(scope="session")
def pretrained5(harmonic, schedule100):
    return _pretrain_net(harmonic, 5, schedule100)


@pytest.fixture(scope="session")
def posttrained5(pretrained5, harmonic, schedule100):
    return _posttrain(pretrained5[0], harmonic, schedule100, 5)


@pytest.fixture(scope="session")
def force_only5(pretrained5, harmonic, schedule100):
    return _posttrain(pretrained5[0], harmonic, schedule100, 5,
                      w_energy=0.0, w_force=1.0)


@pytest.fixture(scope="session")
def energy_only5(pretrained5, harmonic, schedule100):
    return _posttrain(pretrained5[0], harmonic, schedule100, 5,
                      w_energy=0.3, w_force=0.0)


@pytest.fixture(scope="session")
def pretrained2(harmonic, schedule100):
    return _pretrain_net(harmonic, 2, schedule100)


@pytest.fixture(scope="session")
def posttrained2(pretrained2, harmonic, schedule100):
    return _posttrain(pretrained2[0], harmonic, schedule100, 2)


def eval_samples(net, oracle, schedule, n_bodies, n_samples=512, seed=0):
    """Fresh-sample evaluation on common random streams (paired across nets)."""
    rngs = [stream(seed, "eval", i) for i in range(n_samples)]
    x, _, _ = sample_many(net, n_bodies, schedule, rngs)
    energies, forces = oracle.evaluate_batch(x)
    rms = np.sqrt((forces * forces).sum(axis=(1, 2)) / n_bodies)
    return energies, rms
