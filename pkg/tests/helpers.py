"""Small shared builders for the test suite."""

import numpy as np

from nbalign.diffusion import ScoreNetwork
from nbalign.nbody import Configuration, center_positions
from nbalign.rng import stream


def tiny_net(schedule, d_h=2, seed=0):
    return ScoreNetwork(n_layers=2, hidden=16, d_h=d_h, schedule=schedule,
                        seed=seed)


def perturbed_net(schedule, d_h=2, scale=0.05, seed=0):
    """Network with non-zero heads so its output actually depends on input."""
    net = tiny_net(schedule, d_h=d_h, seed=seed)
    rng = stream(seed, "test", "perturb")
    for p in net.params:
        p.data += scale * rng.standard_normal(p.data.shape)
    return net


def centered_config(rng, n=4, d_h=2):
    return Configuration(center_positions(rng.standard_normal((n, 3))),
                         rng.standard_normal((n, d_h)))


class ZeroRng:
    """standard_normal stub returning zeros: isolates the deterministic mean."""

    def standard_normal(self, shape):
        return np.zeros(shape)
