"""Analytic potential-energy oracles and a trainable surrogate.

Two closed-form references (a harmonic chain and a Lennard-Jones cluster)
supply exact energies and forces for reward computation and for checking
everything else. The surrogate is a small invariant model over pairwise
distances whose force field is built as an explicit computation graph, so
its parameters can be fit with a joint energy-plus-force loss using
first-order reverse-mode differentiation only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation, SingularityError, TrainingFailure
from .nbody import Configuration, ordered_pairs
from .rng import stream

__all__ = [
    "HarmonicChainOracle", "LennardJonesOracle", "SurrogatePotential",
    "evaluate", "fit_surrogate", "uniform_error",
]

_TINY = 1e-12


@dataclass(frozen=True)
class HarmonicChainOracle:
    """Springs between consecutive bodies: E = sum_i k/2 (|x_{i+1}-x_i| - r0)^2."""

    spring_constant: float = 1.0
    rest_length: float = 1.0

    def __post_init__(self):
        if self.spring_constant <= 0 or self.rest_length <= 0:
            raise ContractViolation("spring constant and rest length must be positive")

    def evaluate_batch(self, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pos = np.asarray(positions, dtype=np.float64)
        if pos.ndim != 3 or pos.shape[2] != 3:
            raise ContractViolation(f"positions must be (B, N, 3), got {pos.shape}")
        k, r0 = self.spring_constant, self.rest_length
        v = pos[:, 1:, :] - pos[:, :-1, :]                  # bond vectors
        d = np.linalg.norm(v, axis=2)
        bad = d < _TINY
        if bad.any():
            b, i = np.argwhere(bad)[0]
            raise SingularityError(int(i), int(i) + 1, float(d[b, i]), _TINY)
        stretch = d - r0
        energy = 0.5 * k * (stretch * stretch).sum(axis=1)
        t = (k * stretch / d)[:, :, None]
        forces = np.zeros_like(pos)
        forces[:, :-1, :] += t * v
        forces[:, 1:, :] -= t * v
        return energy, forces

    def evaluate(self, cfg: Configuration) -> tuple[float, np.ndarray]:
        e, f = self.evaluate_batch(cfg.positions[None])
        return float(e[0]), f[0]


@dataclass(frozen=True)
class LennardJonesOracle:
    """All-pairs 12-6 potential with a quadratic continuation at short range.

    Below ``r_min`` (default 0.3 sigma) the pair potential is replaced by its
    second-order Taylor expansion about ``r_min``, which keeps energies and
    forces finite on the noisy geometries seen early in sampling. Construct
    with ``below_min="error"`` to treat close approaches as violations
    instead.
    """

    epsilon: float = 1.0
    sigma: float = 1.0
    r_min: float | None = None
    below_min: str = "continue"

    def __post_init__(self):
        if self.epsilon <= 0 or self.sigma <= 0:
            raise ContractViolation("epsilon and sigma must be positive")
        if self.r_min is None:
            object.__setattr__(self, "r_min", 0.3 * self.sigma)
        if self.r_min <= 0:
            raise ContractViolation("r_min must be positive")
        if self.below_min not in ("continue", "error"):
            raise ContractViolation("below_min must be 'continue' or 'error'")

    def _pair_energy_and_slope(self, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        eps, sig, rm = self.epsilon, self.sigma, self.r_min
        r_safe = np.maximum(r, rm)
        s6 = (sig / r_safe) ** 6
        s12 = s6 * s6
        v = 4.0 * eps * (s12 - s6)
        dv = 4.0 * eps * (-12.0 * s12 + 6.0 * s6) / r_safe
        # Taylor data at r_min for the continuation branch
        s6m = (sig / rm) ** 6
        s12m = s6m * s6m
        vm = 4.0 * eps * (s12m - s6m)
        dvm = 4.0 * eps * (-12.0 * s12m + 6.0 * s6m) / rm
        d2vm = 4.0 * eps * (156.0 * s12m - 42.0 * s6m) / (rm * rm)
        dr = r - rm
        v_quad = vm + dvm * dr + 0.5 * d2vm * dr * dr
        dv_quad = dvm + d2vm * dr
        below = r < rm
        return np.where(below, v_quad, v), np.where(below, dv_quad, dv)

    def evaluate_batch(self, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pos = np.asarray(positions, dtype=np.float64)
        if pos.ndim != 3 or pos.shape[2] != 3:
            raise ContractViolation(f"positions must be (B, N, 3), got {pos.shape}")
        b, n, _ = pos.shape
        if n < 2:
            return np.zeros(b), np.zeros_like(pos)
        diff = pos[:, :, None, :] - pos[:, None, :, :]      # x_i - x_j
        d = np.linalg.norm(diff, axis=3)
        iu = np.triu_indices(n, k=1)
        d_pairs = d[:, iu[0], iu[1]]
        if (d_pairs < _TINY).any():
            bi, p = np.argwhere(d_pairs < _TINY)[0]
            raise SingularityError(int(iu[0][p]), int(iu[1][p]), float(d_pairs[bi, p]), _TINY)
        if self.below_min == "error" and (d_pairs < self.r_min).any():
            bi, p = np.argwhere(d_pairs < self.r_min)[0]
            raise SingularityError(int(iu[0][p]), int(iu[1][p]),
                                   float(d_pairs[bi, p]), self.r_min)
        np.einsum("bii->bi", d)[:] = 1.0                    # dodge the diagonal
        v, dv = self._pair_energy_and_slope(d)
        mask = ~np.eye(n, dtype=bool)
        energy = 0.5 * (v * mask).sum(axis=(1, 2))
        u = diff / d[:, :, :, None]
        forces = -((dv * mask)[:, :, :, None] * u).sum(axis=2)
        return energy, forces

    def evaluate(self, cfg: Configuration) -> tuple[float, np.ndarray]:
        e, f = self.evaluate_batch(cfg.positions[None])
        return float(e[0]), f[0]


@dataclass
class SurrogatePotential:
    """Invariant energy model on radial-basis features of pairwise distances.

    E(x) = w2 . tanh(W1 . pool(x) + b1) + b2 with
    pool_m(x) = 1/2 sum over ordered pairs of exp(-(d_ij - c_m)^2 / 2 width^2).
    """

    centers: np.ndarray
    width: float
    w_hidden: Tensor
    b_hidden: Tensor
    w_out: Tensor
    b_out: Tensor
    loss_history: list = field(default_factory=list)

    @staticmethod
    def create(n_basis: int = 16, hidden: int = 32, r_max: float = 4.0,
               seed: int = 0) -> "SurrogatePotential":
        if n_basis < 2 or hidden < 1 or r_max <= 0:
            raise ContractViolation("bad surrogate architecture")
        centers = np.linspace(0.0, r_max, n_basis)
        width = centers[1] - centers[0]
        rng = stream(seed, "surrogate", "init")
        w1 = rng.standard_normal((n_basis, hidden)) / np.sqrt(n_basis)
        w2 = rng.standard_normal((hidden, 1)) / np.sqrt(hidden)
        return SurrogatePotential(
            centers=centers,
            width=float(width),
            w_hidden=Tensor(w1),
            b_hidden=Tensor(np.zeros(hidden)),
            w_out=Tensor(w2),
            b_out=Tensor(np.zeros(1)),
        )

    @property
    def params(self) -> list[Tensor]:
        return [self.w_hidden, self.b_hidden, self.w_out, self.b_out]

    def _pooled(self, pos: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        b, n, _ = pos.shape
        dst, src = ordered_pairs(n)
        xi = ad.take(pos, dst, axis=1)
        xj = ad.take(pos, src, axis=1)
        diff = xi - xj
        d2 = ad.tensor_sum(ad.square(diff), axis=2, keepdims=True)
        d = ad.sqrt(d2)                                     # (B, E, 1)
        m = self.centers.size
        e = n * (n - 1)
        db = ad.broadcast_to(d, (b, e, m))
        z = (db - Tensor(self.centers)) * (1.0 / self.width)
        rbf = ad.exp(ad.square(z) * -0.5)                   # (B, E, M)
        pool = ad.tensor_sum(rbf, axis=1) * 0.5             # (B, M)
        return pool, rbf, z, diff

    def energy_batch(self, positions) -> Tensor:
        pos = positions if isinstance(positions, Tensor) else Tensor(positions)
        if len(pos.shape) != 3 or pos.shape[2] != 3:
            raise ContractViolation(f"positions must be (B, N, 3), got {pos.shape}")
        pool, _, _, _ = self._pooled(pos)
        act = ad.tanh(ad.matmul(pool, self.w_hidden) + self.b_hidden)
        e = ad.matmul(act, self.w_out) + self.b_out
        return ad.reshape(e, (pos.shape[0],))

    def force_batch(self, positions) -> Tensor:
        """Forces -dE/dx as an explicit graph (differentiable in parameters)."""
        pos = positions if isinstance(positions, Tensor) else Tensor(positions)
        b, n, _ = pos.shape
        pool, rbf, z, diff = self._pooled(pos)
        act = ad.tanh(ad.matmul(pool, self.w_hidden) + self.b_hidden)
        # dE/dpool: W1 (act' * w2), shape (B, M)
        gate = (1.0 - ad.square(act)) * ad.reshape(self.w_out, (self.w_out.shape[0],))
        sens = ad.matmul(gate, _transpose2(self.w_hidden))
        e = n * (n - 1)
        m = self.centers.size
        # d pool_m / d d_p = 1/2 * rbf' with rbf' = -z/width * rbf (times 2 for
        # the two ordered copies of each pair hitting body i once each)
        dr = rbf * z * (-1.0 / self.width)
        sens_b = ad.broadcast_to(ad.reshape(sens, (b, 1, m)), (b, e, m))
        w_pair = ad.tensor_sum(dr * sens_b, axis=2, keepdims=True)   # (B, E, 1)
        d = ad.sqrt(ad.tensor_sum(ad.square(diff), axis=2, keepdims=True))
        u = diff / ad.broadcast_to(d, (b, e, 3))
        contrib = ad.broadcast_to(w_pair, (b, e, 3)) * u
        per_dst = ad.reshape(contrib, (b, n, n - 1, 3))
        return ad.tensor_sum(per_dst, axis=2) * -1.0

    def evaluate(self, cfg: Configuration) -> tuple[float, np.ndarray]:
        e = self.energy_batch(cfg.positions[None])
        f = self.force_batch(cfg.positions[None])
        return float(e.data[0]), f.data[0]

    def evaluate_batch(self, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (self.energy_batch(positions).data,
                self.force_batch(positions).data)


def _transpose2(t: Tensor) -> Tensor:
    # constant-safe transpose for 2-D parameter tensors used in closed-form
    # derivative graphs: implemented via matmul-free numpy on data plus a
    # dedicated node so gradients flow back transposed.
    out = t.data.T.copy()
    return ad._record("transpose", out, (t,), lambda g: (g.T.copy(),))


def evaluate(oracle, cfg: Configuration) -> tuple[float, np.ndarray]:
    """Energy and forces (-grad E) for any oracle type."""
    return oracle.evaluate(cfg)


def fit_surrogate(target, configs, lambda_energy: float = 1.0,
                  lambda_force: float = 1.0, epochs: int = 200,
                  learning_rate: float = 5e-3, seed: int = 0,
                  n_basis: int = 16, hidden: int = 32) -> SurrogatePotential:
    """Fit the surrogate to oracle energies and forces.

    Loss per configuration: lambda_E (E - E_ref)^2 + lambda_F sum_i |F_i - F_ref_i|^2,
    averaged over the batch. Full-batch adaptive gradient steps.
    """
    if lambda_energy < 0 or lambda_force < 0 or lambda_energy + lambda_force == 0:
        raise ContractViolation("loss weights must be nonnegative and not both zero")
    configs = list(configs)
    if len(configs) < 32:
        raise ContractViolation(f"need at least 32 training configs, got {len(configs)}")
    pos = np.stack([c.positions for c in configs])
    e_ref, f_ref = target.evaluate_batch(pos)
    r_max = 0.0
    n = pos.shape[1]
    for i in range(n):
        for j in range(i + 1, n):
            r_max = max(r_max, float(np.linalg.norm(pos[:, i] - pos[:, j], axis=1).max()))
    model = SurrogatePotential.create(n_basis=n_basis, hidden=hidden,
                                      r_max=1.1 * r_max, seed=seed)
    e_ref_t = Tensor(e_ref)
    f_ref_t = Tensor(f_ref)
    b = pos.shape[0]

    def loss_fn(_params):
        total = Tensor(0.0)
        if lambda_energy > 0:
            de = model.energy_batch(pos) - e_ref_t
            total = total + ad.tensor_sum(ad.square(de)) * (lambda_energy / b)
        if lambda_force > 0:
            df = model.force_batch(pos) - f_ref_t
            total = total + ad.tensor_sum(ad.square(df)) * (lambda_force / b)
        return total

    opt = ad.RmsProp(model.params)
    for epoch in range(epochs):
        try:
            value, grads = ad.value_and_grad(loss_fn, model.params)
        except Exception as exc:
            raise TrainingFailure(f"surrogate fit failed: {exc}", epoch=epoch) from exc
        if not np.isfinite(value):
            raise TrainingFailure("surrogate loss is not finite", epoch=epoch)
        opt.step([g.data for g in grads], learning_rate)
        model.loss_history.append(value)
    return model


def uniform_error(surrogate: SurrogatePotential, target, probes) -> float:
    """Sup-norm energy error estimate over a probe set of configurations."""
    probes = list(probes)
    if not probes:
        raise ContractViolation("need at least one probe configuration")
    pos = np.stack([c.positions for c in probes])
    e_sur = surrogate.energy_batch(pos).data
    e_ref, _ = target.evaluate_batch(pos)
    return float(np.max(np.abs(e_sur - e_ref)))
