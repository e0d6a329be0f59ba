"""Equivariant denoising diffusion over N-body configurations.

The generative state is a configuration (positions plus per-body feature
channels). Positions diffuse inside the zero-centre-of-mass subspace;
features diffuse in full. The forward kernel is variance preserving:
z_t ~ N(alpha_t z_0, sigma_bar_t^2 I) with alpha_t^2 + sigma_bar_t^2 = 1.

The score model is a message-passing network whose coordinate output is
assembled from relative displacements only, so it is translation invariant
and rotation/reflection equivariant by construction. All forward passes run
batched over configurations; single-configuration entry points wrap batch
size one.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (ConfigError, ContractViolation, NearPriorError, NumericFailure,
                     SchemaError, TrainingFailure)
from .nbody import Configuration, center_positions, ordered_pairs
from .rng import stream

__all__ = [
    "NoiseSchedule", "make_schedule", "ScoreNetwork", "ReverseStep",
    "forward_sample", "score_forward", "predict_clean", "reverse_step",
    "sample", "sample_many", "pretrain", "near_minimum_generator",
    "save_checkpoint", "load_checkpoint",
]

_ALPHA_FLOOR = 1e-6
_SCHEDULE_KINDS = ("polynomial_2", "ou")


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete variance-preserving schedule on steps 0..T.

    alpha[t] is the signal scale of the forward kernel at step t and
    sigma_bar[t] the cumulative noise scale; alpha^2 + sigma_bar^2 = 1 at
    every step. Per-step transition scales for the ancestral sampler are
    derived once here.
    """

    kind: str
    steps: int
    alpha: np.ndarray
    sigma_bar: np.ndarray
    precision: float
    ou_horizon: float

    def __post_init__(self):
        a, s = self.alpha, self.sigma_bar
        if a.shape != (self.steps + 1,) or s.shape != (self.steps + 1,):
            raise ContractViolation("schedule tables must have length T + 1")
        tol = max(1e-6, 2.0 * self.precision)
        if abs(a[0] - 1.0) > tol:
            raise ContractViolation(f"alpha_0 = {a[0]} is not within {tol} of 1")
        if not np.all(np.diff(a) < 0):
            raise ContractViolation("alpha must be strictly decreasing")
        if not np.all(np.diff(s) > 0):
            raise ContractViolation("sigma_bar must be strictly increasing")
        vp = np.max(np.abs(a * a + s * s - 1.0))
        if vp > 1e-9:
            raise ContractViolation(f"variance-preserving identity broken by {vp:.3e}")
        snr = self.snr()
        if not np.all(np.diff(snr) < 0):
            raise ContractViolation("signal-to-noise ratio must be strictly decreasing")
        for arr in (a, s):
            arr.flags.writeable = False

    @property
    def T(self) -> int:
        return self.steps

    def snr(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.where(self.sigma_bar > 0,
                            (self.alpha / np.where(self.sigma_bar > 0, self.sigma_bar, 1.0)) ** 2,
                            np.inf)

    def step_scale(self, t: int) -> float:
        """alpha_{t|t-1} = alpha_t / alpha_{t-1}."""
        self._check_step(t)
        return float(self.alpha[t] / self.alpha[t - 1])

    def step_noise2(self, t: int) -> float:
        """Per-step forward noise variance 1 - (alpha_t/alpha_{t-1})^2."""
        a = self.step_scale(t)
        return max(1.0 - a * a, 0.0)

    def posterior_sigma(self, t: int) -> float:
        """Std of the ancestral reverse kernel q(z_{t-1} | z_t, z_0)."""
        self._check_step(t)
        s2 = self.step_noise2(t)
        return float(math.sqrt(s2) * self.sigma_bar[t - 1] / self.sigma_bar[t])

    def _check_step(self, t: int) -> None:
        if not 1 <= t <= self.steps:
            raise ContractViolation(f"step {t} outside 1..{self.steps}")


def make_schedule(steps: int, kind: str = "polynomial_2",
                  precision: float = 1e-5, ou_horizon: float = 5.0) -> NoiseSchedule:
    """Build a schedule. polynomial_2: alpha_t proportional to (1-(t/T)^2)^2
    clipped by precision; ou: alpha_t = exp(-t * ou_horizon / T)."""
    if steps < 2:
        raise ContractViolation("schedule needs at least two steps")
    if not 0.0 < precision < 1e-2:
        raise ContractViolation(f"precision {precision} outside (0, 1e-2)")
    t = np.arange(steps + 1, dtype=np.float64)
    if kind == "polynomial_2":
        raw = (1.0 - (t / steps) ** 2) ** 2
        alpha = (1.0 - 2.0 * precision) * raw + precision
    elif kind == "ou":
        if ou_horizon <= 0:
            raise ContractViolation("ou horizon must be positive")
        alpha = np.exp(-t * (ou_horizon / steps))
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    sigma_bar = np.sqrt(np.maximum(1.0 - alpha * alpha, 0.0))
    return NoiseSchedule(kind=kind, steps=steps, alpha=alpha,
                         sigma_bar=sigma_bar, precision=precision,
                         ou_horizon=float(ou_horizon))


# ---------------------------------------------------------------------------
# Score network


class ScoreNetwork:
    """Message-passing noise predictor over fully connected point graphs.

    Edge blocks consume invariant inputs only (squared distance, endpoint
    features, normalized time); coordinate updates are weighted sums of
    displacement vectors; the coordinate output is centred per graph. Output
    heads start at zero so an untrained network predicts zero noise.
    """

    def __init__(self, n_layers: int, hidden: int, d_h: int,
                 schedule: NoiseSchedule, seed: int = 0):
        if n_layers < 1 or hidden < 1 or d_h < 0:
            raise ContractViolation("bad network architecture")
        self.n_layers = n_layers
        self.hidden = hidden
        self.d_h = d_h
        self.schedule = schedule
        self.seed = seed
        rng = stream(seed, "net", "init")
        h = hidden
        edge_in = 2 * h + 2        # features of both endpoints, d^2, t/T
        node_in = 2 * h

        def init(shape, fan):
            return Tensor(rng.standard_normal(shape) / math.sqrt(fan))

        self.w_embed = init((max(d_h, 1), h), max(d_h, 1))
        self.b_embed = Tensor(np.zeros(h))
        self.layers = []
        for _ in range(n_layers):
            self.layers.append({
                "w_e1": init((edge_in, h), edge_in),
                "b_e1": Tensor(np.zeros(h)),
                "w_e2": init((h, h), h),
                "b_e2": Tensor(np.zeros(h)),
                "w_x": Tensor(np.zeros((h, 1))),
                "b_x": Tensor(np.zeros(1)),
                "w_h1": init((node_in, h), node_in),
                "b_h1": Tensor(np.zeros(h)),
                "w_h2": init((h, h), h),
                "b_h2": Tensor(np.zeros(h)),
            })
        self.w_out = Tensor(np.zeros((h, max(d_h, 1))))
        self.b_out = Tensor(np.zeros(max(d_h, 1)))
        # learnable skip gates: eps ~= sigma_bar * state at low signal-to-noise,
        # so give the heads that direction for free (zero at init)
        self.gate_x = Tensor(np.zeros(()))
        self.gate_h = Tensor(np.zeros(()))

    _LAYER_KEYS = ("w_e1", "b_e1", "w_e2", "b_e2", "w_x", "b_x",
                   "w_h1", "b_h1", "w_h2", "b_h2")

    @property
    def params(self) -> list[Tensor]:
        out = [self.w_embed, self.b_embed]
        for layer in self.layers:
            out.extend(layer[k] for k in self._LAYER_KEYS)
        out.extend([self.w_out, self.b_out, self.gate_x, self.gate_h])
        return out

    def param_arrays(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params]

    def load_param_arrays(self, arrays) -> None:
        params = self.params
        if len(arrays) != len(params):
            raise SchemaError(f"expected {len(params)} tensors, got {len(arrays)}")
        for p, a in zip(params, arrays):
            a = np.asarray(a, dtype=np.float64)
            if a.shape != p.data.shape:
                raise SchemaError(f"parameter shape {a.shape} != {p.data.shape}")
            p.data = a.copy()

    def copy(self) -> "ScoreNetwork":
        dup = ScoreNetwork(self.n_layers, self.hidden, self.d_h,
                           self.schedule, seed=self.seed)
        dup.load_param_arrays(self.param_arrays())
        return dup

    def noise_prediction(self, positions, features, tfrac) -> tuple[Tensor, Tensor]:
        """Batched forward: (B,N,3), (B,N,d_h), (B,) -> noise estimates."""
        pos = positions if isinstance(positions, Tensor) else Tensor(positions)
        feat = features if isinstance(features, Tensor) else Tensor(features)
        tt = tfrac if isinstance(tfrac, Tensor) else Tensor(tfrac)
        if len(pos.shape) != 3 or pos.shape[2] != 3:
            raise ContractViolation(f"positions must be (B, N, 3), got {pos.shape}")
        b, n, _ = pos.shape
        if feat.shape != (b, n, self.d_h):
            raise ContractViolation(
                f"features must be ({b}, {n}, {self.d_h}), got {feat.shape}")
        if tt.shape != (b,):
            raise ContractViolation(f"time fractions must be ({b},), got {tt.shape}")
        dst, src = ordered_pairs(n)
        e = n * (n - 1)
        hdim = self.hidden

        feat_in = feat if self.d_h > 0 else Tensor(np.zeros((b, n, 1)))
        h = ad.matmul(feat_in, self.w_embed) + self.b_embed
        x = pos
        if e > 0:
            tcol = ad.broadcast_to(ad.reshape(tt, (b, 1, 1)), (b, e, 1))
        for li, layer in enumerate(self.layers):
            if e == 0:
                agg_m = Tensor(np.zeros((b, n, hdim)))
            else:
                xd = ad.take(x, dst, axis=1)
                xs = ad.take(x, src, axis=1)
                diff = xd - xs
                d2 = ad.tensor_sum(ad.square(diff), axis=2, keepdims=True)
                hd = ad.take(h, dst, axis=1)
                hs = ad.take(h, src, axis=1)
                edge_in = ad.concat([hd, hs, d2, tcol], axis=2)
                msg = ad.tanh(ad.matmul(
                    ad.tanh(ad.matmul(edge_in, layer["w_e1"]) + layer["b_e1"]),
                    layer["w_e2"]) + layer["b_e2"])
                gate = ad.tanh(ad.matmul(msg, layer["w_x"]) + layer["b_x"])
                dist = ad.sqrt(d2)
                coef = gate / (dist + 1.0)
                delta = diff * ad.broadcast_to(coef, (b, e, 3))
                x = x + ad.tensor_sum(ad.reshape(delta, (b, n, n - 1, 3)), axis=2)
                agg_m = ad.tensor_sum(ad.reshape(msg, (b, n, n - 1, hdim)), axis=2)
            upd = ad.matmul(
                ad.tanh(ad.matmul(ad.concat([h, agg_m], axis=2), layer["w_h1"])
                        + layer["b_h1"]),
                layer["w_h2"]) + layer["b_h2"]
            h = h + upd
            if not (np.all(np.isfinite(x.data)) and np.all(np.isfinite(h.data))):
                raise NumericFailure(f"non-finite activation in layer {li}")
        steps = self.schedule.steps
        t_idx = np.clip(np.rint(tt.data * steps).astype(int), 0, steps)
        sb = Tensor(self.schedule.sigma_bar[t_idx].reshape(b, 1, 1))
        # signal-aware preconditioning: the learned correction is scaled by
        # alpha_t, so near the prior (alpha ~ 0, where the reverse update
        # divides by small step scales) the head reduces to the calibrated
        # skip term and small weight changes cannot destabilize sampling
        al = Tensor(self.schedule.alpha[t_idx].reshape(b, 1, 1))
        pos_c = pos - ad.broadcast_to(ad.mean(pos, axis=1, keepdims=True), (b, n, 3))
        eps_x_raw = (x - pos) * ad.broadcast_to(al, (b, n, 3)) \
            + pos_c * ad.broadcast_to(self.gate_x * sb, (b, n, 3))
        com = ad.mean(eps_x_raw, axis=1, keepdims=True)
        eps_x = eps_x_raw - ad.broadcast_to(com, (b, n, 3))
        eps_h = ad.matmul(h, self.w_out) + self.b_out
        if self.d_h > 0:
            eps_h = eps_h * ad.broadcast_to(al, (b, n, self.d_h)) \
                + feat * ad.broadcast_to(self.gate_h * sb, (b, n, self.d_h))
        else:
            eps_h = Tensor(np.zeros((b, n, 0)))
        return eps_x, eps_h


def _as_batch(cfg: Configuration) -> tuple[np.ndarray, np.ndarray]:
    return cfg.positions[None], cfg.features[None]


def _require_centered(cfg: Configuration, what: str) -> None:
    if cfg.com_magnitude() > 1e-8:
        raise ContractViolation(f"{what} must be centre-of-mass free")


def _check_t(t: int, schedule: NoiseSchedule, lo: int = 1) -> None:
    if not lo <= t <= schedule.steps:
        raise ContractViolation(f"step {t} outside {lo}..{schedule.steps}")


def subspace_dim(n_bodies: int, d_h: int) -> int:
    """Dimension of the diffused state: 3N-3 positional plus N d_h features."""
    return 3 * n_bodies - 3 + n_bodies * d_h


def forward_sample(z0: Configuration, t: int, schedule: NoiseSchedule,
                   rng: np.random.Generator) -> Configuration:
    """Draw z_t ~ N(alpha_t z0, sigma_bar_t^2) in the centred subspace."""
    _require_centered(z0, "z0")
    _check_t(t, schedule, lo=0)
    a = schedule.alpha[t]
    s = schedule.sigma_bar[t]
    eps_x = center_positions(rng.standard_normal(z0.positions.shape))
    eps_h = rng.standard_normal(z0.features.shape)
    return Configuration(a * z0.positions + s * eps_x,
                         a * z0.features + s * eps_h)


def score_forward(net: ScoreNetwork, z_t: Configuration, t: int
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Score estimate s_theta(z_t, t) = -eps_hat / sigma_bar_t, split into
    (coordinate part, feature part)."""
    schedule = net.schedule
    _check_t(t, schedule)
    pos, feat = _as_batch(z_t)
    tfrac = np.array([t / schedule.steps])
    ex, eh = net.noise_prediction(pos, feat, tfrac)
    s = schedule.sigma_bar[t]
    return -ex.data[0] / s, -eh.data[0] / s


def predict_clean(net: ScoreNetwork, z_t: Configuration, t: int,
                  schedule: NoiseSchedule) -> Configuration:
    """Denoised estimate zhat_0 = (z_t + sigma_bar^2 s_theta) / alpha_t."""
    _check_t(t, schedule)
    a = float(schedule.alpha[t])
    if a < _ALPHA_FLOOR:
        raise NearPriorError(
            f"alpha_{t} = {a:.3e} below {_ALPHA_FLOOR}; prediction is unreliable")
    pos, feat = _as_batch(z_t)
    tfrac = np.array([t / schedule.steps])
    ex, eh = net.noise_prediction(pos, feat, tfrac)
    s = float(schedule.sigma_bar[t])
    return Configuration((pos[0] - s * ex.data[0]) / a,
                         (feat[0] - s * eh.data[0]) / a)


@dataclass(frozen=True)
class ReverseStep:
    """One ancestral transition z_t -> z_{t-1} with its density bookkeeping.

    ``degenerate`` marks a zero-variance (deterministic) transition whose
    log-density is undefined; such steps are excluded from ratio objectives.
    """

    sample: Configuration
    mean_positions: np.ndarray
    mean_features: np.ndarray
    sigma: float
    log_density: float | None
    degenerate: bool
    eps_positions: np.ndarray
    eps_features: np.ndarray


def gaussian_log_density(delta_sq: float, dim: int, sigma: float) -> float:
    """Isotropic Gaussian log-density on a dim-dimensional subspace."""
    var = sigma * sigma
    return -0.5 * dim * math.log(2.0 * math.pi * var) - delta_sq / (2.0 * var)


def _reverse_mean_np(x, h, ex, eh, t, schedule):
    a_step = schedule.step_scale(t)
    s2 = schedule.step_noise2(t)
    sbar = schedule.sigma_bar[t]
    # mean = (z_t + s2 * score) / a_step with score = -eps/sigma_bar
    mx = (x - (s2 / sbar) * ex) / a_step
    mh = (h - (s2 / sbar) * eh) / a_step
    return mx, mh


def reverse_step(net: ScoreNetwork, z_t: Configuration, t: int,
                 schedule: NoiseSchedule, rng: np.random.Generator) -> ReverseStep:
    """Sample z_{t-1} from the learned reverse kernel at step t."""
    _check_t(t, schedule)
    pos, feat = _as_batch(z_t)
    tfrac = np.array([t / schedule.steps])
    ex_t, eh_t = net.noise_prediction(pos, feat, tfrac)
    ex, eh = ex_t.data[0], eh_t.data[0]
    mx, mh = _reverse_mean_np(z_t.positions, z_t.features, ex, eh, t, schedule)
    sigma = schedule.posterior_sigma(t)
    n, d_h = z_t.n_bodies, z_t.feature_dim
    if sigma == 0.0:
        cfg = Configuration(center_positions(mx), mh)
        return ReverseStep(cfg, mx, mh, 0.0, None, True, ex, eh)
    noise_x = center_positions(rng.standard_normal((n, 3)))
    noise_h = rng.standard_normal((n, d_h))
    sx = mx + sigma * noise_x
    sh = mh + sigma * noise_h
    delta_sq = float(((sx - mx) ** 2).sum() + ((sh - mh) ** 2).sum())
    ld = gaussian_log_density(delta_sq, subspace_dim(n, d_h), sigma)
    cfg = Configuration(center_positions(sx), sh)
    return ReverseStep(cfg, mx, mh, sigma, ld, False, ex, eh)


def sample(net: ScoreNetwork, n_bodies: int, schedule: NoiseSchedule,
           rng: int | np.random.Generator, record: bool = True
           ) -> tuple[Configuration, list[Configuration]]:
    """Draw one configuration by running the reverse chain from the prior.

    Returns (z_0, trajectory) where the trajectory runs z_T, ..., z_0. The
    final step uses the stochastic kernel like every other step whenever its
    variance is positive.
    """
    if isinstance(rng, (int, np.integer)):
        rng = stream(int(rng), "sample")
    if n_bodies < 1:
        raise ContractViolation("need at least one body")
    d_h = net.d_h
    x = center_positions(rng.standard_normal((n_bodies, 3)))
    h = rng.standard_normal((n_bodies, d_h))
    cfg = Configuration(x, h)
    trajectory = [cfg] if record else []
    for t in range(schedule.steps, 0, -1):
        step = reverse_step(net, cfg, t, schedule, rng)
        cfg = step.sample
        if record:
            trajectory.append(cfg)
    return cfg, trajectory


def sample_many(net: ScoreNetwork, n_bodies: int, schedule: NoiseSchedule,
                rngs: list[np.random.Generator], record_steps: list[int] | None = None
                ) -> tuple[np.ndarray, np.ndarray, dict[int, tuple[np.ndarray, np.ndarray]]]:
    """Batched sampler: one independent noise stream per sample.

    Per-sample draws happen in the same order as :func:`sample`, so sample i
    sees exactly the noise its stream dictates regardless of batch size.
    ``record_steps`` selects step indices t whose states z_t are returned.
    """
    b = len(rngs)
    if b == 0:
        raise ContractViolation("need at least one stream")
    d_h = net.d_h
    x = np.stack([center_positions(r.standard_normal((n_bodies, 3))) for r in rngs])
    h = np.stack([r.standard_normal((n_bodies, d_h)) for r in rngs])
    want = set(record_steps or [])
    recorded: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    if schedule.steps in want:
        recorded[schedule.steps] = (x.copy(), h.copy())
    for t in range(schedule.steps, 0, -1):
        tfrac = np.full(b, t / schedule.steps)
        ex, eh = net.noise_prediction(x, h, tfrac)
        mx, mh = _reverse_mean_np(x, h, ex.data, eh.data, t, schedule)
        sigma = schedule.posterior_sigma(t)
        if sigma == 0.0:
            x, h = mx, mh
        else:
            nx = np.stack([center_positions(r.standard_normal((n_bodies, 3))) for r in rngs])
            nh = np.stack([r.standard_normal((n_bodies, d_h)) for r in rngs])
            x = mx + sigma * nx
            h = mh + sigma * nh
        x = x - x.mean(axis=1, keepdims=True)
        if t - 1 in want:
            recorded[t - 1] = (x.copy(), h.copy())
    return x, h, recorded


# ---------------------------------------------------------------------------
# Pretraining


def near_minimum_generator(oracle, n_bodies: int, d_h: int, jitter: float):
    """Data factory: centred configurations near oracle minima plus jitter.

    Harmonic chains get exact random polylines with segments at the rest
    length; other oracles get short force-descent relaxations from random
    starts. Returns a callable (count, rng) -> (positions, features).
    """
    from .oracle import HarmonicChainOracle

    if isinstance(oracle, HarmonicChainOracle):
        r0 = oracle.rest_length

        def gen(count: int, rng: np.random.Generator):
            dirs = rng.standard_normal((count, n_bodies - 1, 3))
            dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
            segs = np.concatenate(
                [np.zeros((count, 1, 3)), np.cumsum(r0 * dirs, axis=1)], axis=1)
            pos = segs + jitter * rng.standard_normal(segs.shape)
            pos = pos - pos.mean(axis=1, keepdims=True)
            feat = rng.standard_normal((count, n_bodies, d_h))
            return pos, feat

        return gen

    pool = [None]

    def gen(count: int, rng: np.random.Generator):
        # relax a reusable pool once; per-batch descent would dominate
        # pretraining cost for stiff potentials
        if pool[0] is None:
            pos = rng.standard_normal((1024, n_bodies, 3))
            for step, iters in ((0.05, 200), (0.02, 100), (0.005, 100)):
                for _ in range(iters):
                    _, forces = oracle.evaluate_batch(pos)
                    norms = np.linalg.norm(forces, axis=2, keepdims=True)
                    pos = pos + step * forces / np.maximum(norms, 1.0)
            pool[0] = pos
        rows = rng.integers(0, pool[0].shape[0], size=count)
        pos = pool[0][rows] + jitter * rng.standard_normal((count, n_bodies, 3))
        pos = pos - pos.mean(axis=1, keepdims=True)
        feat = rng.standard_normal((count, n_bodies, d_h))
        return pos, feat

    return gen


def pretrain(net: ScoreNetwork, generator, steps: int, batch_size: int,
             learning_rate: float, rng: np.random.Generator,
             optimizer: ad.RmsProp | None = None,
             final_lr_ratio: float = 1.0) -> list[float]:
    """Train the network to predict injected noise; returns the loss curve.

    Each step draws a fresh batch, a uniform step index per sample, and
    centred noise, then minimizes the summed squared prediction error
    averaged over the batch. ``final_lr_ratio`` below 1 turns on cosine
    decay of the learning rate down to that fraction by the last step.
    """
    schedule = net.schedule
    if steps < 0 or batch_size < 1:
        raise ContractViolation("bad pretraining sizes")
    if not 0.0 < final_lr_ratio <= 1.0:
        raise ContractViolation("final_lr_ratio must be in (0, 1]")
    params = net.params
    opt = optimizer or ad.RmsProp(params)
    losses = []
    for step_i in range(steps):
        frac = step_i / steps
        lr = learning_rate * (final_lr_ratio + (1.0 - final_lr_ratio)
                              * 0.5 * (1.0 + np.cos(np.pi * frac)))
        pos0, feat0 = generator(batch_size, rng)
        b = pos0.shape[0]
        t_idx = rng.integers(1, schedule.steps + 1, size=b)
        a = schedule.alpha[t_idx][:, None, None]
        s = schedule.sigma_bar[t_idx][:, None, None]
        eps_x = rng.standard_normal(pos0.shape)
        eps_x = eps_x - eps_x.mean(axis=1, keepdims=True)
        eps_h = rng.standard_normal(feat0.shape)
        x_t = a * pos0 + s * eps_x
        h_t = a * feat0 + s * eps_h
        tfrac = t_idx / schedule.steps

        def loss_fn(_params):
            ex, eh = net.noise_prediction(x_t, h_t, tfrac)
            dx = ex - Tensor(eps_x)
            dh = eh - Tensor(eps_h)
            return (ad.tensor_sum(ad.square(dx)) + ad.tensor_sum(ad.square(dh))) * (1.0 / b)

        try:
            value, grads = ad.value_and_grad(loss_fn, params)
        except NumericFailure as exc:
            raise TrainingFailure(f"pretraining diverged: {exc}", epoch=step_i) from exc
        if not np.isfinite(value):
            raise TrainingFailure("pretraining loss not finite", epoch=step_i)
        opt.step([g.data for g in grads], lr)
        losses.append(value)
    return losses


# ---------------------------------------------------------------------------
# Checkpoints: versioned little-endian binary format.

_MAGIC = b"NBALNCK1"
_VERSION = 1
_KIND_CODES = {"polynomial_2": 0, "ou": 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


def save_checkpoint(path, net: ScoreNetwork, iteration: int = 0,
                    root_seed: int = 0) -> None:
    sched = net.schedule
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _VERSION))
    buf.write(struct.pack("<B", _KIND_CODES[sched.kind]))
    buf.write(struct.pack("<dd", sched.precision, sched.ou_horizon))
    buf.write(struct.pack("<IIII", sched.steps, net.n_layers, net.hidden, net.d_h))
    buf.write(struct.pack("<QQ", iteration, root_seed))
    params = net.params
    buf.write(struct.pack("<I", len(params)))
    for p in params:
        # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
        arr = np.asarray(p.data, dtype="<f8")
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(arr.tobytes())
    for table in (sched.alpha, sched.sigma_bar):
        buf.write(np.ascontiguousarray(table, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[ScoreNetwork, NoiseSchedule, dict]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise SchemaError(f"cannot read checkpoint: {exc}") from exc
    buf = io.BytesIO(raw)

    def read(fmt):
        size = struct.calcsize(fmt)
        chunk = buf.read(size)
        if len(chunk) != size:
            raise SchemaError("checkpoint truncated")
        return struct.unpack(fmt, chunk)

    if buf.read(8) != _MAGIC:
        raise SchemaError("not a checkpoint file (bad magic)")
    (version,) = read("<I")
    if version != _VERSION:
        raise SchemaError(f"unsupported checkpoint version {version}")
    (kind_code,) = read("<B")
    if kind_code not in _KIND_NAMES:
        raise SchemaError(f"unknown schedule code {kind_code}")
    precision, ou_horizon = read("<dd")
    steps, n_layers, hidden, d_h = read("<IIII")
    iteration, root_seed = read("<QQ")
    (n_params,) = read("<I")
    arrays = []
    for _ in range(n_params):
        (ndim,) = read("<B")
        shape = tuple(read("<" + "I" * ndim)) if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        data = buf.read(8 * count)
        if len(data) != 8 * count:
            raise SchemaError("checkpoint truncated in parameter block")
        arrays.append(np.frombuffer(data, dtype="<f8").reshape(shape).copy())
    tables = []
    for _ in range(2):
        data = buf.read(8 * (steps + 1))
        if len(data) != 8 * (steps + 1):
            raise SchemaError("checkpoint truncated in schedule block")
        tables.append(np.frombuffer(data, dtype="<f8").copy())
    if buf.read(1):
        raise SchemaError("trailing bytes after checkpoint payload")
    schedule = NoiseSchedule(kind=_KIND_NAMES[kind_code], steps=steps,
                             alpha=tables[0], sigma_bar=tables[1],
                             precision=precision, ou_horizon=ou_horizon)
    net = ScoreNetwork(n_layers, hidden, d_h, schedule, seed=0)
    net.load_param_arrays(arrays)
    meta = {"iteration": int(iteration), "root_seed": int(root_seed)}
    return net, schedule, meta
