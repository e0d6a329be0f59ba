"""Group-relative policy optimization over denoising rollouts.

Each iteration rolls a frozen snapshot of the policy forward: a shared
noisy prefix per group, then K stochastic branches from the common branch
point. Branches are scored with shaped energy returns plus a terminal
force reward, advantages are z-normalized group-relative (energy) and
population-wide (force), and the policy is updated with a ratio-clipped
surrogate plus a KL penalty toward the pretrained reference.

All reverse-step quantities needed by the objective (states, samples,
means, noise predictions) are cached at rollout time, so reward
computation never reruns the network and the first ratio of every
iteration is exactly one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import RmsProp, Tape, Tensor, clip_global_norm, cosine_warmup
from .diffusion import (NoiseSchedule, ScoreNetwork, _reverse_mean_np,
                        gaussian_log_density, subspace_dim)
from .errors import ContractViolation, NearPriorError, NumericFailure
from .nbody import center_positions
from .rewards import RewardBundle, RewardConfig
from .rng import stream

__all__ = [
    "TrainerConfig", "Transition", "RolloutGroup", "RolloutBatch",
    "RewardTable", "AdvantageTable", "TrainResult", "rollout_groups",
    "compute_rewards", "normalize_advantages", "log_ratio",
    "clipped_objective", "train",
]


@dataclass(frozen=True)
class TrainerConfig:
    """Optimization settings. Defaults follow the desk-scale experiment."""

    learning_rate: float = 4e-6
    clip_range: float = 2e-3
    kl_weight: float = 0.08
    adv_clip: float = 5.0
    max_grad_norm: float = 1.0
    epochs_per_rollout: int = 1
    micro_batch: int = 0
    iterations: int = 60
    n_groups: int = 4
    group_size: int = 6
    t_prefix: int = 30
    w_energy: float = 0.05
    w_force: float = 1.0
    eta: float = 1e-12
    pool_groups: bool = False
    warmup_steps: int = 60
    total_steps: int = 1500
    min_lr_ratio: float = 0.3
    optimizer_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ContractViolation("need at least two branches per group")
        if self.n_groups < 1:
            raise ContractViolation("need at least one group")
        if self.t_prefix < 1:
            raise ContractViolation("branch point must leave at least one step")
        if self.clip_range <= 0 or self.adv_clip <= 0:
            raise ContractViolation("clip_range and adv_clip must be positive")
        if self.eta <= 0:
            raise ContractViolation("eta must be positive")
        if self.kl_weight < 0 or self.learning_rate < 0:
            raise ContractViolation("kl_weight and learning_rate must be nonnegative")
        if self.iterations < 0 or self.epochs_per_rollout < 1:
            raise ContractViolation("bad iteration counts")
        if self.micro_batch < 0:
            raise ContractViolation("micro_batch must be >= 0 (0 means full batch)")
        if self.optimizer_eps <= 0:
            raise ContractViolation("optimizer_eps must be positive")
        if min(self.w_energy, self.w_force) < 0:
            raise ContractViolation("advantage weights must be nonnegative")


@dataclass
class Transition:
    """One cached reverse step, batched over every rollout in the iteration.

    ``state`` holds z_t, ``sample`` holds z_{t-1}; means and noise
    predictions come from the behavior snapshot that generated the batch.
    """

    t: int
    sigma: float
    state_positions: np.ndarray
    state_features: np.ndarray
    eps_positions: np.ndarray
    eps_features: np.ndarray
    mean_positions: np.ndarray
    mean_features: np.ndarray
    sample_positions: np.ndarray
    sample_features: np.ndarray
    log_density: np.ndarray | None


@dataclass(frozen=True)
class RolloutGroup:
    """Per-group view: the shared branch state and its row ids in the batch."""

    index: int
    rows: np.ndarray
    prefix_positions: np.ndarray
    prefix_features: np.ndarray


@dataclass
class RolloutBatch:
    schedule: NoiseSchedule
    t_prefix: int
    n_groups: int
    group_size: int
    group_index: np.ndarray
    branch_index: np.ndarray
    prefix_positions: np.ndarray
    prefix_features: np.ndarray
    transitions: list[Transition]
    final_positions: np.ndarray
    final_features: np.ndarray
    net_old: ScoreNetwork

    @property
    def n_rollouts(self) -> int:
        return self.n_groups * self.group_size

    def groups(self) -> list[RolloutGroup]:
        return [
            RolloutGroup(g, np.nonzero(self.group_index == g)[0],
                         self.prefix_positions[g], self.prefix_features[g])
            for g in range(self.n_groups)
        ]


def _center_batch(x: np.ndarray) -> np.ndarray:
    return x - x.mean(axis=1, keepdims=True)


def _predict_np(net: ScoreNetwork, x: np.ndarray, h: np.ndarray, t: int,
                schedule: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    tfrac = np.full(x.shape[0], t / schedule.steps)
    ex, eh = net.noise_prediction(x, h, tfrac)
    return ex.data, eh.data


def rollout_groups(net: ScoreNetwork, n_bodies: int, schedule: NoiseSchedule,
                   cfg: TrainerConfig, stream_fn=None) -> RolloutBatch:
    """Generate one iteration's rollouts from the frozen policy ``net``.

    Group g shares a single denoising prefix from step T down to the branch
    point t_prefix; its K branches then descend independently to z_0. Noise
    comes from named substreams of ``cfg.seed`` (or ``stream_fn(g[, k])``),
    recreated identically every iteration so that runs differ only through
    the policy parameters.
    """
    n_g, k_b, t_pre = cfg.n_groups, cfg.group_size, cfg.t_prefix
    if not 1 <= t_pre <= schedule.T:
        raise ContractViolation(
            f"branch point {t_pre} outside schedule with {schedule.T} steps")
    if stream_fn is None:
        def stream_fn(*path):
            return stream(cfg.seed, "rollout", *path)
    d_h = net.d_h

    prefix_rngs = [stream_fn(g) for g in range(n_g)]
    xs, hs = [], []
    for r in prefix_rngs:
        xs.append(center_positions(r.standard_normal((n_bodies, 3))))
        hs.append(r.standard_normal((n_bodies, d_h)))
    x, h = np.stack(xs), np.stack(hs)
    for t in range(schedule.T, t_pre, -1):
        ex, eh = _predict_np(net, x, h, t, schedule)
        mx, mh = _reverse_mean_np(x, h, ex, eh, t, schedule)
        sigma = schedule.posterior_sigma(t)
        if sigma == 0.0:
            x, h = mx, mh
        else:
            nx, nh = [], []
            for r in prefix_rngs:
                nx.append(center_positions(r.standard_normal((n_bodies, 3))))
                nh.append(r.standard_normal((n_bodies, d_h)))
            x = mx + sigma * np.stack(nx)
            h = mh + sigma * np.stack(nh)
        x = _center_batch(x)
    prefix_x, prefix_h = x.copy(), h.copy()

    branch_rngs = [stream_fn(g, k) for g in range(n_g) for k in range(k_b)]
    group_index = np.repeat(np.arange(n_g), k_b)
    branch_index = np.tile(np.arange(k_b), n_g)
    x = np.repeat(prefix_x, k_b, axis=0)
    h = np.repeat(prefix_h, k_b, axis=0)
    transitions: list[Transition] = []
    for t in range(t_pre, 0, -1):
        ex, eh = _predict_np(net, x, h, t, schedule)
        mx, mh = _reverse_mean_np(x, h, ex, eh, t, schedule)
        sigma = schedule.posterior_sigma(t)
        if sigma == 0.0:
            sx, sh = _center_batch(mx), mh.copy()
            log_density = None
        else:
            nx, nh = [], []
            for r in branch_rngs:
                nx.append(center_positions(r.standard_normal((n_bodies, 3))))
                nh.append(r.standard_normal((n_bodies, d_h)))
            sx = _center_batch(mx + sigma * np.stack(nx))
            sh = mh + sigma * np.stack(nh)
            dsq = ((sx - mx) ** 2).sum(axis=(1, 2)) + ((sh - mh) ** 2).sum(axis=(1, 2))
            dim = subspace_dim(n_bodies, d_h)
            log_density = np.array(
                [gaussian_log_density(float(d), dim, sigma) for d in dsq])
        transitions.append(Transition(
            t, sigma, x.copy(), h.copy(), ex, eh, mx, mh, sx.copy(), sh.copy(),
            log_density))
        x, h = sx, sh
    return RolloutBatch(schedule, t_pre, n_g, k_b, group_index, branch_index,
                        prefix_x, prefix_h, transitions, x.copy(), h.copy(), net)


# ---------------------------------------------------------------------------
# Rewards and advantages


@dataclass
class RewardTable:
    """Per-rollout reward pieces for one iteration.

    ``psi[:, t]`` is the shaping potential at step t (column 0 is the
    terminal state); ``energy_returns[:, t-1]`` is the shaped return for
    step t. ``force_return`` is the terminal force reward broadcast to
    every step by the advantage computation.
    """

    psi: np.ndarray
    energy_returns: np.ndarray
    force_return: np.ndarray
    energies: np.ndarray
    force_rms: np.ndarray
    property_return: np.ndarray | None = None
    psi_force: np.ndarray | None = None

    def bundle(self, k: int) -> RewardBundle:
        """Single-rollout view of row k."""
        return RewardBundle(self.psi[k].copy(), self.energy_returns[k].copy(),
                            float(self.force_return[k]), float(self.energies[k]))


def _clip_forces_batch(forces: np.ndarray, threshold: float) -> np.ndarray:
    norms = np.sqrt((forces * forces).sum(axis=-1))
    factor = np.minimum(1.0, threshold / np.maximum(norms, 1e-300))
    return forces * factor[..., None]


def compute_rewards(batch: RolloutBatch, oracle, rcfg: RewardConfig) -> RewardTable:
    """Score a rollout batch against the energy oracle.

    Potentials at t > 0 reuse the noise predictions cached during rollout,
    so psi here equals shaping_potential on the stored states without
    another pass through the network.
    """
    sched = batch.schedule
    b = batch.n_rollouts
    t_pre = batch.t_prefix
    n = batch.final_positions.shape[1]
    psi = np.empty((b, t_pre + 1))
    psi_force = np.empty((b, t_pre + 1)) if rcfg.use_force_shaping else None

    e0, f0 = oracle.evaluate_batch(batch.final_positions)
    psi[:, 0] = -np.clip(e0, -rcfg.energy_clip, rcfg.energy_clip)
    fc = _clip_forces_batch(f0, rcfg.force_clip)
    rms_sq = (fc * fc).sum(axis=(1, 2)) / n
    force_return = -rms_sq
    if psi_force is not None:
        psi_force[:, 0] = force_return

    for tr in batch.transitions:
        alpha = sched.alpha[tr.t]
        if alpha < 1e-6:
            raise NearPriorError(
                f"cannot denoise at step {tr.t}: signal level {alpha} too small")
        zhat = (tr.state_positions - sched.sigma_bar[tr.t] * tr.eps_positions) / alpha
        et, ft = oracle.evaluate_batch(zhat)
        psi[:, tr.t] = -np.clip(et, -rcfg.energy_clip, rcfg.energy_clip)
        if psi_force is not None:
            fct = _clip_forces_batch(ft, rcfg.force_clip)
            psi_force[:, tr.t] = -(fct * fct).sum(axis=(1, 2)) / n

    steps = np.arange(1, t_pre + 1)
    energy_returns = rcfg.gamma ** steps * psi[:, :1] - psi[:, 1:]
    if psi_force is not None:
        energy_returns = energy_returns + (
            rcfg.gamma ** steps * psi_force[:, :1] - psi_force[:, 1:])

    property_return = None
    if rcfg.property_enabled:
        centred = batch.final_positions - batch.final_positions.mean(axis=1, keepdims=True)
        rg = np.sqrt((centred * centred).sum(axis=(1, 2)) / n)
        property_return = -np.abs(rg - rcfg.property_target)

    force_norms = np.sqrt((f0 * f0).sum(axis=(1, 2)) / n)
    return RewardTable(psi, energy_returns, force_return, e0, force_norms,
                       property_return, psi_force)


@dataclass
class AdvantageTable:
    """Clipped per-step advantages plus the channel z-scores behind them."""

    advantages: np.ndarray
    energy_z: np.ndarray
    force_z: np.ndarray
    property_z: np.ndarray | None = None


def _zscore(values: np.ndarray, eta: float, axis=0) -> np.ndarray:
    m = values.mean(axis=axis, keepdims=True)
    s = values.std(axis=axis, keepdims=True)
    return (values - m) / (s + eta)


def normalize_advantages(table: RewardTable, cfg: TrainerConfig,
                         group_index: np.ndarray,
                         property_weight: float = 0.0) -> AdvantageTable:
    """Blend z-scored reward channels into clipped per-step advantages.

    Energy returns are normalized per step across the branches of each
    group; the terminal force reward is normalized once across the same
    branches and broadcast over steps. Branches share a prefix only
    within their group, so statistics stay group-local unless
    ``pool_groups`` widens them to the whole population. Standard
    deviations are population style with a small floor.
    """
    g_ret = table.energy_returns
    b = g_ret.shape[0]
    energy_z = np.empty_like(g_ret)
    force_z = np.empty_like(table.force_return)
    property_z = None
    if table.property_return is not None and property_weight != 0.0:
        property_z = np.empty_like(table.property_return)
    if cfg.pool_groups:
        blocks = [np.arange(b)]
    else:
        blocks = [np.nonzero(group_index == g)[0] for g in range(cfg.n_groups)]
    for rows in blocks:
        if rows.size < 2:
            raise ContractViolation("group z-scores need at least two branches")
        energy_z[rows] = _zscore(g_ret[rows], cfg.eta, axis=0)
        force_z[rows] = _zscore(table.force_return[rows], cfg.eta, axis=0)
        if property_z is not None:
            property_z[rows] = _zscore(table.property_return[rows], cfg.eta, axis=0)
    adv = cfg.w_energy * energy_z + cfg.w_force * force_z[:, None]
    if property_z is not None:
        adv = adv + property_weight * property_z[:, None]
    adv = np.clip(adv, -cfg.adv_clip, cfg.adv_clip)
    return AdvantageTable(adv, energy_z, force_z, property_z)


# ---------------------------------------------------------------------------
# Objective


def log_ratio(sample_positions, sample_features, mean_new, mean_old, sigma):
    """Log density ratio of one reverse step under two means.

    ``mean_new`` and ``mean_old`` are (positions, features) pairs; the
    shared normalization cancels, leaving the quadratic difference.
    """
    if sigma <= 0.0:
        raise ContractViolation("degenerate step has no density ratio")
    nx, nh = mean_new
    ox, oh = mean_old
    dn = ((sample_positions - nx) ** 2).sum() + ((sample_features - nh) ** 2).sum()
    do = ((sample_positions - ox) ** 2).sum() + ((sample_features - oh) ** 2).sum()
    return float((do - dn) / (2.0 * sigma * sigma))


def _row_sq_norm(t: Tensor, rows: int) -> Tensor:
    flat = ad.reshape(t, (rows, -1))
    return ad.tensor_sum(ad.square(flat), axis=1)


def clipped_objective(net: ScoreNetwork, batch: RolloutBatch,
                      advantages: AdvantageTable, cfg: TrainerConfig,
                      rows: np.ndarray | None = None,
                      mu_old: dict[int, tuple[np.ndarray, np.ndarray]] | None = None,
                      mu_pre: dict[int, tuple[np.ndarray, np.ndarray]] | None = None,
                      ) -> tuple[Tensor, dict]:
    """Clipped surrogate loss for the cached rollouts (negated objective).

    Per sampled step, the probability ratio of the stored sample under the
    current vs the behavior policy multiplies the advantage, clipped at
    1 +- clip_range; the objective is the mean over rollouts of the per-step
    sums. A KL penalty toward the pretrained reference means (``mu_pre``)
    is added when configured. ``rows`` restricts to a micro-batch of
    rollouts; ``mu_old`` overrides the stored behavior means (needed when a
    row subset changes the batch layout of the forward pass).
    """
    if rows is None:
        rows = np.arange(batch.n_rollouts)
    rows = np.asarray(rows)
    n_rows = rows.size
    if n_rows == 0:
        raise ContractViolation("empty micro-batch")
    if cfg.kl_weight > 0 and mu_pre is None:
        raise ContractViolation("KL penalty requires reference means")
    sched = batch.schedule
    obj_terms = []
    kl_terms = []
    clip_hits = 0
    ratio_count = 0
    active_steps = 0
    for tr in batch.transitions:
        if tr.sigma == 0.0:
            continue
        active_steps += 1
        t = tr.t
        st_x = tr.state_positions[rows]
        st_h = tr.state_features[rows]
        tfrac = np.full(n_rows, t / sched.steps)
        ex, eh = net.noise_prediction(st_x, st_h, tfrac)
        a_step = sched.step_scale(t)
        coef = sched.step_noise2(t) / sched.sigma_bar[t]
        mx = (Tensor(st_x) - ex * coef) / a_step
        mh = (Tensor(st_h) - eh * coef) / a_step
        if mu_old is None:
            old_x, old_h = tr.mean_positions[rows], tr.mean_features[rows]
        else:
            old_x, old_h = mu_old[t]
        sx, sh = tr.sample_positions[rows], tr.sample_features[rows]
        dn = _row_sq_norm(Tensor(sx) - mx, n_rows) + _row_sq_norm(Tensor(sh) - mh, n_rows)
        # same reduction recipe as dn so that identical means give do == dn bitwise
        do = (((sx - old_x) ** 2).reshape(n_rows, -1).sum(axis=1)
              + ((sh - old_h) ** 2).reshape(n_rows, -1).sum(axis=1))
        log_xi = (Tensor(do) - dn) / (2.0 * tr.sigma * tr.sigma)
        xi = ad.exp(log_xi)
        adv_col = advantages.advantages[rows, t - 1]
        plain = xi * adv_col
        clipped = ad.clip(xi, 1.0 - cfg.clip_range, 1.0 + cfg.clip_range) * adv_col
        obj_terms.append(ad.tensor_sum(ad.minimum(plain, clipped)))
        raw_xi = xi.data
        clip_hits += int(((raw_xi < 1.0 - cfg.clip_range)
                          | (raw_xi > 1.0 + cfg.clip_range)).sum())
        ratio_count += n_rows
        if cfg.kl_weight > 0:
            pre_x, pre_h = mu_pre[t]
            dx = _row_sq_norm(mx - pre_x, n_rows) + _row_sq_norm(mh - pre_h, n_rows)
            kl_terms.append(ad.tensor_sum(dx) / (2.0 * tr.sigma * tr.sigma))
    if not obj_terms:
        raise ContractViolation("no stochastic steps to optimize")
    objective = obj_terms[0]
    for term in obj_terms[1:]:
        objective = objective + term
    objective = objective / float(n_rows)
    loss = -objective
    kl_val = 0.0
    if kl_terms:
        kl_hat = kl_terms[0]
        for term in kl_terms[1:]:
            kl_hat = kl_hat + term
        kl_hat = kl_hat / float(n_rows * active_steps)
        loss = loss + cfg.kl_weight * kl_hat
        kl_val = float(kl_hat.data)
    stats = {
        "objective": float(objective.data),
        "kl_hat": kl_val,
        "clip_frac": clip_hits / max(ratio_count, 1),
    }
    return loss, stats


def _reference_means(net: ScoreNetwork, batch: RolloutBatch,
                     rows: np.ndarray | None = None
                     ) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Reverse means of ``net`` on the stored states (no tape)."""
    out = {}
    for tr in batch.transitions:
        if tr.sigma == 0.0:
            continue
        if rows is None:
            st_x, st_h = tr.state_positions, tr.state_features
        else:
            st_x, st_h = tr.state_positions[rows], tr.state_features[rows]
        ex, eh = _predict_np(net, st_x, st_h, tr.t, batch.schedule)
        out[tr.t] = _reverse_mean_np(st_x, st_h, ex, eh, tr.t, batch.schedule)
    return out


def _micro_batches(n_rollouts: int, size: int):
    if size <= 0 or size >= n_rollouts:
        yield None
        return
    for lo in range(0, n_rollouts, size):
        yield np.arange(lo, min(lo + size, n_rollouts))


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    metrics: list[dict]
    status: str
    failed_iteration: int | None = None


def train(net: ScoreNetwork, oracle, schedule: NoiseSchedule, n_bodies: int,
          cfg: TrainerConfig, rcfg: RewardConfig, log_fn=None,
          net_pre: ScoreNetwork | None = None) -> TrainResult:
    """Run the full post-training loop, mutating ``net`` in place.

    Per iteration: freeze a behavior snapshot, roll out, score, normalize,
    then take one or more clipped-surrogate gradient steps (micro-batched
    when configured). ``net_pre`` is the KL trust-region reference and
    defaults to a frozen copy of the starting parameters. A numeric
    failure rolls the parameters back to the last completed iteration and
    returns with status "numeric_failure".
    """
    if cfg.t_prefix > schedule.T:
        raise ContractViolation("branch point beyond schedule length")
    if net_pre is None:
        net_pre = net.copy()
    opt = RmsProp(net.params, eps=cfg.optimizer_eps)
    global_step = 0
    metrics: list[dict] = []
    for it in range(cfg.iterations):
        backup = net.param_arrays()
        try:
            net_old = net.copy()
            batch = rollout_groups(net_old, n_bodies, schedule, cfg)
            table = compute_rewards(batch, oracle, rcfg)
            adv = normalize_advantages(table, cfg, batch.group_index,
                                       rcfg.property_weight)
            mu_pre_full = (_reference_means(net_pre, batch)
                           if cfg.kl_weight > 0 else None)
            kl_sum = clip_sum = 0.0
            n_steps_here = 0
            lr = 0.0
            for _ in range(cfg.epochs_per_rollout):
                for rows in _micro_batches(batch.n_rollouts, cfg.micro_batch):
                    if rows is None:
                        mu_old = None
                        mu_pre = mu_pre_full
                    else:
                        mu_old = _reference_means(net_old, batch, rows)
                        mu_pre = None
                        if mu_pre_full is not None:
                            mu_pre = {t: (mx[rows], mh[rows])
                                      for t, (mx, mh) in mu_pre_full.items()}
                    with Tape() as tape:
                        loss, stats = clipped_objective(
                            net, batch, adv, cfg, rows, mu_old, mu_pre)
                    grads = tape.gradients(loss, net.params)
                    grads, _ = clip_global_norm(grads, cfg.max_grad_norm)
                    lr = cosine_warmup(global_step, cfg.learning_rate,
                                       cfg.warmup_steps, cfg.total_steps,
                                       cfg.min_lr_ratio)
                    opt.step(grads, lr)
                    global_step += 1
                    kl_sum += stats["kl_hat"]
                    clip_sum += stats["clip_frac"]
                    n_steps_here += 1
        except NumericFailure as exc:
            net.load_param_arrays(backup)
            row = {"iter": it, "error": str(exc)}
            metrics.append(row)
            if log_fn is not None:
                log_fn(row)
            return TrainResult(metrics, "numeric_failure", it)
        row = {
            "iter": it,
            "mean_E": float(table.energies.mean()),
            "mean_Frms": float(table.force_rms.mean()),
            "mean_absA": float(np.abs(adv.advantages).mean()),
            "kl_hat": kl_sum / max(n_steps_here, 1),
            "clip_frac": clip_sum / max(n_steps_here, 1),
            "lr": lr,
        }
        metrics.append(row)
        if log_fn is not None:
            log_fn(row)
    return TrainResult(metrics, "ok", None)
