"""Numerical verification of the alignment theory.

Three results are checked, each by two independent routes:

* the KL-regularized objective over densities is maximized by an
  exponential tilt of the prior (closed form vs a projected-gradient
  ascent oracle on the probability simplex);
* replacing the true energy by a surrogate within uniform error delta
  moves the tilted density by at most tanh(beta * delta) in total
  variation, with a two-point instance attaining the generic
  likelihood-ratio bound exactly;
* the post-trained score field should point along the oracle forces of
  the denoised estimate (alchemical force direction study), and the
  terminal sample distribution should look like a Gibbs tilt of the
  pretrained one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .diffusion import NoiseSchedule, ScoreNetwork, sample_many, score_forward
from .errors import (ContractViolation, DegenerateTiltError,
                     StatisticalPowerError, UndefinedCosineError)
from .nbody import Configuration
from .rng import stream

__all__ = [
    "GridDensity", "gibbs_tilt", "variational_tilt", "tv_distance",
    "TiltReport", "verify_tv_bound", "LemmaReport", "lr_lemma_check",
    "alchemical_force", "cosine_alignment", "alignment_study",
    "TiltFitReport", "terminal_tilt_check",
]


@dataclass(frozen=True)
class GridDensity:
    """Probability masses over a fixed grid of support points."""

    support: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        support = np.asarray(self.support, dtype=np.float64)
        mass = np.asarray(self.mass, dtype=np.float64)
        if mass.ndim != 1 or support.shape[0] != mass.shape[0]:
            raise ContractViolation("support and mass must share their first dimension")
        if mass.size == 0:
            raise ContractViolation("empty grid")
        if not np.all(np.isfinite(mass)) or np.any(mass < 0):
            raise ContractViolation("masses must be finite and nonnegative")
        if abs(mass.sum() - 1.0) > 1e-12:
            raise ContractViolation(f"masses sum to {mass.sum()!r}, not 1")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "mass", mass)

    @staticmethod
    def from_weights(support, weights) -> "GridDensity":
        weights = np.asarray(weights, dtype=np.float64)
        total = weights.sum()
        if not np.isfinite(total) or total <= 0:
            raise DegenerateTiltError("weights are not normalizable")
        return GridDensity(support, weights / total)


def _check_same_grid(p: GridDensity, q: GridDensity) -> None:
    if not np.array_equal(p.support, q.support):
        raise ContractViolation("densities live on different grids")


def tv_distance(p: GridDensity, q: GridDensity) -> float:
    """Total variation distance, 0.5 * l1 on a shared grid."""
    _check_same_grid(p, q)
    return 0.5 * float(np.abs(p.mass - q.mass).sum())


def gibbs_tilt(prior: GridDensity, energies: np.ndarray, beta: float) -> GridDensity:
    """Exponentially tilt a grid density: mass_i proportional to
    prior_i * exp(-beta * E_i), computed in log space."""
    energies = np.asarray(energies, dtype=np.float64)
    if energies.shape != prior.mass.shape:
        raise ContractViolation("need one energy per grid cell")
    if not np.all(np.isfinite(energies)) or not np.isfinite(beta):
        raise ContractViolation("energies and beta must be finite")
    if beta == 0.0:
        return GridDensity(prior.support, prior.mass.copy())
    positive = prior.mass > 0
    with np.errstate(divide="ignore"):
        log_mass = np.where(positive, np.log(np.where(positive, prior.mass, 1.0)), -np.inf)
    log_mass = log_mass - beta * energies
    log_mass[~positive] = -np.inf
    peak = log_mass.max()
    if not np.isfinite(peak):
        raise DegenerateTiltError("tilt has no mass anywhere")
    weights = np.exp(log_mass - peak)
    return GridDensity(prior.support, weights / weights.sum())


def _project_simplex(v: np.ndarray) -> np.ndarray:
    # Euclidean projection onto the probability simplex (sort-based).
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u + (1.0 - css) / idx > 0)[0][-1] + 1
    tau = (1.0 - css[rho - 1]) / rho
    return np.maximum(v + tau, 0.0)


def variational_tilt(prior: GridDensity, energies: np.ndarray, kl_weight: float,
                     max_iters: int = 100000, tol: float = 1e-14) -> GridDensity:
    """Maximize E_rho[-E] - kl_weight * KL(rho || prior) directly.

    Projected gradient ascent on the simplex with backtracking; this is
    the slow independent route against which the closed-form tilt is
    checked. Cells with zero prior mass are pinned to zero (their KL cost
    is infinite). Convergence is declared at a fixed point of the
    projected step, which by concavity is the global maximizer.
    """
    energies = np.asarray(energies, dtype=np.float64)
    if energies.shape != prior.mass.shape:
        raise ContractViolation("need one energy per grid cell")
    if kl_weight <= 0:
        raise ContractViolation("kl_weight must be positive")
    active = prior.mass > 0
    if not active.any():
        raise DegenerateTiltError("prior carries no mass")
    p_act = prior.mass[active]
    e_act = energies[active]
    rho = p_act.copy()

    def objective(r: np.ndarray) -> float:
        nz = r > 0
        kl = float((r[nz] * np.log(r[nz] / p_act[nz])).sum())
        return float(-(r * e_act).sum()) - kl_weight * kl

    j_cur = objective(rho)
    eta = 1.0 / (np.abs(e_act).max() + kl_weight + 1.0)
    for _ in range(max_iters):
        safe = np.maximum(rho, 1e-300)
        grad = -e_act - kl_weight * (np.log(safe / p_act) + 1.0)
        accepted = False
        for _ in range(80):
            cand = _project_simplex(rho + eta * grad)
            j_new = objective(cand)
            if j_new >= j_cur:
                accepted = True
                break
            eta *= 0.5
        if not accepted:
            break
        move = float(np.abs(cand - rho).sum())
        rho, j_cur = cand, j_new
        eta *= 1.25
        if move < tol:
            break
    mass = np.zeros_like(prior.mass)
    mass[active] = rho
    return GridDensity(prior.support, mass / mass.sum())


@dataclass(frozen=True)
class TiltReport:
    """Surrogate-vs-exact tilt comparison against the tanh bound."""

    beta: float
    delta: float
    tv: float
    bound: float
    holds: bool
    tightness: float


def verify_tv_bound(prior: GridDensity, exact_energies: np.ndarray,
                    surrogate_energies: np.ndarray, beta: float) -> TiltReport:
    """Tilt the prior with exact and surrogate energies and compare the
    measured TV against tanh(|beta| * sup-error)."""
    exact_energies = np.asarray(exact_energies, dtype=np.float64)
    surrogate_energies = np.asarray(surrogate_energies, dtype=np.float64)
    if exact_energies.shape != surrogate_energies.shape:
        raise ContractViolation("energy tables must have matching shapes")
    delta = float(np.abs(surrogate_energies - exact_energies).max())
    rho_exact = gibbs_tilt(prior, exact_energies, beta)
    rho_surr = gibbs_tilt(prior, surrogate_energies, beta)
    tv = tv_distance(rho_exact, rho_surr)
    bound = math.tanh(abs(beta) * delta)
    holds = tv <= bound + 1e-12
    if bound > 0:
        tightness = tv / bound
    else:
        tightness = 1.0 if tv == 0.0 else math.inf
    return TiltReport(beta, delta, tv, bound, holds, tightness)


@dataclass(frozen=True)
class LemmaReport:
    """Two-point extremal instance of the likelihood-ratio TV bound."""

    epsilon: float
    tv: float
    bound: float
    gap: float
    holds: bool


def lr_lemma_check(epsilon: float) -> LemmaReport:
    """Check tightness of TV <= tanh(eps/2) for log-ratio-bounded pairs.

    The extremal pair swaps masses q and 1-q with q = 1/(e^eps + 1); its
    log likelihood ratio is exactly +-eps and its TV is exactly
    tanh(eps/2), so the measured gap is pure floating-point error.
    """
    if not epsilon >= 0:
        raise ContractViolation("epsilon must be nonnegative")
    q = 1.0 / (math.exp(epsilon) + 1.0)
    p = np.array([1.0 - q, q])
    r = np.array([q, 1.0 - q])
    support = np.array([0.0, 1.0])
    tv = tv_distance(GridDensity(support, p / p.sum()),
                     GridDensity(support, r / r.sum()))
    bound = math.tanh(epsilon / 2.0)
    gap = abs(tv - bound)
    return LemmaReport(epsilon, tv, bound, gap, gap <= 1e-12 and tv <= bound + 1e-12)


# ---------------------------------------------------------------------------
# Score-field alignment


def _check_compatible(net_a: ScoreNetwork, net_b: ScoreNetwork) -> None:
    same = (net_a.n_layers == net_b.n_layers and net_a.hidden == net_b.hidden
            and net_a.d_h == net_b.d_h
            and net_a.schedule.steps == net_b.schedule.steps)
    if not same:
        raise ContractViolation("networks must share architecture and schedule")


def alchemical_force(net_post: ScoreNetwork, net_pre: ScoreNetwork,
                     z_t: Configuration, t: int) -> np.ndarray:
    """Difference of coordinate score fields, post minus pre, at z_t.

    Both scores are translation-free by construction; the explicit mean
    subtraction keeps the difference exactly CoM-free against rounding.
    """
    _check_compatible(net_post, net_pre)
    s_post, _ = score_forward(net_post, z_t, t)
    s_pre, _ = score_forward(net_pre, z_t, t)
    diff = s_post - s_pre
    return diff - diff.mean(axis=0)


def cosine_alignment(field_a: np.ndarray, field_b: np.ndarray) -> float:
    """Cosine between two flattened force fields; zero fields are undefined."""
    a = np.asarray(field_a, dtype=np.float64).ravel()
    b = np.asarray(field_b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ContractViolation("fields must have matching shapes")
    na = float(np.sqrt((a * a).sum()))
    nb = float(np.sqrt((b * b).sum()))
    if na == 0.0 or nb == 0.0:
        raise UndefinedCosineError("cosine with a zero field is undefined")
    return float((a * b).sum() / (na * nb))


def alignment_study(net_post: ScoreNetwork, net_pre: ScoreNetwork, oracle,
                    schedule: NoiseSchedule, n_bodies: int, n_states: int,
                    seed: int, t_values: list[int] | None = None
                    ) -> tuple[np.ndarray, np.ndarray, int]:
    """Cosine between the score change (post minus pre) and the oracle
    force at the denoised estimate, over states drawn from the post net.

    Returns (step index per state, cosine per state, skipped count) where
    skipped counts states whose cosine was undefined.
    """
    _check_compatible(net_post, net_pre)
    if n_states < 1:
        raise ContractViolation("need at least one state")
    if t_values is None:
        # stay in the low-noise window: the drift correspondence behind
        # this diagnostic is a small-step local statement, and the clean
        # estimate feeding the oracle degrades quickly at higher noise
        hi = max(2, schedule.T // 10)
        t_values = sorted(set(np.linspace(1, hi, num=min(6, hi)).astype(int).tolist()))
    if any(not 1 <= t <= schedule.T for t in t_values):
        raise ContractViolation("alignment steps must lie in 1..T")
    n_traj = -(-n_states // len(t_values))
    rngs = [stream(seed, "align", i) for i in range(n_traj)]
    _, _, recorded = sample_many(net_post, n_bodies, schedule, rngs,
                                 record_steps=list(t_values))
    ts, cosines, skipped = [], [], 0
    for t in t_values:
        x, h = recorded[t]
        tfrac = np.full(x.shape[0], t / schedule.steps)
        ex_post, _ = net_post.noise_prediction(x, h, tfrac)
        ex_pre, _ = net_pre.noise_prediction(x, h, tfrac)
        sbar = schedule.sigma_bar[t]
        alpha = schedule.alpha[t]
        f_alc = -(ex_post.data - ex_pre.data) / sbar
        zhat = (x - sbar * ex_post.data) / alpha
        _, f_phi = oracle.evaluate_batch(zhat)
        for i in range(x.shape[0]):
            try:
                c = cosine_alignment(f_alc[i], f_phi[i])
            except UndefinedCosineError:
                skipped += 1
                continue
            ts.append(t)
            cosines.append(c)
    return np.array(ts), np.array(cosines), skipped


# ---------------------------------------------------------------------------
# Terminal distribution tilt


@dataclass(frozen=True)
class TiltFitReport:
    """Best Gibbs-tilt explanation of the post-training sample shift."""

    beta_fit: float
    residual_tv: float
    raw_tv: float
    bin_edges: np.ndarray
    bin_energies: np.ndarray
    pre_mass: np.ndarray
    post_mass: np.ndarray
    tilt_mass: np.ndarray
    binning_bound: float
    n_samples: int


def _pair_distances(net: ScoreNetwork, schedule: NoiseSchedule, label: str,
                    n_samples: int, seed: int) -> np.ndarray:
    rngs = [stream(seed, "tilt", label, i) for i in range(n_samples)]
    x, _, _ = sample_many(net, 2, schedule, rngs)
    return np.sqrt(((x[:, 0] - x[:, 1]) ** 2).sum(axis=1))


def terminal_tilt_check(net_pre: ScoreNetwork, net_post: ScoreNetwork, oracle,
                        schedule: NoiseSchedule, n_samples: int = 2000,
                        seed: int = 0, n_bins: int = 24,
                        beta_max: float = 50.0,
                        beta_eff: float | None = None) -> TiltFitReport:
    """Fit the post-training pair-distance histogram as a Gibbs tilt of
    the pretrained one (two-body systems).

    Both nets generate n_samples configurations; pair distances are
    histogrammed on shared bins, bin energies come from the oracle on a
    canonical two-body placement, and beta is fit by minimizing the TV
    between the tilted pre histogram and the post histogram. The fit
    scans both signs so a wrong-direction shift is detectable; passing
    the trainer's effective inverse temperature as ``beta_eff`` widens
    the scan to cover it comfortably.
    """
    _check_compatible(net_pre, net_post)
    if beta_eff is not None:
        beta_max = max(beta_max, 4.0 * abs(beta_eff))
    if n_samples < 1000:
        raise StatisticalPowerError(
            f"need at least 1000 samples for a stable histogram fit, got {n_samples}")
    if n_bins < 4:
        raise ContractViolation("need at least four bins")
    d_pre = _pair_distances(net_pre, schedule, "pre", n_samples, seed)
    d_post = _pair_distances(net_post, schedule, "post", n_samples, seed)
    lo = min(d_pre.min(), d_post.min()) - 1e-9
    hi = max(d_pre.max(), d_post.max()) + 1e-9
    edges = np.linspace(lo, hi, n_bins + 1)
    pre_counts, _ = np.histogram(d_pre, bins=edges)
    post_counts, _ = np.histogram(d_post, bins=edges)
    centers = 0.5 * (edges[:-1] + edges[1:])
    pre = GridDensity.from_weights(centers, pre_counts.astype(np.float64))
    post = GridDensity.from_weights(centers, post_counts.astype(np.float64))

    d_h = net_pre.d_h
    def energy_at(distances: np.ndarray) -> np.ndarray:
        half = distances / 2.0
        pos = np.zeros((distances.size, 2, 3))
        pos[:, 0, 0] = -half
        pos[:, 1, 0] = half
        energies, _ = oracle.evaluate_batch(pos)
        return energies

    bin_energies = energy_at(centers)
    edge_energies = energy_at(edges)
    raw_tv = tv_distance(pre, post)

    def residual(beta: float) -> float:
        return tv_distance(gibbs_tilt(pre, bin_energies, beta), post)

    grid = np.linspace(-beta_max, beta_max, 401)
    values = np.array([residual(b) for b in grid])
    best = int(values.argmin())
    lo_b = grid[max(best - 1, 0)]
    hi_b = grid[min(best + 1, grid.size - 1)]
    refined = minimize_scalar(residual, bounds=(lo_b, hi_b), method="bounded",
                              options={"xatol": 1e-10})
    beta_fit = float(refined.x)
    residual_tv = float(residual(beta_fit))
    if values[best] < residual_tv:
        beta_fit = float(grid[best])
        residual_tv = float(values[best])
    span = float(np.abs(np.diff(edge_energies)).max())
    binning_bound = math.tanh(abs(beta_fit) * span / 2.0)
    return TiltFitReport(beta_fit, residual_tv, raw_tv, edges, bin_energies,
                         pre.mass, post.mass,
                         gibbs_tilt(pre, bin_energies, beta_fit).mass,
                         binning_bound, n_samples)
