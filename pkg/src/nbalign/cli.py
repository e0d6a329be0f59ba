"""Command-line entry points.

Subcommands cover the full experiment cycle: ``pretrain`` fits the
denoiser, ``posttrain`` runs policy optimization against the energy
oracle, ``eval`` scores samples from a checkpoint, ``verify-theory``
runs the numerical theorem suites, and ``report`` merges the CSV
artifacts of a run directory into one markdown summary.

Exit codes: 0 success, 2 configuration problems, 3 numeric failures,
4 a theory check failed. All outputs are plain CSV/text and depend only
on the config and seed, so a rerun reproduces them byte for byte.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import config as cfgmod
from . import theory
from .diffusion import (load_checkpoint, near_minimum_generator, pretrain,
                        sample_many, save_checkpoint)
from .errors import (ConfigError, ContractViolation, NumericFailure,
                     TheoryViolation)
from .grpo import train
from .nbody import Configuration, save_configuration
from .rng import stream

__all__ = ["main"]


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: str, header: list[str], rows: list) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _prepare_out(args) -> str:
    out = args.out
    os.makedirs(out, exist_ok=True)
    return out


def _effective_values(args) -> tuple[dict, int]:
    values = cfgmod.load_config(args.config)
    seed = args.seed if args.seed is not None else int(values["seed"])
    values = dict(values)
    values["seed"] = seed
    return values, seed


def _dump_effective(values: dict, out: str) -> None:
    with open(os.path.join(out, "config.effective.cfg"), "w", encoding="utf-8") as fh:
        fh.write(cfgmod.serialize_config(values))


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_pretrain(args) -> int:
    values, seed = _effective_values(args)
    out = _prepare_out(args)
    schedule = cfgmod.build_schedule(values)
    net = cfgmod.build_network(values, schedule, seed)
    oracle = cfgmod.build_oracle(values)
    n_bodies = int(values["system.n_bodies"])
    if n_bodies < 1:
        raise ConfigError("need at least one body", key="system.n_bodies")
    generator = near_minimum_generator(
        oracle, n_bodies, int(values["system.feature_dim"]),
        float(values["pretrain.jitter"]))
    losses = pretrain(net, generator, int(values["pretrain.steps"]),
                      int(values["pretrain.batch_size"]),
                      float(values["pretrain.learning_rate"]),
                      stream(seed, "pretrain"),
                      final_lr_ratio=float(values["pretrain.final_lr_ratio"]))
    _dump_effective(values, out)
    _write_csv(os.path.join(out, "pretrain_loss.csv"), ["step", "loss"],
               [(i, v) for i, v in enumerate(losses)])
    save_checkpoint(os.path.join(out, "pretrained.ckpt"), net,
                    iteration=0, root_seed=seed)
    print(f"pretrained {len(losses)} steps, final loss "
          f"{losses[-1] if losses else float('nan'):.6g}")
    return 0


_METRIC_COLUMNS = ["iter", "mean_E", "mean_Frms", "mean_absA",
                   "kl_hat", "clip_frac", "lr"]


def _cmd_posttrain(args) -> int:
    if not args.checkpoint:
        raise ConfigError("posttrain requires --checkpoint with a pretrained model")
    values, seed = _effective_values(args)
    out = _prepare_out(args)
    net, schedule, _ = load_checkpoint(args.checkpoint)
    if schedule.steps != int(values["diffusion.steps"]):
        raise ConfigError(
            f"checkpoint was built with {schedule.steps} diffusion steps but the "
            f"config says {values['diffusion.steps']}", key="diffusion.steps")
    oracle = cfgmod.build_oracle(values)
    trainer_cfg = cfgmod.build_trainer_config(values, seed)
    reward_cfg = cfgmod.build_reward_config(values)
    n_bodies = int(values["system.n_bodies"])
    result = train(net, oracle, schedule, n_bodies, trainer_cfg, reward_cfg)
    _dump_effective(values, out)
    rows = [[m[c] for c in _METRIC_COLUMNS] for m in result.metrics if "error" not in m]
    _write_csv(os.path.join(out, "metrics.csv"), _METRIC_COLUMNS, rows)
    save_checkpoint(os.path.join(out, "posttrained.ckpt"), net,
                    iteration=len(rows), root_seed=seed)
    if result.status != "ok":
        failed = result.metrics[-1]
        print(f"training aborted at iteration {result.failed_iteration}: "
              f"{failed.get('error', 'numeric failure')}", file=sys.stderr)
        raise NumericFailure(failed.get("error", "training failed"))
    last = result.metrics[-1] if result.metrics else {}
    print(f"post-trained {len(rows)} iterations"
          + (f", final mean energy {last['mean_E']:.6g}" if last else ""))
    return 0


def _cmd_eval(args) -> int:
    if not args.checkpoint:
        raise ConfigError("eval requires --checkpoint")
    values, seed = _effective_values(args)
    out = _prepare_out(args)
    net, schedule, _ = load_checkpoint(args.checkpoint)
    oracle = cfgmod.build_oracle(values)
    n_bodies = int(values["system.n_bodies"])
    n_samples = args.samples if args.samples is not None else int(values["eval.samples"])
    if n_samples < 1:
        raise ConfigError("need at least one sample", key="eval.samples")
    step = float(values["eval.quantile_step"])
    if not 0.0 < step <= 0.5:
        raise ConfigError("quantile step must be in (0, 0.5]", key="eval.quantile_step")
    rngs = [stream(seed, "eval", i) for i in range(n_samples)]
    x, h, _ = sample_many(net, n_bodies, schedule, rngs)
    energies, forces = oracle.evaluate_batch(x)
    rms = np.sqrt((forces * forces).sum(axis=(1, 2)) / n_bodies)
    _dump_effective(values, out)
    _write_csv(os.path.join(out, "eval_samples.csv"),
               ["sample", "energy", "rms_force"],
               [(i, energies[i], rms[i]) for i in range(n_samples)])
    levels = np.arange(step, 1.0 - step / 2, step)
    rows = [["count", n_samples, n_samples],
            ["mean", float(energies.mean()), float(rms.mean())],
            ["median", float(np.median(energies)), float(np.median(rms))]]
    for q in levels:
        rows.append([f"q{int(round(q * 100)):02d}",
                     float(np.quantile(energies, q)),
                     float(np.quantile(rms, q))])
    _write_csv(os.path.join(out, "eval_summary.csv"),
               ["stat", "energy", "rms_force"], rows)
    n_dump = min(int(values["eval.dump_samples"]), n_samples)
    for i in range(n_dump):
        save_configuration(Configuration(x[i], h[i]),
                           os.path.join(out, f"sample_{i:04d}.txt"))
    print(f"evaluated {n_samples} samples: mean energy {energies.mean():.6g}, "
          f"mean rms force {rms.mean():.6g}")
    return 0


def _cmd_verify_theory(args) -> int:
    values, seed = _effective_values(args)
    out = _prepare_out(args)
    summary: list[tuple[str, object, str]] = []
    failures: list[str] = []

    # Suite 1: likelihood-ratio lemma tightness.
    lemma_rows = []
    for eps in (1e-4, 1e-2, 0.1, 0.5, 1.0, 2.0, 5.0):
        rep = theory.lr_lemma_check(eps)
        lemma_rows.append([rep.epsilon, rep.tv, rep.bound, rep.gap,
                           "pass" if rep.holds else "fail"])
        if not rep.holds:
            failures.append(f"lemma instance eps={eps}")
    _write_csv(os.path.join(out, "lemma_checks.csv"),
               ["epsilon", "tv", "bound", "gap", "status"], lemma_rows)
    summary.append(("lemma_tightness", max(r[3] for r in lemma_rows),
                    "fail" if any(r[4] == "fail" for r in lemma_rows) else "pass"))

    # Suite 2: closed-form tilt vs variational maximizer.
    gibbs_rows = []
    worst_tv = 0.0
    for i in range(20):
        r = stream(seed, "theory", "gibbs", i)
        prior = theory.GridDensity.from_weights(
            np.arange(200.0), r.uniform(0.1, 1.0, 200))
        energies = r.uniform(0.0, 1.0, 200)
        w = float(r.uniform(0.5, 2.0))
        direct = theory.variational_tilt(prior, energies, w)
        closed = theory.gibbs_tilt(prior, energies, 1.0 / w)
        tv = theory.tv_distance(direct, closed)
        worst_tv = max(worst_tv, tv)
        gibbs_rows.append([i, w, tv, "pass" if tv <= 1e-6 else "fail"])
        if tv > 1e-6:
            failures.append(f"gibbs instance {i}")
    _write_csv(os.path.join(out, "gibbs_checks.csv"),
               ["instance", "kl_weight", "tv", "status"], gibbs_rows)
    summary.append(("gibbs_vs_variational_worst_tv", worst_tv,
                    "fail" if worst_tv > 1e-6 else "pass"))

    # Suite 3: surrogate-energy TV bound.
    bound_rows = []
    n_viol = 0
    for i in range(500):
        r = stream(seed, "theory", "tvbound", i)
        prior = theory.GridDensity.from_weights(
            np.arange(64.0), r.uniform(0.05, 1.0, 64))
        exact = r.uniform(0.0, 2.0, 64)
        delta = float(r.uniform(1e-3, 0.5))
        surr = exact + r.uniform(-delta, delta, 64)
        beta = float(r.uniform(0.1, 10.0))
        rep = theory.verify_tv_bound(prior, exact, surr, beta)
        if not rep.holds:
            n_viol += 1
            failures.append(f"tv bound instance {i}")
        bound_rows.append([i, rep.beta, rep.delta, rep.tv, rep.bound,
                           rep.tightness, "pass" if rep.holds else "fail"])
    _write_csv(os.path.join(out, "tilt_bounds.csv"),
               ["instance", "beta", "delta", "tv", "bound", "tightness", "status"],
               bound_rows)
    summary.append(("tv_bound_violations", n_viol, "fail" if n_viol else "pass"))

    # Suites 4 and 5 need checkpoints: terminal tilt fit and score alignment.
    if args.checkpoint and args.base_checkpoint:
        net_post, schedule, _ = load_checkpoint(args.checkpoint)
        net_pre, schedule_pre, _ = load_checkpoint(args.base_checkpoint)
        if schedule_pre.steps != schedule.steps:
            raise ConfigError("checkpoints use different diffusion schedules")
        oracle = cfgmod.build_oracle(values)
        n_bodies = int(values["system.n_bodies"])
        kl_w = float(values["train.kl_penalty_weight"])
        if n_bodies == 2:
            n_tilt = args.samples if args.samples is not None else 2000
            fit = theory.terminal_tilt_check(
                net_pre, net_post, oracle, schedule, n_samples=n_tilt,
                seed=seed, beta_max=max(4.0 / kl_w, 10.0))
            hist_rows = [
                [fit.bin_edges[i], fit.bin_edges[i + 1],
                 int(round(fit.pre_mass[i] * fit.n_samples)),
                 int(round(fit.post_mass[i] * fit.n_samples)),
                 fit.tilt_mass[i]]
                for i in range(fit.pre_mass.size)
            ]
            _write_csv(os.path.join(out, "distance_histogram.csv"),
                       ["bin_lo", "bin_hi", "count_pre", "count_post", "tilt_mass"],
                       hist_rows)
            sane = fit.residual_tv <= fit.raw_tv + 1e-12
            _write_csv(os.path.join(out, "tilt_fit.csv"),
                       ["beta_fit", "residual_tv", "raw_tv", "binning_bound", "status"],
                       [[fit.beta_fit, fit.residual_tv, fit.raw_tv,
                         fit.binning_bound, "pass" if sane else "fail"]])
            if not sane:
                failures.append("tilt fit worse than identity")
            summary.append(("tilt_beta_fit", fit.beta_fit, "info"))
            summary.append(("tilt_residual_tv", fit.residual_tv,
                            "pass" if sane else "fail"))
            summary.append(("tilt_raw_tv", fit.raw_tv, "info"))
        else:
            summary.append(("tilt_fit", "skipped_needs_two_bodies", "info"))
        ts, cosines, skipped = theory.alignment_study(
            net_post, net_pre, oracle, schedule, n_bodies,
            n_states=args.samples if args.samples is not None else 240, seed=seed)
        if cosines.size:
            _write_csv(os.path.join(out, "cosine_stats.csv"),
                       ["t", "cosine"], list(zip(ts.tolist(), cosines.tolist())))
            summary.append(("cosine_median", float(np.median(cosines)), "info"))
        summary.append(("cosine_undefined_states", skipped, "info"))

    _write_csv(os.path.join(out, "theory_summary.csv"),
               ["check", "value", "status"], summary)
    if failures:
        raise TheoryViolation("; ".join(failures))
    print(f"theory suites passed ({len(summary)} checks)")
    return 0


_REPORT_SECTIONS = [
    ("Pretraining loss", "pretrain_loss.csv", 8),
    ("Post-training metrics", "metrics.csv", 12),
    ("Sample evaluation", "eval_summary.csv", None),
    ("Likelihood-ratio lemma", "lemma_checks.csv", None),
    ("Tilt vs variational optimizer", "gibbs_checks.csv", 8),
    ("Surrogate TV bounds", "tilt_bounds.csv", 8),
    ("Terminal distance histogram", "distance_histogram.csv", None),
    ("Tilt fit", "tilt_fit.csv", None),
    ("Theory summary", "theory_summary.csv", None),
]


def _csv_to_markdown(path: str, limit: int | None) -> list[str]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        return ["(empty)"]
    header = lines[0].split(",")
    body = [ln.split(",") for ln in lines[1:]]
    skipped = 0
    if limit is not None and len(body) > limit:
        head = limit // 2
        skipped = len(body) - limit
        body = body[:head] + body[-(limit - head):]
    md = ["| " + " | ".join(header) + " |",
          "|" + "---|" * len(header)]
    md.extend("| " + " | ".join(row) + " |" for row in body)
    if skipped:
        md.append("")
        md.append(f"({skipped} rows elided)")
    return md


def _cmd_report(args) -> int:
    out = args.out
    if not os.path.isdir(out):
        raise ConfigError(f"no run directory at {out}")
    parts = ["# Run report", ""]
    found = 0
    for title, name, limit in _REPORT_SECTIONS:
        path = os.path.join(out, name)
        if not os.path.exists(path):
            continue
        found += 1
        parts.append(f"## {title}")
        parts.append("")
        parts.extend(_csv_to_markdown(path, limit))
        parts.append("")
    if not found:
        raise ConfigError(f"no known CSV artifacts under {out}")
    report_path = os.path.join(out, "report.md")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts))
    print(f"wrote {report_path} ({found} sections)")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nbalign",
        description="Equivariant diffusion over small n-body systems with "
                    "oracle-guided post-training.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, needs_config=True):
        p = sub.add_parser(name, help=help_text)
        if needs_config:
            p.add_argument("--config", required=True, help="experiment config file")
            p.add_argument("--seed", type=int, default=None,
                           help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(func=fn)
        return p

    add("pretrain", _cmd_pretrain, "fit the denoising network")
    p = add("posttrain", _cmd_posttrain, "optimize the policy against the oracle")
    p.add_argument("--checkpoint", required=True, help="pretrained checkpoint")
    p = add("eval", _cmd_eval, "sample a checkpoint and score it")
    p.add_argument("--checkpoint", required=True, help="checkpoint to evaluate")
    p.add_argument("--samples", type=int, default=None, help="sample count override")
    p = add("verify-theory", _cmd_verify_theory, "run the numerical theorem suites")
    p.add_argument("--checkpoint", default=None, help="post-trained checkpoint")
    p.add_argument("--base-checkpoint", default=None, help="pretrained reference")
    p.add_argument("--samples", type=int, default=None,
                   help="samples for the checkpoint-based suites")
    add("report", _cmd_report, "merge run CSVs into markdown", needs_config=False)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except ContractViolation as exc:
        print(f"invalid request: {exc}", file=sys.stderr)
        return 2
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except TheoryViolation as exc:
        print(f"theory violation: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
