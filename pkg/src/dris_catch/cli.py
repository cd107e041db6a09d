"""Command line entry point: pretrain, train, eval, theory and plot-data.

Exit codes: 0 success, 1 configuration error, 2 runtime fault, 3 a theory
check that ran but failed its threshold.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import theory
from .checkpoint import CheckpointError
from .config import RunConfig, load_config, write_run_record
from .networks import AutoEncoder, TrainingFault
from .physics import OOD_RANGES, TRAINING_RANGES, ConfigurationError, SimulationFault
from .training import (
    SCENARIOS,
    DeterministicPolicy,
    Trainer,
    VelTrack,
    collect_encoder_dataset,
    evaluate,
    load_autoencoder,
    load_policy,
    load_trainer,
    pretrain_encoder,
    reconstruction_error,
    save_encoder,
    save_trainer,
    write_history,
    write_metrics,
)

log = logging.getLogger("dris_catch")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


def _config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _outdir(args, cfg: RunConfig, default: str) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else Path(cfg.output_dir) / default
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# -- pretrain ---------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _outdir(args, cfg, "pretrain")
    write_run_record(out, cfg, "pretrain")
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    data_rng, hold_rng, init_rng, train_rng = (np.random.default_rng(s) for s in seeds)
    d = cfg.dris
    dataset = collect_encoder_dataset(data_rng, d.dataset_envs, d.dataset_episodes, d.dataset_instances,
                                      cfg.episode, cfg.physics)
    held = collect_encoder_dataset(hold_rng, min(8, d.dataset_envs), 2, d.dataset_instances, cfg.episode, cfg.physics)
    ae = AutoEncoder(init_rng, d.dataset_instances)
    baseline = reconstruction_error(AutoEncoder(np.random.default_rng(init_rng.integers(2**32)),
                                                d.dataset_instances), held)
    net = cfg.network
    ae, losses = pretrain_encoder(dataset, net.pretrain_epochs, train_rng, net.pretrain_lr, net.pretrain_batch,
                                  net.pretrain_samples, autoencoder=ae)
    final = reconstruction_error(ae, held)
    save_encoder(ae, out / "encoder.ckpt", {"seed": cfg.seed})
    _write_rows(out / "pretrain_loss.csv", [{"epoch": i, "loss": v} for i, v in enumerate(losses)])
    write_run_record(out, cfg, "pretrain", {"heldout_chamfer": final, "untrained_chamfer": baseline})
    print(f"encoder written to {out / 'encoder.ckpt'}; held-out Chamfer {final:.4g} (untrained {baseline:.4g})")
    return EXIT_OK


# -- train --------------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config(args)
    e2e = args.baseline == "e2e"
    size = 1 if e2e else (args.dris_size if args.dris_size is not None else cfg.dris.size)
    if size < 1:
        raise ConfigurationError(f"--dris-size must be >= 1, got {size}")
    tcfg = cfg.train_config(size, True if e2e else None)
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    out = _outdir(args, cfg, "train-e2e" if e2e else f"train-dris{size}")
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    latest = out / "latest.ckpt"
    if args.resume:
        if not latest.exists():
            raise ConfigurationError(f"nothing to resume: {latest} does not exist")
        trainer = load_trainer(latest, cfg.episode, cfg.physics)
        if trainer.cfg.dris_size != tcfg.dris_size or trainer.cfg.train_encoder != tcfg.train_encoder:
            raise ConfigurationError("resume checkpoint was trained with a different set size or encoder mode")
        trainer.cfg = replace(trainer.cfg, epochs=tcfg.epochs)
    else:
        encoder = None
        if not tcfg.train_encoder:
            path = Path(args.encoder) if args.encoder else Path(cfg.output_dir) / "pretrain" / "encoder.ckpt"
            if not path.exists():
                raise ConfigurationError(f"pretrained encoder not found at {path}; run 'pretrain' or pass --encoder")
            encoder = load_autoencoder(path).encoder
        trainer = Trainer(tcfg, encoder, cfg.episode, cfg.physics)
    write_run_record(out, cfg, "train", {"dris_size": size, "baseline": args.baseline})

    def on_epoch(tr: Trainer, row: dict):
        if (row["epoch"] + 1) % tr.cfg.checkpoint_every == 0 or tr.epoch >= tr.cfg.epochs:
            save_trainer(tr, ckpt_dir / f"epoch_{tr.epoch:04d}.ckpt")
            save_trainer(tr, latest)

    trainer.run(callback=on_epoch)
    save_trainer(trainer, out / "policy.ckpt")
    write_history(out / "training.csv", trainer.history)
    last = trainer.history[-1] if trainer.history else {}
    print(f"trained {trainer.epoch} epochs; final mean return {last.get('mean_return', math.nan):.3f}")
    return EXIT_OK


# -- eval ---------------------------------------------------------------------------------

def _load_eval_policy(spec: str):
    if spec == "veltrack":
        return VelTrack()
    policy = load_policy(spec)
    return DeterministicPolicy(policy, Path(spec).parent.name or Path(spec).stem)


def cmd_eval(args) -> int:
    cfg = _config(args)
    episodes = args.episodes if args.episodes is not None else cfg.evaluation.episodes
    if episodes < 1:
        raise ConfigurationError("--episodes must be >= 1")
    policy = _load_eval_policy(args.policy)
    if args.scenario == "all":
        cells = [("noise", lv) for lv in cfg.evaluation.noise_levels]
        cells += [(s, 0.0) for s in cfg.evaluation.scenarios if s != "noise"]
    else:
        if args.level is not None and args.level < 0:
            raise ConfigurationError("--level must be >= 0")
        cells = [(args.scenario, args.level if args.level is not None else 0.0)]
    results = [evaluate(policy, sc, lv, episodes, cfg.seed, cfg.episode, cfg.physics, cfg.evaluation.batch)
               for sc, lv in cells]
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "eval" / "metrics.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics(out, results)
    write_run_record(out.parent, cfg, "eval", {"policy": args.policy, "episodes": episodes})
    for r in results:
        print(f"{r.policy} {r.scenario} level={r.level:g}: success {r.success:.3f} "
              f"[{r.success_lo:.3f}, {r.success_hi:.3f}] reward {r.mean_reward:.3f}")
    return EXIT_OK


# -- theory -------------------------------------------------------------------------------

SYNTHETIC_SIGMA2, SYNTHETIC_RHO = 2.0, 0.3
TOY_G = np.array([1.0, -0.5, 0.25])
TOY_H = np.diag([1.0, 2.0, 0.5])
TOY_SIGMA = np.diag([0.04, 0.01, 0.09])


def check_particle(cfg: RunConfig, args):
    rng = np.random.default_rng(cfg.seed)
    seqs = theory.random_action_sequences(rng, cfg.theory.particle_sequences, cfg.episode.horizon,
                                          cfg.episode.delta_max)
    rows = [{"n": n, "sequences": len(seqs),
             "max_deviation": theory.check_particle_exactness(seqs, n, cfg.seed, cfg.episode, cfg.physics)}
            for n in cfg.theory.particle_sizes]
    worst = max(r["max_deviation"] for r in rows)
    return rows, worst == 0.0, f"deviation {worst:g} over {len(seqs)} sequences"


def check_synthetic_variance(cfg: RunConfig, args):
    curve = theory.synthetic_variance_curve(SYNTHETIC_SIGMA2, SYNTHETIC_RHO, (1, 2, 4, 8, 16),
                                            cfg.theory.synthetic_repetitions, cfg.seed)
    rows = [{"n": p[0], "total_variance": p[1], "ci_lo": p[2], "ci_hi": p[3]} for p in curve.points]
    ok = abs(curve.sigma2 / SYNTHETIC_SIGMA2 - 1) <= 0.1 and abs(curve.rho / SYNTHETIC_RHO - 1) <= 0.1
    return rows, ok, (f"fitted sigma2={curve.sigma2:.4g} rho={curve.rho:.4g} residual={curve.residual:.3g} "
                      f"(planted {SYNTHETIC_SIGMA2:g}, {SYNTHETIC_RHO:g})")


def check_variance(cfg: RunConfig, args):
    if not args.policy:
        raise ConfigurationError("the variance check needs --policy (a training checkpoint)")
    policy = load_policy(args.policy)
    sizes = cfg.theory.variance_sizes
    curve = theory.estimate_gradient_variance(policy, sizes, cfg.theory.variance_repetitions, cfg.seed,
                                              cfg.episode, cfg.physics, cfg.ppo.gamma)
    rows = [{"n": p[0], "total_variance": p[1], "ci_lo": p[2], "ci_hi": p[3]} for p in curve.points]
    lo_n, hi_n = min(sizes), max(sizes)
    a, b = next(p for p in curve.points if p[0] == lo_n), next(p for p in curve.points if p[0] == hi_n)
    ok = b[3] < a[2]
    fit = f"fitted sigma2={curve.sigma2:.4g} rho={curve.rho:.4g}" if curve.fitted else "fit skipped"
    return rows, ok, f"V({hi_n})={b[1]:.4g} vs V({lo_n})={a[1]:.4g}; {fit}"


def check_unmasking(cfg: RunConfig, args):
    rows, slope = theory.unmasking_convergence(1.0, TOY_G, TOY_H, TOY_SIGMA, cfg.theory.unmasking_sizes,
                                               cfg.theory.unmasking_draws, cfg.seed)
    last = rows[-1]
    ok = last.gap <= 3 * last.stderr and abs(slope + 0.5) <= 0.1
    return [vars(r) for r in rows], ok, f"gap at N={last.n}: {last.gap / last.stderr:.2f} SE; noise slope {slope:.3f}"


def _policy_grid(args):
    if not args.policy_dir:
        raise ConfigurationError("this check needs --policy-dir (a directory of training checkpoints)")
    paths = sorted(Path(args.policy_dir).glob("*.ckpt"))
    if not paths:
        raise ConfigurationError(f"no checkpoints in {args.policy_dir}")
    return [load_policy(p) for p in paths]


def check_rademacher(cfg: RunConfig, args):
    grid = _policy_grid(args)
    table = theory.cost_table(grid, cfg.theory.rademacher_samples, cfg.seed, gamma=cfg.ppo.gamma,
                              episode=cfg.episode, physics_cfg=cfg.physics)
    est, lo, hi = theory.empirical_rademacher(table, cfg.theory.rademacher_draws, cfg.seed)
    rows = [{"policies": len(grid), "samples": table.matrix.shape[1], "estimate": est, "ci_lo": lo, "ci_hi": hi,
             "bound": table.bound}]
    return rows, abs(est) <= table.bound, f"estimate {est:.4g} [{lo:.4g}, {hi:.4g}] over {len(grid)} policies"


def check_ipm(cfg: RunConfig, args):
    grid = _policy_grid(args)
    est, lo, hi, gaps = theory.estimate_ipm(grid, TRAINING_RANGES, OOD_RANGES, cfg.theory.ipm_samples, cfg.seed,
                                            gamma=cfg.ppo.gamma, episode=cfg.episode, physics_cfg=cfg.physics)
    bound = theory.cost_bound(cfg.ppo.gamma)
    rows = [{"policy": i, "gap": float(g)} for i, g in enumerate(gaps)]
    rows.append({"policy": "sup", "gap": est})
    return rows, est <= 2 * bound, f"IPM {est:.4g} [{lo:.4g}, {hi:.4g}], bound {2 * bound:.4g}"


CHECKS = {
    "particle": check_particle,
    "synthetic-variance": check_synthetic_variance,
    "variance": check_variance,
    "unmasking": check_unmasking,
    "rademacher": check_rademacher,
    "ipm": check_ipm,
}


def cmd_theory(args) -> int:
    if args.check not in CHECKS:
        print(f"unknown check {args.check!r}; available: {', '.join(CHECKS)}", file=sys.stderr)
        return EXIT_CONFIG
    cfg = _config(args)
    out = _outdir(args, cfg, "theory")
    rows, ok, detail = CHECKS[args.check](cfg, args)
    _write_rows(out / f"{args.check}.csv", rows)
    write_run_record(out, cfg, f"theory {args.check}")
    verdict = f"{args.check}: {'pass' if ok else 'FAIL'}, {detail}"
    (out / f"{args.check}.verdict.txt").write_text(verdict + "\n")
    print(verdict)
    return EXIT_OK if ok else EXIT_CHECK


# -- plot data ----------------------------------------------------------------------------

TIDY_COLUMNS = ["source", "policy", "scenario", "level", "epoch", "metric", "value"]


def tidy_rows(path: Path) -> list[dict]:
    """Long-format rows from an eval metrics, training history or tidy CSV."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        rows = list(reader)
    if cols == TIDY_COLUMNS:
        return rows
    source = path.stem
    out = []
    if "scenario" in cols:
        ids = ("policy", "scenario", "level")
        for r in rows:
            for m in cols:
                if m not in ids:
                    out.append({"source": source, "policy": r["policy"], "scenario": r["scenario"],
                                "level": r["level"], "epoch": "", "metric": m, "value": r[m]})
    elif "epoch" in cols:
        for r in rows:
            for m in cols:
                if m != "epoch":
                    out.append({"source": source, "policy": "", "scenario": "training", "level": "",
                                "epoch": r["epoch"], "metric": m, "value": r[m]})
    else:
        raise ConfigurationError(f"{path}: unrecognized CSV schema {cols}")
    return out


def cmd_plot_data(args) -> int:
    rows = []
    for p in args.inputs:
        path = Path(p)
        if not path.exists():
            raise ConfigurationError(f"input not found: {path}")
        rows.extend(tidy_rows(path))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TIDY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    print(f"{len(rows)} rows written to {out}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dris-catch", description="Instance-set policy learning for ball catching.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML run configuration (defaults when omitted)")
        sp.add_argument("--out", help="output location (defaults under the config's output_dir)")

    sp = sub.add_parser("pretrain", help="collect random-action data and pretrain the set encoder")
    common(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train", help="PPO training of an instance-set policy or the E2E baseline")
    common(sp)
    sp.add_argument("--dris-size", type=int, help="instances per environment (overrides dris.size)")
    sp.add_argument("--baseline", choices=("e2e", "none"), default="none")
    sp.add_argument("--encoder", help="encoder checkpoint from 'pretrain'")
    sp.add_argument("--epochs", type=int, help="override ppo.epochs")
    sp.add_argument("--resume", action="store_true", help="continue from latest.ckpt in the output directory")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="single-ball evaluation under a perturbation scenario")
    common(sp)
    sp.add_argument("--policy", required=True, help="training checkpoint, or 'veltrack'")
    sp.add_argument("--scenario", choices=SCENARIOS + ("all",), default="noise")
    sp.add_argument("--level", type=float, help="observation noise level in sigma units")
    sp.add_argument("--episodes", type=int)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("theory", help="run one theory check and print its verdict")
    common(sp)
    sp.add_argument("--check", required=True, help=f"one of: {', '.join(CHECKS)}")
    sp.add_argument("--policy", help="policy snapshot for the variance check")
    sp.add_argument("--policy-dir", help="checkpoint directory forming the policy grid")
    sp.set_defaults(func=cmd_theory)

    sp = sub.add_parser("plot-data", help="merge metric CSVs into one tidy long-format CSV")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plot_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (ConfigurationError, CheckpointError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationFault, TrainingFault, FloatingPointError) as exc:
        print(f"runtime fault: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
