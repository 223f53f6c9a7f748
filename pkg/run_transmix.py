import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from _internal.checkpoint import load_checkpoint
from _internal.config_models import ExperimentConfig, MatrixGameSpec, load_config
from _internal.envs import brute_force_optimum
from _internal.errors import (
    CaseDrawError,
    CheckpointError,
    ConfigError,
    EnvContractError,
    NumericalAbort,
)
from _internal.fixtures import fixture_spec
from _internal.gradcheck_suite import run_gradcheck_suite
from _internal.harness import format_table, run_eval, run_train, summarize
from _internal.learner import fit_payoff_table
from _internal.mixers import MIXER_KINDS

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NUMERICAL = 2


# ============================================================
#                       SUBCOMMANDS
# ============================================================

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    print(f"✔ Config loaded: {args.config} (digest {cfg.digest()[:12]})")

    if args.resume and args.seed is None:
        raise ConfigError("--resume needs --seed to pick the run it continues")
    seeds = [args.seed] if args.seed is not None else cfg.seeds
    workers = args.workers or cfg.workers
    if workers > 1:
        print(f"⚡ Collecting episodes with {workers} worker processes")

    for seed in seeds:
        result = run_train(cfg, seed, out_dir=args.out, workers=workers, resume=args.resume, quiet=args.quiet)
        if result.rows:
            last = result.rows[-1]
            print(
                f"✔ seed {seed}: {last.env_steps} env steps, "
                f"win rate {last.test_win_rate:.3f}, return {last.test_return_mean:.3f}"
            )
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ExperimentConfig.model_validate(ckpt.config)
    episodes = args.episodes or cfg.eval.episodes
    result = run_eval(ckpt, cfg.env, episodes, noise_sigma=args.noise_sigma, seed=args.seed)
    print(f"📦 {cfg.env_name()} / {cfg.mixer}: {result.episodes} greedy episodes, noise sigma {args.noise_sigma}")
    print(f"✔ win_rate {result.win_rate:.4f}  return_mean {result.return_mean:.4f}")
    return EXIT_OK


def cmd_summarize(args) -> int:
    report = summarize(args.dirs)
    print(report.text)
    if args.json:
        Path(args.json).write_text(
            json.dumps({"rows": report.rows, "pairs": report.pairs}, sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
        print(f"✔ Summary rows saved to: {args.json}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    print(f"🔢 Gradient check: {args.trials} trials per case, tol {args.tol}")
    reports = run_gradcheck_suite(trials=args.trials, tol=args.tol, seed=args.seed, progress=not args.quiet)
    print(
        format_table(
            ["case", "trials", "failures", "max rel err"],
            [(r.name, r.trials, r.failures, r.max_rel_err) for r in reports],
        )
    )
    failed = [r.name for r in reports if r.failures]
    if failed:
        print(f"❌ Gradient check failed for: {', '.join(failed)}")
        return EXIT_NUMERICAL
    print("✔ All gradient checks passed")
    return EXIT_OK


def cmd_fit(args) -> int:
    spec = fixture_spec(args.table)
    if not isinstance(spec, MatrixGameSpec):
        raise ConfigError(f"fit: {args.table} is not a payoff-table fixture")
    result = fit_payoff_table(args.mixer, spec.payoff, steps=args.steps, seed=args.seed, progress=not args.quiet)
    best, value = brute_force_optimum(spec.payoff)
    print(f"🔢 {args.mixer} on {args.table}: mse {result.mse:.6g}")
    print(f"   greedy joint action {result.greedy_joint}, optimum {best} (payoff {value:g})")
    return EXIT_OK


# ============================================================
#                          PARSER
# ============================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="run_transmix.py",
        description="Cooperative multi-agent Q-learning with VDN, QMIX and TransMix mixers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train one config over its seeds")
    train.add_argument("--config", required=True)
    train.add_argument("--seed", type=int)
    train.add_argument("--out")
    train.add_argument("--workers", type=int)
    train.add_argument("--resume")
    train.add_argument("--quiet", action="store_true")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--episodes", type=int)
    ev.add_argument("--noise-sigma", type=float, default=0.0)
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(func=cmd_eval)

    summ = sub.add_parser("summarize", help="median final metrics per result directory")
    summ.add_argument("dirs", nargs="+")
    summ.add_argument("--json")
    summ.set_defaults(func=cmd_summarize)

    grad = sub.add_parser("gradcheck", help="finite-difference audit of kernels, agent and mixers")
    grad.add_argument("--trials", type=int, default=100)
    grad.add_argument("--tol", type=float, default=1e-4)
    grad.add_argument("--seed", type=int, default=0)
    grad.add_argument("--quiet", action="store_true")
    grad.set_defaults(func=cmd_gradcheck)

    fit = sub.add_parser("fit", help="regress a mixer onto a payoff-table fixture")
    fit.add_argument("--table", required=True)
    fit.add_argument("--mixer", required=True, choices=MIXER_KINDS)
    fit.add_argument("--steps", type=int, default=2000)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--quiet", action="store_true")
    fit.set_defaults(func=cmd_fit)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"❌ Numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, CheckpointError, EnvContractError, ValidationError) as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_INVALID
    except CaseDrawError as exc:
        print(f"❌ Gradient check could not draw a usable case: {exc}", file=sys.stderr)
        return EXIT_INVALID


# ============================================================
#                     MAIN EXECUTION
# ============================================================

if __name__ == "__main__":
    sys.exit(main())
