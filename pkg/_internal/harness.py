"""
harness.py

Experiment runner: the online collect → train → evaluate loop, metrics and
event logs, checkpoints, and multi-seed median summaries.

Run directory layout (one per seed):
    <out_dir>/seed-<seed>/run.json        config, digests, seed
    <out_dir>/seed-<seed>/metrics.csv     one row per evaluation
    <out_dir>/seed-<seed>/events.jsonl    eval / target_sync / abort events
    <out_dir>/seed-<seed>/checkpoint.bin  latest state, rewritten at every evaluation
"""

import csv
import json
import time
from collections import namedtuple
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel
from tqdm import tqdm

from _internal.agent import RNNAgent
from _internal.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from _internal.config_models import ExperimentConfig
from _internal.envs import make_env
from _internal.errors import ConfigError, NumericalAbort
from _internal.layers import ParamModule
from _internal.learner import Learner, ReplayBuffer, epsilon_at
from _internal.mixers import build_mixer
from _internal.runner import EpisodeRunner, rollout_episode

METRICS_HEADER = [
    "seed",
    "env_steps",
    "episodes",
    "epsilon",
    "train_loss",
    "test_return_mean",
    "test_win_rate",
    "wall_ms",
]

SEED_SPACE = 2**63 - 1


# ============================================================
#                  NETWORKS FROM CONFIG
# ============================================================

@dataclass
class System:
    agent: RNNAgent
    mixer: ParamModule
    target_agent: RNNAgent
    target_mixer: ParamModule
    agent_dims: Dict[str, int]
    n_agents: int


def build_system(cfg: ExperimentConfig, rng: Optional[np.random.Generator]) -> System:
    sample_env = make_env(cfg.env)
    dims = {
        "input_dim": sample_env.obs_dim + sample_env.n_actions + sample_env.n_agents,
        "hidden_dim": cfg.agent.hidden_dim,
        "n_actions": sample_env.n_actions,
    }
    agent = RNNAgent(rng=rng, **dims)
    mixer = build_mixer(cfg.mixer, sample_env.n_agents, sample_env.state_dim, cfg.agent.hidden_dim, cfg.mixer_block(), rng)
    target_agent = RNNAgent(rng=None, **dims)
    target_mixer = build_mixer(cfg.mixer, sample_env.n_agents, sample_env.state_dim, cfg.agent.hidden_dim, cfg.mixer_block(), None)
    target_agent.copy_from(agent)
    target_mixer.copy_from(mixer)
    return System(agent, mixer, target_agent, target_mixer, dims, sample_env.n_agents)


# ============================================================
#                        METRICS
# ============================================================

class MetricsRow(BaseModel):
    seed: int
    env_steps: int
    episodes: int
    epsilon: float
    train_loss: Optional[float] = None
    test_return_mean: float
    test_win_rate: float
    wall_ms: int = 0

    def csv_fields(self) -> List[str]:
        def num(value):
            return "" if value is None else format(value, ".6g")

        return [
            str(self.seed),
            str(self.env_steps),
            str(self.episodes),
            num(self.epsilon),
            num(self.train_loss),
            num(self.test_return_mean),
            num(self.test_win_rate),
            str(self.wall_ms),
        ]


class RunLog:
    """Append-only metrics CSV + events JSONL; every write is flushed."""

    def __init__(self, run_dir: Path, fresh: bool):
        self.metrics_path = run_dir / "metrics.csv"
        self.events_path = run_dir / "events.jsonl"
        if fresh:
            with open(self.metrics_path, "w", newline="", encoding="utf-8") as f:
                csv.writer(f, lineterminator="\n").writerow(METRICS_HEADER)
            self.events_path.write_text("", encoding="utf-8")

    def row(self, row: MetricsRow) -> None:
        with open(self.metrics_path, "a", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerow(row.csv_fields())

    def event(self, kind: str, **fields) -> None:
        with open(self.events_path, "a", encoding="utf-8") as f:
            f.write(json.dumps({"event": kind, **fields}, sort_keys=True) + "\n")


def read_metrics(path) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


# ============================================================
#                       EVALUATION
# ============================================================

EvalResult = namedtuple("EvalResult", ["win_rate", "return_mean", "episodes"])


def agent_from_checkpoint(ckpt: Checkpoint) -> RNNAgent:
    cfg = ExperimentConfig.model_validate(ckpt.config)
    system = build_system(cfg, rng=None)
    system.agent.load_state_dict(ckpt.group("agent"))
    return system.agent


def run_eval(
    source: Union[Checkpoint, RNNAgent],
    env_spec,
    episodes: int,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> EvalResult:
    """
    Greedy (ε = 0) decentralized evaluation: each agent acts from its own
    observations and hidden state.
    """
    if episodes < 1:
        raise ConfigError(f"run_eval: episodes must be ≥ 1, got {episodes}")
    agent = agent_from_checkpoint(source) if isinstance(source, Checkpoint) else source
    rng = np.random.default_rng(seed)
    env = make_env(env_spec, noise_sigma=noise_sigma, rng=rng)

    wins, returns = 0, []
    for _ in range(episodes):
        episode = rollout_episode(env, agent, 0.0, rng, seed=int(rng.integers(SEED_SPACE)))
        wins += int(episode.won)
        returns.append(episode.episode_return)
    return EvalResult(win_rate=wins / episodes, return_mean=float(np.mean(returns)), episodes=episodes)


# ============================================================
#                     CHECKPOINTS
# ============================================================

def snapshot_run(
    cfg: ExperimentConfig,
    system: System,
    learner: Learner,
    counters: Dict[str, int],
    rngs: Dict[str, np.random.Generator],
) -> Checkpoint:
    params: Dict[str, np.ndarray] = {}
    for prefix, module in (
        ("agent", system.agent),
        ("mixer", system.mixer),
        ("target_agent", system.target_agent),
        ("target_mixer", system.target_mixer),
    ):
        for name, value in module.state_dict().items():
            params[f"{prefix}.{name}"] = value

    for name, m, v in zip(_learner_param_names(system), learner.opt.m, learner.opt.v):
        params[f"adam.m.{name}"] = m.copy()
        params[f"adam.v.{name}"] = v.copy()

    counters = dict(counters, adam_t=learner.opt.t, train_steps=learner.train_steps, sync_bucket=learner.sync_bucket)
    return Checkpoint(
        config=cfg.model_dump(mode="json"),
        digest=cfg.digest(),
        params=params,
        counters=counters,
        rng={name: gen.bit_generator.state for name, gen in rngs.items()},
    )


def _learner_param_names(system: System) -> List[str]:
    return [f"agent.{n}" for n in system.agent.params] + [f"mixer.{n}" for n in system.mixer.params]


def restore_run(ckpt: Checkpoint, system: System, learner: Learner, rngs: Dict[str, np.random.Generator]) -> Dict[str, int]:
    system.agent.load_state_dict(ckpt.group("agent"))
    system.mixer.load_state_dict(ckpt.group("mixer"))
    system.target_agent.load_state_dict(ckpt.group("target_agent"))
    system.target_mixer.load_state_dict(ckpt.group("target_mixer"))
    for i, name in enumerate(_learner_param_names(system)):
        np.copyto(learner.opt.m[i], ckpt.params[f"adam.m.{name}"])
        np.copyto(learner.opt.v[i], ckpt.params[f"adam.v.{name}"])
    learner.opt.t = ckpt.counters["adam_t"]
    learner.train_steps = ckpt.counters["train_steps"]
    learner.sync_bucket = ckpt.counters["sync_bucket"]
    for name, gen in rngs.items():
        if name in ckpt.rng:
            gen.bit_generator.state = ckpt.rng[name]
    return ckpt.counters


# ============================================================
#                      TRAINING LOOP
# ============================================================

TrainResult = namedtuple("TrainResult", ["checkpoint", "rows", "run_dir"])


def run_train(
    cfg: ExperimentConfig,
    seed: int,
    out_dir: Optional[Union[str, Path]] = None,
    workers: Optional[int] = None,
    resume: Optional[Union[str, Path]] = None,
    quiet: bool = False,
) -> TrainResult:
    """
    Collect ε-greedy rounds of `workers` episodes, run one train step per
    collected episode, and evaluate greedily whenever env_steps crosses the
    next eval.interval_steps boundary. Stops once total_env_steps is reached.
    """
    workers = workers or cfg.workers
    run_dir = Path(out_dir or cfg.out_dir) / f"seed-{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    tc = cfg.train

    streams = np.random.SeedSequence(seed).spawn(4)
    init_rng = np.random.default_rng(streams[0])
    rngs = {
        "sample": np.random.default_rng(streams[1]),
        "collect": np.random.default_rng(streams[2]),
        "eval": np.random.default_rng(streams[3]),
    }

    system = build_system(cfg, init_rng)
    learner = Learner(system.agent, system.mixer, system.target_agent, system.target_mixer, tc)
    buffer = ReplayBuffer(tc.buffer_capacity)
    noise_sigma = cfg.noise.sigma if cfg.noise.enabled else 0.0

    counters = {"seed": seed, "env_steps": 0, "episodes": 0, "next_eval": cfg.eval.interval_steps}
    if resume is not None:
        ckpt = load_checkpoint(resume, expected_digest=cfg.digest())
        counters.update(restore_run(ckpt, system, learner, rngs))
        print(f"✔ Resumed from {resume} at env step {counters['env_steps']}")
    else:
        (run_dir / "run.json").write_text(
            json.dumps(
                {
                    "seed": seed,
                    "digest": cfg.digest(),
                    "base_digest": cfg.base_digest(),
                    "config": cfg.model_dump(mode="json"),
                },
                sort_keys=True,
                indent=2,
            )
            + "\n",
            encoding="utf-8",
        )
    log = RunLog(run_dir, fresh=resume is None)
    print(f"📦 Run directory ready at: {run_dir}")

    started = time.perf_counter()
    rows: List[MetricsRow] = []
    losses: List[float] = []

    ckpt_path = run_dir / "checkpoint.bin"

    def evaluate() -> None:
        """Append one metrics row, then checkpoint so a resume starts here."""
        result = run_eval(
            system.agent,
            cfg.env,
            cfg.eval.episodes,
            noise_sigma=noise_sigma,
            seed=int(rngs["eval"].integers(SEED_SPACE)),
        )
        row = MetricsRow(
            seed=seed,
            env_steps=counters["env_steps"],
            episodes=counters["episodes"],
            epsilon=epsilon_at(counters["env_steps"], tc),
            train_loss=float(np.mean(losses)) if losses else None,
            test_return_mean=result.return_mean,
            test_win_rate=result.win_rate,
            wall_ms=int((time.perf_counter() - started) * 1000) if cfg.record_wall_time else 0,
        )
        log.row(row)
        log.event("eval", env_steps=row.env_steps, episodes=row.episodes, episodes_evaluated=result.episodes)
        rows.append(row)
        losses.clear()
        save_checkpoint(ckpt_path, snapshot_run(cfg, system, learner, counters, rngs))

    bar = tqdm(total=tc.total_env_steps, initial=min(counters["env_steps"], tc.total_env_steps),
               desc=f"seed {seed}", disable=quiet)
    try:
        if resume is None:
            evaluate()
        with EpisodeRunner(cfg, system.agent_dims, workers=workers, noise_sigma=noise_sigma) as runner:
            while counters["env_steps"] < tc.total_env_steps:
                epsilon = epsilon_at(counters["env_steps"], tc)
                seeds = rngs["collect"].integers(SEED_SPACE, size=workers)
                episodes = runner.collect(system.agent.state_dict(), epsilon, seeds)

                collected = 0
                for episode in episodes:
                    buffer.insert(episode)
                    collected += episode.length
                first = counters["episodes"] + 1
                counters["episodes"] += len(episodes)
                counters["env_steps"] += collected

                # one train step per collected episode, at the round boundary
                for counter in range(first, counters["episodes"] + 1):
                    stats = learner.train_step(buffer, rngs["sample"], counter)
                    synced = stats["synced"] if stats else learner.maybe_sync(counter)
                    if stats:
                        losses.append(stats["loss"])
                    if synced:
                        log.event("target_sync", episodes=counter, env_steps=counters["env_steps"])

                bar.update(min(collected, tc.total_env_steps - bar.n))
                if counters["env_steps"] >= counters["next_eval"]:
                    while counters["next_eval"] <= counters["env_steps"]:
                        counters["next_eval"] += cfg.eval.interval_steps
                    evaluate()
    except NumericalAbort as exc:
        log.event("abort", reason=str(exc), env_steps=counters["env_steps"], episodes=counters["episodes"])
        print(f"❌ Numerical abort at env step {counters['env_steps']}: {exc}")
        raise
    finally:
        bar.close()

    ckpt = snapshot_run(cfg, system, learner, counters, rngs)
    save_checkpoint(ckpt_path, ckpt)
    print(f"✔ Checkpoint saved to: {ckpt_path}")
    return TrainResult(checkpoint=ckpt, rows=rows, run_dir=run_dir)


# ============================================================
#                        SUMMARY
# ============================================================

SummaryReport = namedtuple("SummaryReport", ["rows", "pairs", "text"])


def format_table(headers: Sequence[str], rows: Iterable[Sequence]) -> str:
    cells = [[str(h) for h in headers]] + [[_cell(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _cell(value) -> str:
    return format(value, ".4g") if isinstance(value, float) else str(value)


def summarize(dirs: Sequence[Union[str, Path]]) -> SummaryReport:
    """
    One row per directory: median over seeds of the final evaluation.
    Every run inside a directory must share one config digest. Directories
    whose configs differ only in the noise block are paired into
    clean / noisy / drop rows.
    """
    if not dirs:
        raise ConfigError("summarize: no result directories given")

    rows = []
    for d in dirs:
        run_files = sorted(Path(d).rglob("run.json"))
        if not run_files:
            raise ConfigError(f"{d}: no run.json found")
        infos = [json.loads(p.read_text(encoding="utf-8")) for p in run_files]
        digests = sorted({info["digest"] for info in infos})
        if len(digests) > 1:
            raise ConfigError(f"{d}: mismatched config digests across runs: {', '.join(digests)}")

        finals = []
        for p in run_files:
            metrics = read_metrics(p.parent / "metrics.csv")
            if metrics:
                finals.append(metrics[-1])
        if not finals:
            raise ConfigError(f"{d}: no metrics rows to summarise")

        cfg = infos[0]["config"]
        noise = cfg["noise"]
        rows.append(
            {
                "dir": str(d),
                "env": cfg["env"].get("name") or cfg["env"]["kind"],
                "mixer": cfg["mixer"],
                "noise_sigma": noise["sigma"] if noise["enabled"] else 0.0,
                "seeds": len(finals),
                "median_win_rate": float(np.median([float(r["test_win_rate"]) for r in finals])),
                "median_return": float(np.median([float(r["test_return_mean"]) for r in finals])),
                "digest": digests[0],
                "base_digest": infos[0]["base_digest"],
            }
        )

    pairs = []
    for clean in (r for r in rows if r["noise_sigma"] == 0.0):
        for noisy in (r for r in rows if r["noise_sigma"] > 0.0 and r["base_digest"] == clean["base_digest"]):
            pairs.append(
                {
                    "env": clean["env"],
                    "mixer": clean["mixer"],
                    "noise_sigma": noisy["noise_sigma"],
                    "clean_win_rate": clean["median_win_rate"],
                    "noisy_win_rate": noisy["median_win_rate"],
                    "drop": clean["median_win_rate"] - noisy["median_win_rate"],
                    "clean_return": clean["median_return"],
                    "noisy_return": noisy["median_return"],
                }
            )

    text = format_table(
        ["env", "mixer", "noise", "seeds", "median win rate", "median return"],
        [(r["env"], r["mixer"], r["noise_sigma"], r["seeds"], r["median_win_rate"], r["median_return"]) for r in rows],
    )
    if pairs:
        text += "\n\n" + format_table(
            ["env", "mixer", "sigma", "clean win", "noisy win", "drop"],
            [(p["env"], p["mixer"], p["noise_sigma"], p["clean_win_rate"], p["noisy_win_rate"], p["drop"]) for p in pairs],
        )
    return SummaryReport(rows=rows, pairs=pairs, text=text)
