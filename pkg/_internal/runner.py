"""
runner.py

Episode collection: one rollout function plus a parallel runner that fans
a round of K episodes out over worker processes.

Workers only ever receive a read-only parameter snapshot and send back
complete episodes; nothing mutable is shared.
"""

from concurrent.futures import ProcessPoolExecutor, as_completed
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import TypeAdapter

from _internal.agent import RNNAgent, build_inputs, init_hidden, select_actions
from _internal.config_models import EnvSpec, ExperimentConfig
from _internal.envs import DecPOMDPEnv, make_env
from _internal.learner import Episode
from _internal.numerics import Tensor, no_grad

ENV_SPEC_ADAPTER = TypeAdapter(EnvSpec)


# ============================================================
#                       ROLLOUT
# ============================================================

def rollout_episode(
    env: DecPOMDPEnv,
    agent: RNNAgent,
    epsilon: float,
    rng: np.random.Generator,
    seed: Optional[int] = None,
) -> Episode:
    """
    Play one episode. Each agent acts from its own observation and its own
    hidden state only.
    """
    n_agents, n_actions = env.n_agents, env.n_actions
    obs, state = env.reset(seed)
    avail = env.avail_matrix()
    hidden = Tensor(init_hidden(n_agents, agent.hidden_dim))
    prev_actions = None

    obs_rows, state_rows, avail_rows = [obs], [state], [avail]
    actions_rows, rewards, terminated = [], [], []
    won = False

    with no_grad():
        while True:
            inputs = build_inputs(obs, prev_actions, n_actions, n_agents)
            q, hidden = agent.forward(Tensor(inputs), hidden)
            actions = select_actions(q.data, avail, epsilon, rng)

            result = env.step(actions)
            obs, state = result.observations, result.state
            avail = env.avail_matrix()

            actions_rows.append(actions)
            rewards.append(result.reward)
            terminated.append(1.0 if result.terminated else 0.0)
            obs_rows.append(obs)
            state_rows.append(state)
            avail_rows.append(avail)
            prev_actions = actions

            if result.terminated:
                won = bool(result.info.get("won", False))
                break

    steps = len(rewards)
    return Episode(
        obs=np.stack(obs_rows),
        state=np.stack(state_rows),
        avail=np.stack(avail_rows),
        actions=np.stack(actions_rows).astype(np.int64),
        reward=np.asarray(rewards),
        terminated=np.asarray(terminated),
        filled=np.ones(steps),
        won=won,
    )


def _rollout_from_snapshot(
    env_spec: dict,
    agent_dims: Dict[str, int],
    snapshot: Dict[str, np.ndarray],
    epsilon: float,
    seed: int,
    noise_sigma: float,
) -> Episode:
    """Worker entry point: rebuild env + agent from plain data, play one episode."""
    cfg_env = ENV_SPEC_ADAPTER.validate_python(env_spec)
    rng = np.random.default_rng(seed)
    env = make_env(cfg_env, noise_sigma=noise_sigma, rng=rng)
    agent = RNNAgent(**agent_dims)
    agent.load_state_dict(snapshot)
    return rollout_episode(env, agent, epsilon, rng, seed=seed)


# ============================================================
#                    PARALLEL RUNNER
# ============================================================

class EpisodeRunner:
    """
    Collects one round of episodes per call. workers = 1 runs in-process;
    workers > 1 uses a process pool. Either way the returned list is
    ordered by episode slot, so a round is reproducible from its seeds.
    """

    def __init__(self, cfg: ExperimentConfig, agent_dims: Dict[str, int], workers: int = 1, noise_sigma: float = 0.0):
        self.env_spec = cfg.env.model_dump(mode="json")
        self.agent_dims = dict(agent_dims)
        self.workers = workers
        self.noise_sigma = noise_sigma
        self._pool: Optional[ProcessPoolExecutor] = None

    def __enter__(self) -> "EpisodeRunner":
        if self.workers > 1:
            self._pool = ProcessPoolExecutor(max_workers=self.workers)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def collect(self, snapshot: Dict[str, np.ndarray], epsilon: float, seeds: Sequence[int]) -> List[Episode]:
        args = [
            (self.env_spec, self.agent_dims, snapshot, epsilon, int(seed), self.noise_sigma)
            for seed in seeds
        ]
        if self._pool is None:
            return [_rollout_from_snapshot(*a) for a in args]

        results: List[Optional[Episode]] = [None] * len(args)
        futures = {self._pool.submit(_rollout_from_snapshot, *a): slot for slot, a in enumerate(args)}
        for future in as_completed(futures):
            results[futures[future]] = future.result()
        return results
