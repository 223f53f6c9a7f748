"""
learner.py

Episode replay, TD targets with target networks, ε schedule and the
joint agent + mixer training step.

Episode arrays for an episode of L transitions:
    obs, state, avail   L + 1 rows (the last row is the final observation)
    actions, reward,
    terminated, filled  L rows
Batches pad every episode to the longest one; padding has filled = 0.
"""

import itertools
from collections import deque, namedtuple
from dataclasses import dataclass
from typing import Deque, Dict, Optional, Sequence

import numpy as np
from tqdm import tqdm

from _internal.agent import RNNAgent, greedy_actions
from _internal.errors import EnvContractError, NumericalAbort
from _internal.layers import ParamModule
from _internal.mixers import build_mixer
from _internal.numerics import (
    AdamState,
    Tape,
    Tensor,
    adam_step,
    backward,
    global_grad_norm,
    mul,
    no_grad,
    reduce_mean,
    reduce_sum,
    reshape,
    scale,
    sub,
)


# ============================================================
#                     EPISODES + BATCHES
# ============================================================

@dataclass
class Episode:
    obs: np.ndarray
    state: np.ndarray
    avail: np.ndarray
    actions: np.ndarray
    reward: np.ndarray
    terminated: np.ndarray
    filled: np.ndarray
    won: bool = False

    @property
    def length(self) -> int:
        return int(self.actions.shape[0])

    @property
    def episode_return(self) -> float:
        return float(np.sum(self.reward * self.filled))

    def validate(self) -> None:
        """Raise EnvContractError unless the episode is complete and well-formed."""
        steps = self.length
        if steps < 1:
            raise EnvContractError("episode has no transitions")
        n_agents = self.actions.shape[1] if self.actions.ndim == 2 else -1
        expected = {
            "obs": (steps + 1, n_agents),
            "state": (steps + 1,),
            "avail": (steps + 1, n_agents),
            "reward": (steps,),
            "terminated": (steps,),
            "filled": (steps,),
        }
        for name, lead in expected.items():
            shape = getattr(self, name).shape
            if shape[: len(lead)] != lead:
                raise EnvContractError(f"episode field {name} has shape {shape}, expected leading {lead}")

        filled = self.filled
        if not np.all((filled == 0) | (filled == 1)) or np.any(np.diff(filled) > 0):
            raise EnvContractError("episode filled mask is not a 1…1 0…0 prefix")
        last = int(filled.sum()) - 1
        if last < 0:
            raise EnvContractError("episode has no filled step")
        term = np.flatnonzero(self.terminated)
        if len(term) > 1 or (len(term) == 1 and term[0] != last):
            raise EnvContractError("terminated must be set at most once, on the last filled step")

        taken = np.take_along_axis(self.avail[:steps], self.actions[..., None].astype(np.int64), axis=-1)
        if np.any(taken[: last + 1] <= 0):
            raise EnvContractError("episode contains an unavailable action")


@dataclass
class EpisodeBatch:
    obs: np.ndarray          # (B, T+1, n, obs_dim)
    state: np.ndarray        # (B, T+1, s_dim)
    avail: np.ndarray        # (B, T+1, n, A)
    actions: np.ndarray      # (B, T, n)
    reward: np.ndarray       # (B, T)
    terminated: np.ndarray   # (B, T)
    filled: np.ndarray       # (B, T)

    @property
    def batch_size(self) -> int:
        return int(self.reward.shape[0])

    @property
    def max_steps(self) -> int:
        return int(self.reward.shape[1])

    @property
    def n_agents(self) -> int:
        return int(self.actions.shape[2])

    def prev_actions(self) -> np.ndarray:
        """(B, T+1, n): -1 at t = 0, actions[t-1] afterwards."""
        first = np.full(self.actions[:, :1].shape, -1, dtype=np.int64)
        return np.concatenate([first, self.actions.astype(np.int64)], axis=1)

    @classmethod
    def from_episodes(cls, episodes: Sequence[Episode]) -> "EpisodeBatch":
        steps = max(ep.length for ep in episodes)

        def pad(name: str, rows: int, dtype=np.float64) -> np.ndarray:
            sample = getattr(episodes[0], name)
            out = np.zeros((len(episodes), rows) + sample.shape[1:], dtype=dtype)
            for b, ep in enumerate(episodes):
                value = getattr(ep, name)
                out[b, : value.shape[0]] = value
            return out

        return cls(
            obs=pad("obs", steps + 1),
            state=pad("state", steps + 1),
            avail=pad("avail", steps + 1),
            actions=pad("actions", steps, dtype=np.int64),
            reward=pad("reward", steps),
            terminated=pad("terminated", steps),
            filled=pad("filled", steps),
        )


# ============================================================
#                       REPLAY BUFFER
# ============================================================

class ReplayBuffer:
    """FIFO ring of complete episodes."""

    def __init__(self, capacity: int = 5000):
        if capacity < 1:
            raise ValueError(f"ReplayBuffer: capacity must be ≥ 1, got {capacity}")
        self.capacity = capacity
        self.episodes: Deque[Episode] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self.episodes)

    def insert(self, episode: Episode) -> None:
        episode.validate()
        self.episodes.append(episode)

    def ready(self, batch_size: int) -> bool:
        return len(self.episodes) >= batch_size

    def sample(self, batch_size: int, rng: np.random.Generator) -> Optional[EpisodeBatch]:
        """Uniform without replacement; None signals "not ready yet"."""
        if not self.ready(batch_size):
            return None
        picks = rng.choice(len(self.episodes), size=batch_size, replace=False)
        return EpisodeBatch.from_episodes([self.episodes[i] for i in picks])


def buffer_insert(buffer: ReplayBuffer, episode: Episode) -> None:
    buffer.insert(episode)


def buffer_sample(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator) -> Optional[EpisodeBatch]:
    return buffer.sample(batch_size, rng)


# ============================================================
#                       ε SCHEDULE
# ============================================================

def epsilon_at(step: int, cfg) -> float:
    """Linear from eps_start to eps_end over anneal_steps env steps, then flat."""
    if step < 0:
        raise ValueError(f"epsilon_at: step must be ≥ 0, got {step}")
    slope = (cfg.eps_start - cfg.eps_end) / cfg.anneal_steps
    return max(cfg.eps_end, cfg.eps_start - slope * step)


# ============================================================
#                     TARGETS + LOSS
# ============================================================

def _flat_mixer_call(mixer: ParamModule, q: Tensor, hidden: Tensor, state: np.ndarray) -> Tensor:
    batch, steps, n_agents = q.shape
    return mixer.forward(
        reshape(q, (batch * steps, n_agents)),
        reshape(hidden, (batch * steps, n_agents, hidden.shape[-1])),
        Tensor(state.reshape(batch * steps, -1)),
    )


def compute_targets(
    batch: EpisodeBatch,
    target_agent: RNNAgent,
    target_mixer: ParamModule,
    gamma: float,
) -> np.ndarray:
    """
    y_t = r_t + γ (1 − terminated_t) Q_tot⁻(q⁻_{a*}, h⁻_{t+1}, s_{t+1})
    with a*_{i,t+1} the masked per-agent argmax of the target agent.
    Plain arrays come back; nothing is recorded on any tape.
    """
    with no_grad():
        q, hidden = target_agent.unroll(batch.obs, batch.prev_actions(), batch.n_agents)
        next_q = q.data[:, 1:]
        best = greedy_actions(next_q, batch.avail[:, 1:])
        q_best = np.take_along_axis(next_q, best[..., None], axis=-1)[..., 0]
        next_hidden = Tensor(hidden.data[:, 1:])
        q_tot = _flat_mixer_call(target_mixer, Tensor(q_best), next_hidden, batch.state[:, 1:]).data

    q_tot = q_tot.reshape(batch.batch_size, batch.max_steps)
    return batch.reward + gamma * (1.0 - batch.terminated) * q_tot


def td_loss(
    batch: EpisodeBatch,
    agent: RNNAgent,
    mixer: ParamModule,
    targets: np.ndarray,
    reduction: str = "mean",
) -> Tensor:
    """
    Σ filled · (y − Q_tot)² over every (episode, step), divided by Σ filled
    for the "mean" reduction. Call inside a Tape to get gradients.
    """
    n_filled = float(batch.filled.sum())
    if n_filled == 0:
        raise EnvContractError("td_loss: batch has no filled steps")

    steps = batch.max_steps
    q, hidden = agent.unroll(batch.obs[:, :steps], batch.prev_actions()[:, :steps], batch.n_agents)
    chosen = np.eye(agent.n_actions)[batch.actions]
    q_taken = reduce_sum(mul(q, Tensor(chosen)), axis=-1)

    q_tot = _flat_mixer_call(mixer, q_taken, hidden, batch.state[:, :steps])
    td = sub(Tensor(targets.reshape(-1)), q_tot)
    masked = mul(td, Tensor(batch.filled.reshape(-1)))
    total = reduce_sum(mul(masked, masked))
    return scale(total, 1.0 / n_filled) if reduction == "mean" else total


# ============================================================
#                        LEARNER
# ============================================================

class Learner:
    """Owns live nets, target nets, optimizer state and the sync clock."""

    def __init__(self, agent: RNNAgent, mixer: ParamModule, target_agent: RNNAgent, target_mixer: ParamModule, cfg):
        self.agent = agent
        self.mixer = mixer
        self.target_agent = target_agent
        self.target_mixer = target_mixer
        self.cfg = cfg
        self.params = agent.parameters() + mixer.parameters()
        self.opt = AdamState.for_params(
            self.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps
        )
        self.train_steps = 0
        self.sync_bucket = 0
        self.sync_targets()

    def sync_targets(self) -> None:
        self.target_agent.copy_from(self.agent)
        self.target_mixer.copy_from(self.mixer)

    def maybe_sync(self, episode_counter: int) -> bool:
        bucket = episode_counter // self.cfg.target_update_episodes
        if bucket > self.sync_bucket:
            self.sync_bucket = bucket
            self.sync_targets()
            return True
        return False

    def train_step(self, buffer: ReplayBuffer, rng: np.random.Generator, episode_counter: int) -> Optional[Dict]:
        batch = buffer.sample(self.cfg.batch_episodes, rng)
        if batch is None:
            return None

        targets = compute_targets(batch, self.target_agent, self.target_mixer, self.cfg.gamma)
        for p in self.params:
            p.zero_grad()
        with Tape() as tape:
            loss = td_loss(batch, self.agent, self.mixer, targets, self.cfg.loss_reduction)
        if not np.isfinite(loss.item()):
            raise NumericalAbort(f"train_step {self.train_steps}: loss is {loss.item()}")
        backward(tape, loss)

        grads = [p.grad for p in self.params]
        grad_norm = global_grad_norm(grads)
        clip = self.cfg.grad_clip_norm
        if clip is not None and grad_norm > clip:
            grads = [g * (clip / grad_norm) for g in grads]
        adam_step(self.params, grads, self.opt)
        self.train_steps += 1

        synced = self.maybe_sync(episode_counter)
        return {"loss": loss.item(), "grad_norm": grad_norm, "synced": synced}


def train_step(buffer, learner: Learner, rng, episode_counter: int) -> Optional[Dict]:
    return learner.train_step(buffer, rng, episode_counter)


# ============================================================
#                 PAYOFF-TABLE REGRESSION
# ============================================================

FitResult = namedtuple("FitResult", ["mse", "predictions", "greedy_joint"])


def fit_payoff_table(
    kind: str,
    table,
    steps: int = 2000,
    lr: float = 0.01,
    seed: int = 0,
    hidden_dim: int = 8,
    mixer_cfg=None,
    progress: bool = False,
) -> FitResult:
    """
    Regress Q_tot onto every cell of a cooperative payoff table.

    Per-agent utilities Q_i(a_i) are free parameters; each agent's history
    is a fixed id pattern and the state is constant, so only the mixer's
    functional form limits the fit.
    """
    table = np.asarray(table, dtype=np.float64)
    n_agents, n_actions = table.ndim, table.shape[0]
    rng = np.random.default_rng(seed)

    utilities = Tensor(rng.normal(0.0, 0.1, size=(n_agents, n_actions)), requires_grad=True)
    mixer = build_mixer(kind, n_agents, n_agents, hidden_dim, mixer_cfg, rng)

    joint = list(itertools.product(range(n_actions), repeat=n_agents))
    chosen = np.zeros((len(joint), n_agents, n_actions))
    for b, cell in enumerate(joint):
        chosen[b, np.arange(n_agents), cell] = 1.0
    chosen = Tensor(chosen)
    histories = Tensor(np.broadcast_to(np.eye(n_agents, hidden_dim), (len(joint), n_agents, hidden_dim)))
    state = Tensor(np.ones((len(joint), n_agents)))
    targets = Tensor(np.array([table[cell] for cell in joint]))

    def predict() -> Tensor:
        q = reduce_sum(mul(reshape(utilities, (1, n_agents, n_actions)), chosen), axis=-1)
        return mixer.forward(q, histories, state)

    params = [utilities] + mixer.parameters()
    opt = AdamState.for_params(params, lr=lr)
    for _ in tqdm(range(steps), desc=f"fit {kind}", disable=not progress):
        for p in params:
            p.zero_grad()
        with Tape() as tape:
            err = sub(predict(), targets)
            loss = reduce_mean(mul(err, err))
        backward(tape, loss)
        adam_step(params, [p.grad for p in params], opt)

    predictions = predict().data
    mse = float(np.mean((predictions - targets.data) ** 2))
    greedy = tuple(int(a) for a in np.argmax(utilities.data, axis=-1))
    return FitResult(mse=mse, predictions=predictions.reshape(table.shape), greedy_joint=greedy)
