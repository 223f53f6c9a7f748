"""
agent.py

GRU-based recurrent Q-network shared by all agents, plus ε-greedy selection.

Input per agent and timestep:
    [ observation | one-hot previous action | one-hot agent id ]
The previous-action block is all zeros at t = 0.
"""

from typing import Dict, Optional, Tuple

import numpy as np

from _internal.errors import EnvContractError, ShapeError
from _internal.layers import ParamModule
from _internal.numerics import (
    Tensor,
    add,
    matmul,
    mul,
    relu,
    sigmoid,
    stack,
    sub,
    tanh,
)

GATES = ("z", "r", "c")


# ============================================================
#                  INPUT + HIDDEN HELPERS
# ============================================================

def init_hidden(n_agents: int, hidden_dim: int, batch: Optional[int] = None) -> np.ndarray:
    if n_agents < 1 or hidden_dim < 1:
        raise ShapeError(f"init_hidden: need n_agents ≥ 1 and hidden_dim ≥ 1, got {n_agents}, {hidden_dim}")
    shape = (n_agents, hidden_dim) if batch is None else (batch, n_agents, hidden_dim)
    return np.zeros(shape)


def build_inputs(
    obs: np.ndarray,
    prev_actions: Optional[np.ndarray],
    n_actions: int,
    n_agents: int,
) -> np.ndarray:
    """
    obs: (..., n_agents, obs_dim); prev_actions: (..., n_agents) ints,
    None or -1 meaning "no previous action".
    """
    obs = np.asarray(obs, dtype=np.float64)
    lead = obs.shape[:-1]
    last = np.zeros(lead + (n_actions,))
    if prev_actions is not None:
        prev = np.asarray(prev_actions, dtype=np.int64)
        valid = prev >= 0
        last[valid, prev[valid]] = 1.0
    ids = np.broadcast_to(np.eye(n_agents), lead + (n_agents,))
    return np.concatenate([obs, last, ids], axis=-1)


# ============================================================
#                      RECURRENT AGENT
# ============================================================

def agent_forward(inputs, hidden, params: Dict[str, Tensor]) -> Tuple[Tensor, Tensor]:
    """
    One GRU step for any leading batch shape.

        x  = relu(fc1(input))
        z  = σ(W_z x + U_z h + b_z)
        r  = σ(W_r x + U_r h + b_r)
        h̃  = tanh(W_c x + U_c (r ⊙ h) + b_c)
        h' = (1 − z) ⊙ h + z ⊙ h̃
        q  = head(h')
    """
    inputs = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
    hidden = hidden if isinstance(hidden, Tensor) else Tensor(hidden)
    if hidden.ndim < 2 or inputs.ndim < 2:
        raise ShapeError(f"agent_forward: inputs {inputs.shape} and hidden {hidden.shape} need a batch axis")

    x = relu(add(matmul(inputs, params["fc1.w"]), params["fc1.b"]))

    def gate(name: str, h: Tensor) -> Tensor:
        return add(
            add(matmul(x, params[f"gru.{name}.w"]), matmul(h, params[f"gru.{name}.u"])),
            params[f"gru.{name}.b"],
        )

    z = sigmoid(gate("z", hidden))
    r = sigmoid(gate("r", hidden))
    candidate = tanh(gate("c", mul(r, hidden)))
    new_hidden = add(hidden, mul(z, sub(candidate, hidden)))

    q = add(matmul(new_hidden, params["head.w"]), params["head.b"])
    return q, new_hidden


class RNNAgent(ParamModule):
    """DRQN shared across agents; agent identity enters through the input."""

    def __init__(
        self,
        input_dim: int,
        hidden_dim: int,
        n_actions: int,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        if hidden_dim < 1:
            raise ShapeError(f"RNNAgent: hidden_dim must be ≥ 1, got {hidden_dim}")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.n_actions = n_actions

        self.add_linear("fc1", input_dim, hidden_dim, rng)
        for g in GATES:
            self.add_linear(f"gru.{g}", hidden_dim, hidden_dim, rng)
            bound = 1.0 / np.sqrt(hidden_dim)
            u = np.zeros((hidden_dim, hidden_dim)) if rng is None else rng.uniform(-bound, bound, (hidden_dim, hidden_dim))
            self.add_param(f"gru.{g}.u", u)
        self.add_linear("head", hidden_dim, n_actions, rng)

    def forward(self, inputs, hidden) -> Tuple[Tensor, Tensor]:
        return agent_forward(inputs, hidden, self.params)

    def unroll(self, obs: np.ndarray, prev_actions: np.ndarray, n_agents: int) -> Tuple[Tensor, Tensor]:
        """
        Run the agent over whole episodes.

        obs:          (B, T, n, obs_dim)
        prev_actions: (B, T, n), -1 where no previous action exists
        returns q (B, T, n, A) and hidden states h_t (B, T, n, d_h), where
        h_t is the GRU state after consuming step t.
        """
        batch, steps = obs.shape[:2]
        inputs = build_inputs(obs, prev_actions, self.n_actions, n_agents)
        hidden = Tensor(init_hidden(n_agents, self.hidden_dim, batch=batch))

        qs, hs = [], []
        for t in range(steps):
            q, hidden = self.forward(Tensor(inputs[:, t]), hidden)
            qs.append(q)
            hs.append(hidden)
        return stack(qs, axis=1), stack(hs, axis=1)


# ============================================================
#                   ε-GREEDY SELECTION
# ============================================================

def greedy_actions(q_values: np.ndarray, avail: np.ndarray) -> np.ndarray:
    """Masked argmax over the last axis; ties go to the lowest index."""
    masked = np.where(np.asarray(avail) > 0, q_values, -np.inf)
    return np.argmax(masked, axis=-1)


def select_actions(
    q_values: np.ndarray,
    avail: np.ndarray,
    epsilon: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    q_values, avail: (n_agents, n_actions). With probability ε per agent a
    uniformly random available action, otherwise the masked argmax.
    """
    q_values = np.asarray(q_values, dtype=np.float64)
    avail = np.asarray(avail)
    if q_values.shape != avail.shape:
        raise ShapeError(f"select_actions: q {q_values.shape} vs avail {avail.shape}")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"select_actions: epsilon must lie in [0, 1], got {epsilon}")
    if np.any(avail.sum(axis=-1) == 0):
        raise EnvContractError("select_actions: an agent has no available action")

    actions = greedy_actions(q_values, avail)
    for i in range(actions.shape[0]):
        if rng.random() < epsilon:
            actions[i] = rng.choice(np.flatnonzero(avail[i]))
    return actions
