"""
envs.py

Desk-scale Dec-POMDP environments.

• MatrixGame   one-step cooperative payoff table (exact brute-force oracle)
• Skirmish     partially observable grid battle with a heuristic enemy
• NoisyStateEnv wrapper corrupting the global state with Gaussian noise

Skirmish action layout per ally:
    0 noop | 1 north (+y) | 2 south (−y) | 3 east (+x) | 4 west (−x) | 5 + j attack enemy j
"""

import itertools
from collections import namedtuple
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from _internal.config_models import MatrixGameSpec, SkirmishSpec
from _internal.errors import EnvContractError

StepResult = namedtuple("StepResult", ["observations", "state", "reward", "terminated", "info"])

NOOP = 0
MOVES = {1: (0, 1), 2: (0, -1), 3: (1, 0), 4: (-1, 0)}
ATTACK_BASE = 5


class DecPOMDPEnv:
    """Shared surface of every environment; one owner per instance."""

    n_agents: int
    n_actions: int
    obs_dim: int
    state_dim: int
    horizon: int

    def reset(self, seed: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def step(self, actions: Sequence[int]) -> StepResult:
        raise NotImplementedError

    def avail_actions(self, agent: int) -> np.ndarray:
        raise NotImplementedError

    def observe(self, agent: int) -> np.ndarray:
        raise NotImplementedError

    def get_state(self) -> np.ndarray:
        raise NotImplementedError

    def observations(self) -> np.ndarray:
        return np.stack([self.observe(i) for i in range(self.n_agents)])

    def avail_matrix(self) -> np.ndarray:
        return np.stack([self.avail_actions(i) for i in range(self.n_agents)])

    def _check_actions(self, actions: Sequence[int]) -> List[int]:
        actions = [int(a) for a in actions]
        if len(actions) != self.n_agents:
            raise EnvContractError(f"expected {self.n_agents} actions, got {len(actions)}")
        for agent, action in enumerate(actions):
            mask = self.avail_actions(agent)
            if not 0 <= action < self.n_actions or not mask[action]:
                raise EnvContractError(f"agent {agent}: action {action} is not available")
        return actions


# ============================================================
#                       MATRIX GAME
# ============================================================

class MatrixGame(DecPOMDPEnv):
    """obs_i = agent-id one-hot, state = ones(n), episode length 1."""

    def __init__(self, spec: MatrixGameSpec):
        self.spec = spec
        self.table = np.asarray(spec.payoff, dtype=np.float64)
        self.n_agents = spec.n_agents
        self.n_actions = spec.n_actions
        self.obs_dim = spec.n_agents
        self.state_dim = spec.n_agents
        self.horizon = 1
        self.best_value = float(self.table.max())
        self.done = True

    def reset(self, seed: Optional[int] = None):
        self.done = False
        return self.observations(), self.get_state()

    def observe(self, agent: int) -> np.ndarray:
        return np.eye(self.n_agents)[agent]

    def get_state(self) -> np.ndarray:
        return np.ones(self.n_agents)

    def avail_actions(self, agent: int) -> np.ndarray:
        return np.ones(self.n_actions)

    def step(self, actions: Sequence[int]) -> StepResult:
        if self.done:
            raise EnvContractError("step called on a finished episode; reset first")
        actions = self._check_actions(actions)
        reward = float(self.table[tuple(actions)])
        self.done = True
        return StepResult(self.observations(), self.get_state(), reward, True, {"won": reward >= self.best_value})


def brute_force_optimum(table) -> Tuple[Tuple[int, ...], float]:
    """Best joint action by enumerating every cell; ties → lexicographically first."""
    table = np.asarray(table, dtype=np.float64)
    best_action, best_value = None, -np.inf
    for joint in itertools.product(*(range(k) for k in table.shape)):
        if table[joint] > best_value:
            best_action, best_value = joint, float(table[joint])
    return best_action, best_value


# ============================================================
#                         SKIRMISH
# ============================================================

@dataclass
class Unit:
    x: int
    y: int
    hp: int
    hp_max: int
    damage: int
    attack_range: int
    sight: int

    @property
    def alive(self) -> bool:
        return self.hp > 0

    def distance(self, other: "Unit") -> int:
        return max(abs(self.x - other.x), abs(self.y - other.y))


class Skirmish(DecPOMDPEnv):
    """
    Step resolution order:
        1. ally moves (agent-index order; blocked or off-grid → noop)
        2. ally attacks (target must still be alive and in range)
        3. enemy heuristic: attack nearest ally in range, else step toward
           the nearest living ally; ties by lower unit index
        4. reward = w_damage·hp removed + kill_bonus·kills + win_bonus·won
    """

    def __init__(self, spec: SkirmishSpec):
        self.spec = spec
        self.n_agents = spec.n_agents
        self.n_enemies = len(spec.enemies)
        self.n_actions = spec.n_actions
        self.obs_dim = 3 + 4 * (self.n_agents - 1 + self.n_enemies)
        self.state_dim = 3 * (self.n_agents + self.n_enemies)
        self.horizon = spec.horizon

        w = spec.reward
        self.max_return = w.damage * sum(u.hp for u in spec.enemies) + w.kill_bonus * self.n_enemies + w.win_bonus
        self.reward_scale = w.normalize_to / self.max_return if w.normalize and self.max_return > 0 else 1.0

        self.allies: List[Unit] = []
        self.enemies: List[Unit] = []
        self.t = 0
        self.done = True

    @staticmethod
    def _spawn(units) -> List[Unit]:
        return [Unit(u.x, u.y, u.hp, u.hp, u.damage, u.attack_range, u.sight) for u in units]

    def reset(self, seed: Optional[int] = None):
        self.allies = self._spawn(self.spec.allies)
        self.enemies = self._spawn(self.spec.enemies)
        self.t = 0
        self.done = False
        return self.observations(), self.get_state()

    # --------------------------
    # Geometry
    # --------------------------
    def _on_grid(self, x: int, y: int) -> bool:
        return 0 <= x < self.spec.width and 0 <= y < self.spec.height

    def _occupied(self, x: int, y: int) -> bool:
        return any(u.alive and u.x == x and u.y == y for u in (*self.allies, *self.enemies))

    # --------------------------
    # Observation / availability
    # --------------------------
    def avail_actions(self, agent: int) -> np.ndarray:
        mask = np.zeros(self.n_actions)
        mask[NOOP] = 1.0
        unit = self.allies[agent]
        if not unit.alive:
            return mask
        for action, (dx, dy) in MOVES.items():
            if self._on_grid(unit.x + dx, unit.y + dy):
                mask[action] = 1.0
        for j, enemy in enumerate(self.enemies):
            if enemy.alive and unit.distance(enemy) <= unit.attack_range:
                mask[ATTACK_BASE + j] = 1.0
        return mask

    def observe(self, agent: int) -> np.ndarray:
        """
        [own x, own y, own hp fraction] then, for every other ally and every
        enemy: [visible, Δx, Δy, hp fraction], zeroed out of sight or dead.
        """
        me = self.allies[agent]
        obs = [float(me.x), float(me.y), me.hp / me.hp_max]
        others = [u for i, u in enumerate(self.allies) if i != agent] + self.enemies
        for other in others:
            if me.alive and other.alive and me.distance(other) <= me.sight:
                obs.extend([1.0, float(other.x - me.x), float(other.y - me.y), other.hp / other.hp_max])
            else:
                obs.extend([0.0, 0.0, 0.0, 0.0])
        return np.asarray(obs)

    def get_state(self) -> np.ndarray:
        return np.asarray(
            [v for u in (*self.allies, *self.enemies) for v in (float(u.x), float(u.y), u.hp / u.hp_max)]
        )

    # --------------------------
    # Dynamics
    # --------------------------
    def _enemy_turn(self) -> None:
        for enemy in self.enemies:
            if not enemy.alive:
                continue
            living = [a for a in self.allies if a.alive]
            if not living:
                return
            nearest = min(living, key=lambda a: enemy.distance(a))
            if enemy.distance(nearest) <= enemy.attack_range:
                nearest.hp = max(0, nearest.hp - enemy.damage)
                continue
            self._step_toward(enemy, nearest)

    def _step_toward(self, unit: Unit, target: Unit) -> None:
        dx, dy = target.x - unit.x, target.y - unit.y
        steps = [(int(np.sign(dx)), 0), (0, int(np.sign(dy)))]
        if abs(dy) > abs(dx):
            steps.reverse()
        for sx, sy in steps:
            if sx == 0 and sy == 0:
                continue
            nx, ny = unit.x + sx, unit.y + sy
            if self._on_grid(nx, ny) and not self._occupied(nx, ny):
                unit.x, unit.y = nx, ny
                return

    def step(self, actions: Sequence[int]) -> StepResult:
        if self.done:
            raise EnvContractError("step called on a finished episode; reset first")
        actions = self._check_actions(actions)

        for ally, action in zip(self.allies, actions):
            if ally.alive and action in MOVES:
                dx, dy = MOVES[action]
                nx, ny = ally.x + dx, ally.y + dy
                if self._on_grid(nx, ny) and not self._occupied(nx, ny):
                    ally.x, ally.y = nx, ny

        hp_before = sum(e.hp for e in self.enemies)
        alive_before = sum(e.alive for e in self.enemies)
        for ally, action in zip(self.allies, actions):
            if action < ATTACK_BASE or not ally.alive:
                continue
            enemy = self.enemies[action - ATTACK_BASE]
            if enemy.alive and ally.distance(enemy) <= ally.attack_range:
                enemy.hp = max(0, enemy.hp - ally.damage)
        damage = hp_before - sum(e.hp for e in self.enemies)
        kills = alive_before - sum(e.alive for e in self.enemies)

        self._enemy_turn()

        won = not any(e.alive for e in self.enemies)
        w = self.spec.reward
        reward = (w.damage * damage + w.kill_bonus * kills + w.win_bonus * float(won)) * self.reward_scale

        self.t += 1
        lost = not any(a.alive for a in self.allies)
        self.done = won or lost or self.t >= self.horizon
        info = {"won": won, "damage": damage, "kills": kills}
        return StepResult(self.observations(), self.get_state(), float(reward), self.done, info)


# ============================================================
#                      NOISY STATES
# ============================================================

def noisy_state(state: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """state + ε, ε ~ N(0, σ²) i.i.d. per dimension; σ is a standard deviation."""
    if sigma < 0:
        raise ValueError(f"noisy_state: sigma must be ≥ 0, got {sigma}")
    state = np.asarray(state, dtype=np.float64)
    if sigma == 0:
        return state.copy()
    return state + rng.normal(0.0, sigma, size=state.shape)


class NoisyStateEnv(DecPOMDPEnv):
    """Corrupts only the global state; observations and rewards pass through."""

    def __init__(self, env: DecPOMDPEnv, sigma: float, rng: np.random.Generator):
        self.env = env
        self.sigma = sigma
        self.rng = rng
        for attr in ("n_agents", "n_actions", "obs_dim", "state_dim", "horizon", "spec"):
            setattr(self, attr, getattr(env, attr))

    def reset(self, seed: Optional[int] = None):
        obs, state = self.env.reset(seed)
        return obs, noisy_state(state, self.sigma, self.rng)

    def step(self, actions: Sequence[int]) -> StepResult:
        result = self.env.step(actions)
        return result._replace(state=noisy_state(result.state, self.sigma, self.rng))

    def avail_actions(self, agent: int) -> np.ndarray:
        return self.env.avail_actions(agent)

    def observe(self, agent: int) -> np.ndarray:
        return self.env.observe(agent)

    def get_state(self) -> np.ndarray:
        return noisy_state(self.env.get_state(), self.sigma, self.rng)


# ============================================================
#                         FACTORY
# ============================================================

def make_env(
    spec: Union[MatrixGameSpec, SkirmishSpec],
    noise_sigma: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> DecPOMDPEnv:
    if isinstance(spec, MatrixGameSpec):
        env = MatrixGame(spec)
    elif isinstance(spec, SkirmishSpec):
        env = Skirmish(spec)
    else:
        raise EnvContractError(f"unsupported env spec {type(spec).__name__}")
    if noise_sigma > 0:
        env = NoisyStateEnv(env, noise_sigma, rng if rng is not None else np.random.default_rng())
    return env
