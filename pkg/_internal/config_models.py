"""
config_models.py

Strictly validated pydantic v2 models for experiment configuration.

Every model forbids unknown keys so that a typo in a config file fails
loudly instead of silently falling back to a default.
"""

import hashlib
import json
import re
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Union

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from _internal.errors import ConfigError

ANNEAL_PRESETS = {"easy": 50_000, "hard": 500_000}


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", protected_namespaces=())


# ============================================================
#                      ENVIRONMENT SPECS
# ============================================================

class MatrixGameSpec(StrictModel):
    """One-step cooperative game; payoff is an n-dimensional table."""

    kind: Literal["matrix"] = "matrix"
    name: Optional[str] = None
    n_agents: int = Field(ge=1)
    n_actions: int = Field(ge=1)
    horizon: Literal[1] = 1
    payoff: List[Any]

    @model_validator(mode="after")
    def check_payoff_shape(self):
        """
        Payoff must be a nested list of shape (n_actions,) * n_agents with
        finite entries.
        """
        table = np.asarray(self.payoff, dtype=np.float64)
        expected = (self.n_actions,) * self.n_agents
        if table.shape != expected:
            raise ValueError(f"payoff shape {table.shape} does not match {expected}")
        if not np.all(np.isfinite(table)):
            raise ValueError("payoff entries must be finite")
        return self


class UnitSpec(StrictModel):
    x: int = Field(ge=0)
    y: int = Field(ge=0)
    hp: int = Field(gt=0)
    damage: int = Field(gt=0)
    attack_range: int = Field(default=1, ge=1)
    sight: int = Field(default=3, ge=0)


class RewardSpec(StrictModel):
    damage: float = 1.0
    kill_bonus: float = 10.0
    win_bonus: float = 200.0
    normalize: bool = False
    normalize_to: float = Field(default=20.0, gt=0)


class SkirmishSpec(StrictModel):
    kind: Literal["skirmish"] = "skirmish"
    name: Optional[str] = None
    width: int = Field(ge=1)
    height: int = Field(ge=1)
    horizon: int = Field(ge=1)
    allies: List[UnitSpec] = Field(min_length=1)
    enemies: List[UnitSpec] = Field(min_length=1)
    reward: RewardSpec = Field(default_factory=RewardSpec)

    @property
    def n_agents(self) -> int:
        return len(self.allies)

    @property
    def n_actions(self) -> int:
        # noop, N, S, E, W, attack enemy j
        return 5 + len(self.enemies)

    @model_validator(mode="after")
    def check_positions(self):
        """Units spawn on distinct on-grid cells."""
        cells = set()
        for unit in [*self.allies, *self.enemies]:
            if unit.x >= self.width or unit.y >= self.height:
                raise ValueError(f"unit at ({unit.x}, {unit.y}) lies outside a {self.width}x{self.height} grid")
            if (unit.x, unit.y) in cells:
                raise ValueError(f"two units share cell ({unit.x}, {unit.y})")
            cells.add((unit.x, unit.y))
        return self


EnvSpec = Annotated[Union[MatrixGameSpec, SkirmishSpec], Field(discriminator="kind")]


# ============================================================
#                    NETWORK + TRAINING
# ============================================================

class AgentConfig(StrictModel):
    hidden_dim: int = Field(default=64, ge=1)


class QmixConfig(StrictModel):
    embed_dim: int = Field(default=32, ge=1)


class TransMixConfig(StrictModel):
    layers: int = Field(default=2, ge=2, le=6)
    heads: int = Field(default=4, ge=1)
    model_dim: int = Field(default=32, ge=1)
    state_tokens: int = Field(default=4, ge=1)
    skip_dim: int = Field(default=16, ge=1)
    warm_start: bool = True

    @model_validator(mode="after")
    def check_heads_divide_width(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        return self


class TrainConfig(StrictModel):
    gamma: float = Field(default=0.99, ge=0.0, lt=1.0)
    batch_episodes: int = Field(default=32, ge=1)
    buffer_capacity: int = Field(default=5000, ge=1)
    lr: float = Field(default=0.001, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)
    eps_start: float = Field(default=1.0, ge=0, le=1)
    eps_end: float = Field(default=0.05, ge=0, le=1)
    anneal_steps: Optional[int] = Field(default=None, ge=1)
    anneal: Optional[Literal["easy", "hard"]] = None
    target_update_episodes: int = Field(default=200, ge=1)
    total_env_steps: int = Field(default=100_000, ge=0)
    loss_reduction: Literal["mean", "sum"] = "mean"
    grad_clip_norm: Optional[float] = Field(default=None, gt=0)

    @model_validator(mode="after")
    def resolve_anneal(self):
        """
        anneal_steps: explicit value wins, else the named preset, else the
        desk default of 10k env steps.
        """
        if self.eps_end > self.eps_start:
            raise ValueError(f"eps_end {self.eps_end} exceeds eps_start {self.eps_start}")
        if self.anneal_steps is None:
            self.anneal_steps = ANNEAL_PRESETS[self.anneal] if self.anneal else 10_000
        return self


class EvalConfig(StrictModel):
    interval_steps: int = Field(default=10_000, ge=1)
    episodes: int = Field(default=20, ge=1)


class NoiseConfig(StrictModel):
    enabled: bool = False
    sigma: float = Field(default=0.05, ge=0)


# ============================================================
#                     EXPERIMENT CONFIG
# ============================================================

PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {},
    "full": {
        "train": {"batch_episodes": 96, "anneal": "easy", "total_env_steps": 2_000_000},
        "transmix": {"layers": 2, "heads": 4, "model_dim": 512, "state_tokens": 4, "skip_dim": 64},
    },
}

# keys that identify a run's seed and placement, not its experiment
RUN_ONLY_KEYS = ("seeds", "workers", "out_dir")


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class ExperimentConfig(StrictModel):
    preset: Literal["desk", "full"] = "desk"
    env: EnvSpec
    mixer: Literal["vdn", "qmix", "transmix"]
    agent: AgentConfig = Field(default_factory=AgentConfig)
    qmix: QmixConfig = Field(default_factory=QmixConfig)
    transmix: TransMixConfig = Field(default_factory=TransMixConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    seeds: List[int] = Field(default_factory=lambda: [1, 2, 3, 4, 5], min_length=1)
    workers: int = Field(default=1, ge=1)
    out_dir: str = "results"
    record_wall_time: bool = False

    @model_validator(mode="before")
    @classmethod
    def apply_preset(cls, data: Any):
        """Preset values sit under explicit keys."""
        if not isinstance(data, dict):
            return data
        preset = data.get("preset", "desk")
        if preset not in PRESETS:
            return data
        return _deep_merge(PRESETS[preset], data)

    @field_validator("env", mode="before")
    @classmethod
    def resolve_fixture(cls, value):
        """
        Accept a bundled fixture name in place of a full spec:
            "additive2x3" → MatrixGameSpec(...)
        """
        if isinstance(value, str):
            from _internal.fixtures import fixture_spec

            return fixture_spec(value).model_dump()
        return value

    @field_validator("seeds", mode="before")
    @classmethod
    def single_seed_to_list(cls, value):
        if isinstance(value, int):
            return [value]
        return value

    # --------------------------
    # Derived helpers
    # --------------------------
    def mixer_block(self):
        return {"qmix": self.qmix, "transmix": self.transmix}.get(self.mixer)

    def run_identity(self) -> Dict[str, Any]:
        data = self.model_dump(mode="json")
        for key in RUN_ONLY_KEYS:
            data.pop(key, None)
        return data

    def digest(self) -> str:
        canonical = json.dumps(self.run_identity(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def base_digest(self) -> str:
        """Digest with the noise block removed: pairs clean and noisy runs."""
        identity = self.run_identity()
        identity.pop("noise", None)
        canonical = json.dumps(identity, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def env_name(self) -> str:
        return self.env.name or self.env.kind


# ============================================================
#                        LOADING
# ============================================================

def _line_of(text: str, key: str) -> int:
    m = re.search(rf'"{re.escape(key)}"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else 1


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: invalid JSON: {exc.msg}") from None

    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        problems = []
        for err in exc.errors():
            loc = [str(part) for part in err["loc"]]
            keys = [part for part in loc if not part.isdigit() and part not in ("matrix", "skirmish")]
            line = _line_of(text, keys[-1]) if keys else 1
            problems.append(f"{source}:{line}: {'.'.join(loc) or '<root>'}: {err['msg']}")
        raise ConfigError("\n".join(problems)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: config file not found")
    return parse_config(path.read_text(encoding="utf-8"), source=str(path))
