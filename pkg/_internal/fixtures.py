"""
fixtures.py

Bundled environment instances, addressable by name from config files.
"""

from typing import Callable, Dict, Union

import numpy as np

from _internal.config_models import MatrixGameSpec, SkirmishSpec, UnitSpec
from _internal.errors import ConfigError


def _additive2x3() -> MatrixGameSpec:
    # R[a1, a2] = r1[a1] + r2[a2]; optimum (2, 1) → 5
    r1 = np.array([0.0, 1.0, 3.0])
    r2 = np.array([0.0, 2.0, 1.0])
    return MatrixGameSpec(
        name="additive2x3",
        n_agents=2,
        n_actions=3,
        payoff=(r1[:, None] + r2[None, :]).tolist(),
    )


def _nonmono3x3() -> MatrixGameSpec:
    return MatrixGameSpec(
        name="nonmono3x3",
        n_agents=2,
        n_actions=3,
        payoff=[[8.0, -12.0, -12.0], [-12.0, 0.0, 0.0], [-12.0, 0.0, 0.0]],
    )


def _skirmish_1v1() -> SkirmishSpec:
    # one attack kills the only enemy on step 1
    return SkirmishSpec(
        name="skirmish-1v1",
        width=3,
        height=1,
        horizon=5,
        allies=[UnitSpec(x=0, y=0, hp=3, damage=3, sight=2)],
        enemies=[UnitSpec(x=1, y=0, hp=3, damage=1, sight=2)],
    )


def _skirmish_2v1() -> SkirmishSpec:
    return SkirmishSpec(
        name="skirmish-2v1",
        width=5,
        height=5,
        horizon=20,
        allies=[
            UnitSpec(x=0, y=1, hp=4, damage=2),
            UnitSpec(x=0, y=3, hp=4, damage=2),
        ],
        enemies=[UnitSpec(x=4, y=2, hp=6, damage=1)],
    )


def _skirmish_3v3() -> SkirmishSpec:
    return SkirmishSpec(
        name="skirmish-3v3",
        width=6,
        height=6,
        horizon=30,
        allies=[UnitSpec(x=0, y=y, hp=4, damage=1) for y in (1, 2, 3)],
        enemies=[UnitSpec(x=5, y=y, hp=4, damage=1) for y in (1, 2, 3)],
    )


def _skirmish_3v4() -> SkirmishSpec:
    return SkirmishSpec(
        name="skirmish-3v4",
        width=6,
        height=6,
        horizon=30,
        allies=[UnitSpec(x=0, y=y, hp=5, damage=1) for y in (1, 2, 3)],
        enemies=[UnitSpec(x=5, y=y, hp=4, damage=1) for y in (1, 2, 3, 4)],
    )


FIXTURES: Dict[str, Callable[[], Union[MatrixGameSpec, SkirmishSpec]]] = {
    "additive2x3": _additive2x3,
    "nonmono3x3": _nonmono3x3,
    "skirmish-1v1": _skirmish_1v1,
    "skirmish-2v1": _skirmish_2v1,
    "skirmish-3v3": _skirmish_3v3,
    "skirmish-3v4": _skirmish_3v4,
}


def fixture_spec(name: str) -> Union[MatrixGameSpec, SkirmishSpec]:
    builder = FIXTURES.get(name)
    if builder is None:
        raise ConfigError(f"unknown env fixture {name!r}; bundled: {', '.join(sorted(FIXTURES))}")
    return builder()
