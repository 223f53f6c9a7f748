"""
layers.py

Named-parameter containers shared by the agent and mixer networks.
"""

from typing import Dict, List, Optional, Tuple

import numpy as np

from _internal.errors import ShapeError
from _internal.numerics import Tensor, add, matmul


class ParamModule:
    """
    Holds an ordered name → Tensor map. Names are stable and drive
    checkpoint layout, so they never depend on construction order.
    """

    def __init__(self):
        self.params: Dict[str, Tensor] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        tensor = Tensor(value, requires_grad=True)
        self.params[name] = tensor
        return tensor

    def add_linear(self, prefix: str, fan_in: int, fan_out: int, rng: Optional[np.random.Generator]):
        """Weight (fan_in, fan_out) + bias (fan_out,), uniform ±1/√fan_in."""
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        if rng is None:
            w = np.zeros((fan_in, fan_out))
            b = np.zeros(fan_out)
        else:
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
        self.add_param(f"{prefix}.w", w)
        self.add_param(f"{prefix}.b", b)

    def linear(self, prefix: str, x: Tensor) -> Tensor:
        return add(matmul(x, self.params[f"{prefix}.w"]), self.params[f"{prefix}.b"])

    # --------------------------
    # Parameter plumbing
    # --------------------------
    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise ShapeError(f"load_state_dict: parameter names differ: {sorted(missing)}")
        for name, p in self.params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"load_state_dict: {name} has shape {value.shape}, expected {p.shape}")
            np.copyto(p.data, value)

    def copy_from(self, other: "ParamModule") -> None:
        self.load_state_dict(other.state_dict())
