"""
gradcheck_suite.py

Randomized central-difference audit of every registered kernel, the
recurrent agent and the three mixers.

Kernel trials draw inputs from [-1, 1] and push values of kinked kernels
(relu, elu, abs) at least 1e-3 away from 0. Network trials redraw their
parameters until every kinked pre-activation clears the same margin and
every non-vanishing analytic gradient sits above GRAD_FLOOR; below it the
roundoff in a central difference at h = 1e-5 (about 1e-12 absolute)
approaches the 1e-4 relative tolerance.
"""

from collections import namedtuple
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from _internal.agent import RNNAgent
from _internal.config_models import TransMixConfig
from _internal.errors import CaseDrawError
from _internal.mixers import QMixer, TransMixer, VDNMixer
from _internal.numerics import OPS, Tape, Tensor, backward, forward, grad_check, mul, reduce_sum

KINKED = ("relu", "elu", "abs")
KINK_MARGIN = 1e-3
GRAD_FLOOR = 1e-7
ROUNDOFF = 1e-12
MAX_REDRAWS = 100

CaseReport = namedtuple("CaseReport", ["name", "trials", "failures", "max_rel_err"])


# ============================================================
#                      KERNEL CASES
# ============================================================

def _u(rng, *shape) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=shape)


def _away_from_kink(x: np.ndarray) -> np.ndarray:
    x = x.copy()
    x[np.abs(x) < KINK_MARGIN] += 2 * KINK_MARGIN
    return x


def _binary(rng) -> Tuple[List[np.ndarray], Dict]:
    shapes = [((2, 3), (2, 3)), ((2, 3), (1, 3)), ((2, 3, 4), (4,))]
    a, b = shapes[rng.integers(len(shapes))]
    return [_u(rng, *a), _u(rng, *b)], {}


def _reduction(rng):
    axis = [None, 0, 1, -1][rng.integers(4)]
    return [_u(rng, 2, 3, 4)], {"axis": axis, "keepdims": bool(rng.integers(2))}


KERNEL_CASES: Dict[str, Callable] = {
    "add": _binary,
    "sub": _binary,
    "mul": _binary,
    "matmul": lambda rng: ([_u(rng, 2, 3, 4), _u(rng, 4, 2)], {}),
    "scale": lambda rng: ([_u(rng, 3, 4)], {"c": float(rng.uniform(-2.0, 2.0))}),
    "relu": lambda rng: ([_away_from_kink(_u(rng, 3, 4))], {}),
    "elu": lambda rng: ([_away_from_kink(_u(rng, 3, 4))], {}),
    "sigmoid": lambda rng: ([_u(rng, 3, 4)], {}),
    "tanh": lambda rng: ([_u(rng, 3, 4)], {}),
    "abs": lambda rng: ([_away_from_kink(_u(rng, 3, 4))], {}),
    "sum": _reduction,
    "mean": _reduction,
    "softmax": lambda rng: ([_u(rng, 3, 4)], {"axis": [0, -1][rng.integers(2)]}),
    "reshape": lambda rng: ([_u(rng, 2, 6)], {"shape": (3, 4)}),
    "concat": lambda rng: ([_u(rng, 2, 3), _u(rng, 2, 2)], {"axis": -1}),
    "stack": lambda rng: ([_u(rng, 2, 3) for _ in range(3)], {"axis": int(rng.integers(3))}),
}


def kernel_trial(op: str, rng: np.random.Generator, h: float = 1e-5, tol: float = 1e-4):
    """Check f = Σ c ⊙ op(inputs) with a random projection c."""
    arrays, attrs = KERNEL_CASES[op](rng)
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    proj = _u(rng, *forward(op, *arrays, **attrs).shape)

    def f() -> Tensor:
        return reduce_sum(mul(forward(op, *leaves, **attrs), proj))

    return grad_check(f, leaves, h=h, tol=tol)


# ============================================================
#                      NETWORK CASES
# ============================================================

def kink_margin(f: Callable[[], Tensor]) -> float:
    """Smallest |input| seen by any kinked kernel during one taped pass of f."""
    with Tape() as tape:
        f()
    margins = [
        float(np.min(np.abs(node.inputs[0].data)))
        for node in tape.nodes
        if node.kernel.name in KINKED and node.inputs[0].size
    ]
    return min(margins, default=np.inf)


def smallest_gradient(f: Callable[[], Tensor], leaves: Sequence[Tensor]) -> float:
    """Smallest analytic |df/dx| over all leaf coordinates, ignoring exact zeros."""
    for p in leaves:
        p.zero_grad()
    with Tape() as tape:
        out = f()
    backward(tape, out)
    mags = np.concatenate([np.abs(p.grad).reshape(-1) for p in leaves])
    mags = mags[mags > ROUNDOFF]
    return float(mags.min()) if mags.size else np.inf


def _agent_case(rng):
    n_agents, input_dim, hidden_dim, n_actions = 2, 4, 3, 2
    agent = RNNAgent(input_dim, hidden_dim, n_actions, rng=rng)
    x1 = Tensor(_u(rng, n_agents, input_dim), requires_grad=True)
    x2 = Tensor(_u(rng, n_agents, input_dim), requires_grad=True)
    h0 = Tensor(_u(rng, n_agents, hidden_dim), requires_grad=True)
    c1, c2, ch = _u(rng, n_agents, n_actions), _u(rng, n_agents, n_actions), _u(rng, n_agents, hidden_dim)

    def f() -> Tensor:
        q1, h1 = agent.forward(x1, h0)
        q2, h2 = agent.forward(x2, h1)
        return reduce_sum(mul(q1, c1)) + reduce_sum(mul(q2, c2)) + reduce_sum(mul(h2, ch))

    return f, agent.parameters() + [x1, x2, h0]


def _mixer_case(build):
    def case(rng):
        batch, n_agents, state_dim, hidden_dim = 2, 3, 4, 3
        mixer = build(n_agents, state_dim, hidden_dim, rng)
        q = Tensor(_u(rng, batch, n_agents), requires_grad=True)
        hist = Tensor(_u(rng, batch, n_agents, hidden_dim), requires_grad=True)
        state = Tensor(_u(rng, batch, state_dim), requires_grad=True)
        proj = _u(rng, batch)

        def f() -> Tensor:
            return reduce_sum(mul(mixer.forward(q, hist, state), proj))

        return f, mixer.parameters() + [q, hist, state]
    return case


SMALL_TRANSMIX = TransMixConfig(layers=2, heads=2, model_dim=4, state_tokens=2, skip_dim=3, warm_start=False)

NETWORK_CASES: Dict[str, Callable] = {
    "agent": _agent_case,
    "mixer:vdn": _mixer_case(lambda n, s, d, rng: VDNMixer()),
    "mixer:qmix": _mixer_case(lambda n, s, d, rng: QMixer(n, s, embed_dim=4, rng=rng)),
    "mixer:transmix": _mixer_case(
        lambda n, s, d, rng: TransMixer(n, s, d, rng=rng, **SMALL_TRANSMIX.model_dump())
    ),
}


def network_trial(name: str, rng: np.random.Generator, h: float = 1e-5, tol: float = 1e-4):
    for _ in range(MAX_REDRAWS):
        f, leaves = NETWORK_CASES[name](rng)
        if kink_margin(f) < KINK_MARGIN:
            continue
        if smallest_gradient(f, leaves) < GRAD_FLOOR:
            continue
        return grad_check(f, leaves, h=h, tol=tol)
    raise CaseDrawError(
        f"{name}: no draw cleared the kink margin and gradient floor in {MAX_REDRAWS} attempts"
    )


# ============================================================
#                         SUITE
# ============================================================

def run_gradcheck_suite(
    trials: int = 100,
    tol: float = 1e-4,
    h: float = 1e-5,
    seed: int = 0,
    names: Sequence[str] = (),
    progress: bool = True,
) -> List[CaseReport]:
    """
    Run `trials` randomized checks per case. `names` restricts the run to a
    subset of kernel / network case names.
    """
    if trials < 1:
        raise ValueError(f"run_gradcheck_suite: trials must be ≥ 1, got {trials}")
    missing = sorted(set(OPS) - set(KERNEL_CASES))
    if missing:
        raise RuntimeError(f"no gradcheck case for registered kernels: {', '.join(missing)}")

    cases = [(op, kernel_trial) for op in sorted(OPS)] + [(n, network_trial) for n in NETWORK_CASES]
    if names:
        cases = [c for c in cases if c[0] in set(names)]

    rng = np.random.default_rng(seed)
    reports = []
    for name, trial in tqdm(cases, desc="gradcheck", disable=not progress):
        failures, worst = 0, 0.0
        for _ in range(trials):
            report = trial(name, rng, h=h, tol=tol)
            failures += int(not report.passed)
            worst = max(worst, report.max_rel_err)
        reports.append(CaseReport(name=name, trials=trials, failures=failures, max_rel_err=worst))
    return reports
