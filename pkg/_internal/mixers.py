"""
mixers.py

Joint action-value mixers: per-agent chosen-action values → Q_tot.

All mixers take a flat batch:
    q         (B, n)       chosen-action values Q_i
    histories (B, n, d_h)  agent GRU states h_i^t
    state     (B, s_dim)   global state S_t
and return Q_tot of shape (B,).

    VDN       Σ_i Q_i
    QMIX      |W2(s)|ᵀ ELU(|W1(s)|ᵀ q + b1(s)) + v(s)
    TransMix  stacked additive-attention encoder over state, Q_i and h_i^t
              streams, mean-pooled, plus a shared bottleneck skip path.
"""

import math
from typing import Dict, Optional, Tuple

import numpy as np

from _internal.errors import ShapeError
from _internal.layers import ParamModule
from _internal.numerics import (
    Tensor,
    absolute,
    add,
    concat,
    elu,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    softmax,
)

MIXER_KINDS = ("vdn", "qmix", "transmix")


def _check_batch(q: Tensor, histories: Optional[Tensor], state: Optional[Tensor]) -> Tuple[int, int]:
    if q.ndim != 2 or q.shape[1] < 1:
        raise ShapeError(f"mixer: q must be (B, n ≥ 1), got {q.shape}")
    batch, n_agents = q.shape
    if histories is not None and (histories.ndim != 3 or histories.shape[:2] != (batch, n_agents)):
        raise ShapeError(f"mixer: histories {histories.shape} do not match q {q.shape}")
    if state is not None and (state.ndim != 2 or state.shape[0] != batch):
        raise ShapeError(f"mixer: state {state.shape} does not match q {q.shape}")
    return batch, n_agents


def _linear(params: Dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    return add(matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


# ============================================================
#                           VDN
# ============================================================

def vdn_forward(q: Tensor) -> Tensor:
    q = q if isinstance(q, Tensor) else Tensor(q)
    _check_batch(q, None, None)
    return reduce_sum(q, axis=-1)


class VDNMixer(ParamModule):
    kind = "vdn"

    def forward(self, q: Tensor, histories: Tensor, state: Tensor) -> Tensor:
        return vdn_forward(q)


# ============================================================
#                           QMIX
# ============================================================

def qmix_forward(q: Tensor, state: Tensor, params: Dict[str, Tensor], embed_dim: int) -> Tensor:
    batch, n_agents = _check_batch(q, None, state)

    w1 = absolute(reshape(_linear(params, "hyper_w1", state), (batch, n_agents, embed_dim)))
    b1 = reshape(_linear(params, "hyper_b1", state), (batch, 1, embed_dim))
    w2 = absolute(reshape(_linear(params, "hyper_w2", state), (batch, embed_dim, 1)))
    v = _linear(params, "hyper_v.out", relu(_linear(params, "hyper_v.hidden", state)))

    hidden = elu(add(matmul(reshape(q, (batch, 1, n_agents)), w1), b1))
    mixed = matmul(hidden, w2)
    return add(reshape(mixed, (batch,)), reshape(v, (batch,)))


class QMixer(ParamModule):
    """Monotonic mixer: hypernetworks on the state emit non-negative weights."""

    kind = "qmix"

    def __init__(self, n_agents: int, state_dim: int, embed_dim: int = 32, rng=None):
        super().__init__()
        self.n_agents = n_agents
        self.embed_dim = embed_dim
        self.add_linear("hyper_w1", state_dim, n_agents * embed_dim, rng)
        self.add_linear("hyper_b1", state_dim, embed_dim, rng)
        self.add_linear("hyper_w2", state_dim, embed_dim, rng)
        self.add_linear("hyper_v.hidden", state_dim, embed_dim, rng)
        self.add_linear("hyper_v.out", embed_dim, 1, rng)

    def forward(self, q: Tensor, histories: Tensor, state: Tensor) -> Tensor:
        return qmix_forward(q, state, self.params, self.embed_dim)


# ============================================================
#                        TRANSMIX
# ============================================================

def additive_attention(tokens: Tensor, w: Tensor) -> Tensor:
    """
    Linear-time additive pooling per head.

    tokens: (..., T, H, d_head); w: (H, d_head)
        α_t = softmax_t(⟨w, x_t⟩ / √d_head)
        out = Σ_t α_t x_t              → (..., H, d_head)
    """
    if tokens.ndim < 3:
        raise ShapeError(f"additive_attention: tokens must be (..., T, H, d_head), got {tokens.shape}")
    n_tokens, heads, d_head = tokens.shape[-3:]
    if n_tokens == 0:
        raise ShapeError("additive_attention: no tokens to attend over")
    if w.shape != (heads, d_head):
        raise ShapeError(f"additive_attention: w {w.shape} does not match tokens {tokens.shape}")

    scores = scale(reduce_sum(mul(tokens, w), axis=-1), 1.0 / math.sqrt(d_head))
    alpha = softmax(scores, axis=-2)
    weights = reshape(alpha, alpha.shape + (1,))
    return reduce_sum(mul(weights, tokens), axis=-3)


def transmix_layer(
    state: Tensor,
    q: Tensor,
    value_tokens: Tensor,
    params: Dict[str, Tensor],
    prefix: str,
    heads: int,
    state_tokens: int,
) -> Tuple[Tensor, Tensor]:
    """
    One encoder layer.

    state (B, s_dim), q (B, n), value_tokens (B, n, d_m)
        → out_tokens (B, n, d_m), state_summary (B, d_m)

    Per head: global query g from additive attention over state tokens;
    key tokens embed(q_i) ⊙ g pooled into a global key kg; values
    u_i = kg ⊙ v_i; heads concatenated and r_i = W_r u_i + v_i.
    """
    batch, n_agents = _check_batch(q, value_tokens, state)
    d_model = value_tokens.shape[-1]
    if d_model % heads:
        raise ShapeError(f"transmix_layer: model width {d_model} not divisible by {heads} heads")
    d_head = d_model // heads

    # global query from the state stream
    s_tok = reshape(_linear(params, f"{prefix}.state_embed", state), (batch, state_tokens, heads, d_head))
    g = additive_attention(s_tok, params[f"{prefix}.w_alpha"])

    # global key from the Q_i stream
    k = reshape(
        _linear(params, f"{prefix}.q_embed", reshape(q, (batch, n_agents, 1))),
        (batch, n_agents, heads, d_head),
    )
    p = mul(reshape(g, (batch, 1, heads, d_head)), k)
    kg = additive_attention(p, params[f"{prefix}.w_beta"])

    v = reshape(value_tokens, (batch, n_agents, heads, d_head))
    u = reshape(mul(reshape(kg, (batch, 1, heads, d_head)), v), (batch, n_agents, d_model))
    out_tokens = add(_linear(params, f"{prefix}.out", u), value_tokens)
    return out_tokens, reshape(g, (batch, d_model))


def transmix_forward(
    q: Tensor,
    histories: Tensor,
    state: Tensor,
    params: Dict[str, Tensor],
    layers: int,
    heads: int,
    state_tokens: int,
) -> Tensor:
    batch, n_agents = _check_batch(q, histories, state)

    tokens = _linear(params, "hist_embed", histories)
    summary = None
    for layer in range(layers):
        tokens, summary = transmix_layer(state, q, tokens, params, f"layer{layer}", heads, state_tokens)

    v_bar = reduce_mean(tokens, axis=1)

    # skip path: shared bottleneck over [q_i ; h_i], mean over agents
    skip_in = concat([reshape(q, (batch, n_agents, 1)), histories], axis=-1)
    k_bar = reduce_mean(_linear(params, "skip", skip_in), axis=1)

    pooled = concat([v_bar, summary, k_bar], axis=-1)
    return reshape(_linear(params, "head", pooled), (batch,))


class TransMixer(ParamModule):
    """
    Transformer mixer without hypernetworks. Every per-agent transform is
    shared across agents and pooling is symmetric, so Q_tot is invariant to
    agent order. No monotonicity constraint; a random init with
    `warm_start` only begins monotonic, as a scaled mean over Q_i.
    """

    kind = "transmix"

    def __init__(
        self,
        n_agents: int,
        state_dim: int,
        hidden_dim: int,
        layers: int = 2,
        heads: int = 4,
        model_dim: int = 32,
        state_tokens: int = 4,
        skip_dim: int = 16,
        warm_start: bool = True,
        rng=None,
    ):
        super().__init__()
        if model_dim % heads:
            raise ShapeError(f"TransMixer: model_dim {model_dim} not divisible by heads {heads}")
        if not 2 <= layers <= 6:
            raise ShapeError(f"TransMixer: layers must lie in [2, 6], got {layers}")
        self.n_agents = n_agents
        self.layers = layers
        self.heads = heads
        self.model_dim = model_dim
        self.state_tokens = state_tokens
        d_head = model_dim // heads

        self.add_linear("hist_embed", hidden_dim, model_dim, rng)
        for layer in range(layers):
            prefix = f"layer{layer}"
            self.add_linear(f"{prefix}.state_embed", state_dim, state_tokens * model_dim, rng)
            self.add_linear(f"{prefix}.q_embed", 1, model_dim, rng)
            for name in ("w_alpha", "w_beta"):
                bound = 1.0 / math.sqrt(d_head)
                value = np.zeros((heads, d_head)) if rng is None else rng.uniform(-bound, bound, (heads, d_head))
                self.add_param(f"{prefix}.{name}", value)
            self.add_linear(f"{prefix}.out", model_dim, model_dim, rng)
        self.add_linear("skip", 1 + hidden_dim, skip_dim, rng)
        self.add_linear("head", 2 * model_dim + skip_dim, 1, rng)
        if warm_start and rng is not None:
            self._start_as_mean()

    def _start_as_mean(self) -> None:
        """
        Switch the attention streams off at the head and rescale the skip
        path so that Q_tot starts as a positive mean over agents:
        ∂Q_tot/∂Q_i = 1/n for every agent. Training may move away from it.
        """
        head = self.params["head.w"].data
        head[: 2 * self.model_dim] = 0.0
        k_rows = np.abs(head[2 * self.model_dim :, 0])
        q_col = np.abs(self.params["skip.w"].data[0])
        head[2 * self.model_dim :, 0] = k_rows
        self.params["skip.w"].data[0] = q_col / max(float(k_rows @ q_col), 1e-12)

    def forward(self, q: Tensor, histories: Tensor, state: Tensor) -> Tensor:
        return transmix_forward(q, histories, state, self.params, self.layers, self.heads, self.state_tokens)


# ============================================================
#                         FACTORY
# ============================================================

def build_mixer(kind: str, n_agents: int, state_dim: int, hidden_dim: int, mixer_cfg=None, rng=None) -> ParamModule:
    """
    mixer_cfg is the matching config block (QmixConfig / TransMixConfig) or
    None for defaults.
    """
    if kind == "vdn":
        return VDNMixer()
    if kind == "qmix":
        embed = mixer_cfg.embed_dim if mixer_cfg is not None else 32
        return QMixer(n_agents, state_dim, embed_dim=embed, rng=rng)
    if kind == "transmix":
        dims = {} if mixer_cfg is None else dict(
            layers=mixer_cfg.layers,
            heads=mixer_cfg.heads,
            model_dim=mixer_cfg.model_dim,
            state_tokens=mixer_cfg.state_tokens,
            skip_dim=mixer_cfg.skip_dim,
            warm_start=mixer_cfg.warm_start,
        )
        return TransMixer(n_agents, state_dim, hidden_dim, rng=rng, **dims)
    raise ValueError(f"unknown mixer {kind!r}; allowed: {', '.join(MIXER_KINDS)}")
