import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose

from _internal import gradcheck_suite
from _internal.config_models import QmixConfig, TransMixConfig
from _internal.envs import brute_force_optimum
from _internal.errors import CaseDrawError, ShapeError
from _internal.fixtures import fixture_spec
from _internal.gradcheck_suite import network_trial, run_gradcheck_suite, smallest_gradient
from _internal.learner import fit_payoff_table
from _internal.mixers import (
    QMixer,
    TransMixer,
    additive_attention,
    build_mixer,
    transmix_layer,
    vdn_forward,
)
from _internal.numerics import Tape, Tensor, backward, mul, reduce_sum


# ============================================================
#        STRAIGHT-LINE REFERENCE (one batch element at a time)
# ============================================================

def ref_attention(tokens, w):
    scores = tokens @ w / np.sqrt(len(w))
    alpha = np.exp(scores - scores.max())
    alpha /= alpha.sum()
    return alpha @ tokens


def ref_layer(s, q, values, P, prefix, heads, state_tokens):
    n, d_model = values.shape
    d_head = d_model // heads
    state_tok = (s @ P[f"{prefix}.state_embed.w"] + P[f"{prefix}.state_embed.b"]).reshape(state_tokens, d_model)
    keys = q[:, None] @ P[f"{prefix}.q_embed.w"] + P[f"{prefix}.q_embed.b"]

    g_parts, u_parts = [], []
    for h in range(heads):
        cut = slice(h * d_head, (h + 1) * d_head)
        g = ref_attention(state_tok[:, cut], P[f"{prefix}.w_alpha"][h])
        kg = ref_attention(g * keys[:, cut], P[f"{prefix}.w_beta"][h])
        g_parts.append(g)
        u_parts.append(kg * values[:, cut])
    u = np.concatenate(u_parts, axis=-1)
    out = u @ P[f"{prefix}.out.w"] + P[f"{prefix}.out.b"] + values
    return out, np.concatenate(g_parts)


def ref_forward(q, hist, s, P, layers, heads, state_tokens):
    tokens = hist @ P["hist_embed.w"] + P["hist_embed.b"]
    summary = None
    for layer in range(layers):
        tokens, summary = ref_layer(s, q, tokens, P, f"layer{layer}", heads, state_tokens)
    skip = np.concatenate([q[:, None], hist], axis=-1) @ P["skip.w"] + P["skip.b"]
    pooled = np.concatenate([tokens.mean(axis=0), summary, skip.mean(axis=0)])
    return float(pooled @ P["head.w"][:, 0] + P["head.b"][0])


def _numpy_params(mixer):
    return {name: p.data for name, p in mixer.params.items()}


def _random_transmix(rng, n_agents=3, state_dim=4, hidden_dim=3, **dims):
    cfg = TransMixConfig(**{"warm_start": False, **dims})
    return TransMixer(n_agents, state_dim, hidden_dim, rng=rng, **cfg.model_dump())


# ============================================================
#                           VDN
# ============================================================

@pytest.mark.parametrize(
    "q,expected",
    [
        ([1.0, 2.0, 3.0], 6.0),
        ([4.25], 4.25),
        ([-5.0, 5.0], 0.0),
    ],
)
def test_vdn_examples(q, expected):
    assert vdn_forward(Tensor([q])).data.tolist() == [expected]


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-1e3, 1e3)))
def test_vdn_is_exactly_the_sum(q):
    assert np.array_equal(vdn_forward(Tensor(q)).data, q.sum(axis=-1))


def test_vdn_rejects_empty_team():
    with pytest.raises(ShapeError):
        vdn_forward(Tensor(np.zeros((2, 0))))


# ============================================================
#                           QMIX
# ============================================================

def test_qmix_zero_hypernets_give_zero():
    mixer = QMixer(n_agents=3, state_dim=4, embed_dim=5)
    out = mixer.forward(Tensor(np.ones((2, 3))), None, Tensor(np.ones((2, 4))))
    assert_allclose(out.data, [0.0, 0.0])


def test_qmix_frozen_hypernets_by_hand():
    mixer = QMixer(n_agents=2, state_dim=3, embed_dim=2)
    mixer.params["hyper_w1.b"].data[:] = 1.0
    mixer.params["hyper_w2.b"].data[:] = 1.0
    out = mixer.forward(Tensor([[1.0, 1.0]]), None, Tensor(np.zeros((1, 3))))
    # 2 · ELU(2)
    assert out.item() == pytest.approx(4.0, abs=1e-12)


def test_qmix_is_monotonic_in_every_agent_value():
    rng = np.random.default_rng(0)
    worst = np.inf
    for _ in range(1000):
        mixer = QMixer(n_agents=3, state_dim=4, embed_dim=4, rng=rng)
        q = Tensor(rng.normal(size=(1, 3)), requires_grad=True)
        state = Tensor(rng.normal(size=(1, 4)))
        with Tape() as tape:
            out = reduce_sum(mixer.forward(q, None, state))
        backward(tape, out)
        worst = min(worst, q.grad.min())
    assert worst >= -1e-9


def test_qmix_rejects_mismatched_state():
    mixer = QMixer(n_agents=2, state_dim=3, embed_dim=2)
    with pytest.raises(ShapeError):
        mixer.forward(Tensor(np.zeros((2, 2))), None, Tensor(np.zeros((3, 3))))


# ============================================================
#                   ADDITIVE ATTENTION
# ============================================================

def test_single_token_attention_returns_the_token():
    token = np.array([[[0.3, -0.7]]])
    out = additive_attention(Tensor(token), Tensor([[5.0, 1.0]]))
    assert_allclose(out.data, token[0], atol=1e-15)


def test_identical_tokens_pool_to_the_token():
    x = np.array([0.2, 0.9])
    tokens = np.stack([x, x])[:, None, :]
    out = additive_attention(Tensor(tokens), Tensor([[1.3, -0.4]]))
    assert_allclose(out.data[0], x, atol=1e-15)


def test_attention_weights_by_hand():
    tokens = np.array([[1.0, 0.0], [0.0, 1.0]])[:, None, :]
    out = additive_attention(Tensor(tokens), Tensor([[1.0, 0.0]]))
    assert_allclose(out.data[0], [0.6698, 0.3302], atol=1e-4)
    assert out.data[0].sum() == pytest.approx(1.0, abs=1e-12)


def test_attention_rejects_empty_token_set():
    with pytest.raises(ShapeError):
        additive_attention(Tensor(np.zeros((0, 1, 2))), Tensor(np.zeros((1, 2))))


# ============================================================
#                         TRANSMIX
# ============================================================

def test_zero_layer_is_the_residual_path():
    mixer = TransMixer(n_agents=2, state_dim=3, hidden_dim=2, heads=2, model_dim=4, state_tokens=2)
    values = np.random.default_rng(0).normal(size=(1, 2, 4))
    out, summary = transmix_layer(
        Tensor(np.ones((1, 3))), Tensor([[0.5, -1.0]]), Tensor(values), mixer.params, "layer0", 2, 2
    )
    assert_allclose(out.data, values, atol=1e-15)
    assert_allclose(summary.data, np.zeros((1, 4)), atol=1e-15)


def test_zero_transmix_outputs_zero():
    mixer = TransMixer(n_agents=3, state_dim=4, hidden_dim=2)
    rng = np.random.default_rng(0)
    out = mixer.forward(Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 3, 2))), Tensor(rng.normal(size=(2, 4))))
    assert_allclose(out.data, [0.0, 0.0], atol=1e-15)


def test_golden_layer_trace_two_agents_one_head():
    mixer = TransMixer(n_agents=2, state_dim=2, hidden_dim=2, heads=1, model_dim=2, state_tokens=2, skip_dim=2)
    for i, (name, p) in enumerate(sorted(mixer.params.items())):
        p.data[:] = (np.arange(p.size).reshape(p.shape) % 5 - 2) * 0.1 + 0.05 * i
    P = _numpy_params(mixer)
    s = np.array([0.4, -0.3])
    q = np.array([1.5, -0.5])
    values = np.array([[0.2, 0.7], [-0.6, 0.1]])

    out, summary = transmix_layer(
        Tensor(s[None]), Tensor(q[None]), Tensor(values[None]), mixer.params, "layer0", 1, 2
    )
    ref_out, ref_summary = ref_layer(s, q, values, P, "layer0", 1, 2)
    assert np.max(np.abs(out.data[0] - ref_out)) <= 1e-12
    assert np.max(np.abs(summary.data[0] - ref_summary)) <= 1e-12


@pytest.mark.parametrize("model_dim,heads", [(2, 1), (4, 2)])
def test_golden_forward_trace_two_agents_two_layers(model_dim, heads):
    rng = np.random.default_rng(42)
    mixer = _random_transmix(rng, n_agents=2, state_dim=3, hidden_dim=2,
                             layers=2, heads=heads, model_dim=model_dim, state_tokens=2, skip_dim=3)
    P = _numpy_params(mixer)
    q = rng.normal(size=(4, 2))
    hist = rng.normal(size=(4, 2, 2))
    s = rng.normal(size=(4, 3))

    out = mixer.forward(Tensor(q), Tensor(hist), Tensor(s)).data
    expected = [ref_forward(q[b], hist[b], s[b], P, 2, heads, 2) for b in range(4)]
    assert np.max(np.abs(out - expected)) <= 1e-12


def test_transmix_is_permutation_invariant():
    rng = np.random.default_rng(5)
    mixer = _random_transmix(rng, n_agents=4, state_dim=5, hidden_dim=3, heads=2, model_dim=8, state_tokens=3)
    for _ in range(100):
        q = rng.normal(size=(1, 4))
        hist = rng.normal(size=(1, 4, 3))
        s = rng.normal(size=(1, 5))
        perm = rng.permutation(4)
        base = mixer.forward(Tensor(q), Tensor(hist), Tensor(s)).item()
        permuted = mixer.forward(Tensor(q[:, perm]), Tensor(hist[:, perm]), Tensor(s)).item()
        assert abs(base - permuted) <= 1e-9


def test_transmix_is_not_monotonic():
    rng = np.random.default_rng(0)
    found = False
    for _ in range(1000):
        mixer = _random_transmix(rng, n_agents=2, state_dim=3, hidden_dim=2, heads=2, model_dim=4, state_tokens=2)
        q = Tensor(rng.normal(size=(1, 2)), requires_grad=True)
        with Tape() as tape:
            out = reduce_sum(mixer.forward(q, Tensor(rng.normal(size=(1, 2, 2))), Tensor(rng.normal(size=(1, 3)))))
        backward(tape, out)
        if q.grad.min() < 0:
            found = True
            break
    assert found


def test_transmix_has_no_state_conditioned_weights():
    mixer = _random_transmix(np.random.default_rng(0))
    assert not any(name.startswith("hyper") for name in mixer.params)


def test_transmix_rejects_width_not_divisible_by_heads():
    with pytest.raises(ShapeError):
        TransMixer(n_agents=2, state_dim=2, hidden_dim=2, heads=3, model_dim=4)


@pytest.mark.parametrize("layers", [1, 7])
def test_transmix_rejects_layer_count_out_of_range(layers):
    with pytest.raises(ShapeError, match=r"\[2, 6\]"):
        TransMixer(n_agents=2, state_dim=2, hidden_dim=2, layers=layers)


def _q_gradient(mixer, rng, n_agents=3, state_dim=4, hidden_dim=3):
    q = Tensor(rng.normal(size=(5, n_agents)), requires_grad=True)
    hist = Tensor(rng.normal(size=(5, n_agents, hidden_dim)))
    state = Tensor(rng.normal(size=(5, state_dim)))
    with Tape() as tape:
        out = reduce_sum(mixer.forward(q, hist, state))
    backward(tape, out)
    return q.grad


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_warm_start_begins_as_a_mean_over_agents(seed):
    rng = np.random.default_rng(seed)
    mixer = TransMixer(n_agents=3, state_dim=4, hidden_dim=3, rng=rng)
    assert_allclose(_q_gradient(mixer, rng), np.full((5, 3), 1.0 / 3.0), atol=1e-12)
    assert np.all(mixer.params["head.w"].data[: 2 * mixer.model_dim] == 0.0)


def test_warm_start_keeps_greedy_agents_on_the_best_joint_action():
    # with positive ∂Q_tot/∂Q_i the per-agent argmax also maximizes Q_tot
    rng = np.random.default_rng(3)
    mixer = TransMixer(n_agents=2, state_dim=2, hidden_dim=2, heads=2, model_dim=4, rng=rng)
    utilities = rng.normal(size=(2, 3))
    joint = list(itertools.product(range(3), repeat=2))
    q = np.array([[utilities[0, a], utilities[1, b]] for a, b in joint])
    hist = np.zeros((len(joint), 2, 2))
    state = np.ones((len(joint), 2))
    q_tot = mixer.forward(Tensor(q), Tensor(hist), Tensor(state)).data
    assert joint[int(np.argmax(q_tot))] == tuple(np.argmax(utilities, axis=1))


def test_random_draw_without_warm_start_uses_every_stream():
    mixer = build_mixer("transmix", 2, 3, 4, TransMixConfig(heads=2, model_dim=4, warm_start=False),
                        np.random.default_rng(0))
    assert np.any(mixer.params["head.w"].data[:8] != 0.0)


@pytest.mark.parametrize("name", ["mixer:vdn", "mixer:qmix", "mixer:transmix"])
@pytest.mark.parametrize("seed", [0, 1])
def test_mixer_gradients_match_finite_differences(name, seed):
    report = network_trial(name, np.random.default_rng(seed))
    assert report.passed, report


def test_smallest_gradient_ignores_exact_zeros():
    x = Tensor(np.array([1.0, 0.0, 2.0]), requires_grad=True)
    weights = np.array([1e-9, 0.0, 1.0])
    report = smallest_gradient(lambda: reduce_sum(mul(mul(x, x), weights)), [x])
    assert report == pytest.approx(2e-9)


def test_draws_below_the_gradient_floor_are_redrawn(monkeypatch):
    monkeypatch.setattr(gradcheck_suite, "GRAD_FLOOR", np.inf)
    monkeypatch.setattr(gradcheck_suite, "MAX_REDRAWS", 3)
    with pytest.raises(CaseDrawError, match="mixer:qmix"):
        network_trial("mixer:qmix", np.random.default_rng(0))


@pytest.mark.parametrize("seed", range(10))
def test_transmix_attention_vectors_pass_at_full_tolerance(seed):
    report = network_trial("mixer:transmix", np.random.default_rng(seed), h=1e-5, tol=1e-4)
    assert report.passed, report


@pytest.mark.slow
def test_full_gradient_audit_passes_at_one_hundred_trials():
    reports = run_gradcheck_suite(trials=100, tol=1e-4, h=1e-5, progress=False)
    failed = [(r.name, r.failures, r.max_rel_err) for r in reports if r.failures]
    assert failed == []
    assert {r.name for r in reports} >= {"agent", "mixer:vdn", "mixer:qmix", "mixer:transmix"}


@pytest.mark.parametrize(
    "kind,cfg,expected",
    [
        ("vdn", None, "VDNMixer"),
        ("qmix", QmixConfig(embed_dim=4), "QMixer"),
        ("transmix", TransMixConfig(heads=2, model_dim=4), "TransMixer"),
    ],
)
def test_build_mixer(kind, cfg, expected):
    mixer = build_mixer(kind, 2, 3, 4, cfg, np.random.default_rng(0))
    assert type(mixer).__name__ == expected
    out = mixer.forward(Tensor(np.ones((5, 2))), Tensor(np.ones((5, 2, 4))), Tensor(np.ones((5, 3))))
    assert out.shape == (5,)


def test_build_mixer_rejects_unknown_kind():
    with pytest.raises(ValueError, match="allowed"):
        build_mixer("qplex", 2, 3, 4)


# ============================================================
#                   REPRESENTABILITY
# ============================================================

def test_transmix_fits_a_non_monotonic_table_that_qmix_cannot():
    table = fixture_spec("nonmono3x3").payoff
    best, value = brute_force_optimum(table)
    assert best == (0, 0) and value == 8.0

    transmix = fit_payoff_table("transmix", table, steps=2000, seed=0)
    qmix = fit_payoff_table("qmix", table, steps=2000, seed=0)
    assert transmix.mse < 0.1
    assert qmix.mse > transmix.mse


def test_additive_table_is_recovered_by_vdn():
    table = fixture_spec("additive2x3").payoff
    result = fit_payoff_table("vdn", table, steps=2000, seed=0)
    assert result.mse < 1e-2
    assert result.greedy_joint == brute_force_optimum(table)[0]
    assert result.predictions.shape == (3, 3)


def test_monotonic_mixer_cannot_represent_nonmono_exactly():
    # every monotonic f with f(0,0) > f(0,1) must also have f(1,0) >= f(1,1)
    table = np.asarray(fixture_spec("nonmono3x3").payoff)
    violated = any(
        table[0, b] > table[0, c] and table[a, b] < table[a, c]
        for a, b, c in itertools.product(range(3), repeat=3)
    )
    assert violated
