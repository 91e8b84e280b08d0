import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from kgrl.approximators import SQUASH_EPS, finite_diff_check
from kgrl.envs import task_spec
from kgrl.knowledge import KnowledgeSet
from kgrl.learner import CriticPair, streams_for
from kgrl.policy import (
    BetaSchedule,
    DensityError,
    GaussianActor,
    KianPolicy,
    PolicyConfigError,
    attention_weights,
    beta_at,
    categorical_entropy,
    knowledge_sample,
    log_softmax,
)


def _mixture(task="NeedlePick", hidden=(16, 16), query=(8, 8), activation="tanh", seed=3, knowledge=True):
    spec = task_spec(task)
    streams = streams_for(seed)
    from kgrl.knowledge import scripted_knowledge_set
    kset = scripted_knowledge_set(streams("init.knowledge")) if knowledge else KnowledgeSet()
    pol = KianPolicy.create(spec.layout, kset, streams, hidden, query, activation)
    critics = CriticPair.create(spec.obs_dim, spec.action_dim, (16, 16), streams, activation="tanh")
    return spec, pol, critics


def _obs_batch(spec, n=4, seed=0):
    rng = np.random.default_rng(seed)
    obs = rng.uniform(-0.3, 0.3, size=(n, spec.obs_dim))
    if spec.layout.grasp:
        obs[:, spec.layout.grasp[0]] = np.arange(n) % 2
    return obs


# --- weights --------------------------------------------------------------------------


def test_attention_weights_oracle(rng):
    u = rng.normal(size=(3, 4))
    keys = rng.normal(size=(5, 4))
    w = attention_weights(u, keys).w
    z = np.array([[ui @ k / 2.0 for k in keys] for ui in u])
    ref = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(w, ref, rtol=1e-13)


def test_attention_requires_keys():
    with pytest.raises(PolicyConfigError):
        attention_weights(np.ones(4), np.zeros((0, 4)))


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_log_softmax_shift_invariant(z, c):
    z = np.array(z)
    a, b = log_softmax(z), log_softmax(z + c)
    np.testing.assert_allclose(np.exp(a).sum(), 1.0, rtol=1e-12)
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_knowledge_sample_is_one_hot(rng):
    w = np.array([[0.2, 0.3, 0.5]] * 10)
    e = knowledge_sample(w, 1.0, rng)
    assert np.all(e.sum(axis=1) == 1) and set(np.unique(e)) <= {0.0, 1.0}


def test_degenerate_weights_select_deterministically():
    e = knowledge_sample(np.array([0.0, 1.0, 0.0]), 1.0, None)
    np.testing.assert_array_equal(e, [0, 1, 0])
    with pytest.raises(ValueError):
        knowledge_sample(np.array([0.5, 0.5]), 0.0, None)


def test_sample_frequencies_track_weights():
    w = np.array([0.7, 0.1, 0.1, 0.1])
    e = knowledge_sample(np.tile(w, (100_000, 1)), 1.0, np.random.default_rng(5))
    assert np.abs(e.mean(axis=0) - w).sum() < 0.02


def test_categorical_entropy_values():
    assert categorical_entropy(np.full(4, 0.25)) == pytest.approx(math.log(4), abs=1e-12)
    assert categorical_entropy(np.array([0.0, 1.0, 0.0])) == 0.0
    w = np.array([0.5, 0.25, 0.125, 0.125])
    assert categorical_entropy(w) == pytest.approx(-sum(p * math.log(p) for p in w), abs=1e-15)


def test_beta_schedule():
    s = BetaSchedule(1e-4, 2e-4)
    assert beta_at(s, 0) == 1.0 + 2e-4
    assert beta_at(BetaSchedule(1e-4, 0.0), 10_000) == pytest.approx(math.exp(-1), abs=1e-12)
    assert beta_at(BetaSchedule(enabled=False), 0) == 0.0
    with pytest.raises(PolicyConfigError):
        BetaSchedule(-1.0, 0.0)


# --- density --------------------------------------------------------------------------


def test_mixture_log_prob_matches_direct_sum():
    spec, pol, _ = _mixture()
    obs = _obs_batch(spec, 3)
    action = np.array([[0.1, -0.4, 0.7], [0.95, 0.0, -0.2], [-0.6, 0.3, 0.05]])
    got = pol.mixture_log_prob(obs, action)
    w = pol.weights(obs).w
    head = pol._inner_head(pol.params, obs)[0]
    kloc, klog = pol.knowledge.distributions(obs, spec.layout)
    locs = np.concatenate([head.mean[:, None], kloc], axis=1)
    stds = np.exp(np.concatenate([head.log_std[:, None], klog], axis=1))
    x = np.arctanh(action)
    for b in range(3):
        dens = sum(w[b, j] * np.prod(stats.norm.pdf(x[b], locs[b, j], stds[b, j])) for j in range(4))
        ref = math.log(dens) - np.sum(np.log(1 - action[b] ** 2 + SQUASH_EPS))
        assert got[b] == pytest.approx(ref, rel=1e-9)


def test_mixture_density_integrates_to_one():
    from scipy.integrate import quad
    spec, pol, _ = _mixture("MisOrient", knowledge=True)
    obs = np.array([0.0, 0.1, 0.0, 0.4, 0.0])
    total, _ = quad(lambda a: math.exp(pol.mixture_log_prob(obs, np.array([a]))), -1 + 1e-9, 1 - 1e-9,
                    limit=400, points=[0.0])
    assert total == pytest.approx(1.0, abs=1e-3)


def test_log_prob_rejects_boundary_actions():
    spec, pol, _ = _mixture()
    with pytest.raises(DensityError):
        pol.mixture_log_prob(_obs_batch(spec, 1)[0], np.array([1.0, 0.0, 0.0]))


def test_sample_log_prob_consistent_with_density():
    spec, pol, _ = _mixture()
    obs = _obs_batch(spec, 6)
    a, lp = pol.sample(obs, np.random.default_rng(2))
    ok = np.all(np.abs(a) < 1 - 1e-9, axis=1)
    np.testing.assert_allclose(lp[ok], pol.mixture_log_prob(obs[ok], a[ok]), rtol=1e-6, atol=1e-6)


def test_act_returns_bounded_action_and_diagnostics():
    spec, pol, _ = _mixture()
    obs = _obs_batch(spec, 1)[0]
    a, diag = pol.act(obs, np.random.default_rng(0))
    assert a.shape == (3,) and np.all(np.abs(a) <= 1)
    assert diag.weights.w.sum() == pytest.approx(1.0)
    assert 0 <= diag.selected_index <= 3


def test_greedy_uses_argmax_component_mean():
    spec, pol, _ = _mixture()
    obs = _obs_batch(spec, 1)[0]
    w = pol.weights(obs).w[0]
    j = int(np.argmax(w))
    a = pol.greedy_action(obs)
    if j == 0:
        ref = np.tanh(pol._inner_head(pol.params, obs[None])[0].mean[0])
    else:
        ref = np.tanh(pol.knowledge.distributions(obs[None], spec.layout)[0][0, j - 1])
    np.testing.assert_allclose(a, ref)


# --- gradients ------------------------------------------------------------------------


@pytest.mark.parametrize("activation", ["tanh", "relu"])
@pytest.mark.parametrize("group", ["inner", "keys", "query"])
def test_actor_gradient_matches_finite_differences(group, activation):
    spec, pol, critics = _mixture(activation=activation)
    obs = _obs_batch(spec, 4)
    noise = pol.draw_noise(4, np.random.default_rng(9))
    logw = pol._weights(pol.params, obs)[3]
    _, y_ref = pol._select(logw, noise)

    def fn(x):
        p = dict(pol.params)
        p[group] = x.reshape(pol.params[group].shape)
        r = pol.actor_loss(obs, noise, critics.min_q_and_grad, 0.2, 0.7, params=p, soft_ref=y_ref)
        return r.loss, r.grads[group]

    assert finite_diff_check(fn, pol.params[group].ravel()) < 1e-4


def test_surrogate_value_equals_plain_loss():
    spec, pol, critics = _mixture()
    obs = _obs_batch(spec, 4)
    noise = pol.draw_noise(4, np.random.default_rng(1))
    _, y = pol._select(pol._weights(pol.params, obs)[3], noise)
    a = pol.actor_loss(obs, noise, critics.min_q_and_grad, 0.1, 0.5)
    b = pol.actor_loss(obs, noise, critics.min_q_and_grad, 0.1, 0.5, soft_ref=y)
    assert a.loss == pytest.approx(b.loss, rel=1e-12)
    for k in a.grads:
        np.testing.assert_allclose(a.grads[k], b.grads[k], rtol=1e-9, atol=1e-12)


def test_plain_actor_gradient_matches_finite_differences():
    spec = task_spec("NeedleReach")
    streams = streams_for(4)
    actor = GaussianActor.create(spec.layout, streams, (12, 12), "tanh")
    critics = CriticPair.create(spec.obs_dim, spec.action_dim, (12,), streams, activation="tanh")
    obs = _obs_batch(spec, 4)
    noise = actor.draw_noise(4, np.random.default_rng(0))

    def fn(x):
        r = actor.actor_loss(obs, noise, critics.min_q_and_grad, 0.3, params={"inner": x})
        return r.loss, r.grads["inner"]

    assert finite_diff_check(fn, actor.params["inner"]) < 1e-4


def test_zero_knowledge_is_bitwise_plain_actor():
    spec = task_spec("NeedleReach")
    mix = KianPolicy.create(spec.layout, KnowledgeSet(), streams_for(8), (16, 16), (8,), "relu")
    plain = GaussianActor.create(spec.layout, streams_for(8), (16, 16), "relu")
    np.testing.assert_array_equal(mix.params["inner"], plain.params["inner"])
    critics = CriticPair.create(spec.obs_dim, spec.action_dim, (16,), streams_for(8))
    obs = _obs_batch(spec, 32)
    r1, r2 = np.random.default_rng(3), np.random.default_rng(3)
    a = mix.actor_loss(obs, mix.draw_noise(32, r1), critics.min_q_and_grad, 0.1, 0.0)
    b = plain.actor_loss(obs, plain.draw_noise(32, r2), critics.min_q_and_grad, 0.1)
    assert a.loss == b.loss
    np.testing.assert_array_equal(a.grads["inner"], b.grads["inner"])
    np.testing.assert_array_equal(a.log_prob, b.log_prob)
    sa, la = mix.sample(obs, np.random.default_rng(4))
    sb, lb = plain.sample(obs, np.random.default_rng(4))
    np.testing.assert_array_equal(sa, sb)
    np.testing.assert_array_equal(la, lb)
    x1, _ = mix.act(obs[0], np.random.default_rng(6))
    x2, _ = plain.act(obs[0], np.random.default_rng(6))
    np.testing.assert_array_equal(x1, x2)


def test_larger_beta_raises_weight_entropy_after_update():
    from kgrl.approximators import Adam
    results = []
    for beta in (0.0, 5.0):
        spec, pol, critics = _mixture(seed=21)
        pol.params["keys"] *= 4.0  # start away from uniform
        obs = _obs_batch(spec, 16)
        noise = pol.draw_noise(16, np.random.default_rng(0))
        opt = {k: Adam(v.size, 1e-2) for k, v in pol.params.items()}
        r = pol.actor_loss(obs, noise, critics.min_q_and_grad, 0.1, beta)
        for k, g in r.grads.items():
            opt[k].step(pol.params[k], g)
        results.append(float(categorical_entropy(pol.weights(obs).w).mean()))
    assert results[1] > results[0]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_weights_on_simplex(seed):
    spec, pol, _ = _mixture(seed=seed % 1000)
    w = pol.weights(_obs_batch(spec, 3, seed)).w
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, rtol=1e-12)
