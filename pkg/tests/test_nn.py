import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from curriculum_control.nn import (Adam, MlpSpec, NumericError, ParamSet, RMSProp, Tensor, adam_step, clip_grads,
                                   forward_policy, forward_value, global_norm, gradient, init_mlp, log_prob_entropy, log_softmax,
                                   make_optimizer, mlp_forward, mlp_forward_t, mlp_jvp, mode_action, policy_spec,
                                   rmsprop_step, sample_action, value_spec)

from helpers import fd_grad, rel_err


# --- init and forward -------------------------------------------------------


def test_init_deterministic():
    a = init_mlp(policy_spec(7, 2, seed=3))
    b = init_mlp(policy_spec(7, 2, seed=3))
    assert a.flatten().tobytes() == b.flatten().tobytes()
    assert init_mlp(policy_spec(7, 2, seed=4)).flatten().tobytes() != a.flatten().tobytes()


def test_zero_hidden_rejected():
    with pytest.raises(ValueError):
        MlpSpec(4, 3, hidden=())


def test_output_dims():
    assert policy_spec(5, 4).output_dim == 12
    assert value_spec(5).output_dim == 1
    assert init_mlp(policy_spec(5, 4)).shapes == [(5, 64), (64,), (64, 64), (64,), (64, 12), (12,)]


def test_policy_output_scale():
    p = init_mlp(policy_spec(6, 2, seed=1))
    w_out = p[-2]
    # orthogonal with gain 0.01: singular values all equal 0.01
    np.testing.assert_allclose(np.linalg.svd(w_out, compute_uv=False), 0.01, rtol=1e-10)
    hidden = p[2]
    np.testing.assert_allclose(hidden.T @ hidden, 2.0 * np.eye(64), atol=1e-10)


def test_zero_weights_uniform():
    p = ParamSet([np.zeros(s) for s in init_mlp(policy_spec(3, 2)).shapes])
    logits = forward_policy(p, np.ones(3))
    assert logits.shape == (2, 3) and not logits.any()
    v = ParamSet([np.zeros(s) for s in init_mlp(value_spec(3)).shapes])
    assert forward_value(v, np.ones(3)) == 0.0


def test_dimension_mismatch():
    p = init_mlp(policy_spec(3, 2))
    with pytest.raises(ValueError):
        forward_policy(p, np.ones(4))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_logits_finite(seed):
    rng = np.random.default_rng(seed)
    p = init_mlp(policy_spec(4, 3, seed=seed))
    obs = rng.normal(0, 1e6, (5, 4))
    assert np.isfinite(forward_policy(p, obs)).all()


def test_tensor_forward_matches_numpy():
    p = init_mlp(value_spec(5, seed=2))
    x = np.random.default_rng(0).standard_normal((7, 5))
    np.testing.assert_allclose(mlp_forward_t([Tensor(a) for a in p], x).data, mlp_forward(p, x), atol=1e-14)


def test_flatten_round_trip():
    p = init_mlp(policy_spec(4, 2, hidden=(8, 5), seed=9))
    q = p.unflatten(p.flatten())
    assert all(np.array_equal(a, b) for a, b in zip(p, q))
    with pytest.raises(ValueError):
        p.unflatten(np.zeros(3))


# --- action distribution ----------------------------------------------------


def test_uniform_entropy():
    _, ent = log_prob_entropy(np.zeros((4, 3)), np.zeros(4, dtype=int))
    assert ent == pytest.approx(4 * math.log(3), abs=1e-12)


def test_dominant_logit():
    logits = np.zeros((3, 3))
    logits[:, 2] = 50.0
    a, _ = sample_action(logits, np.random.default_rng(0))
    assert a.tolist() == [1, 1, 1]
    _, ent = log_prob_entropy(logits, a)
    assert ent < 1e-18


def test_sampling_frequencies():
    logits = np.array([[0.3, -1.0, 1.2], [2.0, 0.0, -0.5]])
    rng = np.random.default_rng(42)
    n = 100_000
    a, _ = sample_action(np.broadcast_to(logits, (n, 2, 3)), rng)
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    for j in range(2):
        for k, act in enumerate((-1, 0, 1)):
            p = probs[j, k]
            freq = np.mean(a[:, j] == act)
            assert abs(freq - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_joint_log_prob_is_sum():
    logits = np.random.default_rng(1).standard_normal((4, 3))
    a = np.array([-1, 0, 1, 1])
    lp, _ = log_prob_entropy(logits, a)
    single = [log_prob_entropy(logits[i:i + 1], a[i:i + 1])[0] for i in range(4)]
    assert lp == pytest.approx(sum(single), abs=1e-12)
    _, logp = sample_action(logits, np.random.default_rng(5))
    assert np.isfinite(logp)


def test_mode_action():
    logits = np.array([[0.0, 1.0, 0.5], [3.0, 0.0, 0.0], [0.0, 0.0, 2.0]])
    assert mode_action(logits).tolist() == [0, -1, 1]


# --- gradients --------------------------------------------------------------


def test_half_square_norm():
    p = init_mlp(value_spec(3, hidden=(4,), seed=1))
    _, g = gradient(lambda ps: sum(((q ** 2).sum() for q in ps[1:]), (ps[0] ** 2).sum()) * 0.5, p)
    for a, b in zip(p, g):
        np.testing.assert_allclose(b, a, atol=1e-15)


def test_constant_loss_zero_grad():
    p = init_mlp(value_spec(3, hidden=(4,)))
    loss, g = gradient(lambda ps: Tensor(2.0) + ps[0].sum() * 0.0, p)
    assert loss == 2.0
    assert all(not x.any() for x in g)


def test_unsupported_primitive():
    t = Tensor(np.ones(3))
    with pytest.raises(TypeError):
        np.sin(t)
    with pytest.raises(TypeError):
        np.concatenate([t, t])


@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_mlp_grad_fd(activation):
    rng = np.random.default_rng(7)
    p = init_mlp(MlpSpec(4, 3, hidden=(6, 5), activation=activation, seed=2))
    p = ParamSet([a + 0.1 * rng.standard_normal(a.shape) for a in p])
    x = rng.standard_normal((8, 4))
    y = rng.standard_normal((8, 3))

    def np_loss(ps):
        out = mlp_forward(ps, x, activation)
        return float(((out - y) ** 2).mean() + 0.3 * log_softmax(out.reshape(8, 1, 3)).sum())

    def t_loss(ps):
        out = mlp_forward_t(ps, x, activation)
        return (out - y).square().mean() + out.reshape(8, 1, 3).log_softmax().sum() * 0.3

    _, g = gradient(t_loss, p)
    assert rel_err(g, fd_grad(np_loss, list(p))) <= 1e-4


def test_jvp_matches_fd():
    rng = np.random.default_rng(3)
    p = init_mlp(MlpSpec(4, 6, hidden=(5, 5), seed=1))
    tangent = [rng.standard_normal(a.shape) for a in p]
    x = rng.standard_normal((3, 4))
    h = 1e-6
    up = mlp_forward([a + h * t for a, t in zip(p, tangent)], x)
    dn = mlp_forward([a - h * t for a, t in zip(p, tangent)], x)
    out, d = mlp_jvp(p, x, tangent)
    np.testing.assert_allclose(out, mlp_forward(p, x), atol=1e-14)
    np.testing.assert_allclose(d, (up - dn) / (2 * h), rtol=1e-6, atol=1e-8)


# --- optimisers -------------------------------------------------------------


def test_zero_grad_unchanged():
    p = init_mlp(value_spec(3, hidden=(4,)))
    zeros = [np.zeros_like(a) for a in p]
    for opt in (Adam(p.arrays), RMSProp(p.arrays)):
        q = opt.step(p, zeros, 0.1)
        assert all(np.array_equal(a, b) for a, b in zip(p, q))


def test_adam_first_step():
    p = ParamSet([np.array([1.0, -2.0])])
    q = adam_step(Adam(p.arrays), p, [np.ones(2)], 0.01)
    np.testing.assert_allclose(q[0] - p[0], -0.01, rtol=1e-6)


def test_adam_reference_three_steps():
    # scalar Adam written out by hand
    theta, m, v = 0.5, 0.0, 0.0
    opt = Adam([np.zeros(1)])
    ps = ParamSet([np.array([0.5])])
    for t, g in enumerate([0.3, -1.2, 0.7], start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= 0.05 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        ps = opt.step(ps, [np.array([g])], 0.05)
    assert ps[0][0] == pytest.approx(theta, abs=1e-15)


def test_rmsprop_zero_eps():
    p = ParamSet([np.array([1.0, 1.0])])
    opt = RMSProp(p.arrays, eps=0.0)
    q = rmsprop_step(opt, p, [np.array([0.5, 0.0])], 0.1)
    # v = 0.01 * g^2, step = lr * g / sqrt(v) = lr * 10 for the moving coordinate
    np.testing.assert_allclose(q[0], [0.0, 1.0], atol=1e-12)
    assert np.isfinite(q[0]).all()


def test_clip_scale():
    g = [np.array([6.0, 0.0])]
    assert global_norm(g) == 6.0
    np.testing.assert_allclose(clip_grads(g, 0.6)[0], [0.6, 0.0])
    assert clip_grads(g, 10.0)[0] is g[0]


def test_clipped_adam_sees_scaled_grad():
    p = ParamSet([np.zeros(2)])
    a = Adam(p.arrays, max_grad_clip=0.6)
    a.step(p, [np.array([6.0, 0.0])], 0.1)
    np.testing.assert_allclose(a.m[0], [0.06, 0.0])


def test_non_finite_names_layer():
    p = init_mlp(value_spec(2, hidden=(3,)))
    grads = [np.zeros_like(a) for a in p]
    grads[2][0, 0] = np.nan
    with pytest.raises(NumericError, match="W1"):
        Adam(p.arrays).step(p, grads, 0.1)


def test_make_optimizer():
    p = [np.zeros(2)]
    assert isinstance(make_optimizer("adam", p), Adam)
    assert make_optimizer("rmsprop", p, rmsprop_eps=0.0).eps == 0.0
    with pytest.raises(ValueError):
        make_optimizer("sgd", p)
