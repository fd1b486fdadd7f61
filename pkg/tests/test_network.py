import numpy as np
import pytest

from medc_lab import autodiff as ad
from medc_lab.network import (
    ConvLayer,
    DenseLayer,
    NetworkError,
    NetworkSpec,
    ParamSet,
    bc_loss,
    build_network,
    default_spec,
    forward,
    gradients,
    param_count,
    policy_and_value,
    ppo_loss,
    value_loss,
)
from medc_lab.optim import AdamState, clip_grad_norm, optimizer_step

TINY = NetworkSpec(2, 5, 5, (ConvLayer(2, 3, 1), ConvLayer(3, 2, 1), DenseLayer(8)), n_actions=3)


def fd_check(loss_fn, params: ParamSet, h=1e-5):
    """Max relative error between autodiff and central differences over every parameter."""
    loss, leaves = loss_fn(params, True)
    analytic = gradients(loss, leaves, params).flat()
    base = params.flat()
    numeric = np.empty_like(base)
    for i in range(base.size):
        up, down = base.copy(), base.copy()
        up[i] += h
        down[i] -= h
        numeric[i] = (loss_fn(params.with_flat(up), False)[0].item()
                      - loss_fn(params.with_flat(down), False)[0].item()) / (2 * h)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / scale))


def jitter(params, rng):
    # zero biases put dead patches exactly on the ReLU kink, where differences disagree
    return params.with_flat(params.flat() + rng.normal(scale=0.05, size=params.size))


def tiny_batch(seed=0, n=6):
    rng = np.random.default_rng(seed)
    params = jitter(build_network(TINY, seed, policy_gain=1.0), rng)
    obs = rng.normal(size=(n, 2, 5, 5))
    return rng, params, obs


def test_tiny_net_is_small():
    assert param_count(TINY) <= 500


def test_default_parameter_count():
    # conv 5->8 (3x3): 368, conv 8->16 (3x3, s2): 1168, dense 144->64: 9280, heads 585 + 65
    assert param_count(default_spec(10, 10)) == 11466


def test_ppo_loss_gradient_matches_finite_differences():
    rng, params, obs = tiny_batch()
    actions = rng.integers(0, 3, size=len(obs))
    logits, _ = policy_and_value(params, TINY, obs)
    logp = np.log(logits[np.arange(len(obs)), actions])
    old_logp = logp + rng.uniform(-0.4, 0.4, size=len(obs))  # some ratios outside the clip range
    adv = rng.normal(size=len(obs))
    ret = rng.normal(size=len(obs))

    def fn(p, record):
        loss, _, leaves = ppo_loss(p, TINY, obs, actions, old_logp, adv, ret, 0.2, 0.5, 0.01, record)
        return loss, leaves

    assert fd_check(fn, params) < 1e-4


def test_value_loss_gradient_matches_finite_differences():
    rng, params, obs = tiny_batch(1)
    ret = rng.normal(size=len(obs))
    assert fd_check(lambda p, r: value_loss(p, TINY, obs, ret, r), params) < 1e-4


def test_bc_loss_gradient_matches_finite_differences():
    rng, params, obs = tiny_batch(2)
    labels = rng.integers(0, 3, size=len(obs))
    assert fd_check(lambda p, r: bc_loss(p, TINY, obs, labels, r), params) < 1e-4


def test_strided_conv_gradient():
    spec = NetworkSpec(1, 7, 7, (ConvLayer(2, 3, 2), DenseLayer(4)), n_actions=2)
    rng = np.random.default_rng(3)
    params = jitter(build_network(spec, 3, policy_gain=1.0), rng)
    obs = rng.normal(size=(4, 1, 7, 7))
    labels = rng.integers(0, 2, size=4)
    assert fd_check(lambda p, r: bc_loss(p, spec, obs, labels, r), params) < 1e-4


def _loop_forward(params, spec, obs):
    """Straight-line reference: explicit loops over every output cell."""
    x = obs
    names = iter(params.names)
    for layer in spec.layers:
        w, b = params[next(names)], params[next(names)]
        if isinstance(layer, ConvLayer):
            k, s = layer.kernel, layer.stride
            n, c, h, wd = x.shape
            oh, ow = (h - k) // s + 1, (wd - k) // s + 1
            out = np.zeros((n, w.shape[0], oh, ow))
            for i in range(oh):
                for j in range(ow):
                    patch = x[:, :, i * s:i * s + k, j * s:j * s + k]
                    out[:, :, i, j] = np.einsum("ncij,fcij->nf", patch, w) + b
        else:
            out = x.reshape(len(x), -1) @ w + b
        x = np.maximum(out, 0) if layer.activation == "relu" else out
    hidden = x.reshape(len(x), -1)
    wp, bp, wv, bv = (params[next(names)] for _ in range(4))
    return hidden @ wp + bp, (hidden @ wv + bv).ravel()


def test_forward_matches_loop_reference():
    spec = default_spec(10, 10)
    params = build_network(spec, 7, policy_gain=1.0)
    obs = np.random.default_rng(7).random((3, 5, 10, 10))
    logits, values = forward(params, spec, obs)[:2]
    ref_logits, ref_values = _loop_forward(params, spec, obs)
    np.testing.assert_allclose(logits.data, ref_logits, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(np.ravel(values.data), ref_values, rtol=1e-12, atol=1e-12)


def test_build_network_is_deterministic_per_seed():
    spec = default_spec(10, 10)
    assert build_network(spec, 4).equals(build_network(spec, 4))
    assert not build_network(spec, 4).equals(build_network(spec, 5))


def test_observation_shape_mismatch_raises():
    spec = default_spec(10, 10)
    params = build_network(spec, 0)
    with pytest.raises(NetworkError):
        forward(params, spec, np.zeros((1, 4, 10, 10)))


def test_non_finite_inputs_rejected():
    _, params, obs = tiny_batch()
    with pytest.raises(NetworkError):
        ppo_loss(params, TINY, obs, np.zeros(len(obs), int), np.full(len(obs), np.nan),
                 np.zeros(len(obs)), np.zeros(len(obs)))


def test_adam_first_step_moves_each_weight_by_lr():
    # with bias correction the first Adam step is lr * sign(g) (up to eps)
    _, params, obs = tiny_batch()
    loss, leaves = bc_loss(params, TINY, obs, np.zeros(len(obs), int))
    grads = gradients(loss, leaves, params)
    before = params.flat()
    opt = AdamState.for_params(params, lr=1e-3)
    optimizer_step(params, grads, opt)
    g = grads.flat()
    moved = params.flat() - before
    mask = np.abs(g) > 1e-6
    np.testing.assert_allclose(moved[mask], -1e-3 * np.sign(g[mask]), rtol=1e-3)
    assert params.version == 1


def test_clip_grad_norm_caps_global_norm():
    _, params, obs = tiny_batch()
    loss, leaves = bc_loss(params, TINY, obs, np.zeros(len(obs), int))
    grads = gradients(loss, leaves, params)
    scaled = grads.with_flat(grads.flat() * 1000)
    clip_grad_norm(scaled, 0.5)
    assert np.linalg.norm(scaled.flat()) == pytest.approx(0.5)


def test_backward_requires_scalar():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.AutodiffError):
        ad.mul(x, 2.0).backward()


def test_shared_subexpression_accumulates():
    x = ad.Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = ad.sum(ad.mul(x, x) + x)
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)
