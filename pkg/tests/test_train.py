import numpy as np
import pytest

from esrpcb.nn import AdamState, NetworkConfig, ShapeError, build_network, fit, train_step
from esrpcb.nn.train import PRESETS, mse_loss

SMALL = NetworkConfig(n_blocks=1, filters=4)


def _batch(rng, n=2, h=4):
    return (rng.random((n, 4, h, h)).astype(np.float32),
            rng.random((n, 3, 4 * h, 4 * h)).astype(np.float32))


def test_zero_lr_leaves_params_unchanged(rng):
    net = build_network(SMALL, seed=0)
    before = {k: v.copy() for k, v in net.params.items()}
    loss = train_step(net, _batch(rng), AdamState(lr=0.0))
    assert np.isfinite(loss)
    for k, v in before.items():
        np.testing.assert_array_equal(v, net.params[k])


def test_first_adam_step_is_lr_times_sign(rng):
    # with bias correction the first update is lr * g / (|g| + eps)
    net = build_network(SMALL, seed=0, dtype=np.float64)
    before = {k: v.copy() for k, v in net.params.items()}
    lr, hr = _batch(rng)
    pred, tape = net.forward(lr, record=True)
    grads, _ = net.backward(tape, mse_loss(pred, hr)[1])
    train_step(net, (lr, hr), AdamState(lr=1e-3))
    for k, g in grads.items():
        delta = net.params[k] - before[k]
        big = np.abs(g) > 1e-5
        np.testing.assert_allclose(delta[big], -1e-3 * np.sign(g[big]), rtol=1e-2)


def test_train_step_returns_pre_update_loss(rng):
    net = build_network(SMALL, seed=0)
    lr, hr = _batch(rng)
    expected = mse_loss(net.forward(lr), hr)[0]
    assert train_step(net, (lr, hr), AdamState()) == pytest.approx(expected)


def test_lr_halving():
    adam = AdamState(lr=1e-4, halve_every=3)
    lrs = []
    for t in range(8):
        adam.t = t
        lrs.append(adam.current_lr())
    assert lrs == [1e-4] * 3 + [5e-5] * 3 + [2.5e-5] * 2


def test_empty_batch_rejected():
    net = build_network(SMALL)
    with pytest.raises(ValueError, match="empty"):
        train_step(net, [], AdamState())


def test_scale_mismatch_rejected(rng):
    net = build_network(SMALL)
    lr, _ = _batch(rng)
    with pytest.raises(ShapeError):
        train_step(net, (lr, np.zeros((2, 3, 8, 8), np.float32)), AdamState())


def test_fit_is_reproducible(rng):
    lr, hr = _batch(rng, n=5)
    runs = []
    for _ in range(2):
        net = build_network(SMALL, seed=7)
        hist = fit(net, (lr, hr), steps=6, batch_size=2, adam=AdamState(lr=1e-3), seed=3)
        runs.append((hist, net.params["final.w"].copy()))
    assert runs[0][0] == runs[1][0]
    np.testing.assert_array_equal(runs[0][1], runs[1][1])


def test_presets():
    assert PRESETS["paper"].lr_patch == 196 and PRESETS["paper"].batch_size == 16
    assert PRESETS["paper"].steps == 300_000 and PRESETS["paper"].halve_every == 100_000
    assert PRESETS["toy"].lr_patch == 48 and PRESETS["toy"].steps == 500
