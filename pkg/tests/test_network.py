import numpy as np
import pytest

from esrpcb.nn import (ConfigError, NetworkConfig, ShapeError, StateError, build_network,
                       count_macs, count_params, rescat_block_params, rescat_forward)
from esrpcb.nn.gradcheck import gradcheck
from esrpcb.nn.network import conv_specs, param_names

ESRPCB_C = NetworkConfig(edge_mode="canny")
ESRPCB_S = NetworkConfig(edge_mode="sobel")
EDSR_REF = NetworkConfig(edge_mode="none", variant="edsr")


def _closed_form_params(cin, f=64, n=16, edsr=False):
    conv3 = lambda i, o, bias=True: i * o * 9 + (o if bias else 0)  # noqa: E731
    head = conv3(cin, f)
    if edsr:
        body = n * 2 * conv3(f, f, bias=False) + conv3(f, f)
    else:
        body = n * (2 * conv3(f, f) + 2 * f * f + f)
    return head + body + 2 * conv3(f, 4 * f) + conv3(f, 3)


def test_rescat_block_params_table_value():
    assert rescat_block_params(64) == 36_928 + 36_928 + 8_256 == 82_112


@pytest.mark.parametrize("config,expected,cin,edsr", [
    (ESRPCB_C, 1_613_315, 4, False),
    (ESRPCB_S, 1_613_891, 5, False),
    (EDSR_REF, 1_515_523, 3, True),
])
def test_param_counts(config, expected, cin, edsr):
    assert _closed_form_params(cin, edsr=edsr) == expected
    assert count_params(build_network(config)) == expected
    assert count_params(config) == expected


def test_sobel_minus_canny_is_one_input_slice():
    assert count_params(ESRPCB_S) - count_params(ESRPCB_C) == 64 * 9


@pytest.mark.parametrize("config,gmacs", [(EDSR_REF, 44.64), (ESRPCB_C, 46.88), (ESRPCB_S, 46.93)])
def test_macs_within_two_percent(config, gmacs):
    assert count_macs(config, 150, 150) / 1e9 == pytest.approx(gmacs, rel=0.02)


def test_macs_hand_count_small():
    cfg = NetworkConfig(n_blocks=1, filters=2, edge_mode="none")
    h = w = 3
    lr = h * w
    expected = (2 * lr * (27 + 1)            # sfe
                + 2 * 2 * lr * (18 + 1)      # block convs
                + 2 * lr * (4 + 1)           # fuse
                + 8 * lr * (18 + 1)          # up1
                + 8 * 4 * lr * (18 + 1)      # up2 at 2x
                + 3 * 16 * lr * (18 + 1))    # final at 4x
    assert count_macs(cfg, h, w) == expected


def test_layer_graph_order():
    names = [s.name for s in conv_specs(NetworkConfig(n_blocks=2, filters=8))]
    assert names == ["sfe", "block0.conv1", "block0.conv2", "block0.fuse",
                     "block1.conv1", "block1.conv2", "block1.fuse", "up1", "up2", "final"]
    assert "body.w" in param_names(NetworkConfig(n_blocks=1, variant="edsr"))
    assert "block0.conv1.b" not in param_names(NetworkConfig(n_blocks=1, variant="edsr"))


def test_config_validation():
    with pytest.raises(ConfigError):
        NetworkConfig(scale=2)
    with pytest.raises(ConfigError):
        NetworkConfig(edge_mode="laplace")
    assert [NetworkConfig(edge_mode=m).input_channels for m in ("none", "canny", "sobel")] == [3, 4, 5]


def _block_params(rng, f, zero=False):
    shapes = {"conv1.w": (f, f, 3, 3), "conv1.b": (f,), "conv2.w": (f, f, 3, 3),
              "conv2.b": (f,), "fuse.w": (f, 2 * f, 1, 1), "fuse.b": (f,)}
    return {k: np.zeros(s) if zero else rng.standard_normal(s) * 0.1 for k, s in shapes.items()}


def test_zero_rescat_is_identity(rng):
    x = rng.standard_normal((8, 5, 6))
    p = _block_params(rng, 8, zero=True)
    np.testing.assert_array_equal(rescat_forward(p, x), x)
    np.testing.assert_array_equal(rescat_forward(p, rescat_forward(p, x)), x)


def test_rescat_matches_network_block(rng):
    net = build_network(NetworkConfig(n_blocks=1, filters=8), seed=3, dtype=np.float64)
    p = {k.split(".", 1)[1]: v for k, v in net.params.items() if k.startswith("block0.")}
    x = rng.standard_normal((8, 4, 4))
    np.testing.assert_allclose(rescat_forward(p, x), net._block(0, x[None], None)[0])


def test_rescat_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        rescat_forward(_block_params(rng, 8), np.zeros((4, 3, 3)))


def test_forward_shape_and_determinism(rng):
    net = build_network(NetworkConfig(n_blocks=2, filters=8), seed=0)
    x = rng.random((4, 10, 7)).astype(np.float32)
    before = {k: v.copy() for k, v in net.params.items()}
    y1 = net.forward(x)
    y2 = net.forward(x)
    assert y1.shape == (3, 40, 28)
    assert y1.tobytes() == y2.tobytes()
    for k in before:
        np.testing.assert_array_equal(before[k], net.params[k])


def test_forward_full_size_canny_network():
    net = build_network(ESRPCB_C, seed=0)
    x = np.random.default_rng(0).random((4, 150, 150)).astype(np.float32)
    assert net.forward(x).shape == (3, 600, 600)


def test_zero_network_outputs_zero(rng):
    net = build_network(NetworkConfig(n_blocks=2, filters=8), seed=0).zero_()
    assert not net.forward(rng.random((4, 6, 6))).any()


def test_forward_channel_mismatch(rng):
    net = build_network(NetworkConfig(n_blocks=1, filters=4))
    with pytest.raises(ShapeError):
        net.forward(rng.random((3, 6, 6)))


def test_backward_before_forward():
    net = build_network(NetworkConfig(n_blocks=1, filters=4))
    with pytest.raises(StateError):
        net.backward(None, np.zeros((3, 8, 8)))


def test_mse_at_minimum_has_zero_gradient(rng):
    net = build_network(NetworkConfig(n_blocks=2, filters=8), seed=1, dtype=np.float64)
    x = rng.random((4, 6, 6))
    target = net.forward(x)
    y, tape = net.forward(x, record=True)
    grads, gx = net.backward(tape, 2 * (y - target) / y.size)
    assert all(not g.any() for g in grads.values())
    assert not gx.any()


def test_batched_backward_is_sum_of_singles(rng):
    net = build_network(NetworkConfig(n_blocks=1, filters=4), seed=2, dtype=np.float64)
    xs = rng.random((2, 4, 5, 5))
    gs = rng.standard_normal((2, 3, 20, 20))
    _, tape = net.forward(xs, record=True)
    batched, _ = net.backward(tape, gs)
    total = None
    for x, g in zip(xs, gs):
        _, t = net.forward(x, record=True)
        single, _ = net.backward(t, g)
        total = single if total is None else {k: total[k] + single[k] for k in single}
    for k in batched:
        np.testing.assert_allclose(batched[k], total[k], rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("variant,edge", [("esrpcb", "sobel"), ("edsr", "none")])
def test_gradcheck_variants(variant, edge):
    res = gradcheck(NetworkConfig(n_blocks=1, filters=4, edge_mode=edge, variant=variant),
                    size=6, per_tensor=12)
    assert res.kink_crossings == 0
    assert res.max_rel_error < 1e-4
