import math

import numpy as np
import pytest

from covdet import net
from covdet.checks import central_difference, network_gradient_check, relative_error
from covdet.net import (
    DegenerateOrientation,
    InvalidCache,
    LayerSpec,
    Model,
    NetworkSpec,
    ShapeError,
    backward,
    conv,
    detnet_l,
    detnet_micro,
    detnet_s,
    forward,
    init_params,
    output_to_transform,
    pool,
    relu,
    sgd_step,
)


def tiny_net(with_lrn=False):
    layers = [conv(3, 4), relu(), pool()]
    if with_lrn:
        layers.append(net.lrn(depth=3, alpha=0.5, beta=0.75, kappa=1.0))
    layers += [conv(2, 3), relu(), conv(1, 2)]
    return NetworkSpec(tuple(layers), input_side=6, out_dim=2)


# -- shapes --------------------------------------------------------------------


@pytest.mark.parametrize("make", [detnet_s, detnet_l, detnet_micro])
def test_presets_map_28_to_1x1x2(make):
    spec = make()
    assert spec.output_shape(28, 28) == (1, 1, 2)
    params = init_params(spec, 0)
    out, _ = forward(spec, params, np.zeros((1, 28, 28)), keep_cache=False)
    assert out.shape == (1, 1, 1, 2)


def test_detnet_s_trace():
    spec = detnet_s()
    sizes = []
    h = 28
    for layer in spec.layers:
        if layer.kind == "conv":
            h = h - layer.kernel_h + 1
            sizes.append(h)
        elif layer.kind == "maxpool2":
            h //= 2
            sizes.append(h)
    assert sizes == [24, 12, 8, 4, 1, 1, 1, 1]
    assert [l.out_channels for l in spec.layers if l.kind == "conv"] == [40, 100, 300, 500, 500, 2]


def test_detnet_l_has_lrn_after_second_pool():
    kinds = [l.kind for l in detnet_l().layers]
    assert kinds[:8] == ["conv", "relu", "maxpool2", "conv", "relu", "maxpool2", "lrn", "conv"]


def test_bad_architecture_rejected():
    with pytest.raises(ShapeError, match="architecture/shape error"):
        NetworkSpec((conv(5, 4), relu(), conv(1, 2)), input_side=28, out_dim=2)
    with pytest.raises(ShapeError):
        LayerSpec("conv", 0, 3, 4)


def test_input_shape_mismatch():
    spec = detnet_micro()
    params = init_params(spec, 0)
    with pytest.raises(ShapeError, match="architecture/shape error"):
        forward(spec, params, np.zeros((1, 20, 20)))
    with pytest.raises(ShapeError):
        forward(spec, params, np.zeros((1, 28, 28, 3)))


def test_dense_input_gives_map():
    spec = detnet_micro()
    out, _ = forward(spec, init_params(spec, 1), np.zeros((1, 36, 40)))
    assert out.shape == (1, 3, 4, 2)


# -- forward basics ------------------------------------------------------------


def test_zero_params_zero_output():
    spec = detnet_micro()
    params = [np.zeros_like(p) for p in init_params(spec, 0)]
    rng = np.random.default_rng(0)
    out, _ = forward(spec, params, rng.normal(size=(3, 28, 28)))
    assert np.all(out == 0)


def test_relu_on_negative():
    x = -np.abs(np.random.default_rng(0).normal(size=(2, 5, 5, 3))) - 1e-3
    assert np.all(net.relu_forward(x) == 0)


def test_forward_deterministic():
    spec = detnet_micro()
    params = init_params(spec, 3)
    x = np.random.default_rng(3).normal(size=(4, 28, 28))
    a = forward(spec, params, x)[0]
    b = forward(spec, params, x)[0]
    assert a.tobytes() == b.tobytes()


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 7, 6, 3))
    w = rng.normal(size=(3, 2, 3, 4))
    b = rng.normal(size=4)
    out, _ = net.conv_forward(x, w, b)
    ref = np.zeros((2, 5, 5, 4))
    for n in range(2):
        for i in range(5):
            for j in range(5):
                for o in range(4):
                    ref[n, i, j, o] = np.sum(x[n, i : i + 3, j : j + 2, :] * w[:, :, :, o]) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_translation_covariance():
    rng = np.random.default_rng(5)
    img = rng.normal(size=(1, 20, 20, 1))
    w = rng.normal(size=(5, 5, 1, 3))
    b = rng.normal(size=3)
    full, _ = net.conv_forward(img, w, b)
    shifted, _ = net.conv_forward(img[:, 1:, 1:, :], w, b)
    # equal up to summation order inside BLAS
    np.testing.assert_allclose(shifted, full[:, 1:, 1:, :], rtol=0, atol=1e-12)


def test_pool_first_max_on_ties():
    x = np.ones((1, 2, 2, 1))
    out, arg = net.pool_forward(x)
    assert out[0, 0, 0, 0] == 1 and arg[0, 0, 0, 0] == 0
    g = net.pool_backward(np.full((1, 1, 1, 1), 5.0), x.shape, arg)
    np.testing.assert_array_equal(g[0, :, :, 0], [[5.0, 0.0], [0.0, 0.0]])


def test_pool_dense_phases_match_strided():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(1, 9, 9, 2))
    d = net.pool_dense(x)
    for a in (0, 1):
        for b in (0, 1):
            strided, _ = net.pool_forward(x[:, a:, b:, :])
            np.testing.assert_array_equal(d[:, a::2, b::2, :][:, : strided.shape[1], : strided.shape[2]], strided)


# -- backward -------------------------------------------------------------------


def test_zero_grad_output():
    spec = detnet_micro()
    params = init_params(spec, 0)
    x = np.random.default_rng(0).normal(size=(2, 28, 28))
    out, cache = forward(spec, params, x)
    grads, gx = backward(spec, params, cache, np.zeros_like(out))
    assert all(np.all(g == 0) for g in grads)
    assert np.all(gx == 0)


def test_backward_rejects_bad_cache():
    spec = detnet_micro()
    params = init_params(spec, 0)
    out, cache = forward(spec, params, np.zeros((2, 28, 28)))
    with pytest.raises(InvalidCache, match="invalid cache"):
        backward(tiny_net(), params, cache, out)
    with pytest.raises(InvalidCache):
        backward(spec, params, cache, np.zeros((3, 1, 1, 2)))
    with pytest.raises(InvalidCache):
        backward(spec, params, None, out)


def test_single_1x1_conv_weight_grad_is_input():
    spec = NetworkSpec((conv(1, 1),), input_side=1, out_dim=1)
    params = [np.ones((1, 1, 1, 1)), np.zeros(1)]
    x = np.array([[[[3.7]]]])
    out, cache = forward(spec, params, x)
    assert out.item() == pytest.approx(3.7)
    grads, gx = backward(spec, params, cache, np.ones_like(out))
    assert grads[0].item() == pytest.approx(3.7)
    assert grads[1].item() == 1.0
    assert gx.item() == 1.0


@pytest.mark.parametrize("seed", range(20))
def test_gradcheck_micro_stack_every_coordinate(seed):
    res = network_gradient_check(tiny_net(), seed)
    assert res.max_rel_error < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_with_lrn(seed):
    res = network_gradient_check(tiny_net(with_lrn=True), seed)
    assert res.max_rel_error < 1e-6


LAYER_CASES = {
    # a conv in front gives every layer a parameter-dependent input
    "conv": ((conv(2, 3), conv(2, 2)), 3),
    "relu": ((conv(2, 3), relu(), conv(2, 2)), 3),
    "maxpool2": ((conv(3, 3), pool(), conv(2, 2)), 6),
    "lrn": ((conv(2, 3), net.lrn(3, 0.3, 0.75, 1.0), conv(2, 2)), 3),
}


@pytest.mark.parametrize("kind", sorted(LAYER_CASES))
def test_gradcheck_each_layer_kind(kind):
    layers, side = LAYER_CASES[kind]
    spec = NetworkSpec(layers, input_side=side, out_dim=2)
    for seed in range(20):
        assert network_gradient_check(spec, seed).max_rel_error < 1e-6


def test_gradcheck_full_micro_sampled():
    res = network_gradient_check(detnet_micro(), 0, batch=2, max_coords=40)
    assert res.max_rel_error < 1e-6
    assert res.n_checked > 200


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 1.0 + 1e-8) < 1e-7


# -- init -------------------------------------------------------------------------


def test_init_deterministic_and_biases_zero():
    spec = detnet_micro()
    a, b = init_params(spec, 9), init_params(spec, 9)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
    assert all(np.all(p == 0) for p in a[1::2])


def test_init_std():
    spec = NetworkSpec((conv(5, 40), relu(), pool(), conv(12, 2)), input_side=28, out_dim=2)
    w = init_params(spec, 0)[0]
    assert w.shape == (5, 5, 1, 40)
    assert abs(w.std() / math.sqrt(2 / 25) - 1) < 0.2


# -- output parametrization -----------------------------------------------------------


def test_rotation_head_examples():
    assert output_to_transform([1.0, 0.0], "rotation").allclose(net.Transform2D.identity(), 1e-15)
    assert output_to_transform([0.0, 2.0], "rotation").allclose(net.Transform2D.rotation(math.pi / 2), 1e-15)
    t = output_to_transform([3.0, 4.0], "rotation")
    np.testing.assert_allclose(t.m, [[0.6, -0.8], [0.8, 0.6]], atol=1e-15)


def test_rotation_head_orthonormal_and_scale_invariant():
    rng = np.random.default_rng(0)
    for a in rng.normal(size=(200, 2)):
        t = output_to_transform(a, "rotation")
        np.testing.assert_allclose(t.m.T @ t.m, np.eye(2), atol=1e-9)
        assert t.allclose(output_to_transform(a * 7.3, "rotation"), 1e-12)


def test_rotation_head_degenerate():
    with pytest.raises(DegenerateOrientation, match="degenerate orientation"):
        output_to_transform([0.0, 0.0], "rotation")


def test_translation_head():
    assert output_to_transform([1.5, -2.0], "translation").allclose(net.Transform2D.translation(1.5, -2.0))


# -- sgd --------------------------------------------------------------------------------


def test_sgd_scalar():
    (w,), _ = sgd_step([np.array(1.0)], [np.array(2.0)], lr=0.01, momentum=0.0)
    assert w == pytest.approx(0.98, abs=1e-15)


def test_sgd_zero_grad_noop():
    p = [np.array([1.0, 2.0])]
    (q,), (v,) = sgd_step(p, [np.zeros(2)], lr=0.1, momentum=0.9, velocity=[np.zeros(2)])
    np.testing.assert_array_equal(q, p[0])


def test_sgd_momentum_two_steps():
    g = np.array(3.0)
    p, v = sgd_step([np.array(0.0)], [g], lr=0.01, momentum=0.9)
    p, v = sgd_step(p, [g], lr=0.01, momentum=0.9, velocity=v)
    assert p[0] == pytest.approx(-0.01 * 3.0 * (1 + 1.9), abs=1e-15)


# -- model file ---------------------------------------------------------------------------


def test_model_roundtrip(tmp_path):
    spec = detnet_micro()
    params = [p.astype(np.float32).astype(np.float64) for p in init_params(spec, 2)]
    m = Model(spec, params, head="rotation", metadata={"epochs": 3})
    path = tmp_path / "m.cvdt"
    m.save(path)
    raw = path.read_bytes()
    assert raw[:4] == b"CVDT"
    assert int.from_bytes(raw[4:8], "little") == 1
    back = Model.load(path)
    assert back.spec == spec and back.head == "rotation" and back.metadata == {"epochs": 3}
    for a, b in zip(params, back.params):
        np.testing.assert_array_equal(a, b)
    # weights before biases, layer order
    hlen = int.from_bytes(raw[8:12], "little")
    first = np.frombuffer(raw, "<f4", count=params[0].size, offset=12 + hlen)
    np.testing.assert_array_equal(first, params[0].ravel())


def test_model_load_rejects_garbage(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"NOPE")
    with pytest.raises(ValueError):
        Model.load(p)


def test_model_predict_shape():
    spec = detnet_micro()
    m = Model(spec, init_params(spec, 0))
    assert m.predict(np.zeros((5, 28, 28))).shape == (5, 2)
