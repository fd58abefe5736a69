import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridpim import container, train
from hybridpim.data import Dataset
from hybridpim.nn import (Conv2D, Dense, Flatten, MaxPool, Network, ReLU, ShapeError, accuracy, forward,
                          gradient, hvp, loss)

from conftest import random_net


def loop_conv(x, w, stride, pad):
    b, h, wd, c = x.shape
    r, _, _, k = w.shape
    xp = np.zeros((b, h + 2 * pad, wd + 2 * pad, c))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho, wo = (h + 2 * pad - r) // stride + 1, (wd + 2 * pad - r) // stride + 1
    y = np.zeros((b, ho, wo, k))
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                for o in range(k):
                    acc = 0.0
                    for di in range(r):
                        for dj in range(r):
                            for ch in range(c):
                                acc += xp[n, i * stride + di, j * stride + dj, ch] * w[di, dj, ch, o]
                    y[n, i, j, o] = acc
    return y


def loop_forward(net, x):
    x = np.asarray(x, dtype=np.float64)
    p = 0
    for layer in net.layers:
        if layer.kind == "conv2d":
            x = loop_conv(x, np.asarray(net.weights[p], dtype=np.float64), layer.stride, layer.padding)
            p += 1
        elif layer.kind == "dense":
            w = np.asarray(net.weights[p], dtype=np.float64)
            x = np.array([[sum(row[i] * w[i, o] for i in range(len(row))) for o in range(w.shape[1])] for row in x])
            p += 1
        elif layer.kind == "relu":
            x = np.where(x > 0, x, 0.0)
        elif layer.kind == "maxpool":
            s, k = layer.step, layer.window
            b, h, wd, c = x.shape
            ho, wo = (h - k) // s + 1, (wd - k) // s + 1
            y = np.empty((b, ho, wo, c))
            for i in range(ho):
                for j in range(wo):
                    y[:, i, j] = x[:, i * s:i * s + k, j * s:j * s + k].max(axis=(1, 2))
            x = y
        else:
            x = x.reshape(len(x), -1)
    return x


def test_identity_1x1_conv():
    net = Network([Conv2D(1, 1, 1), Flatten()], [np.ones((1, 1, 1, 1))], (4, 4, 1))
    x = np.random.default_rng(0).normal(size=(3, 4, 4, 1)).astype(np.float32)
    np.testing.assert_array_equal(forward(net, x), x.reshape(3, -1))


def test_3x3_window_sum():
    net = Network([Conv2D(1, 1, 3), Flatten()], [np.ones((3, 3, 1, 1))], (5, 5, 1))
    x = np.arange(25, dtype=np.float32).reshape(1, 5, 5, 1)
    expect = [x[0, i:i + 3, j:j + 3, 0].sum() for i in range(3) for j in range(3)]
    np.testing.assert_allclose(forward(net, x)[0], expect, rtol=1e-6)


def test_two_layer_cnn_matches_loop_oracle():
    net = random_net(0)
    x = np.random.default_rng(0).normal(size=(2, 6, 6, 2))
    np.testing.assert_allclose(forward(net, x), loop_forward(net, x), rtol=1e-5, atol=1e-5)


@settings(max_examples=15, deadline=None)
@given(hw=st.integers(3, 7), c=st.integers(1, 3), k=st.integers(1, 3), r=st.sampled_from([1, 2, 3]),
       stride=st.integers(1, 2), pad=st.integers(0, 1), seed=st.integers(0, 10_000))
def test_conv_forward_matches_loop_nest(hw, c, k, r, stride, pad, seed):
    if r > hw + 2 * pad:
        return
    layer = Conv2D(c, k, r, stride, pad)
    ho = (hw + 2 * pad - r) // stride + 1
    rng = np.random.default_rng(seed)
    net = Network([layer, Flatten()], [rng.normal(size=layer.weight_shape)], (hw, hw, c))
    x = rng.normal(size=(2, hw, hw, c))
    got = forward(net, x).astype(np.float64)
    ref = loop_forward(net, x.astype(np.float32))
    assert got.shape == (2, ho * ho * k)
    np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-5)


def test_shape_error_names_layer():
    with pytest.raises(ShapeError, match="layer 1"):
        Network([Flatten(), Dense(5, 2)], [np.zeros((5, 2))], (2, 2, 1))
    net = random_net(0)
    with pytest.raises(ShapeError):
        forward(net, np.zeros((1, 5, 5, 2)))


def test_accuracy_trivial_and_counting():
    net = Network([Dense(2, 3)], [np.array([[1.0, 0, 0], [0, 0, 0]])], (2,))
    x = np.tile([1.0, 0.0], (5, 1))
    assert accuracy(net, Dataset(x, np.zeros(5), 3)) == 1.0
    assert accuracy(net, Dataset(x, np.ones(5), 3)) == 0.0


def test_accuracy_matches_count_and_is_order_invariant(tiny_net, tiny_splits):
    ev = tiny_splits["evaluation"]
    logits = loop_forward(tiny_net, ev.inputs[:40])
    oracle = np.sum(np.argmax(logits, axis=1) == ev.labels[:40]) / 40
    assert accuracy(tiny_net, ev.subset(slice(0, 40))) == pytest.approx(oracle)
    perm = np.random.default_rng(1).permutation(len(ev))
    assert accuracy(tiny_net, ev) == accuracy(tiny_net, ev.subset(perm))
    assert 0.0 <= accuracy(tiny_net, ev) <= 1.0


def test_gradient_closed_form_zero_dense():
    x = np.random.default_rng(0).normal(size=(6, 3))
    y = np.array([0, 1, 2, 0, 1, 2])
    net = Network([Dense(3, 3)], [np.zeros((3, 3))], (3,))
    onehot = np.eye(3)[y]
    expect = (x.astype(np.float32).astype(np.float64).T @ (np.full((6, 3), 1 / 3) - onehot)) / 6
    np.testing.assert_allclose(gradient(net, (x, y)), expect.ravel(), rtol=1e-6, atol=1e-9)


def test_gradient_matches_finite_differences():
    net = random_net(3)
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(8, 6, 6, 2)), rng.integers(0, 4, 8)
    g = gradient(net, (x, y))
    w0 = net.flat_weights()
    h = 1e-3
    fd = np.empty_like(w0)
    for i in range(len(w0)):
        e = np.zeros_like(w0)
        e[i] = h
        fd[i] = (loss(net, x, y, net.unflatten(w0 + e)) - loss(net, x, y, net.unflatten(w0 - e))) / (2 * h)
    ok = np.abs(g - fd) <= 1e-4 * np.maximum(np.abs(fd), 1e-2)
    assert ok.mean() >= 0.99


def test_duplicated_batch_same_gradient():
    net = random_net(1)
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(5, 6, 6, 2)), rng.integers(0, 4, 5)
    np.testing.assert_allclose(gradient(net, (x, y)), gradient(net, (np.concatenate([x, x]), np.concatenate([y, y]))),
                               rtol=1e-10, atol=1e-12)


def test_hvp_zero_linear_symmetric():
    net = random_net(2)
    rng = np.random.default_rng(2)
    data = (rng.normal(size=(16, 6, 6, 2)), rng.integers(0, 4, 16))
    n = net.num_params
    assert not hvp(net, data, np.zeros(n)).any()
    v1, v2 = rng.normal(size=n), rng.normal(size=n)
    h1, h2 = hvp(net, data, v1), hvp(net, data, v2)
    np.testing.assert_allclose(hvp(net, data, v1 + v2), h1 + h2, rtol=1e-4, atol=1e-6 * np.abs(h1).max())
    assert v1 @ h2 == pytest.approx(v2 @ h1, rel=1e-3)


def test_hvp_on_quadratic_loss():
    # a linear model with squared-free cross-entropy is not quadratic; use the softmax Hessian of one
    # dense layer at zero weights, where H = (x x^T) kron (diag(p) - p p^T) with p uniform
    x = np.array([[1.0, 2.0]])
    net = Network([Dense(2, 2)], [np.zeros((2, 2))], (2,))
    p = np.full(2, 0.5)
    A = np.kron(np.outer(x[0], x[0]), np.diag(p) - np.outer(p, p))
    v = np.random.default_rng(0).normal(size=4)
    np.testing.assert_allclose(hvp(net, (x, np.array([0])), v), A @ v, atol=1e-5)


def test_train_separable_blobs():
    net = train.train_toy(train.TrainConfig(preset="mlp-blobs", epochs=20))
    assert accuracy(net, train.make_dataset("mlp-blobs")["evaluation"]) >= 0.95


def test_train_zero_epochs_and_determinism():
    init = train.init_network("cnn-tiny", 5)
    net0 = train.train_toy(train.TrainConfig(preset="cnn-tiny", epochs=0, seed=5))
    for a, b in zip(init.weights, net0.weights):
        np.testing.assert_array_equal(a, b)
    a = train.train_toy(train.TrainConfig(preset="cnn-tiny", epochs=2, seed=1))
    b = train.train_toy(train.TrainConfig(preset="cnn-tiny", epochs=2, seed=1))
    for wa, wb in zip(a.weights, b.weights):
        assert wa.tobytes() == wb.tobytes()


def test_non_convergence_reports_accuracy():
    with pytest.raises(train.NonConvergenceError) as info:
        train.train_toy(train.TrainConfig(preset="cnn-tiny", epochs=1, min_accuracy=1.01))
    assert 0 <= info.value.final_accuracy <= 1


def test_model_roundtrip_bytes(tmp_path, tiny_net):
    p1, p2 = tmp_path / "a.hpim", tmp_path / "b.hpim"
    container.save_model(tiny_net, p1)
    container.save_model(container.load_model(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_truncated_model_rejected(tmp_path, tiny_net):
    p = tmp_path / "m.hpim"
    container.save_model(tiny_net, p)
    p.write_bytes(p.read_bytes()[:-7])
    with pytest.raises(container.FormatError):
        container.load_model(p)


def test_empty_layer_list_rejected(tmp_path):
    container.write(tmp_path / "e.hpim", "model", {"dtype": "float32", "input_shape": [2], "num_classes": 2,
                                                   "layers": []}, {})
    with pytest.raises(container.FormatError):
        container.load_model(tmp_path / "e.hpim")
    with pytest.raises(ShapeError):
        Network([], [], (2,))
