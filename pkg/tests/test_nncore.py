import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advlab import nncore
from advlab.io import load_network, save_network
from advlab.nncore import (Dense, InputShapeError, Network, TrainConfig, backward, build, grad_check,
                           mlp, parse_arch, softmax, train)

from conftest import linear_net


def test_identity_layer_forward():
    net = linear_net(np.eye(2), np.zeros(2))
    trace = net.forward(np.array([[1.0, 2.0]]))
    assert np.array_equal(trace.logits, [[1.0, 2.0]])
    assert trace.decision[0] == 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-500, 500), min_size=2, max_size=12))
def test_softmax_normalised(logits):
    p = softmax(np.array([logits]))
    assert abs(p.sum() - 1.0) < 1e-9
    assert np.all((p >= 0) & (p <= 1))


def test_forward_matches_hand_matmul():
    rng = np.random.default_rng(0)
    net = mlp(5, [7], 3, seed=1)
    x = rng.uniform(size=(4, 5))
    W1, b1 = net.layers[0].params["W"], net.layers[0].params["b"]
    W2, b2 = net.layers[2].params["W"], net.layers[2].params["b"]
    h = np.array([[max(0.0, sum(x[i, k] * W1[k, j] for k in range(5)) + b1[j]) for j in range(7)]
                  for i in range(4)])
    logits = np.array([[sum(h[i, k] * W2[k, j] for k in range(7)) + b2[j] for j in range(3)]
                       for i in range(4)])
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    assert np.allclose(net.predict_proba(x), e / e.sum(axis=1, keepdims=True), atol=1e-10, rtol=0)


def test_zero_final_layer_logit_grad():
    net = mlp(3, [4], 5, seed=0)
    net.layers[-1].params["W"][:] = 0.0
    x = np.ones((1, 3))
    trace = net.forward(x)
    assert np.allclose(trace.probs, 0.2)
    captured = {}

    def grab(tr):
        captured["dl"] = tr.probs - nncore.onehot(np.array([2]), 5)
        return captured["dl"]

    backward(net, x, logit_grad=grab)
    assert np.allclose(captured["dl"], [[0.2, 0.2, -0.8, 0.2, 0.2]])


def test_linear_input_grad_closed_form():
    rng = np.random.default_rng(1)
    W, b = rng.normal(size=(4, 3)), rng.normal(size=3)
    net = linear_net(W, b)
    x = rng.uniform(size=(2, 4))
    y = np.array([0, 2])
    z = x @ W + b
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    expected = (p - np.eye(3)[y]) @ W.T
    assert np.allclose(backward(net, x, y).input_grad, expected, atol=1e-12)


def test_grad_check_random_small_nets():
    rng = np.random.default_rng(2)
    for seed in range(3):
        net = build((2, 6, 6), parse_arch("conv:3:3:1,relu,maxpool:2,dense:5,relu"), 3, seed)
        x = rng.uniform(size=(2, 2, 6, 6))
        assert grad_check(net, x, rng.integers(0, 3, 2)) < 1e-4


def test_grad_check_linear_tight():
    rng = np.random.default_rng(3)
    net = linear_net(rng.normal(size=(4, 3)), rng.normal(size=3))
    assert grad_check(net, rng.uniform(size=(3, 4)), np.array([0, 1, 2])) < 1e-7


def test_grad_check_relu_away_from_kink():
    rng = np.random.default_rng(4)
    for seed in range(20):
        net = mlp(3, [6], 3, seed)
        x = rng.uniform(size=(2, 3))
        pre = net.forward(x).activations[0]
        if np.abs(pre).min() > 1e-3:
            assert grad_check(net, x, np.array([0, 1])) < 1e-5
            return
    pytest.fail("no kink-free draw found")


def test_train_separable_matches_lda():
    from sklearn.discriminant_analysis import LinearDiscriminantAnalysis
    rng = np.random.default_rng(5)
    X = np.concatenate([rng.normal(0.3, 0.05, (100, 2)), rng.normal(0.7, 0.05, (100, 2))])
    y = np.repeat([0, 1], 100)
    assert LinearDiscriminantAnalysis().fit(X, y).score(X, y) >= 0.98
    net = mlp(2, [8], 2, seed=0)
    train(net, X, y, 50, 16, 0.1, seed=0, momentum=0.9)
    assert nncore.accuracy(net, X, y) >= 0.98


def test_lr_zero_keeps_parameters():
    net = mlp(3, [4], 2, seed=0)
    before = [a.copy() for _, _, a in net.parameters()]
    train(net, np.random.default_rng(0).uniform(size=(10, 3)), np.arange(10) % 2, 3, 4, 0.0, 0)
    assert all(np.array_equal(a, b) for a, (_, _, b) in zip(before, net.parameters()))


def test_train_deterministic():
    X = np.random.default_rng(0).uniform(size=(40, 3))
    y = np.arange(40) % 2
    a = TrainConfig("dense:4,relu", 3, 8, 0.1, 0.9, 7).fit(X, y, 2)
    b = TrainConfig("dense:4,relu", 3, 8, 0.1, 0.9, 7).fit(X, y, 2)
    assert all(np.array_equal(p, q) for (_, _, p), (_, _, q) in zip(a.parameters(), b.parameters()))


def test_train_returns_loss_curve():
    X = np.random.default_rng(0).uniform(size=(40, 3))
    net, losses = train(mlp(3, [4], 2, 0), X, (X[:, 0] > 0.5).astype(int), 5, 8, 0.5, 0)
    assert len(losses) == 5 and losses[-1] < losses[0]


def test_glorot_bounds():
    net = mlp(30, [20], 2, seed=0)
    W = net.layers[0].params["W"]
    assert np.abs(W).max() <= np.sqrt(6 / 50)
    assert np.all(net.layers[0].params["b"] == 0)


def test_shape_errors():
    with pytest.raises(InputShapeError):
        Network([Dense(3, 2)], (4,), 2)
    net = mlp(3, [4], 2, 0)
    with pytest.raises(InputShapeError):
        net.forward(np.zeros((1, 5)))


def test_bad_labels_rejected():
    with pytest.raises(ValueError):
        train(mlp(3, [4], 2, 0), np.zeros((2, 3)), np.array([0, 2]), 1, 2, 0.1, 0)


def test_network_file_roundtrip(tmp_path):
    net = build((1, 6, 6), parse_arch("conv:2:3,relu,maxpool:2,dense:4,relu"), 3, seed=0)
    save_network(tmp_path / "m.bin", net)
    back = load_network(tmp_path / "m.bin")
    x = np.random.default_rng(0).uniform(size=(3, 1, 6, 6))
    assert np.array_equal(net.forward(x).logits, back.forward(x).logits)
    assert back.describe() == net.describe()


def test_parse_arch():
    assert parse_arch("conv:4:3, relu,maxpool:2,dense:16") == [("conv", 4, 3), ("relu",),
                                                               ("maxpool", 2), ("dense", 16)]
