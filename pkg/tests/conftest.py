import numpy as np
import pytest

from advlab import data
from advlab.attacks import fgsm
from advlab.nncore import Dense, Network, TrainConfig


def linear_net(W, b):
    """Single dense layer with given weights (n_in, K)."""
    W = np.asarray(W, dtype=np.float64)
    layer = Dense(W.shape[0], W.shape[1])
    layer.params["W"] = W.copy()
    layer.params["b"] = np.asarray(b, dtype=np.float64).copy()
    return Network([layer], (W.shape[0],), W.shape[1])


@pytest.fixture(scope="session")
def gauss_task():
    ds = data.synth_gaussians(3, 6, 150, 6.0, seed=3)
    tr, te = data.split(ds, 0.5, 3)
    tr, te = data.minmax_normalize(tr, te)
    net = TrainConfig("dense:16,relu,dense:8,relu", 30, 32, 0.05, 0.9, 3).fit(tr.X, tr.y, 3)
    return net, tr, te


@pytest.fixture(scope="session")
def image_task():
    ds = data.synth_images(4, 8, 150, seed=5)
    tr, te = data.split(ds, 0.5, 5)
    net = TrainConfig("conv:4:3,relu,maxpool:2,dense:16,relu", 15, 32, 0.05, 0.9, 5).fit(tr.X, tr.y, 4)
    return net, tr, te


def linear_boundary_case(seed):
    """2-D two-class linear-softmax model and a point decided class 1 at a known distance.

    Returns ``(net, x, w, margin)`` where ``margin = F_1(x) - F_0(x)``; the
    orthogonal projection of ``x`` onto the boundary lies well inside [0, 1]^2,
    so the box constraint never binds.
    """
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0, 2 * np.pi)
    w = rng.uniform(2.0, 8.0) * np.array([np.cos(theta), np.sin(theta)])
    x = rng.uniform(0.35, 0.65, size=2)
    dist = rng.uniform(0.05, 0.2)
    margin = dist * np.linalg.norm(w)
    b1 = margin - x @ w
    W = np.column_stack([np.zeros(2), w])
    return linear_net(W, np.array([0.0, b1])), x[None, :], w, margin


def fgsm_flip_threshold(net, x, y, hi=1.0, rounds=50):
    """Smallest FGSM step that flips the decision, by bisection."""
    lo = 0.0
    for _ in range(rounds):
        mid = 0.5 * (lo + hi)
        if fgsm(net, x, y, mid).success[0]:
            hi = mid
        else:
            lo = mid
    return hi


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def kink_margin(net, x):
    """Distance of ``x`` from the nearest ReLU or max-pool kink, measured on layer inputs."""
    acts = [x] + net.forward(x).activations
    margin = np.inf
    for i, layer in enumerate(net.layers):
        inp = acts[i]
        if layer.kind == "relu":
            margin = min(margin, np.abs(inp).min())
        elif layer.kind == "maxpool":
            s = layer.size
            n, c, h, w = inp.shape
            ho, wo = h // s, w // s
            blocks = inp[:, :, :ho * s, :wo * s].reshape(n, c, ho, s, wo, s)
            blocks = np.sort(blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, s * s), axis=-1)
            gap = blocks[..., -1] - blocks[..., -2]
            live = blocks[..., -1] > 0   # ties among zeroed ReLU outputs carry no gradient
            if live.any():
                margin = min(margin, gap[live].min())
    return margin
