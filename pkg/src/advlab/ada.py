"""Anomaly detection of attacks (ADA) on internal-layer features, plus simple baselines.

For a test input the network decides ``c*``. On each monitored layer the
activation ``z`` is scored under per-class null mixtures; the most likely class
other than ``c*`` is the estimated source. Two two-class posteriors over
``{c*, source}`` are compared: one from the null densities (P) and one from the
network's softmax (Q). The statistic is ``KL(P || Q)``, maximised over layers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import density
from .io import load_container, save_container

DENSITY_FLOOR = 1e-300
LOG_FLOOR = np.log(DENSITY_FLOOR)


@dataclass
class NullModelBank:
    models: dict          # (class, layer) -> MixtureDensity
    layers: list
    class_count: int

    def __post_init__(self):
        missing = [(c, l) for c in range(self.class_count) for l in self.layers
                   if (c, l) not in self.models]
        if missing:
            raise ValueError(f"null bank incomplete, missing {missing[:3]}")

    def class_log_densities(self, layer, z):
        """``(n, K)`` log-densities of features ``z`` under every class null, floored."""
        out = np.column_stack([density.log_density(self.models[(c, layer)], z)
                               for c in range(self.class_count)])
        return np.maximum(out, LOG_FLOOR)


@dataclass
class AdaScore:
    per_layer: np.ndarray   # (n, L) KL values
    score: np.ndarray       # (n,) max over layers
    c_star: np.ndarray      # (n,) network decision
    source: np.ndarray      # (n, L) estimated source class per layer


def default_layers(net):
    """The last two hidden non-linearity outputs."""
    return net.hidden_activation_layers()[-2:]


def fit_null(net, dataset, layers=None, family="gaussian", n_components=1, seed=0,
             k_max=3, cov_mode="auto", correct_only=False, **em_kw):
    """Fit one mixture per (class, layer) on clean training activations.

    ``n_components`` is an int or ``"bic"``. With ``correct_only`` only samples
    the network classifies correctly are used.
    """
    layers = list(default_layers(net) if layers is None else layers)
    X, y = dataset.X, dataset.y
    trace = net.forward(X)
    keep = trace.decision == y if correct_only else np.ones(len(y), dtype=bool)
    need = 10 * (1 if n_components == "bic" else int(n_components))
    models = {}
    for c in range(dataset.class_count):
        sel = keep & (y == c)
        if sel.sum() < need:
            raise ValueError(f"class {c} has {int(sel.sum())} samples, need at least {need}")
        for l in layers:
            z = trace.activations[l][sel].reshape(sel.sum(), -1)
            if n_components == "bic":
                kmax = max(1, min(k_max, int(sel.sum()) // 10))
                _, model, _ = density.bic_select(z, family, kmax, seed, cov_mode, **em_kw)
            else:
                model = density.em_fit(z, int(n_components), family, cov_mode, seed, **em_kw).model
            models[(c, l)] = model
    return NullModelBank(models, layers, dataset.class_count)


def source_estimate(bank, layer, z, c_star):
    """Most likely class other than ``c_star`` under the null densities (ties -> smaller index)."""
    logf = bank.class_log_densities(layer, np.atleast_2d(z))
    c_star = np.broadcast_to(np.asarray(c_star, dtype=int), (len(logf),))
    return _source_from(logf, c_star)


def _source_from(logf, c_star):
    masked = logf.copy()
    masked[np.arange(len(logf)), c_star] = -np.inf
    return masked.argmax(axis=1)


def kl_divergence(P, Q):
    """``sum P log(P/Q)`` over the last axis, with ``0 log 0 = 0``."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0, P * (np.log(P) - np.log(Q)), 0.0)
    return terms.sum(axis=-1)


def _pair_posteriors(logf, probs, a, b):
    idx = np.arange(len(logf))
    la, lb = logf[idx, a], logf[idx, b]
    m = np.maximum(la, lb)
    ea, eb = np.exp(la - m), np.exp(lb - m)
    P = np.column_stack([ea, eb]) / (ea + eb)[:, None]
    qa = np.maximum(probs[idx, a], DENSITY_FLOOR)
    qb = np.maximum(probs[idx, b], DENSITY_FLOOR)
    Q = np.column_stack([qa, qb]) / (qa + qb)[:, None]
    return P, Q


def ada_statistic(net, bank, x, mode="max"):
    """ADA scores for a batch.

    ``mode="expected"`` replaces the single estimated source by an average of
    the pairwise KL over all non-decided classes, weighted by their null
    likelihoods.
    """
    trace = net.forward(x)
    c_star = trace.decision
    probs = trace.probs
    n, L = len(c_star), len(bank.layers)
    per_layer = np.zeros((n, L))
    source = np.zeros((n, L), dtype=int)
    for j, l in enumerate(bank.layers):
        z = trace.activations[l].reshape(n, -1)
        logf = bank.class_log_densities(l, z)
        source[:, j] = _source_from(logf, c_star)
        if mode == "max":
            P, Q = _pair_posteriors(logf, probs, c_star, source[:, j])
            per_layer[:, j] = kl_divergence(P, Q)
        elif mode == "expected":
            w = logf.copy()
            w[np.arange(n), c_star] = -np.inf
            w = np.exp(w - w.max(axis=1, keepdims=True))
            w /= w.sum(axis=1, keepdims=True)
            total = np.zeros(n)
            for c in range(bank.class_count):
                P, Q = _pair_posteriors(logf, probs, c_star, np.full(n, c))
                total += np.where(c_star == c, 0.0, w[:, c] * kl_divergence(P, Q))
            per_layer[:, j] = total
        else:
            raise ValueError(f"unknown ADA mode {mode!r}")
    return AdaScore(per_layer, per_layer.max(axis=1), c_star, source)


def detect(score, threshold):
    return np.asarray(getattr(score, "score", score)) > threshold


def threshold_at_fpr(clean_scores, fpr=0.05):
    """Threshold such that ``score > threshold`` flags ``floor(fpr * n)`` calibration samples."""
    s = np.sort(np.asarray(clean_scores, dtype=np.float64))
    n = len(s)
    m = int(np.floor(fpr * n + 1e-9))
    if m <= 0:
        return float(s[-1])
    if m >= n:
        return -np.inf
    return float(s[n - m - 1])


def confidence_score(net, x):
    """``1 - max posterior``: large when the network is unsure."""
    return 1.0 - net.predict_proba(x).max(axis=1)


EIGHT_NEIGHBOURS = np.ones((3, 3), dtype=int)


def region_count(image, threshold=0.5):
    """Number of 8-connected regions of pixels ``>= threshold`` in a 2-D image."""
    img = np.asarray(image)
    img = img.reshape(img.shape[-2:]) if img.ndim > 2 else img
    _, count = ndimage.label(img >= threshold, structure=EIGHT_NEIGHBOURS)
    return int(count)


def blur2x2(x):
    """Stride-1 2x2 mean over the last two axes, replicating the last row/column."""
    x = np.asarray(x, dtype=np.float64)
    pad = [(0, 0)] * (x.ndim - 2) + [(0, 1), (0, 1)]
    p = np.pad(x, pad, mode="edge")
    return 0.25 * (p[..., :-1, :-1] + p[..., 1:, :-1] + p[..., :-1, 1:] + p[..., 1:, 1:])


def blur_disagree(net, x):
    """Whether the decision on ``x`` differs from the decision on its 2x2 blur."""
    blurred = net.predict(blur2x2(x))
    return net.predict(x) != blurred, blurred


def re_batch_statistic(scores, minibatch_size=5):
    """Max over arrival-order mini-batches of the per-mini-batch max score."""
    s = np.asarray(scores, dtype=np.float64)
    if len(s) == 0:
        raise ValueError("empty score batch")
    maxima = [s[i:i + minibatch_size].max() for i in range(0, len(s), minibatch_size)]
    return float(max(maxima))


def minibatch_maxima(scores, minibatch_size=5):
    s = np.asarray(scores, dtype=np.float64)
    return np.array([s[i:i + minibatch_size].max() for i in range(0, len(s), minibatch_size)])


# -- persistence --------------------------------------------------------------

def save_bank(path, bank):
    arrays, entries = [], []
    for (c, l), m in sorted(bank.models.items()):
        prefix = f"c{c}.l{l}."
        arrays += density.mixture_arrays(prefix, m)
        entries.append({"class": c, "layer": l, **density.mixture_meta(m)})
    meta = {"layers": list(bank.layers), "class_count": bank.class_count, "models": entries}
    save_container(path, "null_bank", meta, arrays)


def load_bank(path):
    _, meta, arrays = load_container(path, "null_bank")
    models = {}
    for e in meta["models"]:
        prefix = f"c{e['class']}.l{e['layer']}."
        models[(e["class"], e["layer"])] = density.mixture_from(e, arrays, prefix)
    return NullModelBank(models, meta["layers"], meta["class_count"])


def save_scores_csv(path, ada: AdaScore, threshold=None):
    with open(path, "w") as f:
        L = ada.per_layer.shape[1]
        cols = ["sample"] + [f"kl_layer{j}" for j in range(L)] + ["max", "decision"]
        cols += [f"source_layer{j}" for j in range(L)]
        if threshold is not None:
            cols.append("detected")
        f.write(",".join(cols) + "\n")
        for i in range(len(ada.score)):
            row = [str(i)] + [repr(float(v)) for v in ada.per_layer[i]]
            row += [repr(float(ada.score[i])), str(int(ada.c_star[i]))]
            row += [str(int(v)) for v in ada.source[i]]
            if threshold is not None:
                row.append(str(int(ada.score[i] > threshold)))
            f.write(",".join(row) + "\n")
