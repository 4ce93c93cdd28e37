"""Reverse-engineering (surrogate learning) simulation, transfer evaluation and a membership gate.

The attacker starts from a small seed set labelled by querying the victim.
Each stage pushes every known point along the signed gradient of the
surrogate's top posterior, queries the victim on the new points and retrains
the surrogate from scratch on everything gathered so far.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import attacks
from .io import load_container, save_container
from .nncore import TrainConfig


@dataclass
class QueryLog:
    """Queries and victim labels per stage; stage 0 is the seed set."""

    queries: list = field(default_factory=list)     # per stage (m_k, *shape)
    labels: list = field(default_factory=list)      # per stage (m_k,)
    crafted: list = field(default_factory=list)     # per stage count before dedup
    agreement: list = field(default_factory=list)   # surrogate/victim agreement after each stage

    @property
    def n_stages(self):
        return len(self.queries)

    def stage(self, k):
        return self.queries[k], self.labels[k]

    def all_queries(self, upto=None):
        upto = self.n_stages if upto is None else upto + 1
        return np.concatenate(self.queries[:upto]), np.concatenate(self.labels[:upto])

    def new_counts(self):
        return list(self.crafted[1:])


def save_query_log(path, log: QueryLog):
    arrays = []
    for k, (q, y) in enumerate(zip(log.queries, log.labels)):
        arrays += [(f"s{k}.queries", q), (f"s{k}.labels", y.astype(np.float64))]
    meta = {"stages": log.n_stages, "crafted": [int(c) for c in log.crafted],
            "agreement": [float(a) for a in log.agreement]}
    save_container(path, "query_log", meta, arrays)


def load_query_log(path):
    _, meta, arrays = load_container(path, "query_log")
    log = QueryLog(crafted=list(meta["crafted"]), agreement=list(meta["agreement"]))
    for k in range(meta["stages"]):
        log.queries.append(arrays[f"s{k}.queries"])
        log.labels.append(arrays[f"s{k}.labels"].astype(int))
    return log


def top_posterior_grad(net, x):
    """Gradient of ``max_c P(c | x)`` with respect to ``x`` (the max class held fixed)."""
    trace = net.forward(x)
    p = trace.probs
    c = p.argmax(axis=1)
    pc = p[np.arange(len(p)), c]
    dl = -pc[:, None] * p
    dl[np.arange(len(p)), c] += pc
    return net.backprop(trace, dl).input_grad


def _dedup(new, known):
    """Drop rows of ``new`` that repeat each other or any row of ``known``."""
    flat_new = new.reshape(len(new), -1)
    _, first = np.unique(flat_new, axis=0, return_index=True)
    keep = np.zeros(len(new), dtype=bool)
    keep[first] = True
    if len(known):
        seen = {row.tobytes() for row in known.reshape(len(known), -1)}
        keep &= np.array([row.tobytes() not in seen for row in flat_new])
    return np.sort(np.flatnonzero(keep))


def re_attack(victim, seed_X, stages, lam, config: TrainConfig, agreement_X=None):
    """Grow the query set over ``stages`` augmentation stages and return ``(surrogate, log)``.

    The attacker's working set ``S_k`` is a multiset: stage ``k`` crafts one
    point from each of its ``|S_0| * 2**k`` elements and appends them all.
    Only crafted points not seen before are sent to the victim and used for
    training, so the surrogate never sees a duplicate. The surrogate is
    rebuilt from ``config`` (same seed) after each stage. If ``agreement_X``
    is given, the fraction of it on which surrogate and victim agree is
    logged per stage.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    X = np.asarray(seed_X, dtype=np.float64)
    keep = _dedup(X, X[:0])
    X = X[keep]
    y = victim.predict(X)
    log = QueryLog([X], [y], [len(seed_X)])
    K = victim.class_count
    working = np.asarray(seed_X, dtype=np.float64)
    surrogate = config.fit(X, y, K)
    if agreement_X is not None:
        log.agreement.append(_agreement(surrogate, victim, agreement_X))
    for _ in range(stages):
        crafted = np.clip(working + lam * np.sign(top_posterior_grad(surrogate, working)), 0.0, 1.0)
        known, _ = log.all_queries()
        new = crafted[_dedup(crafted, known)]
        log.queries.append(new)
        log.labels.append(victim.predict(new) if len(new) else np.zeros(0, dtype=int))
        log.crafted.append(len(crafted))
        working = np.concatenate([working, crafted])
        Xall, yall = log.all_queries()
        surrogate = config.fit(Xall, yall, K)
        if agreement_X is not None:
            log.agreement.append(_agreement(surrogate, victim, agreement_X))
    return surrogate, log


def _agreement(a, b, X):
    return float(np.mean(a.predict(X) == b.predict(X)))


@dataclass
class TransferResult:
    targeted: float
    untargeted: float
    surrogate_success: float


def transfer_eval(surrogate, victim, X, y, config: attacks.AttackConfig, seed=0):
    """Craft targeted attacks on the surrogate and replay them on the victim.

    Targets are drawn uniformly among the wrong classes. ``targeted`` is the
    fraction the victim sends to the target; ``untargeted`` the fraction it
    misclassifies at all, measured on the same crafted points.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    t = attacks.random_targets(y, victim.class_count, seed)
    r = attacks.run(surrogate, X, y, config, target=t)
    dec = victim.predict(r.x_adv)
    return TransferResult(float(np.mean(dec == t)), float(np.mean(dec != y)), r.success_rate)


# -- membership gate ------------------------------------------------------------

def randomize_posterior(p, rng, max_tries=1000):
    """Keep the top entry of ``p`` and redraw the rest uniformly on the simplex of mass ``1 - p_max``.

    Draws where another entry would reach ``p_max`` are rejected; after
    ``max_tries`` rejections the remaining mass is spread evenly.
    """
    p = np.asarray(p, dtype=np.float64)
    K = len(p)
    m = int(np.argmax(p))
    pm = p[m]
    rest = 1.0 - pm
    out = np.empty(K)
    out[m] = pm
    others = [j for j in range(K) if j != m]
    if K == 1:
        return p.copy()
    for _ in range(max_tries):
        draw = rng.dirichlet(np.ones(K - 1)) * rest
        if draw.max() < pm:
            out[others] = draw
            return out
    out[others] = rest / (K - 1)
    if np.argmax(out) != m:
        return p.copy()
    return out


def membership_gate(net, queries, retained_X, tolerance, seed=0, feature_mask=None):
    """Answer queries, scrambling the confidence vector for near-copies of training samples.

    A query matches when its L2 distance (over ``feature_mask`` features, all by
    default) to some retained training sample is at most ``tolerance``.
    Returns ``(decisions, posteriors, matched)``; unmatched rows are the raw
    posteriors, matched rows keep the decided class and its probability.
    """
    Q = np.asarray(queries, dtype=np.float64)
    probs = net.predict_proba(Q)
    flat_q = Q.reshape(len(Q), -1)
    flat_t = np.asarray(retained_X, dtype=np.float64).reshape(len(retained_X), -1)
    if feature_mask is not None:
        mask = np.asarray(feature_mask, dtype=bool).ravel()
        flat_q, flat_t = flat_q[:, mask], flat_t[:, mask]
    dist, _ = cKDTree(flat_t).query(flat_q, k=1)
    matched = dist <= tolerance
    return probs.argmax(axis=1), gate_posteriors(probs, matched, seed), matched


def gate_posteriors(probs, matched, seed=0):
    """The gate applied to given posterior rows (no network needed)."""
    probs = np.asarray(probs, dtype=np.float64)
    rng = np.random.default_rng(seed)
    out = probs.copy()
    for i in np.flatnonzero(matched):
        out[i] = randomize_posterior(probs[i], rng)
    return out
