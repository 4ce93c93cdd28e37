"""Test-time evasion attacks: FGSM, PGD, CW-L2 and a greedy pixel-budget attack.

All attacks are batch-native: ``x`` has shape ``(n, *net.input_shape)`` and
targets/labels are length-``n`` integer arrays. Outputs always lie in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nncore import backward, onehot

KINDS = ("fgsm", "pgd", "cw", "greedy")


@dataclass
class AttackConfig:
    kind: str = "cw"
    target: int | None = None  # None: untargeted
    eps: float = 0.1
    steps: int = 10
    step_size: float = 0.01
    c: float = 4.0
    k: float = 0.0
    p: int = 2
    lr: float = 1e-3
    iters: int = 1000
    budget: int = 10

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.eps < 0 or self.c <= 0 or self.k < 0 or self.budget < 1:
            raise ValueError("invalid attack strength parameters")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    l2: np.ndarray
    linf: np.ndarray
    decision: np.ndarray
    success: np.ndarray
    iterations: np.ndarray

    def __len__(self):
        return len(self.decision)

    @property
    def success_rate(self):
        return float(np.mean(self.success)) if len(self) else float("nan")


def _norms(x_adv, x):
    d = (x_adv - x).reshape(len(x), -1)
    return np.sqrt((d * d).sum(axis=1)), np.abs(d).max(axis=1) if d.shape[1] else np.zeros(len(x))


def _result(net, x, x_adv, y_true, target, iterations):
    dec = net.predict(x_adv)
    success = dec == target if target is not None else dec != y_true
    l2, linf = _norms(x_adv, x)
    its = np.broadcast_to(np.asarray(iterations), (len(x),)).astype(int).copy()
    return AttackResult(x_adv, l2, linf, dec, success, its)


def _as_labels(v, n):
    if v is None:
        return None
    return np.broadcast_to(np.asarray(v, dtype=int), (n,)).copy()


def ce_input_grad(net, x, labels):
    return backward(net, x, labels).input_grad


def fgsm(net, x, y_true, eps, target=None):
    """One signed-gradient step of size ``eps`` in L-infinity.

    Untargeted: ascend the true-class cross-entropy. Targeted: descend the
    target-class cross-entropy.
    """
    x = np.asarray(x, dtype=np.float64)
    y_true = _as_labels(y_true, len(x))
    target = _as_labels(target, len(x))
    if target is None:
        step = np.sign(ce_input_grad(net, x, y_true))
    else:
        step = -np.sign(ce_input_grad(net, x, target))
    x_adv = np.clip(x + eps * step, 0.0, 1.0)
    return _result(net, x, x_adv, y_true, target, 1)


def pgd(net, x, y_true, eps, steps, step_size, target=None):
    """Iterated signed steps, each projected onto the eps-ball and [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    y_true = _as_labels(y_true, len(x))
    target = _as_labels(target, len(x))
    xa = x.copy()
    for _ in range(steps):
        if target is None:
            step = np.sign(ce_input_grad(net, xa, y_true))
        else:
            step = -np.sign(ce_input_grad(net, xa, target))
        xa = np.clip(np.clip(xa + step_size * step, x - eps, x + eps), 0.0, 1.0)
    return _result(net, x, xa, y_true, target, steps)


def _competitor(logits, t):
    masked = logits.copy()
    masked[np.arange(len(t)), t] = -np.inf
    return masked.argmax(axis=1)


def cw_margin(logits, t):
    """``max_{j != t} F_j - F_t`` per sample."""
    j = _competitor(logits, t)
    idx = np.arange(len(t))
    return logits[idx, j] - logits[idx, t]


def cw_objective(net, x, x_adv, t, c, k):
    d = (x_adv - x).reshape(len(x), -1)
    m = cw_margin(net.forward(x_adv).logits, np.asarray(t))
    return (d * d).sum(axis=1) + np.asarray(c) * np.maximum(m, -k)


def cw_l2(net, x, t=None, c=4.0, k=0.0, iters=1000, lr=1e-3, y_true=None):
    """Minimise ``||x' - x||^2 + c * max(max_{j!=t} F_j(x') - F_t(x'), -k)``.

    Plain gradient descent with a fixed step; the box constraint is enforced by
    clipping after every step. Returns, per sample, the lowest-norm iterate that
    is decided ``t``; samples that never succeed return the final iterate.
    ``c`` may be a scalar or per-sample array. With ``t=None`` the attack is
    untargeted: each step aims at the current runner-up to ``y_true``.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), (n,))
    untargeted = t is None
    if untargeted:
        if y_true is None:
            y_true = net.predict(x)
        y_true = _as_labels(y_true, n)
    else:
        t = _as_labels(t, n)
    shape = (n,) + (1,) * (x.ndim - 1)

    xa = x.copy()
    best = x.copy()
    best_l2 = np.full(n, np.inf)
    found = np.zeros(n, dtype=bool)
    used = np.zeros(n, dtype=int)
    idx = np.arange(n)
    for it in range(iters + 1):
        trace = net.forward(xa)
        logits = trace.logits
        dec = logits.argmax(axis=1)
        tgt = _competitor(logits, y_true) if untargeted else t
        ok = dec != y_true if untargeted else dec == tgt
        l2 = np.sqrt(((xa - x).reshape(n, -1) ** 2).sum(axis=1))
        better = ok & (l2 < best_l2)
        best[better] = xa[better]
        best_l2[better] = l2[better]
        used[better] = it
        found |= ok
        if it == iters:
            break
        j = _competitor(logits, tgt)
        margin = logits[idx, j] - logits[idx, tgt]
        active = margin > -k
        dl = (onehot(j, net.class_count) - onehot(tgt, net.class_count)) * (c * active)[:, None]
        g = net.backprop(trace, dl).input_grad + 2.0 * (xa - x)
        xa = np.clip(xa - lr * g, 0.0, 1.0)
    final = np.where(found.reshape(shape), best, xa)
    used[~found] = iters
    return _result(net, x, final, y_true, None if untargeted else t, used)


def cw_binary_search_c(net, x, t, k=0.0, lo=1e-2, hi=1e2, rounds=8, iters=1000, lr=1e-3):
    """Smallest ``c`` in the geometric bracket ``[lo, hi]`` that succeeds.

    Returns ``(c_star, result)`` per sample. Samples that fail even at ``hi``
    get ``c_star = hi`` and an unsuccessful result.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    t = _as_labels(t, n)
    r_lo = cw_l2(net, x, t, lo, k, iters, lr)
    r_hi = cw_l2(net, x, t, hi, k, iters, lr)
    a = np.full(n, float(lo))
    b = np.full(n, float(hi))
    res = r_hi
    done = r_lo.success.copy()
    _take(res, r_lo, done)
    b[done] = lo
    open_ = ~done & r_hi.success
    for _ in range(rounds):
        if not open_.any():
            break
        mid = np.sqrt(a * b)
        r = cw_l2(net, x, t, np.where(open_, mid, b), k, iters, lr)
        win = open_ & r.success
        lose = open_ & ~r.success
        _take(res, r, win)
        b[win] = mid[win]
        a[lose] = mid[lose]
    return b, res


def _take(dst, src, mask):
    for name in ("x_adv", "l2", "linf", "decision", "success", "iterations"):
        getattr(dst, name)[mask] = getattr(src, name)[mask]


def greedy_pixel(net, x, t, budget):
    """Saturate one feature per step, picking the largest ``|dF_t/dx_i - dF_c/dx_i|``.

    ``c`` is the current decision (or the strongest non-target class once the
    decision is ``t``). The chosen feature goes to 1 if the saliency is positive
    and to 0 otherwise. Stops per sample on success or after ``budget`` features.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    t = _as_labels(t, n)
    xa = x.copy().reshape(n, -1)
    touched = np.zeros_like(xa, dtype=bool)
    used = np.zeros(n, dtype=int)
    idx = np.arange(n)
    for _ in range(budget):
        trace = net.forward(xa.reshape(x.shape))
        dec = trace.decision
        live = (dec != t) & (used < budget)
        if not live.any():
            break
        comp = _competitor(trace.logits, t)
        dl = onehot(t, net.class_count) - onehot(comp, net.class_count)
        sal = net.backprop(trace, dl).input_grad.reshape(n, -1)
        bound = (sal > 0).astype(np.float64)
        cand = np.abs(sal)
        cand[touched | (bound == xa)] = -1.0
        pick = cand.argmax(axis=1)
        live &= cand[idx, pick] > 0
        rows = idx[live]
        xa[rows, pick[live]] = bound[rows, pick[live]]
        touched[rows, pick[live]] = True
        used[live] += 1
    return _result(net, x, xa.reshape(x.shape), None, t, used)


def random_targets(y, class_count, seed):
    """A uniformly chosen class other than ``y[i]`` for every sample."""
    rng = np.random.default_rng(seed)
    off = rng.integers(1, class_count, size=len(y))
    return (np.asarray(y) + off) % class_count


def run(net, x, y_true, config: AttackConfig, target=None):
    """Dispatch on ``config.kind``; ``target`` overrides ``config.target``."""
    target = config.target if target is None else target
    if config.kind == "fgsm":
        return fgsm(net, x, y_true, config.eps, target)
    if config.kind == "pgd":
        return pgd(net, x, y_true, config.eps, config.steps, config.step_size, target)
    if config.kind == "cw":
        return cw_l2(net, x, target, config.c, config.k, config.iters, config.lr, y_true=y_true)
    if target is None:
        raise ValueError("greedy attack needs a target class")
    return greedy_pixel(net, x, target, config.budget)
