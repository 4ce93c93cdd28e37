"""Detection metrics, attack-strength sweeps and adversarial training."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attacks
from .nncore import train


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def roc(attack_scores, clean_scores):
    """ROC of the rule ``score >= threshold`` with attacks as positives.

    The sweep visits every distinct score once, so tied attack/clean scores
    move along a diagonal and contribute half credit; the trapezoidal area then
    equals the Mann-Whitney statistic.
    """
    a = np.asarray(attack_scores, dtype=np.float64)
    c = np.asarray(clean_scores, dtype=np.float64)
    if len(a) == 0 or len(c) == 0:
        raise ValueError("need at least one attack and one clean score")
    thr = np.unique(np.concatenate([a, c]))[::-1]
    a_sorted, c_sorted = np.sort(a), np.sort(c)
    tpr = 1.0 - np.searchsorted(a_sorted, thr, side="left") / len(a)
    fpr = 1.0 - np.searchsorted(c_sorted, thr, side="left") / len(c)
    tpr = np.concatenate([[0.0], tpr])
    fpr = np.concatenate([[0.0], fpr])
    thr = np.concatenate([[np.inf], thr])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(thr, fpr, tpr, auc)


def mann_whitney_auc(attack_scores, clean_scores):
    a = np.asarray(attack_scores, dtype=np.float64)[:, None]
    c = np.asarray(clean_scores, dtype=np.float64)[None, :]
    return float(np.mean((a > c) + 0.5 * (a == c)))


def tpr_fpr(flagged, is_positive):
    flagged = np.asarray(flagged, dtype=bool)
    pos = np.asarray(is_positive, dtype=bool)
    tpr = flagged[pos].mean() if pos.any() else float("nan")
    fpr = flagged[~pos].mean() if (~pos).any() else float("nan")
    return float(tpr), float(fpr)


@dataclass
class StrengthCurve:
    strengths: np.ndarray
    misclassify: np.ndarray
    detection: np.ndarray
    effective: np.ndarray
    mean_score: np.ndarray
    threshold: float

    def rows(self):
        return zip(self.strengths, self.misclassify, self.detection, self.effective, self.mean_score)


def effective_success_curve(net, score_fn, threshold, kind, strengths, X, y, seed=0,
                            targeted=True, **attack_kw):
    """Misclassification, detection and effective success rate per attack strength.

    Only correctly classified samples are attacked. ``score_fn(x)`` returns a
    detector score per sample; ``threshold`` must be fixed beforehand from clean
    data. ``kind`` is ``fgsm`` or ``pgd`` (strength = eps) or ``cw`` (strength
    = c). Effective success = misclassified and not detected.
    """
    X = np.asarray(X)
    y = np.asarray(y)
    ok = net.predict(X) == y
    Xs, ys = X[ok], y[ok]
    tgt = attacks.random_targets(ys, net.class_count, seed) if targeted else None
    mis, det, eff, mean = [], [], [], []
    for s in strengths:
        if kind == "fgsm":
            r = attacks.fgsm(net, Xs, ys, s, tgt)
        elif kind == "pgd":
            steps = attack_kw.get("steps", 10)
            r = attacks.pgd(net, Xs, ys, s, steps, attack_kw.get("step_size", s / 4 if s else 0.0), tgt)
        elif kind == "cw":
            r = attacks.cw_l2(net, Xs, tgt, c=s, k=attack_kw.get("k", 0.0),
                              iters=attack_kw.get("iters", 1000), lr=attack_kw.get("lr", 1e-3),
                              y_true=ys)
        else:
            raise ValueError(f"unsupported sweep attack {kind!r}")
        scores = np.asarray(score_fn(r.x_adv))
        wrong = r.decision != ys
        flagged = scores > threshold
        mis.append(wrong.mean())
        det.append(flagged.mean())
        eff.append((wrong & ~flagged).mean())
        mean.append(scores.mean())
    return StrengthCurve(np.asarray(strengths, dtype=float), np.array(mis), np.array(det),
                         np.array(eff), np.array(mean), float(threshold))


def conditional_correct_rate(net, scores, threshold, X, y):
    """Accuracy on clean samples that the detector lets through; ``None`` if none pass."""
    keep = np.asarray(scores) <= threshold
    if not keep.any():
        return None
    return float(np.mean(net.predict(np.asarray(X)[keep]) == np.asarray(y)[keep]))


def adv_train(net, X, y, eps, steps, step_size, epochs, batch_size, lr, seed, momentum=0.0):
    """Train with the first half of every mini-batch swapped for PGD copies.

    With ``eps = 0`` the PGD copies equal the originals, so the run is
    bit-identical to plain training with the same seed.
    """

    def transform(model, xb, yb):
        h = (len(xb) + 1) // 2
        adv = attacks.pgd(model, xb[:h], yb[:h], eps, steps, step_size).x_adv
        return np.concatenate([adv, xb[h:]]), yb

    return train(net, X, y, epochs, batch_size, lr, seed, momentum, batch_transform=transform)


def robust_accuracy(net, X, y, eps, steps, step_size):
    r = attacks.pgd(net, X, y, eps, steps, step_size)
    return float(np.mean(r.decision == np.asarray(y)))


def write_curve_csv(path, curve: StrengthCurve):
    with open(path, "w") as f:
        f.write("strength,misclassify,detection,effective,mean_score\n")
        for row in curve.rows():
            f.write(",".join(repr(float(v)) for v in row) + "\n")


def write_roc_csv(path, curve: RocCurve):
    with open(path, "w") as f:
        f.write("# auc " + repr(float(curve.auc)) + "\n")
        f.write("threshold,fpr,tpr\n")
        for t, a, b in zip(curve.thresholds, curve.fpr, curve.tpr):
            f.write(f"{float(t)!r},{float(a)!r},{float(b)!r}\n")
