"""Backdoor defenses.

Training-set defenses work on penultimate-layer features of the training
samples: spectral signature (SS), activation clustering (AC) and cluster
impurity (CI). Post-training scans look only at a trained network and a small
clean set: an additive-perturbation scan over all class pairs with an
order-statistic p-value, and a patch scan that measures the maximum achievable
misclassification fraction (MAMF) for square supports.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import density
from .ada import blur_disagree, threshold_at_fpr
from .data import Dataset
from .nncore import TrainConfig, accuracy, onehot

# -- features -----------------------------------------------------------------


@dataclass
class FeatureMatrix:
    """Per-class penultimate activations with their row indices in the training set."""

    features: dict   # class -> (n_c, d)
    indices: dict    # class -> (n_c,)

    @classmethod
    def from_network(cls, net, dataset: Dataset, layer=None):
        layer = net.penultimate_index() if layer is None else layer
        z = net.features(dataset.X, layer)
        feats, idx = {}, {}
        for c in range(dataset.class_count):
            rows = np.flatnonzero(dataset.y == c)
            feats[c], idx[c] = z[rows], rows
        return cls(feats, idx)

    @property
    def dim(self):
        return next(iter(self.features.values())).shape[1]


# -- spectral signature -------------------------------------------------------

def spectral_scores(features: FeatureMatrix, c):
    """``|projection|`` of centred class-``c`` features onto the top covariance eigenvector."""
    z = features.features[c]
    if len(z) < 2:
        raise ValueError(f"class {c} needs at least 2 samples for a spectral signature")
    centred = z - z.mean(axis=0)
    cov = centred.T @ centred / len(z)
    _, vecs = np.linalg.eigh(cov)
    return np.abs(centred @ vecs[:, -1])


def spectral_signature(features: FeatureMatrix, c, removal_fraction):
    """Training-set indices of the ``ceil(fraction * n_c)`` largest spectral scores in class ``c``."""
    if not 0.0 <= removal_fraction <= 1.0:
        raise ValueError("removal_fraction must lie in [0, 1]")
    scores = spectral_scores(features, c)
    m = math.ceil(removal_fraction * len(scores) - 1e-9)
    order = np.argsort(-scores, kind="stable")[:m]
    return np.sort(features.indices[c][order])


def spectral_signature_at_fpr(features: FeatureMatrix, is_poison, fpr=0.5):
    """Flag with one threshold shared by all classes, set so that ``fpr`` of clean rows are flagged.

    Needs ground truth (``is_poison`` over the training set), so it is an
    evaluation protocol rather than a deployable defense.
    """
    is_poison = np.asarray(is_poison, dtype=bool)
    idx = np.concatenate([features.indices[c] for c in sorted(features.features)])
    sc = np.concatenate([spectral_scores(features, c) for c in sorted(features.features)])
    thr = threshold_at_fpr(sc[~is_poison[idx]], fpr)
    return np.sort(idx[sc > thr])


# -- activation clustering ----------------------------------------------------

@dataclass
class ClusterSplit:
    cluster_a: np.ndarray
    cluster_b: np.ndarray
    removed: np.ndarray
    reducer: str          # "ica" or "pca"


def _reduce(z, n_components, seed):
    from sklearn.decomposition import FastICA, PCA
    from sklearn.exceptions import ConvergenceWarning

    n_components = min(n_components, z.shape[1], len(z))
    with warnings.catch_warnings():
        warnings.simplefilter("error", ConvergenceWarning)
        try:
            ica = FastICA(n_components=n_components, random_state=seed, max_iter=400,
                          whiten="unit-variance")
            return ica.fit_transform(z), "ica"
        except (ConvergenceWarning, ValueError, np.linalg.LinAlgError):
            pass
    return PCA(n_components=n_components, whiten=True, random_state=seed).fit_transform(z), "pca"


def activation_clustering(features: FeatureMatrix, c, n_components=10, seed=0,
                          poison_indices=None):
    """Reduce class-``c`` features, split them with 2-means, choose one cluster to remove.

    Blind mode (``poison_indices=None``) removes the smaller cluster. With
    ground-truth poison indices the cluster holding more of them is removed.
    """
    from sklearn.cluster import KMeans

    z = features.features[c]
    rows = features.indices[c]
    if len(z) < 2:
        raise ValueError(f"class {c} needs at least 2 samples")
    reduced, reducer = _reduce(z, n_components, seed)
    labels = KMeans(n_clusters=2, n_init=10, random_state=seed).fit_predict(reduced)
    a, b = rows[labels == 0], rows[labels == 1]
    if poison_indices is None:
        removed = a if len(a) < len(b) or (len(a) == len(b) and a.min() < b.min()) else b
    else:
        pa, pb = np.isin(a, poison_indices).sum(), np.isin(b, poison_indices).sum()
        removed = a if pa >= pb else b
    return ClusterSplit(np.sort(a), np.sort(b), np.sort(removed), reducer)


# -- cluster impurity ---------------------------------------------------------

IMPURITY_THRESHOLD = 0.1


@dataclass
class ClusterRecord:
    label: int
    component: int
    members: np.ndarray
    impurity: float
    flagged: bool


@dataclass
class ImpurityReport:
    clusters: list
    flagged_indices: np.ndarray
    components_per_class: dict

    def rows(self):
        for r in self.clusters:
            yield r.label, r.component, len(r.members), r.impurity, int(r.flagged)


def cluster_impurity(net, trainset: Dataset, k_max=5, seed=0, threshold=IMPURITY_THRESHOLD,
                     layer=None, cov_mode="full", reg=1e-2, n_init=3):
    """Cluster each class's penultimate features and flag clusters with impure blur decisions.

    Per class a full-covariance Gaussian mixture is fitted with the component
    count chosen by BIC. A member is impure when the network's decisions on the
    sample and on its 2x2 blur differ. Clusters whose impure fraction exceeds
    ``threshold`` are flagged and all their members returned for removal.
    """
    feats = FeatureMatrix.from_network(net, trainset, layer)
    disagree, _ = blur_disagree(net, trainset.X)
    clusters, flagged, per_class = [], [], {}
    for c in range(trainset.class_count):
        z, rows = feats.features[c], feats.indices[c]
        if len(z) == 0:
            per_class[c] = 0
            continue
        kmax = max(1, min(k_max, len(z) // 10))
        if len(z) > 1:
            K, model, _ = density.bic_select(z, "gaussian", kmax, seed, cov_mode, n_init, reg=reg)
            assign = density.assign(model, z)
        else:
            K, assign = 1, np.zeros(1, dtype=int)
        per_class[c] = K
        for k in range(K):
            members = rows[assign == k]
            if len(members) == 0:
                continue
            imp = float(disagree[members].mean())
            bad = imp > threshold
            clusters.append(ClusterRecord(c, k, members, imp, bad))
            if bad:
                flagged.append(members)
    flagged = np.sort(np.concatenate(flagged)) if flagged else np.array([], dtype=int)
    return ImpurityReport(clusters, flagged, per_class)


# -- removal and retraining ---------------------------------------------------

@dataclass
class RetrainResult:
    net: object
    clean_accuracy: float
    attack_success: float
    removed: int


def retrain_after_removal(trainset: Dataset, flagged, config: TrainConfig, test: Dataset,
                          backdoor_set: Dataset, target):
    """Drop ``flagged`` rows, retrain from scratch and measure clean accuracy and backdoor success."""
    flagged = np.unique(np.asarray(flagged, dtype=int))
    kept = trainset.without(flagged)
    if len(kept) == 0:
        raise ValueError("removal leaves no training data")
    net = config.fit(kept.X, kept.y, trainset.class_count)
    succ = float(np.mean(net.predict(backdoor_set.X) == target)) if len(backdoor_set) else float("nan")
    return RetrainResult(net, accuracy(net, test.X, test.y), succ, len(flagged))


def detection_rates(flagged, poison_indices, n_train):
    """(TPR, FPR) of a flagged set against ground-truth poison rows."""
    flagged = np.zeros(n_train, dtype=bool) if len(flagged) == 0 else np.isin(np.arange(n_train), flagged)
    poison = np.isin(np.arange(n_train), poison_indices)
    tpr = flagged[poison].mean() if poison.any() else float("nan")
    fpr = flagged[~poison].mean() if (~poison).any() else float("nan")
    return float(tpr), float(fpr)


# -- post-training scan: imperceptible additive backdoors ---------------------

@dataclass
class PairPerturbation:
    source: int
    target: int
    v: np.ndarray
    norm: float
    fraction: float
    feasible: bool


def _fraction(net, X, v, t):
    return float(np.mean(net.predict(np.clip(X + v, 0.0, 1.0)) == t))


def estimate_pair_perturbation(net, X_source, s, t, target_fraction=0.9, iters=300,
                               lr=0.01, c0=1.0, rounds=10, refine=20):
    """Smallest-norm common additive perturbation moving most class-``s`` samples to ``t``.

    Minimises ``||v||^2 + c * mean CE(t | clip(x + v))`` with Adam. ``c``
    follows a penalty schedule: it doubles after a round that never reaches
    ``target_fraction`` and halves after one that does. The best feasible
    ``v`` is then shrunk along its own direction by bisection on the scale.
    """
    X = np.asarray(X_source, dtype=np.float64)
    shape = X.shape[1:]
    if s == t:
        return PairPerturbation(s, t, np.zeros(shape), 0.0, 1.0, True)
    if len(X) == 0:
        raise ValueError(f"no clean samples for class {s}")
    n = len(X)
    v = np.zeros(shape)
    m1, m2 = np.zeros(shape), np.zeros(shape)
    b1, b2, step = 0.9, 0.999, 0
    c = c0
    best_v, best_norm, best_frac = None, np.inf, 0.0
    top_frac, top_v = 0.0, v.copy()
    per_round = max(1, iters // rounds)
    tgt = np.full(n, t)
    for _ in range(rounds):
        hit = False
        for _ in range(per_round):
            raw = X + v
            xa = np.clip(raw, 0.0, 1.0)
            trace = net.forward(xa)
            frac = float(np.mean(trace.decision == t))
            nv = float(np.linalg.norm(v))
            if frac >= target_fraction:
                hit = True
                if nv < best_norm:
                    best_v, best_norm, best_frac = v.copy(), nv, frac
            if frac > top_frac:
                top_frac, top_v = frac, v.copy()
            dl = (trace.probs - onehot(tgt, net.class_count)) * (c / n)
            gx = net.backprop(trace, dl).input_grad
            gx *= (raw > 0.0) & (raw < 1.0)
            g = gx.sum(axis=0) + 2.0 * v
            step += 1
            m1 = b1 * m1 + (1 - b1) * g
            m2 = b2 * m2 + (1 - b2) * g * g
            v = v - lr * (m1 / (1 - b1 ** step)) / (np.sqrt(m2 / (1 - b2 ** step)) + 1e-12)
        c = c / 2.0 if hit else c * 2.0
    if best_v is None:
        return PairPerturbation(s, t, top_v, float(np.linalg.norm(top_v)), top_frac, False)
    lo, hi = 0.0, 1.0
    for _ in range(refine):
        mid = 0.5 * (lo + hi)
        if _fraction(net, X, mid * best_v, t) >= target_fraction:
            hi = mid
        else:
            lo = mid
    v = hi * best_v
    return PairPerturbation(s, t, v, float(np.linalg.norm(v)), _fraction(net, X, v, t), True)


@dataclass
class ScanConfig:
    target_fraction: float = 0.9
    iters: int = 300
    lr: float = 0.01
    alpha: float = 0.05
    null: str = "gamma"          # or "empirical"
    per_class: int = 50          # clean samples per source class used by the scan


@dataclass
class ScanVerdict:
    attacked: bool
    pair: tuple | None
    statistic: float
    p_value: float
    pattern: np.ndarray | None = None
    note: str = ""
    table: list = field(default_factory=list)


def order_statistic_pvalue(reciprocals, null="gamma"):
    """p-value of the largest reciprocal norm given the others.

    ``gamma``: moment-matched Gamma fit to the non-maximal values,
    ``p = 1 - F(r_max)^M`` with ``M`` the number of pairs. ``empirical``:
    ``(1 + #{others >= r_max}) / M``.
    """
    r = np.asarray(reciprocals, dtype=np.float64)
    M = len(r)
    i = int(np.argmax(r))
    rmax, rest = r[i], np.delete(r, i)
    if null == "empirical":
        return float(min(1.0, (1 + np.sum(rest >= rmax)) / M))
    if null != "gamma":
        raise ValueError(f"unknown null {null!r}")
    mean, var = rest.mean(), rest.var(ddof=1) if len(rest) > 1 else 0.0
    if var <= 0 or mean <= 0:
        return 0.0 if rmax > mean else 1.0
    shape, scale = mean * mean / var, var / mean
    cdf = stats.gamma.cdf(rmax, shape, scale=scale)
    return float(np.clip(1.0 - cdf ** M, 0.0, 1.0))


def _per_class(X, y, K, limit):
    return {c: X[y == c][:limit] for c in range(K)}


def scan_imperceptible(net, X, y, config: ScanConfig = ScanConfig()):
    """Estimate a perturbation for every ordered class pair and test the smallest norm."""
    K = net.class_count
    if K < 3:
        return ScanVerdict(False, None, float("nan"), 1.0, note="insufficient pairs")
    groups = _per_class(np.asarray(X), np.asarray(y), K, config.per_class)
    table = []
    for s in range(K):
        for t in range(K):
            if s != t:
                table.append(estimate_pair_perturbation(net, groups[s], s, t, config.target_fraction,
                                                        config.iters, config.lr))
    recip = np.array([1.0 / p.norm if p.feasible and p.norm > 0 else 0.0 for p in table])
    p = order_statistic_pvalue(recip, config.null)
    best = table[int(np.argmax(recip))]
    return ScanVerdict(bool(p < config.alpha), (best.source, best.target), float(recip.max()), p,
                       best.v, table=table)


# -- post-training scan: perceptible patch backdoors ---------------------------

def _positions(H, W, w, stride):
    rows = list(range(0, H - w + 1, stride))
    cols = list(range(0, W - w + 1, stride))
    if rows[-1] != H - w:
        rows.append(H - w)
    if cols[-1] != W - w:
        cols.append(W - w)
    return [(r, c) for r in rows for c in cols]


def patch_mamf(net, X_source, t, width, stride=2, iters=20, step=0.1):
    """Largest fraction of samples sent to ``t`` by one ``width x width`` patch.

    For every position on a grid the patch content (all channels, in [0, 1])
    is optimised by signed-gradient descent on the target cross-entropy.
    Returns ``(mamf, position, patch)``.
    """
    X = np.asarray(X_source, dtype=np.float64)
    n, C, H, W = X.shape
    tgt = onehot(np.full(n, t), net.class_count) / n
    best = (-1.0, None, None)
    for r, q in _positions(H, W, width, stride):
        patch = np.full((C, width, width), 0.5)
        for _ in range(iters + 1):
            xa = X.copy()
            xa[:, :, r:r + width, q:q + width] = patch
            trace = net.forward(xa)
            frac = float(np.mean(trace.decision == t))
            if frac > best[0]:
                best = (frac, (r, q), patch.copy())
            if frac == 1.0:
                break
            g = net.backprop(trace, trace.probs / n - tgt).input_grad
            g = g[:, :, r:r + width, q:q + width].sum(axis=0)
            patch = np.clip(patch - step * np.sign(g), 0.0, 1.0)
        if best[0] == 1.0:
            break
    return best


@dataclass
class PerceptibleScan:
    verdict: ScanVerdict
    widths: list
    mamf: dict        # (s, t) -> per-width MAMF list

    def average(self):
        return {k: float(np.mean(v)) for k, v in self.mamf.items()}


def scan_perceptible(net, X, y, widths, threshold=0.5, per_class=30, stride=2, iters=20,
                     max_width_fraction=0.5):
    """MAMF per ordered pair and support width; attacked iff the best width-average exceeds ``threshold``.

    Widths above ``max_width_fraction`` of the image side are rejected, since a
    large enough patch can overwrite the whole image.
    """
    X, y = np.asarray(X), np.asarray(y)
    side = min(X.shape[-2:])
    widths = [int(w) for w in widths]
    if not widths or any(w < 1 or w > max_width_fraction * side for w in widths):
        raise ValueError(f"support widths must lie in [1, {max_width_fraction * side:g}]")
    K = net.class_count
    groups = _per_class(X, y, K, per_class)
    mamf = {}
    for s in range(K):
        for t in range(K):
            if s != t and len(groups[s]):
                mamf[(s, t)] = [patch_mamf(net, groups[s], t, w, stride, iters)[0] for w in widths]
    avg = {k: float(np.mean(v)) for k, v in mamf.items()}
    pair = max(avg, key=avg.get)
    stat = avg[pair]
    verdict = ScanVerdict(stat > threshold, pair, stat, float("nan"), note="mamf threshold")
    return PerceptibleScan(verdict, widths, mamf)


# -- reports ------------------------------------------------------------------

def write_pair_csv(path, verdict: ScanVerdict):
    with open(path, "w") as f:
        f.write("source,target,norm,reciprocal,fraction,feasible\n")
        for p in verdict.table:
            r = 1.0 / p.norm if p.feasible and p.norm > 0 else 0.0
            f.write(f"{p.source},{p.target},{float(p.norm)!r},{float(r)!r},{float(p.fraction)!r},{int(p.feasible)}\n")


def write_mamf_csv(path, scan: PerceptibleScan):
    with open(path, "w") as f:
        f.write("source,target," + ",".join(f"w{w}" for w in scan.widths) + ",average\n")
        for (s, t), vals in sorted(scan.mamf.items()):
            f.write(f"{s},{t}," + ",".join(repr(float(v)) for v in vals)
                    + f",{float(np.mean(vals))!r}\n")


def write_impurity_csv(path, report: ImpurityReport):
    with open(path, "w") as f:
        f.write("class,cluster,size,impurity,flagged\n")
        for c, k, size, imp, flag in report.rows():
            f.write(f"{c},{k},{size},{float(imp)!r},{flag}\n")


def format_verdict(v: ScanVerdict):
    lines = [f"attacked: {'yes' if v.attacked else 'no'}",
             f"pair: {'-' if v.pair is None else f'{v.pair[0]}->{v.pair[1]}'}",
             f"statistic: {float(v.statistic)!r}",
             f"p_value: {float(v.p_value)!r}"]
    if v.note:
        lines.append(f"note: {v.note}")
    return "\n".join(lines) + "\n"
