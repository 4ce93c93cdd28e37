"""Desk-scale experiment protocols shared by the acceptance tests and the scripts.

Each protocol takes a config dataclass and a seed list and returns per-seed
records; judging the numbers is left to the caller.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ada, attacks, bddefense, data, evaluation, poisoning, reverse
from .nncore import TrainConfig, accuracy

# -- ADA vs confidence on CW attacks -----------------------------------------


@dataclass
class AdaEchoConfig:
    classes: int = 4
    dim: int = 10
    separation: float = 5.5
    n_per_class: int = 1000
    arch: str = "dense:32,relu,dense:16,relu"
    epochs: int = 60
    lr: float = 0.05
    cw_c: float = 4.0
    cw_k: float = 7.0
    cw_iters: int = 1000
    cw_lr: float = 1e-2
    n_attack: int = 300


@dataclass
class AdaEchoRun:
    seed: int
    accuracy: float
    attack_success: float
    ada_auc: float
    confidence_auc: float


def _all_hidden(net):
    return list(range(len(net.layers) - 1))


def ada_detection_echo(cfg: AdaEchoConfig = AdaEchoConfig(), seeds=range(5)):
    """ROC AUC of ADA and of the confidence baseline against targeted CW attacks.

    The null bank covers every hidden layer (dense outputs and their ReLUs).
    Clean scores come from correctly classified test samples; attack scores
    from the successful CW examples crafted from the first ``n_attack`` of them.
    """
    runs = []
    for seed in seeds:
        ds = data.synth_gaussians(cfg.classes, cfg.dim, cfg.n_per_class, cfg.separation, seed)
        tr, te = data.split(ds, 0.5, seed)
        tr, te = data.minmax_normalize(tr, te)
        net = TrainConfig(cfg.arch, cfg.epochs, 32, cfg.lr, 0.9, seed).fit(tr.X, tr.y, cfg.classes)
        bank = ada.fit_null(net, tr, layers=_all_hidden(net), seed=seed)
        ok = net.predict(te.X) == te.y
        Xc, yc = te.X[ok], te.y[ok]
        Xa, ya = Xc[:cfg.n_attack], yc[:cfg.n_attack]
        t = attacks.random_targets(ya, cfg.classes, seed)
        r = attacks.cw_l2(net, Xa, t, c=cfg.cw_c, k=cfg.cw_k, iters=cfg.cw_iters, lr=cfg.cw_lr)
        adv = r.x_adv[r.success]
        a_auc = evaluation.roc(ada.ada_statistic(net, bank, adv).score,
                               ada.ada_statistic(net, bank, Xc).score).auc
        c_auc = evaluation.roc(ada.confidence_score(net, adv), ada.confidence_score(net, Xc)).auc
        runs.append(AdaEchoRun(seed, accuracy(net, te.X, te.y), r.success_rate, a_auc, c_auc))
    return runs


# -- attack strength vs detectability -------------------------------------------

@dataclass
class SweepConfig:
    classes: int = 4
    side: int = 8
    n_per_class: int = 600
    arch: str = "dense:32,relu,dense:16,relu"
    epochs: int = 60
    grid: tuple = (0.0, 0.05, 0.1, 0.15, 0.25, 0.4)
    n_eval: int = 400
    fpr: float = 0.05


@dataclass
class SweepRun:
    seed: int
    curve: evaluation.StrengthCurve

    @property
    def ada_steps_up(self):
        return int(np.sum(np.diff(self.curve.mean_score) >= 0))

    @property
    def effective_monotone(self):
        return bool(np.all(np.diff(self.curve.effective) >= 0))


def strength_tradeoff(cfg: SweepConfig = SweepConfig(), seeds=range(10)):
    """Untargeted FGSM sweep scored by ADA with a threshold fixed on held-out clean data."""
    runs = []
    for seed in seeds:
        ds = data.synth_images(cfg.classes, cfg.side, cfg.n_per_class, seed)
        tr, te = data.split(ds, 0.5, seed)
        net = TrainConfig(cfg.arch, cfg.epochs, 32, 0.05, 0.9, seed).fit(tr.X, tr.y, cfg.classes)
        bank = ada.fit_null(net, tr, layers=_all_hidden(net), seed=seed, cov_mode="diag")
        cal, ev = data.split(te, 0.5, seed)
        thr = ada.threshold_at_fpr(ada.ada_statistic(net, bank, cal.X).score, cfg.fpr)

        def score(x):
            return ada.ada_statistic(net, bank, x).score

        curve = evaluation.effective_success_curve(net, score, thr, "fgsm", cfg.grid,
                                                   ev.X[:cfg.n_eval], ev.y[:cfg.n_eval],
                                                   seed=seed, targeted=False)
        runs.append(SweepRun(seed, curve))
    return runs


# -- training-set backdoor defenses ---------------------------------------------

@dataclass
class CIEchoConfig:
    classes: int = 4
    side: int = 10
    channels: int = 3
    modes: int = 3
    n_per_class: int = 1000
    arch: str = "conv:8:3,relu,maxpool:2,dense:24,relu"
    epochs: int = 30
    delta: float = 0.25
    poison_fraction: float = 0.02
    source: int = 0
    target: int = 1


@dataclass
class CIEchoRun:
    seed: int
    n_train: int
    n_poison: int
    clean_accuracy: float            # clean model
    poisoned_accuracy: float
    baseline_success: float          # backdoor test success on the clean model
    attack_success: float            # on the poisoned model
    ci_tp: int
    ci_fp: int
    ss_tp: int
    ss_fp: int
    retrained_accuracy: float
    residual_success: float
    n_backdoor_test: int
    report: bddefense.ImpurityReport = field(repr=False, default=None)


def ci_backdoor_echo(cfg: CIEchoConfig = CIEchoConfig(), seeds=range(10)):
    """Single-pixel backdoor; cluster impurity vs spectral signature; retraining after CI removal."""
    runs = []
    for seed in seeds:
        ds = data.synth_images(cfg.classes, cfg.side, cfg.n_per_class, seed, channels=cfg.channels,
                               modes=cfg.modes)
        tr, te = data.split(ds, 0.5, seed)
        n_poison = int(round(cfg.poison_fraction * len(tr)))
        pos = (cfg.side // 2, cfg.side // 2 + 1)
        spec = poisoning.BackdoorSpec("single_pixel", cfg.source, cfg.target, n_poison,
                                      position=pos, delta=cfg.delta)
        ptr, pidx = poisoning.poison_trainset(tr, spec, seed)
        bd = poisoning.backdoor_test_set(te, spec)
        tcfg = TrainConfig(cfg.arch, cfg.epochs, 32, 0.05, 0.9, seed)
        clean = tcfg.fit(tr.X, tr.y, cfg.classes)
        net = tcfg.fit(ptr.X, ptr.y, cfg.classes)
        report = bddefense.cluster_impurity(net, ptr, seed=seed)
        is_poison = np.isin(np.arange(len(ptr)), pidx)
        ss = bddefense.spectral_signature_at_fpr(bddefense.FeatureMatrix.from_network(net, ptr),
                                                 is_poison, 0.5)
        ci_flag = np.isin(np.arange(len(ptr)), report.flagged_indices)
        ss_flag = np.isin(np.arange(len(ptr)), ss)
        rr = bddefense.retrain_after_removal(ptr, report.flagged_indices, tcfg, te, bd, cfg.target)
        runs.append(CIEchoRun(
            seed, len(ptr), n_poison, accuracy(clean, te.X, te.y), accuracy(net, te.X, te.y),
            poisoning.attack_success_rate(clean, bd, cfg.target),
            poisoning.attack_success_rate(net, bd, cfg.target),
            int(np.sum(ci_flag & is_poison)), int(np.sum(ci_flag & ~is_poison)),
            int(np.sum(ss_flag & is_poison)), int(np.sum(ss_flag & ~is_poison)),
            rr.clean_accuracy, rr.attack_success, len(bd), report))
    return runs


def pooled_rates(runs, kind):
    """Pooled (TPR, FPR) over runs for ``kind`` in {"ci", "ss"}."""
    tp = sum(getattr(r, f"{kind}_tp") for r in runs)
    fp = sum(getattr(r, f"{kind}_fp") for r in runs)
    pos = sum(r.n_poison for r in runs)
    neg = sum(r.n_train - r.n_poison for r in runs)
    return tp / pos, fp / neg


# -- post-training scan ---------------------------------------------------------

@dataclass
class ScanEchoConfig:
    classes: int = 8
    side: int = 8
    n_per_class: int = 400
    variation: float = 0.04
    noise: float = 0.01
    arch: str = "dense:32,relu,dense:16,relu"
    epochs: int = 20
    epsilon: float = 0.03
    poison_fraction: float = 0.1
    scan: bddefense.ScanConfig = field(default_factory=lambda: bddefense.ScanConfig(per_class=100))


@dataclass
class ScanRun:
    seed: int
    backdoored: bool
    true_pair: tuple | None
    attack_success: float
    verdict: bddefense.ScanVerdict

    @property
    def target_correct(self):
        return self.true_pair is not None and self.verdict.pair is not None \
            and self.verdict.pair[1] == self.true_pair[1]


def scan_calibration(cfg: ScanEchoConfig = ScanEchoConfig(), seeds=range(10)):
    """Scan clean models and chess-board-backdoored models trained on the same data seeds."""
    runs = []
    for backdoored in (False, True):
        for seed in seeds:
            ds = data.synth_images(cfg.classes, cfg.side, cfg.n_per_class, seed,
                                   variation=cfg.variation, noise=cfg.noise)
            tr, te = data.split(ds, 0.5, seed)
            pair, asr = None, float("nan")
            if backdoored:
                pair = (seed % cfg.classes, (seed + 1) % cfg.classes)
                spec = poisoning.BackdoorSpec(
                    "additive_global", pair[0], pair[1], int(cfg.poison_fraction * len(tr)),
                    pattern=poisoning.chessboard((1, cfg.side, cfg.side)), epsilon=cfg.epsilon)
                tr, _ = poisoning.poison_trainset(tr, spec, seed)
            net = TrainConfig(cfg.arch, cfg.epochs, 32, 0.05, 0.9, seed).fit(tr.X, tr.y, cfg.classes)
            if backdoored:
                asr = poisoning.attack_success_rate(net, poisoning.backdoor_test_set(te, spec), pair[1])
            verdict = bddefense.scan_imperceptible(net, te.X, te.y, cfg.scan)
            runs.append(ScanRun(seed, backdoored, pair, asr, verdict))
    return runs


# -- reverse engineering ------------------------------------------------------------

@dataclass
class REConfig:
    classes: int = 4
    dim: int = 10
    separation: float = 4.0
    n_per_class: int = 1500
    arch: str = "dense:32,relu,dense:16,relu"
    epochs: int = 30
    seed_size: int = 100
    stages: int = 5
    lam: float = 0.37
    batch_sizes: tuple = (10, 25, 50)
    minibatch: int = 5
    n_transfer: int = 200


@dataclass
class RERun:
    seed: int
    crafted: list
    agreement: list
    single_auc: float
    batch_auc: dict
    transfer: reverse.TransferResult


def _batch_stats(scores, B, minibatch):
    return [ada.re_batch_statistic(scores[i:i + B], minibatch) for i in range(0, len(scores) - B + 1, B)]


def re_pipeline(cfg: REConfig = REConfig(), seeds=range(3)):
    """Surrogate learning against a victim, ADA detection of the last query stage, and transfer."""
    runs = []
    for seed in seeds:
        ds = data.synth_gaussians(cfg.classes, cfg.dim, cfg.n_per_class, cfg.separation, seed)
        tr, rest = data.split(ds, 0.4, seed)
        tr, rest = data.minmax_normalize(tr, rest)
        pool, te = data.split(rest, 0.3, seed)
        victim = TrainConfig(cfg.arch, cfg.epochs, 32, 0.05, 0.9, seed).fit(tr.X, tr.y, cfg.classes)
        bank = ada.fit_null(victim, tr, layers=_all_hidden(victim), seed=seed)
        rng = np.random.default_rng(seed)
        S0 = pool.X[rng.choice(len(pool), cfg.seed_size, replace=False)]
        scfg = TrainConfig(cfg.arch, cfg.epochs, 32, 0.05, 0.9, seed + 1)
        surrogate, log = reverse.re_attack(victim, S0, cfg.stages, cfg.lam, scfg, agreement_X=te.X)
        queries, _ = log.stage(log.n_stages - 1)
        qs = ada.ada_statistic(victim, bank, queries).score
        cs = ada.ada_statistic(victim, bank, te.X).score
        single = evaluation.roc(qs, cs).auc
        batch = {B: evaluation.roc(_batch_stats(qs, B, cfg.minibatch),
                                   _batch_stats(cs, B, cfg.minibatch)).auc for B in cfg.batch_sizes}
        tcfg = attacks.AttackConfig("cw", c=4.0, k=2.0, lr=1e-2, iters=300)
        tr_res = reverse.transfer_eval(surrogate, victim, te.X[:cfg.n_transfer], te.y[:cfg.n_transfer],
                                       tcfg, seed)
        runs.append(RERun(seed, list(log.crafted), list(log.agreement), single, batch, tr_res))
    return runs
