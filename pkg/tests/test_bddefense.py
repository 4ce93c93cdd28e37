import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from advlab import bddefense, data, poisoning
from advlab.bddefense import (FeatureMatrix, ScanConfig, activation_clustering, cluster_impurity,
                              detection_rates, estimate_pair_perturbation, order_statistic_pvalue,
                              patch_mamf, retrain_after_removal, scan_imperceptible, scan_perceptible,
                              spectral_signature, spectral_signature_at_fpr)
from advlab.nncore import TrainConfig

from conftest import linear_boundary_case, linear_net


def _fm(z, label=0):
    return FeatureMatrix({label: z}, {label: np.arange(len(z))})


def _planted():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(100, 5))
    z[80:, 1] += 8.0
    return z


def test_spectral_zero_fraction_empty():
    assert len(spectral_signature(_fm(_planted()), 0, 0.0)) == 0


def test_spectral_finds_shifted_points():
    flagged = spectral_signature(_fm(_planted()), 0, 0.2)
    assert np.sum(flagged >= 80) >= 18


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 80), st.floats(0, 1), st.integers(0, 100))
def test_spectral_flag_count(n, frac, seed):
    z = np.random.default_rng(seed).normal(size=(n, 3))
    assert len(spectral_signature(_fm(z), 0, frac)) == math.ceil(frac * n - 1e-9)


def test_spectral_at_fpr_flags_half_the_clean_rows():
    rng = np.random.default_rng(1)
    fm = FeatureMatrix({0: rng.normal(size=(50, 3)), 1: rng.normal(size=(60, 3))},
                       {0: np.arange(50), 1: np.arange(50, 110)})
    is_poison = np.zeros(110, dtype=bool)
    is_poison[[3, 70]] = True
    flagged = spectral_signature_at_fpr(fm, is_poison, 0.5)
    assert np.sum(~is_poison[flagged]) == 54


def test_ac_recovers_blobs():
    rng = np.random.default_rng(2)
    z = np.concatenate([rng.normal(0, 1, (70, 12)), rng.normal(6, 1, (30, 12))])
    split = activation_clustering(_fm(z), 0, seed=0)
    groups = {tuple(split.cluster_a), tuple(split.cluster_b)}
    assert groups == {tuple(range(70)), tuple(range(70, 100))}
    assert np.array_equal(split.removed, np.arange(70, 100))
    gt = activation_clustering(_fm(z), 0, seed=0, poison_indices=np.arange(60))
    assert np.array_equal(gt.removed, np.arange(70))


def test_ac_clamps_components_and_is_deterministic():
    z = np.random.default_rng(3).normal(size=(40, 3))
    a = activation_clustering(_fm(z), 0, n_components=10, seed=5)
    b = activation_clustering(_fm(z), 0, n_components=10, seed=5)
    assert np.array_equal(a.removed, b.removed)
    assert len(a.cluster_a) + len(a.cluster_b) == 40


def test_impurity_report_consistency(image_task):
    net, tr, _ = image_task
    report = cluster_impurity(net, tr, k_max=3, seed=0)
    members = np.concatenate([r.members for r in report.clusters])
    assert np.array_equal(np.sort(members), np.arange(len(tr)))
    for r in report.clusters:
        assert 0.0 <= r.impurity <= 1.0
        assert r.flagged == (r.impurity > bddefense.IMPURITY_THRESHOLD)
    flagged = np.concatenate([r.members for r in report.clusters if r.flagged] or [np.array([], int)])
    assert np.array_equal(np.sort(flagged), report.flagged_indices)


def test_impurity_zero_when_no_disagreement():
    # constant images: blur is the identity, so nobody disagrees
    X = np.concatenate([np.full((30, 1, 4, 4), 0.2), np.full((30, 1, 4, 4), 0.8)])
    X += np.random.default_rng(0).normal(0, 1e-3, X.shape).clip(-0.01, 0.01) * 0
    y = np.repeat([0, 1], 30)
    ds = data.Dataset(X, y, 2)
    net = TrainConfig("dense:4,relu", 5, 10, 0.1, 0.9, 0).fit(X, y, 2)
    report = cluster_impurity(net, ds)
    assert all(r.impurity == 0.0 for r in report.clusters)
    assert len(report.flagged_indices) == 0


def _backdoor_setup():
    ds = data.synth_images(3, 8, 200, seed=1)
    tr, te = data.split(ds, 0.5, 1)
    spec = poisoning.BackdoorSpec("single_pixel", 0, 1, 60, position=(4, 5), delta=1.0)
    ptr, pidx = poisoning.poison_trainset(tr, spec, 1)
    return tr, te, ptr, pidx, spec


def test_retrain_oracle_removal_and_guards():
    tr, te, ptr, pidx, spec = _backdoor_setup()
    cfg = TrainConfig("dense:32,relu,dense:16,relu", 30, 32, 0.05, 0.9, 0)
    bd = poisoning.backdoor_test_set(te, spec)
    clean = cfg.fit(tr.X, tr.y, 3)
    baseline = max(poisoning.attack_success_rate(clean, bd, 1), 1.0 / len(bd))
    poisoned = cfg.fit(ptr.X, ptr.y, 3)
    assert poisoning.attack_success_rate(poisoned, bd, 1) > 0.5
    fixed = retrain_after_removal(ptr, pidx, cfg, te, bd, 1)
    assert fixed.attack_success < 2 * baseline
    none = retrain_after_removal(ptr, [], cfg, te, bd, 1)
    assert all(np.array_equal(p, q) for (_, _, p), (_, _, q) in zip(none.net.parameters(), poisoned.parameters()))
    with pytest.raises(ValueError):
        retrain_after_removal(ptr, np.arange(len(ptr)), cfg, te, bd, 1)


def test_detection_rates():
    assert detection_rates([0, 1, 5], [0, 1, 2, 3], 10) == (0.5, 1 / 6)
    assert detection_rates([], [0], 4) == (0.0, 0.0)


def test_pair_perturbation_same_class():
    p = estimate_pair_perturbation(linear_net(np.eye(2), np.zeros(2)), np.zeros((3, 2)), 1, 1)
    assert p.norm == 0.0 and p.fraction == 1.0 and p.feasible


def test_pair_perturbation_linear_oracle():
    for seed in range(5):
        net, x, w, margin = linear_boundary_case(seed)
        p = estimate_pair_perturbation(net, x, 1, 0, target_fraction=1.0)
        dist = margin / np.linalg.norm(w)
        assert p.feasible and abs(p.norm - dist) <= 0.05 * dist


def test_pair_perturbation_infeasible():
    net = linear_net(np.zeros((2, 2)), np.array([50.0, 0.0]))
    p = estimate_pair_perturbation(net, np.full((4, 2), 0.5), 0, 1, iters=40)
    assert not p.feasible and p.fraction == 0.0


def test_gamma_pvalue_oracle():
    r = np.array([1.0, 1.2, 0.9, 1.1, 1.05, 0.95, 3.0])
    rest = r[:-1]
    m, v = rest.mean(), rest.var(ddof=1)
    expected = 1 - stats.gamma(a=m * m / v, scale=v / m).cdf(3.0) ** 7
    assert abs(order_statistic_pvalue(r) - expected) < 1e-12
    assert order_statistic_pvalue(r, "empirical") == 1 / 7


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=3, max_size=30), st.sampled_from(["gamma", "empirical"]))
def test_pvalue_in_unit_interval(r, null):
    p = order_statistic_pvalue(r, null)
    assert 0.0 <= p <= 1.0


def test_scan_insufficient_pairs():
    v = scan_imperceptible(linear_net(np.eye(2), np.zeros(2)), np.zeros((4, 2)), np.array([0, 1, 0, 1]))
    assert v.note == "insufficient pairs" and not v.attacked and v.p_value == 1.0


def test_scan_decision_monotone_in_alpha(image_task):
    net, _, te = image_task
    prev = False
    for alpha in (0.001, 0.05, 0.5, 1.0):
        v = scan_imperceptible(net, te.X, te.y, ScanConfig(iters=40, per_class=10, alpha=alpha))
        assert v.attacked >= prev
        prev = v.attacked
        assert len(v.table) == 12


def test_patch_full_image_and_single_width(image_task):
    net, _, te = image_task
    X0 = te.X[te.y == 0][:10]
    mamf, pos, patch = patch_mamf(net, X0, 1, 8, iters=30)
    assert mamf >= 0.9 and pos == (0, 0)
    scan = scan_perceptible(net, te.X, te.y, [2], per_class=5, iters=5)
    for k, vals in scan.mamf.items():
        assert scan.average()[k] == vals[0]
    with pytest.raises(ValueError):
        scan_perceptible(net, te.X, te.y, [8])


def test_report_writers(tmp_path, image_task):
    net, _, te = image_task
    v = scan_imperceptible(net, te.X, te.y, ScanConfig(iters=20, per_class=5))
    bddefense.write_pair_csv(tmp_path / "p.csv", v)
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "source,target,norm,reciprocal,fraction,feasible" and len(lines) == 13
    text = bddefense.format_verdict(v)
    assert text.startswith("attacked: ") and "p_value" in text


def test_backdoor_pair_has_smallest_perturbation():
    from advlab import experiments
    run = [r for r in experiments.scan_calibration(seeds=[0]) if r.backdoored][0]
    norms = {(row.source, row.target): row.norm for row in run.verdict.table if row.feasible}
    assert min(norms, key=norms.get) == run.true_pair == (0, 1)
