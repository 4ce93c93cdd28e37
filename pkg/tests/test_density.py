import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import multivariate_normal

from advlab import density
from advlab.density import MixtureDensity, bic, bic_select, em_fit, log_density


def test_k1_closed_form():
    z = np.random.default_rng(0).normal(size=(200, 3)) @ np.array([[1, 0.3, 0], [0, 1, 0.2], [0, 0, 2]])
    fit = em_fit(z, 1, reg=0.0)
    assert np.allclose(fit.model.means[0], z.mean(axis=0), atol=1e-12)
    assert np.allclose(fit.model.covs[0], np.cov(z.T, bias=True), atol=1e-12)
    expected = multivariate_normal(z.mean(axis=0), np.cov(z.T, bias=True)).logpdf(z).sum()
    assert abs(fit.loglik - expected) < 1e-8
    n = len(z)
    assert abs(bic(fit, n) - (-2 * expected + (3 + 6) * np.log(n))) < 1e-6


def test_two_components_recovered():
    rng = np.random.default_rng(1)
    z = np.concatenate([rng.normal(0, 1, (300, 2)), rng.normal([10, 0], 1, (200, 2))])
    m = em_fit(z, 2, seed=0).model
    order = np.argsort(m.means[:, 0])
    assert np.allclose(m.means[order], [[0, 0], [10, 0]], atol=0.15)
    assert np.allclose(m.weights[order], [0.6, 0.4], atol=0.05)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.sampled_from(["full", "diag"]))
def test_em_monotone(seed, K, mode):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(80, 3)) + rng.integers(0, 3, (80, 1)) * 3.0
    h = np.array(em_fit(z, K, cov_mode=mode, seed=seed).history)
    assert np.all(np.diff(h) >= -1e-8 * np.abs(h[1:]).max())


def test_lognormal_monotone_and_finite_at_zero():
    rng = np.random.default_rng(2)
    z = np.maximum(rng.normal(1, 1, (100, 2)), 0.0)
    fit = em_fit(z, 2, family="lognormal", seed=0)
    assert np.all(np.diff(fit.history) >= -1e-8 * abs(fit.history[-1]))
    assert np.isfinite(log_density(fit.model, np.zeros(2)))


def test_isotropic_at_mean():
    d, s2 = 4, 2.5
    m = MixtureDensity("gaussian", np.array([1.0]), np.zeros((1, d)), np.eye(d)[None] * s2)
    assert abs(log_density(m, np.zeros(d)) + d / 2 * np.log(2 * np.pi * s2)) < 1e-12


def test_log_density_matches_naive_sum():
    rng = np.random.default_rng(3)
    K, d = 3, 2
    A = rng.normal(size=(K, d, d))
    covs = A @ A.transpose(0, 2, 1) + np.eye(d)
    m = MixtureDensity("gaussian", np.array([0.2, 0.5, 0.3]), rng.normal(size=(K, d)), covs)
    z = rng.normal(size=(10, d))
    naive = np.log(sum(m.weights[k] * multivariate_normal(m.means[k], covs[k]).pdf(z) for k in range(K)))
    assert np.allclose(log_density(m, z), naive, atol=1e-10)
    md = MixtureDensity("gaussian", m.weights, m.means, np.ones((K, d)) * 1.5, "diag")
    naive_d = np.log(sum(m.weights[k] * multivariate_normal(m.means[k], 1.5 * np.eye(d)).pdf(z)
                         for k in range(K)))
    assert np.allclose(log_density(md, z), naive_d, atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000))
def test_responsibilities_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(50, 2))
    m = em_fit(z, 3, seed=seed).model
    assert np.allclose(density.responsibilities(m, z).sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.isfinite(log_density(m, rng.normal(size=(5, 2)) * 1e3)))


def test_bic_single_gaussian():
    hits = sum(bic_select(np.random.default_rng(s).normal(size=(500, 4)), K_max=3, seed=s,
                          n_init=1)[0] == 1 for s in range(100))
    assert hits >= 90


def test_bic_bimodal():
    hits = 0
    for s in range(100):
        rng = np.random.default_rng(s)
        z = np.concatenate([rng.normal(0, 1, (150, 2)), rng.normal([8, 8], 1, (150, 2))])
        hits += bic_select(z, K_max=3, seed=s, n_init=1)[0] == 2
    assert hits >= 90


def test_bic_kmax_one():
    assert bic_select(np.random.default_rng(0).normal(size=(30, 2)), K_max=1)[0] == 1


def test_em_errors():
    with pytest.raises(ValueError):
        em_fit(np.zeros((3, 2)), 3)
    with pytest.raises(ValueError):
        em_fit(np.zeros((10, 2)), 1, family="cauchy")
    with pytest.raises(ValueError):
        em_fit(-np.ones((10, 2)), 1, family="lognormal")


def test_mixture_roundtrip(tmp_path):
    m = em_fit(np.random.default_rng(0).normal(size=(60, 3)), 2).model
    density.save_mixture(tmp_path / "m.bin", m)
    back = density.load_mixture(tmp_path / "m.bin")
    z = np.random.default_rng(1).normal(size=(4, 3))
    assert np.array_equal(log_density(back, z), log_density(m, z))


def test_em_monotone_when_a_component_collapses():
    # three components on one blob: a component shrinks onto a few points and the ridge binds
    rng = np.random.default_rng(45)
    z = rng.normal(0, 1.0, (120, 3)) + 10 * np.eye(3)[0]
    for mode in ("full", "diag"):
        fit = em_fit(z, 3, seed=45, cov_mode=mode)
        h = np.array(fit.history)
        assert np.all(np.diff(h) >= -1e-8 * np.abs(h).max())
        assert np.all(np.isfinite(log_density(fit.model, z)))
