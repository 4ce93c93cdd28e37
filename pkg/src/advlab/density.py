"""Gaussian and log-normal mixture densities fitted by EM, with BIC order selection."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .io import load_container, save_container

LOG2PI = np.log(2.0 * np.pi)


def logsumexp(a, axis=None, keepdims=False):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


FAMILIES = ("gaussian", "lognormal")
DIAG_ABOVE_DIM = 64


@dataclass
class MixtureDensity:
    """Mixture over feature vectors.

    ``covs`` is ``(K, d, d)`` in full mode and ``(K, d)`` in diagonal mode.
    Log-normal mixtures model ``log(z + offset)`` with a Gaussian mixture and
    add the Jacobian of that map, so densities are over ``z`` itself.
    """

    family: str
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    cov_mode: str = "full"
    offset: float = 1e-3

    @property
    def n_components(self):
        return len(self.weights)

    @property
    def dim(self):
        return self.means.shape[1]

    def n_free_parameters(self):
        K, d = self.n_components, self.dim
        cov = d * (d + 1) // 2 if self.cov_mode == "full" else d
        return (K - 1) + K * d + K * cov


@dataclass
class FitResult:
    model: MixtureDensity
    loglik: float
    history: list = field(default_factory=list)
    converged: bool = False


def _transform(model_or_family, z, offset):
    family = getattr(model_or_family, "family", model_or_family)
    z = np.asarray(z, dtype=np.float64)
    if family == "lognormal":
        shifted = z + offset
        if np.any(shifted <= 0):
            raise ValueError("log-normal features must exceed -offset")
        y = np.log(shifted)
        return y, -y.sum(axis=1)
    return z, np.zeros(len(z))


def _component_logpdf(y, means, covs, cov_mode):
    n, d = y.shape
    K = len(means)
    out = np.empty((n, K))
    for k in range(K):
        diff = y - means[k]
        if cov_mode == "full":
            L = np.linalg.cholesky(covs[k])
            sol = solve_triangular(L, diff.T, lower=True, check_finite=False)
            maha = (sol * sol).sum(axis=0)
            logdet = 2.0 * np.log(np.diag(L)).sum()
        else:
            maha = (diff * diff / covs[k]).sum(axis=1)
            logdet = np.log(covs[k]).sum()
        out[:, k] = -0.5 * (d * LOG2PI + logdet + maha)
    return out


def log_density(model: MixtureDensity, z):
    """``log f(z)`` for a batch ``z`` of shape ``(n, d)`` (or a single ``(d,)`` vector)."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    y, jac = _transform(model, z, model.offset)
    comp = _component_logpdf(y, model.means, model.covs, model.cov_mode)
    out = logsumexp(comp + np.log(model.weights), axis=1) + jac
    return out[0] if single else out


def _kmeanspp(y, K, rng):
    n = len(y)
    centers = [y[rng.integers(n)]]
    d2 = ((y - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        i = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(y[i])
        d2 = np.minimum(d2, ((y - y[i]) ** 2).sum(axis=1))
    centers = np.array(centers)
    dist = ((y[:, None, :] - centers[None]) ** 2).sum(axis=2)
    resp = np.zeros((n, K))
    resp[np.arange(n), dist.argmin(axis=1)] = 1.0
    return resp


def _m_step(y, resp, cov_mode, reg, prev_covs=None):
    """Weights and means maximise the EM objective; the ridged covariance is kept
    only if it does not lower the component's expected complete-data
    log-likelihood relative to ``prev_covs`` (a generalised EM step), which keeps
    the log-likelihood sequence non-decreasing.
    """
    n, d = y.shape
    nk = resp.sum(axis=0)
    floor = 10 * np.finfo(float).eps * n
    nk = np.maximum(nk, floor)
    weights = nk / nk.sum()
    means = (resp.T @ y) / nk[:, None]
    K = resp.shape[1]
    if cov_mode == "full":
        covs = np.empty((K, d, d))
        for k in range(K):
            diff = y - means[k]
            S = (resp[:, k, None] * diff).T @ diff / nk[k]
            S = 0.5 * (S + S.T)
            covs[k] = S + reg * _ridge_scale(np.diag(S)) * np.eye(d)
            if prev_covs is not None and _q_full(prev_covs[k], S) > _q_full(covs[k], S):
                covs[k] = prev_covs[k]
    else:
        covs = np.empty((K, d))
        for k in range(K):
            v = (resp[:, k, None] * (y - means[k]) ** 2).sum(axis=0) / nk[k]
            covs[k] = v + reg * _ridge_scale(v)
            if prev_covs is not None and _q_diag(prev_covs[k], v) > _q_diag(covs[k], v):
                covs[k] = prev_covs[k]
    return weights, means, covs


def _q_full(cov, S):
    """Per-sample covariance term of the EM objective: ``-log|cov| - tr(cov^-1 S)``."""
    L = np.linalg.cholesky(cov)
    return -2.0 * np.log(np.diag(L)).sum() - np.trace(np.linalg.solve(cov, S))


def _q_diag(var, v):
    return -np.log(var).sum() - (v / var).sum()


def _ridge_scale(diag):
    m = float(np.mean(diag))
    return m if m > 0 else 1.0


def _resolve_mode(cov_mode, d):
    if cov_mode == "auto":
        return "diag" if d > DIAG_ABOVE_DIM else "full"
    if cov_mode not in ("full", "diag"):
        raise ValueError(f"unknown covariance mode {cov_mode!r}")
    return cov_mode


def _em_once(y, jac_sum, K, cov_mode, rng, max_iter, tol, reg):
    resp = _kmeanspp(y, K, rng)
    weights, means, covs = _m_step(y, resp, cov_mode, reg)
    history = []
    converged = False
    for it in range(max_iter + 1):
        comp = _component_logpdf(y, means, covs, cov_mode) + np.log(weights)
        norm = logsumexp(comp, axis=1)
        history.append(float(norm.sum() + jac_sum))
        if len(history) > 1 and (history[-1] - history[-2]) <= tol * abs(history[-1]):
            converged = True
            break
        if it == max_iter:
            break
        resp = np.exp(comp - norm[:, None])
        weights, means, covs = _m_step(y, resp, cov_mode, reg, covs)
    return weights, means, covs, history, converged


def em_fit(samples, K, family="gaussian", cov_mode="auto", seed=0, max_iter=200,
           tol=1e-6, n_init=1, reg=1e-6, offset=1e-3) -> FitResult:
    """Fit a ``K``-component mixture by EM.

    Starts from k-means++ seeding; iterates until the relative log-likelihood
    gain drops below ``tol`` or ``max_iter`` is reached. Each M-step adds
    ``reg * mean(diag(cov))`` to the covariance diagonal. With ``n_init > 1``
    the best of several seeded restarts is kept. ``history`` lists the total
    log-likelihood after every E-step of the retained run.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    z = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n, d = z.shape
    if n <= K:
        raise ValueError(f"need more than {K} samples, got {n}")
    if d < 1:
        raise ValueError("dimension must be at least 1")
    mode = _resolve_mode(cov_mode, d)
    y, jac = _transform(family, z, offset)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        w, m, c, hist, conv = _em_once(y, jac.sum(), K, mode, rng, max_iter, tol, reg)
        if best is None or hist[-1] > best[3][-1]:
            best = (w, m, c, hist, conv)
    w, m, c, hist, conv = best
    model = MixtureDensity(family, w, m, c, mode, offset)
    return FitResult(model, hist[-1], hist, conv)


def bic(fit: FitResult, n):
    return -2.0 * fit.loglik + fit.model.n_free_parameters() * np.log(n)


def bic_select(samples, family="gaussian", K_max=5, seed=0, cov_mode="auto", n_init=3,
               **kw):
    """Choose the component count in ``1..K_max`` minimising BIC (ties go to smaller K).

    Returns ``(K_star, model, bics)``.
    """
    z = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n = len(z)
    fits, scores = [], []
    for K in range(1, K_max + 1):
        if n <= K:
            break
        fit = em_fit(z, K, family, cov_mode, seed + K, n_init=n_init if K > 1 else 1, **kw)
        fits.append(fit)
        scores.append(bic(fit, n))
    i = int(np.argmin(scores))
    return i + 1, fits[i].model, scores


def responsibilities(model: MixtureDensity, z):
    y, _ = _transform(model, np.atleast_2d(z), model.offset)
    comp = _component_logpdf(y, model.means, model.covs, model.cov_mode) + np.log(model.weights)
    return np.exp(comp - logsumexp(comp, axis=1, keepdims=True))


def assign(model: MixtureDensity, z):
    return responsibilities(model, z).argmax(axis=1)


# -- persistence --------------------------------------------------------------

def mixture_arrays(prefix, model):
    return [(f"{prefix}weights", model.weights), (f"{prefix}means", model.means),
            (f"{prefix}covs", model.covs)]


def mixture_meta(model):
    return {"family": model.family, "cov_mode": model.cov_mode, "offset": model.offset}


def mixture_from(meta, arrays, prefix=""):
    return MixtureDensity(meta["family"], arrays[f"{prefix}weights"], arrays[f"{prefix}means"],
                          arrays[f"{prefix}covs"], meta["cov_mode"], meta["offset"])


def save_mixture(path, model):
    save_container(path, "mixture", mixture_meta(model), mixture_arrays("", model))


def load_mixture(path):
    _, meta, arrays = load_container(path, "mixture")
    return mixture_from(meta, arrays)
