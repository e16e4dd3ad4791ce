"""Closed-form denoisers for Gaussian-mixture data.

For data ``x0 ~ sum_k w_k N(mu_k, S_k)`` and ``x_t = sqrt(a) x0 + sqrt(1-a) eps``
the noisy marginal is a mixture with covariances ``A_k = a S_k + (1-a) I``
and the optimal noise prediction is::

    E[eps | x_t] = sqrt(1-a) * sum_k r_k(x_t) A_k^{-1} (x_t - sqrt(a) mu_k)

with ``r_k`` the component responsibilities under the noisy marginal.
"""
from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from ..conditioning import NULL, ConditionSet


def box_centroid(cond):
    """Mean box centre over all present box frames, or ``None``.

    Box slots may hold label sequences (objects with a ``box``) or be empty.
    """
    if not isinstance(cond, ConditionSet):
        return None
    centres = []
    for slot in cond.boxes:
        if slot is NULL or slot is None:
            continue
        for lab in slot:
            b = getattr(lab, "box", lab)
            centres.append(((b.x_min + b.x_max) / 2, (b.y_min + b.y_max) / 2))
    if not centres:
        return None
    return np.mean(centres, axis=0)


class GaussianMixtureDenoiser:
    """Exact posterior-mean noise predictor for a Gaussian mixture.

    Parameters
    ----------
    weights, means, covs : array_like
        Mixture weights ``(K,)``, means ``(K, d)`` and covariances ``(K, d, d)``
        (or ``(K,)`` scalar variances for isotropic components).
    schedule : DiffusionSchedule
    crash_weights : dict, optional
        Crash type -> replacement mixture weights, used when the condition
        carries that (unmasked) crash type.
    box_gain : float
        Shift all component means by ``box_gain * (centroid - 0.5)`` on the
        first two axes, where ``centroid`` is the mean box centre of the
        present box frames. Zero disables box conditioning.
    """

    def __init__(self, weights, means, covs, schedule, crash_weights=None, box_gain=0.0):
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        k, d = self.means.shape
        covs = np.asarray(covs, dtype=np.float64)
        if covs.ndim == 1:
            covs = covs[:, None, None] * np.eye(d)
        self.covs = covs.reshape(k, d, d)
        self.weights = self._normalize(weights, k)
        self.schedule = schedule
        self.crash_weights = {int(c): self._normalize(w, k) for c, w in (crash_weights or {}).items()}
        self.box_gain = float(box_gain)

    @staticmethod
    def _normalize(w, k):
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (k,) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError(f"mixture weights must be {k} non-negative numbers")
        return w / w.sum()

    @property
    def dim(self):
        return self.means.shape[1]

    def mixture_for(self, cond):
        """Weights and means in effect for a condition."""
        weights, means = self.weights, self.means
        if isinstance(cond, ConditionSet):
            if not cond.crash_masked and int(cond.crash_type) in self.crash_weights:
                weights = self.crash_weights[int(cond.crash_type)]
            if self.box_gain:
                c = box_centroid(cond)
                if c is not None:
                    means = means.copy()
                    m = min(2, self.dim)
                    means[:, :m] += self.box_gain * (c[:m] - 0.5)
        return weights, means

    def sample_data(self, n, rng, cond=None):
        """Draw ``n`` clean samples from the (conditioned) mixture."""
        weights, means = self.mixture_for(cond)
        comp = rng.choice(len(weights), size=n, p=weights)
        chol = np.linalg.cholesky(self.covs)
        z = rng.standard_normal((n, self.dim))
        return means[comp] + np.einsum("nij,nj->ni", chol[comp], z), comp

    def _predict_at(self, x, a, weights, means):
        d = self.dim
        A = a * self.covs + (1.0 - a) * np.eye(d)
        A_inv = np.linalg.inv(A)
        _, logdet = np.linalg.slogdet(A)
        diff = x[:, None, :] - np.sqrt(a) * means[None, :, :]  # (n, K, d)
        sol = np.einsum("kij,nkj->nki", A_inv, diff)
        maha = np.einsum("nki,nki->nk", diff, sol)
        with np.errstate(divide="ignore"):
            logw = np.log(weights)
        logp = logw[None, :] - 0.5 * (maha + logdet[None, :])
        resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        return np.sqrt(1.0 - a) * np.einsum("nk,nki->ni", resp, sol)

    def predict(self, x_t, t, cond=None):
        x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        weights, means = self.mixture_for(cond)
        t_arr = np.asarray(t)
        if t_arr.ndim == 0:
            return self._predict_at(x, self.schedule.at(int(t_arr)), weights, means)
        out = np.empty_like(x)
        for tv in np.unique(t_arr):
            rows = t_arr == tv
            out[rows] = self._predict_at(x[rows], self.schedule.at(int(tv)), weights, means)
        return out

