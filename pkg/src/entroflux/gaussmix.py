"""Isotropic Gaussian mixtures with exact densities and scores, plus MC estimators.

These are the analytic oracles behind every entropy identity in the package:
the time-``s`` marginal of any of the forward processes started from a mixture
is again a mixture (``pushforward``), with closed-form log density and score.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .process import DiffusionSpec, mu_sigma


@dataclass(frozen=True)
class MCEstimate:
    value: float
    std_err: float
    n: int

    @classmethod
    def from_samples(cls, samples) -> "MCEstimate":
        samples = np.asarray(samples, dtype=float).ravel()
        n = samples.size
        if n < 2:
            raise ValueError("need at least two samples for a standard error")
        return cls(float(samples.mean()), float(samples.std(ddof=1) / math.sqrt(n)), n)

    def __sub__(self, other: "MCEstimate") -> "MCEstimate":
        """Difference of two independent estimates."""
        return MCEstimate(self.value - other.value, math.hypot(self.std_err, other.std_err),
                          min(self.n, other.n))

    def __str__(self):
        return f"{self.value:.6g} ± {self.std_err:.2g} (n={self.n})"


class GaussianMixture:
    """Mixture of isotropic Gaussians ``sum_r w_r N(m_r, c_r^2 I)``."""

    def __init__(self, weights, means, variances):
        w = np.asarray(weights, dtype=float).ravel()
        m = np.atleast_2d(np.asarray(means, dtype=float))
        v = np.asarray(variances, dtype=float).ravel()
        if not (len(w) == len(m) == len(v)):
            raise ValueError("weights, means and variances must have the same length")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        if np.any(v <= 0):
            raise ValueError("variances must be positive")
        if not np.all(np.isfinite(m)):
            raise ValueError("means must be finite")
        self.weights, self.means, self.variances = w, m, v

    @classmethod
    def gaussian(cls, mean, var) -> "GaussianMixture":
        return cls([1.0], [np.atleast_1d(mean)], [var])

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def _component_logpdf(self, x):
        x = np.atleast_2d(x)
        d = self.dim
        sq = (np.sum(x**2, 1)[:, None] - 2 * x @ self.means.T
              + np.sum(self.means**2, 1)[None, :])
        sq = np.maximum(sq, 0.0)
        return (-0.5 * sq / self.variances
                - 0.5 * d * np.log(2 * np.pi * self.variances)
                + np.log(np.where(self.weights > 0, self.weights, 1.0))
                + np.where(self.weights > 0, 0.0, -np.inf))

    def log_density(self, x):
        return logsumexp(self._component_logpdf(x), axis=1)

    def log_density_and_score(self, x):
        """Log density and score at a batch ``x`` of shape (n, D) (or a single vector)."""
        single = np.ndim(x) == 1
        x = np.atleast_2d(np.asarray(x, dtype=float))
        lc = self._component_logpdf(x)
        logp = logsumexp(lc, axis=1)
        gamma = np.exp(lc - logp[:, None])
        g = gamma / self.variances
        score = g @ self.means - g.sum(1, keepdims=True) * x
        if single:
            return float(logp[0]), score[0]
        return logp, score

    def score(self, x):
        return self.log_density_and_score(x)[1]

    def sample(self, n: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("n must be >= 1")
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp])[:, None] * z

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "variances": self.variances.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixture":
        return cls(d["weights"], d["means"], d["variances"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "GaussianMixture":
        return cls.from_dict(json.loads(text))

    def __repr__(self):
        return f"GaussianMixture(K={self.n_components}, D={self.dim})"


def log_density_and_score(x, gm: GaussianMixture):
    return gm.log_density_and_score(x)


def sample(gm: GaussianMixture, n: int, rng: np.random.Generator):
    return gm.sample(n, rng)


def pushforward(gm: GaussianMixture, s: float, spec: DiffusionSpec) -> GaussianMixture:
    """Exact marginal at time ``s`` of the forward process started from ``gm``."""
    mu, sig = mu_sigma(s, spec)
    mu, sig = float(mu), float(sig)
    return GaussianMixture(gm.weights, mu * gm.means, mu**2 * gm.variances + sig**2)


def log_density_and_score_at_times(gm: GaussianMixture, x, s, spec: DiffusionSpec):
    """Log density and score of the time-``s`` marginal, with one time per row of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    mu, sig = mu_sigma(np.broadcast_to(np.asarray(s, dtype=float), (len(x),)), spec)
    var = mu[:, None] ** 2 * gm.variances[None, :] + sig[:, None] ** 2
    xm = x @ gm.means.T
    sq = (np.sum(x**2, 1)[:, None] - 2 * mu[:, None] * xm
          + mu[:, None] ** 2 * np.sum(gm.means**2, 1)[None, :])
    sq = np.maximum(sq, 0.0)
    logw = np.log(np.where(gm.weights > 0, gm.weights, 1.0)) + np.where(gm.weights > 0, 0.0, -np.inf)
    lc = logw - 0.5 * sq / var - 0.5 * gm.dim * np.log(2 * np.pi * var)
    logp = logsumexp(lc, axis=1)
    g = np.exp(lc - logp[:, None]) / var
    score = mu[:, None] * (g @ gm.means) - g.sum(1, keepdims=True) * x
    return logp, score


def compose_kernels(k1, k2):
    """Compose (mu, Sigma) of 0->s1 with the conditional kernel s1->s2.

    For an OU process ``mu(s2) = mu(s1) * m12`` and
    ``Sigma(s2)^2 = m12^2 Sigma(s1)^2 + S12^2``.
    """
    (mu1, sig1), (m12, s12) = k1, k2
    return mu1 * m12, math.sqrt(m12**2 * sig1**2 + s12**2)


def conditional_kernel(s1: float, s2: float, spec: DiffusionSpec):
    """(mu, Sigma) of p(y_{s2} | y_{s1})."""
    mu1, sig1 = (float(a) for a in mu_sigma(s1, spec))
    mu2, sig2 = (float(a) for a in mu_sigma(s2, spec))
    m12 = mu2 / mu1
    return m12, math.sqrt(max(sig2**2 - m12**2 * sig1**2, 0.0))


def kl_mc(p_log: Callable, q_log: Callable, sampler: Callable, n: int,
          rng: np.random.Generator) -> MCEstimate:
    """MC estimate of KL(p || q) = E_p[log p - log q].

    Raises ``FloatingPointError`` if any log ratio is non-finite; clipping would
    bias the entropy identities built on top of this.
    """
    x = sampler(n, rng)
    r = np.asarray(p_log(x)) - np.asarray(q_log(x))
    bad = ~np.isfinite(r)
    if bad.any():
        raise FloatingPointError(f"{int(bad.sum())} of {n} log ratios are non-finite")
    return MCEstimate.from_samples(r)


def gibbs_entropy_mc(gm: GaussianMixture, n: int, rng: np.random.Generator) -> MCEstimate:
    """MC estimate of the differential entropy -E[log gm]."""
    if n < 2:
        raise ValueError("n must be >= 2")
    return MCEstimate.from_samples(-gm.log_density(gm.sample(n, rng)))


def gaussian_entropy(var: float, dim: int) -> float:
    return 0.5 * dim * math.log(2 * math.pi * math.e * var)


def gaussian_kl(m1, v1, m2, v2, dim: int | None = None) -> float:
    """KL(N(m1, v1 I) || N(m2, v2 I)) for isotropic Gaussians."""
    dm = np.atleast_1d(np.asarray(m1, dtype=float) - np.asarray(m2, dtype=float))
    d = dim if dim is not None else dm.size
    dm2 = float(np.sum(np.broadcast_to(dm, (d,)) ** 2))
    return 0.5 * (d * v1 / v2 + dm2 / v2 - d + d * math.log(v2 / v1))


def w2_isotropic_gaussians(g1, g2, dim: int) -> float:
    """Squared 2-Wasserstein distance between N(m1, v1 I) and N(m2, v2 I)."""
    (m1, v1), (m2, v2) = g1, g2
    dm = np.atleast_1d(np.asarray(m1, dtype=float) - np.asarray(m2, dtype=float))
    return float(np.sum(dm**2) + dim * (math.sqrt(v1) - math.sqrt(v2)) ** 2)


def random_mixture(dim: int = 6, n_components: int = 5, side: float = 4.0, var: float = 1.0,
                   rng: np.random.Generator | None = None) -> GaussianMixture:
    """Equal-weight mixture with means uniform in the centered hypercube of the given side."""
    if side <= 0:
        raise ValueError("side must be positive")
    rng = np.random.default_rng() if rng is None else rng
    means = rng.uniform(-side / 2, side / 2, size=(n_components, dim))
    return GaussianMixture(np.full(n_components, 1.0 / n_components), means,
                           np.full(n_components, float(var)))
