"""Entropy estimators along the forward process.

Everything here is a time integral of a Monte Carlo expectation on a grid of
forward times, or a KL difference between endpoint distributions. The two must
agree (the Jarzynski-type identity), which is what most tests check.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .gaussmix import (GaussianMixture, MCEstimate, gaussian_kl, gibbs_entropy_mc, kl_mc,
                       pushforward)
from .process import (DiffusionSpec, diffusion_coeff, drift_rate, mu_sigma, perturb, qid,
                      qid_entropy, qid_score)

KINDS = ("IdealTot", "Neural", "ScoreMatch")
DEFAULT_POINTS = 500


@dataclass
class EntropyCurve:
    s_grid: np.ndarray
    rate: np.ndarray
    rate_std_err: np.ndarray
    cumulative: np.ndarray
    cumulative_std_err: np.ndarray
    kind: str
    quad_error: float = 0.0
    tail_estimate: float = 0.0

    @property
    def final(self) -> MCEstimate:
        return MCEstimate(float(self.cumulative[-1]), float(self.cumulative_std_err[-1]),
                          len(self.s_grid))

    @property
    def error_budget(self) -> float:
        """MC standard error of the final value plus the deterministic quadrature terms."""
        return float(self.cumulative_std_err[-1]) + self.quad_error + abs(self.tail_estimate)

    def is_monotone(self, k: float = 3.0) -> bool:
        """Cumulative never drops by more than k standard errors of the step."""
        step = np.diff(self.cumulative)
        step_err = np.sqrt(np.abs(np.diff(self.cumulative_std_err**2)))
        return bool(np.all(step >= -k * step_err - 1e-15))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "rate", "rate_stderr", "cumulative", "cumulative_stderr", "kind"])
            for row in zip(self.s_grid, self.rate, self.rate_std_err, self.cumulative,
                           self.cumulative_std_err):
                w.writerow([repr(float(v)) for v in row] + [self.kind])


def default_grid(spec: DiffusionSpec, n: int = DEFAULT_POINTS) -> np.ndarray:
    return np.linspace(spec.s_lo, spec.s_hi, n)


def trapezoid_weights(grid) -> np.ndarray:
    h = np.diff(grid)
    w = np.zeros(len(grid))
    w[:-1] += h / 2
    w[1:] += h / 2
    return w


def _cumulate(grid, rate, rate_se):
    """Running trapezoid integral and its standard error (independent point errors)."""
    h = np.diff(grid)
    cum = np.concatenate([[0.0], np.cumsum(h * (rate[:-1] + rate[1:]) / 2)])
    var = rate_se**2
    left = np.concatenate([[0.0], h / 2])
    right = np.concatenate([h / 2, [0.0]])
    # on [0, i] every point j < i has weight left_j + right_j; point i only left_i
    full = np.concatenate([[0.0], np.cumsum((left + right) ** 2 * var)])
    cvar = full[:-1] + left**2 * var
    return cum, np.sqrt(cvar)


def quadrature_error_bound(grid, rate) -> float:
    """Composite trapezoid bound sum h^3/12 |f''| with f'' from second differences."""
    if len(grid) < 3:
        return 0.0
    h = np.diff(grid)
    d1 = np.diff(rate) / h
    f2 = 2 * np.diff(d1) / (h[:-1] + h[1:])
    f2 = np.abs(np.concatenate([[f2[0]], f2]))
    f2 = np.maximum(f2, np.concatenate([f2[1:], [f2[-1]]]))
    return float(np.sum(h**3 * f2) / 12)


def _as_sampler(p_d):
    if isinstance(p_d, GaussianMixture):
        return p_d.sample
    data = np.atleast_2d(np.asarray(p_d, dtype=float))
    return lambda n, rng: data[rng.integers(0, len(data), n)]


def ideal_rate(s: float, p_d: GaussianMixture, spec: DiffusionSpec, n: int,
               rng: np.random.Generator) -> MCEstimate:
    """(sigma^2/2) E_p[|grad log p_eq - grad log p|^2] with exact mixture scores."""
    if not spec.s_lo <= s <= spec.s_hi:
        raise ValueError("s outside [s_lo, s_hi]")
    ps = pushforward(p_d, s, spec)
    y = ps.sample(n, rng)
    gap = qid_score(y, spec) - ps.score(y)
    g2 = float(diffusion_coeff(s, spec)) ** 2 / 2
    return MCEstimate.from_samples(g2 * np.sum(gap * gap, axis=1))


def _point_rate(kind, s, p_d, spec, model, n, rng, sampler):
    g2 = float(diffusion_coeff(s, spec)) ** 2 / 2
    if kind == "IdealTot":
        return ideal_rate(s, p_d, spec, n, rng)
    if kind == "Neural":
        y_d = sampler(n, rng)
        y = perturb(y_d, s, rng.standard_normal(y_d.shape), spec).y_s
        eps = model(y, s)
        return MCEstimate.from_samples(g2 * np.sum(eps * eps, axis=1))
    # ScoreMatch: exact mixture scores, or s_theta = qid_score + eps_theta
    if model is None:
        ps = pushforward(p_d, s, spec)
        y = ps.sample(n, rng)
        sc = ps.score(y)
    else:
        y_d = sampler(n, rng)
        y = perturb(y_d, s, rng.standard_normal(y_d.shape), spec).y_s
        sc = qid_score(y, spec) + model(y, s)
    return MCEstimate.from_samples(g2 * np.sum(sc * sc, axis=1))


def entropy_curve(kind: str, p_d, spec: DiffusionSpec, model=None, grid=None, n: int = 1000,
                  rng: np.random.Generator | None = None) -> EntropyCurve:
    """Entropy production rate on ``grid`` and its trapezoidal time integral.

    ``kind`` is IdealTot (exact scores of the mixture ``p_d``), Neural
    (``(sigma^2/2) E|eps(y_s, s)|^2`` with ``y_s`` noised from fresh samples of
    ``p_d``) or ScoreMatch (``(sigma^2/2) E|score|^2``, exact when ``model`` is
    None). ``p_d`` may be an array of samples for the Neural kind. Each grid
    point uses its own spawned random stream.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    if kind == "Neural" and model is None:
        raise ValueError("the Neural curve needs a model")
    if kind == "IdealTot" and not isinstance(p_d, GaussianMixture):
        raise ValueError("the ideal curve needs an analytic mixture")
    grid = default_grid(spec) if grid is None else np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be increasing")
    rng = np.random.default_rng() if rng is None else rng
    sampler = _as_sampler(p_d)
    streams = rng.spawn(len(grid))
    est = [_point_rate(kind, float(s), p_d, spec, model, n, r, sampler)
           for s, r in zip(grid, streams)]
    rate = np.array([e.value for e in est])
    rate_se = np.array([e.std_err for e in est])
    cum, cum_se = _cumulate(grid, rate, rate_se)
    tail = rate[0] * grid[0] + rate[-1] * (spec.horizon - grid[-1])
    return EntropyCurve(grid, rate, rate_se, cum, cum_se, kind,
                        quadrature_error_bound(grid, rate), float(tail))


def stot_via_kl_identity(p_d: GaussianMixture, spec: DiffusionSpec, n: int,
                         rng: np.random.Generator) -> MCEstimate:
    """KL(p_d || p_eq) - KL(P_0 || p_eq), both by Monte Carlo with exact log densities."""
    p0 = pushforward(p_d, spec.s_hi, spec)
    q_log = lambda x: qid(x, 0.0, spec)[0]
    kl_d = kl_mc(p_d.log_density, q_log, p_d.sample, n, rng)
    kl_0 = kl_mc(p0.log_density, q_log, p0.sample, n, rng)
    return kl_d - kl_0


def stot_gaussian_exact(mean, var: float, spec: DiffusionSpec, s_end: float | None = None,
                        s_start: float = 0.0) -> float:
    """Closed-form S_tot for an isotropic Gaussian start N(mean, var I)."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    d = mean.size
    c2 = spec.noise_scale**2
    s_end = spec.s_hi if s_end is None else s_end

    def kl_at(s):
        if s == 0.0:
            return gaussian_kl(mean, var, 0.0, c2, d)
        mu, sig = (float(a) for a in mu_sigma(s, spec))
        return gaussian_kl(mu * mean, mu**2 * var + sig**2, 0.0, c2, d)

    return kl_at(s_start) - kl_at(s_end)


def ideal_rate_quadrature(s: float, p_d: GaussianMixture, spec: DiffusionSpec,
                          n_points: int = 4001, width: float = 12.0) -> float:
    """Deterministic 1-D ideal rate by integration over a fine x grid."""
    if p_d.dim != 1:
        raise ValueError("quadrature rate is 1-D only")
    ps = pushforward(p_d, s, spec)
    sd = np.sqrt(ps.variances.max())
    x = np.linspace(ps.means.min() - width * sd, ps.means.max() + width * sd, n_points)[:, None]
    logp, score = ps.log_density_and_score(x)
    gap = (qid_score(x, spec) - score)[:, 0]
    g2 = float(diffusion_coeff(s, spec)) ** 2 / 2
    return float(integrate.simpson(np.exp(logp) * gap**2, x=x[:, 0]) * g2)


def ideal_stot_quadrature(p_d: GaussianMixture, spec: DiffusionSpec, s_start: float = 0.0,
                          s_end: float | None = None) -> float:
    """Deterministic 1-D S_tot: adaptive quadrature in s of ``ideal_rate_quadrature``."""
    s_end = spec.s_hi if s_end is None else s_end
    f = lambda s: ideal_rate_quadrature(max(s, 0.0), p_d, spec)
    val, _ = integrate.quad(f, s_start, s_end, limit=200, epsabs=1e-11, epsrel=1e-10)
    return float(val)


@dataclass
class ScoreMatchingIdentity:
    s_sm: MCEstimate
    identity_gap: float
    rhs: MCEstimate
    combined_std_err: float
    beta_term: float

    def __iter__(self):
        yield self.s_sm
        yield self.identity_gap


def sm_entropy_and_identity(p_d: GaussianMixture, spec: DiffusionSpec, model=None, n: int = 1000,
                            rng: np.random.Generator | None = None, grid=None,
                            n_gibbs: int | None = None) -> ScoreMatchingIdentity:
    """Score-matching entropy and its Gibbs-entropy form for the VP process.

    The right-hand side is S_G[P_0] - S_G[p(s_lo)] + (D/2) int beta over the
    same interval the curve integrates, so both sides cover identical times.
    """
    if spec.kind != "VP":
        raise ValueError("the Gibbs-entropy identity is derived for VP only")
    rng = np.random.default_rng() if rng is None else rng
    grid = default_grid(spec) if grid is None else np.asarray(grid, dtype=float)
    curve = entropy_curve("ScoreMatch", p_d, spec, model, grid, n, rng)
    n_gibbs = n * 10 if n_gibbs is None else n_gibbs
    d = p_d.dim
    start, end = pushforward(p_d, grid[0], spec), pushforward(p_d, grid[-1], spec)
    dS = gibbs_entropy_mc(end, n_gibbs, rng) - gibbs_entropy_mc(start, n_gibbs, rng)
    beta_term = 0.5 * d * float(spec.beta_integral(grid[-1]) - spec.beta_integral(grid[0]))
    rhs = MCEstimate(dS.value + beta_term, dS.std_err, dS.n)
    s_sm = curve.final
    combined = math.hypot(s_sm.std_err, rhs.std_err) + curve.quad_error
    return ScoreMatchingIdentity(s_sm, abs(s_sm.value - rhs.value), rhs, combined, beta_term)


def gibbs_path_integral(p_d: GaussianMixture, spec: DiffusionSpec, grid=None, n: int = 1000,
                        rng: np.random.Generator | None = None):
    """S_G[p(s_hi)] - S_G[p(s_lo)] as int [(sigma^2/2) E|score|^2 + E div b_+] ds.

    Returns (MCEstimate, quadrature error bound).
    """
    rng = np.random.default_rng() if rng is None else rng
    grid = default_grid(spec) if grid is None else np.asarray(grid, dtype=float)
    curve = entropy_curve("ScoreMatch", p_d, spec, None, grid, n, rng)
    div = p_d.dim * drift_rate(grid, spec)
    div_int = float(integrate.trapezoid(div, grid))
    fin = curve.final
    return MCEstimate(fin.value + div_int, fin.std_err, fin.n), curve.quad_error


def tur_check(stot: float, sigma_sq_T: float, w2_sq: float, error: float = 0.0):
    """Thermodynamic uncertainty bound stot * sigma^2 T >= W2^2 / 2.

    ``error`` is the standard error of ``stot * sigma_sq_T``; the check allows
    three of them. Returns (satisfied, slack).
    """
    slack = stot * sigma_sq_T - 0.5 * w2_sq
    return bool(slack >= -3.0 * error), float(slack)


def free_energy_gap(p_d: GaussianMixture, spec: DiffusionSpec, n: int,
                    rng: np.random.Generator, against: str = "eq") -> MCEstimate:
    """beta (F[p_d] - F[reference]) for a static VP/VPx process.

    F[p] = E_p[U] - beta^{-1} S_G[p] with U = -int b_+ = beta_s |x|^2 / 4 and
    temperature beta^{-1} = sigma^2 / 2. With ``against="eq"`` the reference is
    the QID and the gap equals KL(p_d || p_eq); with ``against="final"`` it is
    P_0 = p(s_hi), and the gap equals the total entropy produced.
    """
    if spec.kind == "SL" or spec.beta_min != spec.beta_max:
        raise ValueError("free energy needs time-independent drift and noise")
    if against not in ("eq", "final"):
        raise ValueError("against must be 'eq' or 'final'")
    b = spec.beta_min
    temp = spec.kappa**2 * b / 2

    def beta_f_samples(dist, m):
        x = dist.sample(m, rng)
        energy = b * np.sum(x * x, axis=1) / 4
        return energy / temp + dist.log_density(x)

    d = p_d.dim
    ref_eq = (b * d * spec.kappa**2 / 4) / temp - qid_entropy(spec, d)
    gap = MCEstimate.from_samples(beta_f_samples(p_d, n) - ref_eq)
    if against == "eq":
        return gap
    p0 = pushforward(p_d, spec.s_hi, spec)
    return gap - MCEstimate.from_samples(beta_f_samples(p0, n) - ref_eq)


@dataclass
class KLCurve:
    s_grid: np.ndarray
    kl: np.ndarray
    std_err: np.ndarray
    step_std_err: np.ndarray

    def is_nonincreasing(self, k: float = 3.0) -> bool:
        return bool(np.all(np.diff(self.kl) <= k * self.step_std_err + 1e-15))


def kl_to_qid_curve(p_d: GaussianMixture, spec: DiffusionSpec, grid=None, n: int = 2000,
                    rng: np.random.Generator | None = None) -> KLCurve:
    """KL(p(., s) || p_eq) on a grid, using common random numbers across s.

    The same data draws and noise are pushed to every s, so consecutive
    differences carry a paired standard error much smaller than each value's.
    """
    rng = np.random.default_rng() if rng is None else rng
    grid = default_grid(spec) if grid is None else np.asarray(grid, dtype=float)
    y_d = p_d.sample(n, rng)
    noise = rng.standard_normal(y_d.shape)
    terms = np.empty((len(grid), n))
    for i, s in enumerate(grid):
        ps = pushforward(p_d, s, spec)
        y = perturb(y_d, float(s), noise, spec).y_s
        terms[i] = ps.log_density(y) - qid(y, s, spec)[0]
    kl = terms.mean(1)
    se = terms.std(1, ddof=1) / math.sqrt(n)
    step_se = np.diff(terms, axis=0).std(1, ddof=1) / math.sqrt(n)
    return KLCurve(grid, kl, se, step_se)


def native_kde_bound(p_d: GaussianMixture, spec: DiffusionSpec, n: int, rng: np.random.Generator,
                     steps: int = 500, n_eval: int | None = None) -> MCEstimate:
    """KL(p_d || P_b) where P_b evolves the exact P_0 under the drift-only reverse SDE.

    P_b is represented by a Gaussian kernel density fit, so this is a 1-D,
    desk-scale check of the bound S_tot >= KL(p_d || P_b).
    """
    from scipy.stats import gaussian_kde

    from .generate import SamplerConfig, reverse_sde_sample

    if p_d.dim != 1:
        raise ValueError("kernel density bound is checked in 1-D only")
    p0 = pushforward(p_d, spec.s_hi, spec)
    x0 = p0.sample(n, rng)
    zero = lambda x, s: np.zeros_like(np.asarray(x, dtype=float))
    xb = reverse_sde_sample(zero, spec, SamplerConfig(steps=steps), n, rng, x_init=x0)
    kde = gaussian_kde(xb[:, 0])
    n_eval = n if n_eval is None else n_eval
    return kl_mc(p_d.log_density, lambda x: kde.logpdf(x[:, 0]), p_d.sample, n_eval, rng)
