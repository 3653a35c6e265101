"""Generative direction: reverse SDE and probability-flow ODE in the entropy-matching form.

Both integrators walk the forward time ``s`` from ``s_hi`` down to ``s_lo``
(generative time ``t = T - s`` goes up) and query the model at forward time.
A model is any callable ``eps(x, s)`` returning an array shaped like ``x``;
``net.EpsModel`` wraps trained parameters, ``exact_eps`` wraps a mixture oracle.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .gaussmix import (GaussianMixture, MCEstimate, kl_mc, log_density_and_score_at_times,
                       pushforward)
from .process import DiffusionSpec, diffusion_coeff, drift_rate, mu_sigma, qid, qid_score

SCHEMES = ("EulerMaruyama", "Heun")
INITS = ("QID", "KernelGaussian")


class SamplingAbort(FloatingPointError):
    def __init__(self, msg, step=None):
        super().__init__(msg)
        self.step = step


@dataclass
class SamplerConfig:
    steps: int = 500
    scheme: str = "EulerMaruyama"
    init: str = "QID"
    data_var: float = 1.0

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError("steps must be >= 2")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")
        if self.data_var <= 0:
            raise ValueError("data_var must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def forward_grid(spec: DiffusionSpec, steps: int) -> np.ndarray:
    """Increasing forward times from s_lo to s_hi.

    Uniform for VP/VPx; uniform in log(1 - s) for SL so steps shrink near the
    singular end.
    """
    if spec.kind == "SL":
        return 1.0 - np.geomspace(1.0 - spec.s_lo, 1.0 - spec.s_hi, steps + 1)
    return np.linspace(spec.s_lo, spec.s_hi, steps + 1)


def initial_samples(spec: DiffusionSpec, cfg: SamplerConfig, n: int, dim: int,
                    rng: np.random.Generator):
    if cfg.init == "QID":
        var = spec.noise_scale**2
    else:
        mu, sig = (float(a) for a in mu_sigma(spec.s_hi, spec))
        var = mu**2 * cfg.data_var + sig**2
    return math.sqrt(var) * rng.standard_normal((n, dim))


def initial_law_kl(p_d: GaussianMixture, spec: DiffusionSpec, n: int,
                   rng: np.random.Generator) -> MCEstimate:
    """KL(P_0 || QID): the price of starting the sampler from the QID instead of P_0."""
    p0 = pushforward(p_d, spec.s_hi, spec)
    return kl_mc(p0.log_density, lambda x: qid(x, 0.0, spec)[0], p0.sample, n, rng)


def exact_eps(p_d: GaussianMixture, spec: DiffusionSpec):
    """Oracle eps*(x, s) = score of p(., s) minus the QID score."""

    def eps(x, s):
        x = np.asarray(x, dtype=float)
        if np.ndim(s) == 0:
            score = pushforward(p_d, float(s), spec).score(x)
        else:
            score = log_density_and_score_at_times(p_d, x, s, spec)[1]
        return score - qid_score(x, spec)

    return eps


def _check(x, step):
    if not np.all(np.isfinite(x)):
        raise SamplingAbort(f"non-finite state at step {step}", step)


def _start(spec, cfg, n, dim, rng, x_init):
    if x_init is not None:
        return np.array(x_init, dtype=float)
    if dim is None:
        raise ValueError("dim is required without x_init")
    return initial_samples(spec, cfg, n, dim, rng)


def reverse_sde_sample(model, spec: DiffusionSpec, cfg: SamplerConfig, n: int,
                       rng: np.random.Generator, dim: int | None = None, x_init=None):
    """Euler-Maruyama for dX = (b_+(X, s) + sigma(s)^2 eps(X, s)) dt + sigma(s) dB, s = T - t."""
    if cfg.scheme != "EulerMaruyama":
        raise ValueError("the reverse SDE is integrated with Euler-Maruyama only")
    x = _start(spec, cfg, n, dim, rng, x_init)
    s_grid = forward_grid(spec, cfg.steps)
    for k in range(cfg.steps, 0, -1):
        s, h = float(s_grid[k]), float(s_grid[k] - s_grid[k - 1])
        g2 = float(diffusion_coeff(s, spec)) ** 2
        drift = float(drift_rate(s, spec)) * x + g2 * model(x, s)
        x = x + h * drift + math.sqrt(g2 * h) * rng.standard_normal(x.shape)
        _check(x, cfg.steps - k + 1)
    return x


def pf_ode_sample(model, spec: DiffusionSpec, cfg: SamplerConfig, n: int,
                  rng: np.random.Generator, dim: int | None = None, x_init=None):
    """Probability-flow ODE; the velocity is (sigma^2/2) eps(X, s) in this parameterization.

    Only the initial draw is random, so equal ``x_init`` gives equal outputs.
    """
    x = _start(spec, cfg, n, dim, rng, x_init)
    s_grid = forward_grid(spec, cfg.steps)

    def vel(y, s):
        return 0.5 * float(diffusion_coeff(s, spec)) ** 2 * model(y, s)

    for k in range(cfg.steps, 0, -1):
        s_now, s_next = float(s_grid[k]), float(s_grid[k - 1])
        h = s_now - s_next
        v = vel(x, s_now)
        if cfg.scheme == "Heun":
            x_pred = x + h * v
            _check(x_pred, cfg.steps - k + 1)
            x = x + 0.5 * h * (v + vel(x_pred, s_next))
        else:
            x = x + h * v
        _check(x, cfg.steps - k + 1)
    return x


def write_samples_csv(path, samples, cfg: SamplerConfig | None = None, extra: dict | None = None):
    """Rows are samples, columns coordinates; config echoed as leading ``#`` lines."""
    samples = np.atleast_2d(samples)
    header = dict(cfg.to_dict()) if cfg is not None else {}
    header.update(extra or {})
    with open(path, "w") as fh:
        for k, v in header.items():
            fh.write(f"# {k}: {v}\n")
        fh.write(",".join(f"x{i}" for i in range(samples.shape[1])) + "\n")
        for row in samples:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_samples_csv(path) -> np.ndarray:
    """Inverse of ``write_samples_csv`` (comment lines and the column header are skipped)."""
    with open(path) as fh:
        rows = [line for line in fh if not line.startswith("#")]
    return np.loadtxt(rows[1:], delimiter=",", ndmin=2)
