"""Forward diffusion processes: VP, VPx and the straight-line (SL) process.

All three are Ornstein-Uhlenbeck processes ``dY = f(s) Y ds + sigma(s) dB`` with
isotropic noise, so their perturbation kernels are Gaussian,
``p(y_s | y_d) = N(mu(s) y_d, Sigma(s)^2 I)``, and their quasi-invariant
distributions are zero-mean isotropic Gaussians.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

Kind = Literal["VP", "VPx", "SL"]

S_LO = 1e-5


class SingularityError(ValueError):
    """Raised when the SL process is evaluated at or beyond its singular end."""


@dataclass(frozen=True)
class DiffusionSpec:
    kind: Kind = "VP"
    beta_min: float = 0.1
    beta_max: float = 20.0
    kappa: float = 1.0
    sigma0: float = 0.1
    horizon: float = 1.0
    s_lo: float = S_LO
    s_hi: float | None = None

    def __post_init__(self):
        if self.kind not in ("VP", "VPx", "SL"):
            raise ValueError(f"unknown process kind {self.kind!r}")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.s_lo <= 0:
            raise ValueError("s_lo must be positive")
        if self.kind == "VP" and self.kappa != 1.0:
            object.__setattr__(self, "kappa", 1.0)
        if self.kind in ("VP", "VPx"):
            if self.beta_min < 0 or self.beta_max < 0:
                raise ValueError("beta schedule must be nonnegative")
            if min(self.beta_min, self.beta_max) <= 0:
                raise ValueError("beta(s) must be strictly positive on [0, horizon]")
            if self.kappa <= 0:
                raise ValueError("kappa must be positive")
            if self.s_hi is None:
                object.__setattr__(self, "s_hi", float(self.horizon))
            elif self.s_hi != self.horizon:
                raise ValueError("VP/VPx require s_hi == horizon")
        else:
            if self.sigma0 <= 0:
                raise ValueError("sigma0 must be positive")
            if self.horizon != 1.0:
                raise ValueError("the SL process is defined on horizon T = 1")
            if self.s_hi is None:
                object.__setattr__(self, "s_hi", 1.0 - S_LO)
            elif not self.s_hi < self.horizon:
                raise ValueError("SL requires s_hi < horizon")
        if not self.s_lo < self.s_hi:
            raise ValueError("s_lo must be below s_hi")

    @property
    def noise_scale(self) -> float:
        """Standard deviation of the quasi-invariant Gaussian."""
        return self.sigma0 if self.kind == "SL" else self.kappa

    # -- beta schedule (VP / VPx) --------------------------------------
    def beta(self, s):
        s = np.asarray(s, dtype=float)
        return self.beta_min + (self.beta_max - self.beta_min) * s / self.horizon

    def beta_integral(self, s):
        """Closed-form int_0^s beta for the linear (or constant) schedule."""
        s = np.asarray(s, dtype=float)
        return self.beta_min * s + 0.5 * (self.beta_max - self.beta_min) * s**2 / self.horizon

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionSpec":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ValueError(f"unknown DiffusionSpec keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "DiffusionSpec":
        return cls.from_dict(json.loads(text))


def vp(beta_min=0.1, beta_max=20.0, **kw) -> DiffusionSpec:
    return DiffusionSpec("VP", beta_min=beta_min, beta_max=beta_max, **kw)


def vpx(kappa=0.1, beta_min=0.1, beta_max=20.0, **kw) -> DiffusionSpec:
    return DiffusionSpec("VPx", beta_min=beta_min, beta_max=beta_max, kappa=kappa, **kw)


def sl(sigma0=0.1, **kw) -> DiffusionSpec:
    return DiffusionSpec("SL", sigma0=sigma0, **kw)


@dataclass(frozen=True)
class KernelParams:
    mu: float
    sigma_big: float


@dataclass
class NoisedSample:
    y_s: np.ndarray
    y_d: np.ndarray
    s: np.ndarray
    eps: np.ndarray
    kernel_score: np.ndarray


def _check_sl(s, spec):
    if np.any(np.asarray(s) >= 1.0):
        raise SingularityError("SL process is singular at s >= 1")


def diffusion_coeff(s, spec: DiffusionSpec):
    """sigma(s); vectorized over s."""
    if spec.kind == "SL":
        _check_sl(s, spec)
        return spec.sigma0 * np.sqrt(2.0 / (1.0 - np.asarray(s, dtype=float)))
    return spec.kappa * np.sqrt(spec.beta(s))


def drift_rate(s, spec: DiffusionSpec):
    """f(s) in b_+(x, s) = f(s) x."""
    if spec.kind == "SL":
        _check_sl(s, spec)
        return -1.0 / (1.0 - np.asarray(s, dtype=float))
    return -0.5 * spec.beta(s)


def drift_and_diffusion(x, s, spec: DiffusionSpec):
    """Return (b_plus(x, s), sigma(s)).

    ``x`` may be a single vector or a batch ``(n, D)``; ``s`` a scalar or an
    ``(n,)`` array matching the batch.
    """
    x = np.asarray(x, dtype=float)
    f = drift_rate(s, spec)
    if np.ndim(f):
        f = np.asarray(f)[..., None]
    return f * x, diffusion_coeff(s, spec)


def drift_divergence(s, spec: DiffusionSpec, dim: int):
    """div b_+ = D f(s); position independent for these processes."""
    return dim * drift_rate(s, spec)


def mu_sigma(s, spec: DiffusionSpec):
    """Vectorized (mu(s), Sigma(s))."""
    s = np.asarray(s, dtype=float)
    if spec.kind == "SL":
        _check_sl(s, spec)
        mu = 1.0 - s
        return mu, spec.sigma0 * np.sqrt(1.0 - mu**2)
    b = spec.beta_integral(s)
    return np.exp(-0.5 * b), spec.kappa * np.sqrt(-np.expm1(-b))


def kernel_params(s: float, spec: DiffusionSpec) -> KernelParams:
    mu, sig = mu_sigma(s, spec)
    return KernelParams(float(mu), float(sig))


def perturb(y_d, s, noise, spec: DiffusionSpec) -> NoisedSample:
    """Push ``y_d`` through the perturbation kernel with the given standard-normal draw."""
    y_d = np.asarray(y_d, dtype=float)
    noise = np.asarray(noise, dtype=float)
    mu, sig = mu_sigma(s, spec)
    if np.any(sig == 0):
        raise ZeroDivisionError("Sigma(s) = 0: kernel score undefined (s below s_lo?)")
    if np.ndim(mu):
        mu, sig = np.asarray(mu)[..., None], np.asarray(sig)[..., None]
    y_s = mu * y_d + sig * noise
    return NoisedSample(y_s=y_s, y_d=y_d, s=np.asarray(s, dtype=float), eps=noise,
                        kernel_score=-noise / sig)


def qid(x, s, spec: DiffusionSpec):
    """Log density and score of the quasi-invariant distribution N(0, c^2 I).

    ``s`` is accepted for interface symmetry; all three processes have an
    s-independent quasi-invariant state.
    """
    x = np.asarray(x, dtype=float)
    var = spec.noise_scale**2
    d = x.shape[-1]
    logp = -0.5 * np.sum(x**2, axis=-1) / var - 0.5 * d * math.log(2 * math.pi * var)
    return logp, -x / var


def qid_score(x, spec: DiffusionSpec):
    return -np.asarray(x) / spec.noise_scale**2


def qid_entropy(spec: DiffusionSpec, dim: int) -> float:
    """Gibbs entropy of the quasi-invariant Gaussian."""
    return 0.5 * dim * math.log(2 * math.pi * math.e * spec.noise_scale**2)


def geometric_grid(spec: DiffusionSpec, steps: int) -> np.ndarray:
    """Forward-time grid from 0 to s_hi suited to the process.

    Uniform for VP/VPx; for SL, uniform in log(1 - s) so that the step stays
    small relative to the distance from the singularity.
    """
    if spec.kind == "SL":
        u = np.geomspace(1.0, 1.0 - spec.s_hi, steps + 1)
        return 1.0 - u
    return np.linspace(0.0, spec.s_hi, steps + 1)


def euler_maruyama(y0, grid, spec: DiffusionSpec, rng: np.random.Generator, record=None):
    """Simulate the forward SDE on ``grid`` starting from ``y0`` of shape (n, D).

    ``record`` lists grid indices whose states are returned, stacked as
    ``(len(record), n, D)``; by default only the final state is returned.
    """
    y = np.array(y0, dtype=float)
    record = [len(grid) - 1] if record is None else list(record)
    want = {k: i for i, k in enumerate(record)}
    out = np.empty((len(record),) + y.shape)
    if 0 in want:
        out[want[0]] = y
    for k in range(len(grid) - 1):
        s, h = grid[k], grid[k + 1] - grid[k]
        f = drift_rate(s, spec)
        g = diffusion_coeff(s, spec)
        y = y + f * y * h + g * math.sqrt(h) * rng.standard_normal(y.shape)
        if k + 1 in want:
            out[want[k + 1]] = y
    return out
