"""One-dimensional lattice random walk: master equation, exact reversal and entropy.

Walkers on sites ``x_min + i * ell`` jump right with probability ``q_R(x)`` and
left with ``q_L = 1 - q_R`` every time step ``dt``. The edge sites are
reflecting walls (``q_R = 1`` on the left edge, ``0`` on the right edge), which
conserves mass and keeps every transition a two-outcome jump; lattices are
sized so the walls carry negligible mass.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class LatticeConfigError(ValueError):
    pass


class LatticeConsistencyError(RuntimeError):
    pass


@dataclass
class LatticeState:
    ell: float
    dt: float
    x_min: float
    p: np.ndarray
    q_right: np.ndarray
    walkers: int = 1000

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.q_right = np.asarray(self.q_right, dtype=float)
        if self.p.shape != self.q_right.shape:
            raise LatticeConfigError("p and q_right must cover the same sites")
        if np.any(self.p < 0) or abs(self.p.sum() - 1.0) > 1e-12:
            raise LatticeConfigError("occupancy must be nonnegative and sum to 1")
        if np.any(self.q_right < 0) or np.any(self.q_right > 1):
            raise LatticeConfigError("q_right must lie in [0, 1]")
        if self.q_right[0] != 1.0 or self.q_right[-1] != 0.0:
            raise LatticeConfigError("edge sites must be reflecting walls (q_R = 1 left, 0 right)")

    @property
    def sites(self) -> np.ndarray:
        return self.x_min + self.ell * np.arange(len(self.p))

    @property
    def q_left(self) -> np.ndarray:
        return 1.0 - self.q_right

    @property
    def sigma_sq(self) -> float:
        return self.ell**2 / self.dt


@dataclass
class LatticeTrajectory:
    states: list
    spec: LatticeState = field(repr=False)

    @property
    def times(self) -> np.ndarray:
        return self.spec.dt * np.arange(len(self.states))


def jump_probs_from_drift(b_plus: Callable, ell: float, dt: float, sites, s: float = 0.0,
                          reflecting: bool = False) -> np.ndarray:
    """q_R = 1/2 + (dt / 2 ell) b_+ at every site.

    With ``reflecting`` the two edge sites are turned into walls.
    """
    sites = np.asarray(sites, dtype=float)
    q = 0.5 + dt / (2 * ell) * np.asarray(b_plus(sites, s), dtype=float) * np.ones_like(sites)
    if reflecting:
        q[0], q[-1] = 1.0, 0.0
    bad = np.flatnonzero((q < 0) | (q > 1))
    if bad.size:
        i = int(bad[0])
        raise LatticeConfigError(
            f"jump probability {q[i]:.4g} outside [0, 1] at site {i} (x = {sites[i]:.4g}); "
            "reduce dt or ell, or shrink the domain")
    return q


def step_forward(state: LatticeState, p=None) -> np.ndarray:
    """One master-equation update p'(x) = q_R(x-l) p(x-l) + q_L(x+l) p(x+l)."""
    p = state.p if p is None else p
    right = state.q_right * p
    left = (1.0 - state.q_right) * p
    out = np.zeros_like(p)
    out[1:] += right[:-1]
    out[:-1] += left[1:]
    return out


def step_reverse(p_after, q_tilde_right, q_tilde_left) -> np.ndarray:
    """Reverse master-equation update with the playback jump probabilities."""
    out = np.zeros_like(p_after)
    out[1:] += (q_tilde_right * p_after)[:-1]
    out[:-1] += (q_tilde_left * p_after)[1:]
    return out


def reverse_probs(p_before, p_after, q_right):
    """Playback jump probabilities (q~_R, q~_L) undoing one forward step.

    ``q~_L(x) = q_R(x-l) p_before(x-l) / p_after(x)`` and
    ``q~_R(x) = q_L(x+l) p_before(x+l) / p_after(x)``; zero where p_after = 0.
    """
    q_right = np.asarray(q_right, dtype=float)
    q_left = 1.0 - q_right
    inflow_from_left = np.zeros_like(p_after)
    inflow_from_right = np.zeros_like(p_after)
    inflow_from_left[1:] = (q_right * p_before)[:-1]
    inflow_from_right[:-1] = (q_left * p_before)[1:]
    empty = p_after <= 0
    if np.any(empty & ((inflow_from_left > 0) | (inflow_from_right > 0))):
        raise LatticeConsistencyError("p_after vanishes at a site receiving nonzero flux")
    with np.errstate(divide="ignore", invalid="ignore"):
        qt_left = np.where(empty, 0.0, inflow_from_left / p_after)
        qt_right = np.where(empty, 0.0, inflow_from_right / p_after)
    return qt_right, qt_left


def run(state: LatticeState, steps: int) -> LatticeTrajectory:
    states = [state.p.copy()]
    p = state.p
    for _ in range(steps):
        p = step_forward(state, p)
        states.append(p)
    return LatticeTrajectory(states, state)


def _xlogy_ratio(a, b, step, what):
    """Elementwise a log(a/b) with 0 log 0 = 0."""
    out = np.zeros_like(a)
    pos = a > 0
    if np.any(pos & (b <= 0)):
        site = int(np.flatnonzero(pos & (b <= 0))[0])
        raise FloatingPointError(f"log of zero ratio ({what}) at step {step}, site {site}")
    out[pos] = a[pos] * np.log(a[pos] / b[pos])
    return out


def step_entropies(traj: LatticeTrajectory) -> np.ndarray:
    """Entropy produced by each forward step, evaluated with the reverse kernels."""
    q_r = traj.spec.q_right
    q_l = 1.0 - q_r
    out = np.empty(len(traj.states) - 1)
    for k in range(len(out)):
        p0, p1 = traj.states[k], traj.states[k + 1]
        qt_r, qt_l = reverse_probs(p0, p1, q_r)
        occupied = p1 > 0
        term = (_xlogy_ratio(qt_r, q_r, k, "q~_R/q_R") + _xlogy_ratio(qt_l, q_l, k, "q~_L/q_L"))
        out[k] = float(np.sum(p1[occupied] * term[occupied]))
    return out


def stot_discrete(traj: LatticeTrajectory) -> float:
    """Total entropy of the lattice trajectory (sum of per-step reverse-kernel KLs)."""
    return float(step_entropies(traj).sum())


def stationary_distribution(q_right, ell: float | None = None) -> np.ndarray:
    """Detailed-balance solution p(x+l)/p(x) = q_R(x) / q_L(x+l), normalized.

    ``ell`` is accepted for symmetry with the other lattice helpers; the
    recursion is independent of the spacing.
    """
    q_right = np.asarray(q_right, dtype=float)
    q_left = 1.0 - q_right
    if q_right[-1] > 0.5 or q_right[0] < 0.5:
        raise LatticeConfigError("jump probabilities are not confining at the lattice edges")
    with np.errstate(divide="ignore"):
        log_ratio = np.log(q_right[:-1]) - np.log(q_left[1:])
    if not np.all(np.isfinite(log_ratio)):
        raise LatticeConfigError("detailed balance has no normalizable solution")
    logp = np.concatenate([[0.0], np.cumsum(log_ratio)])
    p = np.exp(logp - logp.max())
    return p / p.sum()


def discretize(log_density: Callable, sites) -> np.ndarray:
    lp = np.asarray(log_density(np.asarray(sites, dtype=float)), dtype=float)
    p = np.exp(lp - lp.max())
    return p / p.sum()


MAX_SITES = 512
MAX_STEPS = 4096


@dataclass(frozen=True)
class EndpointResult:
    kl_endpoint: float
    bits_per_walker: float
    stot: float
    kl_terminal_to_eq: float
    log2_prob: float


def _propagate_columns(h, q_r, q_l):
    """Apply one nearest-neighbour transition to every column of a kernel matrix.

    ``h[j, i]`` is the probability of being at site j having started at site i.
    """
    out = np.zeros_like(h)
    out[1:] += q_r[:-1, None] * h[:-1]
    out[:-1] += q_l[1:, None] * h[1:]
    return out


def endpoint_kl_and_shannon(traj: LatticeTrajectory, p_eq=None, walkers: int | None = None,
                            max_sites: int = MAX_SITES, max_steps: int = MAX_STEPS) -> EndpointResult:
    """Endpoint KL D(h* || g) of the playback chain versus the native chain.

    The reverse chain starts from the terminal state of the trajectory, and both
    endpoint kernels are built by exact products of the per-step kernels. The
    starting weights are the terminal occupancy, which makes the log-sum
    inequality ``stot >= kl_endpoint`` exact; ``p_eq`` only enters the reported
    ``kl_terminal_to_eq`` diagnostic.
    """
    n_sites, n_steps = len(traj.spec.p), len(traj.states) - 1
    if n_sites > max_sites or n_steps > max_steps:
        raise LatticeConfigError(
            f"endpoint kernels need {n_sites} sites x {n_steps} steps; budget is "
            f"{max_sites} x {max_steps}")
    q_r = traj.spec.q_right
    q_l = 1.0 - q_r
    eye = np.eye(n_sites)
    h, g = eye.copy(), eye.copy()
    for k in range(n_steps - 1, -1, -1):
        qt_r, qt_l = reverse_probs(traj.states[k], traj.states[k + 1], q_r)
        h = _propagate_columns(h, qt_r, qt_l)
        g = _propagate_columns(g, q_r, q_l)
    w = traj.states[-1]
    cols = w > 0
    hh, gg = h[:, cols], g[:, cols]
    pos = hh > 0
    if np.any(pos & (gg <= 0)):
        raise FloatingPointError("playback kernel reaches a site the native kernel cannot")
    terms = np.zeros_like(hh)
    terms[pos] = hh[pos] * np.log(hh[pos] / gg[pos])
    kl = float(np.sum(w[cols] * terms.sum(0)))
    stot = stot_discrete(traj)
    if stot < kl - 1e-12 * max(1.0, abs(kl)):
        raise LatticeConsistencyError(f"log-sum inequality violated: stot={stot} < kl={kl}")
    if p_eq is None:
        kl_eq = float("nan")
    else:
        p_eq = np.asarray(p_eq, dtype=float)
        m = w > 0
        kl_eq = float(np.sum(w[m] * np.log(w[m] / p_eq[m])))
    m_walkers = traj.spec.walkers if walkers is None else walkers
    return EndpointResult(kl, kl / math.log(2), stot, kl_eq, -m_walkers * kl / math.log(2))


def ou_lattice(ell: float, horizon: float = 5.0, start_mean: float = 2.0, start_var: float = 0.25,
               sigma_sq: float = 1.0, stiffness: float = 1.0, walkers: int = 1000,
               n_std: float = 8.0, stationary_start: bool = False):
    """Lattice version of dX = -stiffness X dt + sigma dB started at N(mean, var).

    Returns ``(state, steps)`` with ``dt = ell^2 / sigma_sq`` and a domain
    spanning ``n_std`` standard deviations around the widest distribution.
    """
    dt = ell**2 / sigma_sq
    eq_var = sigma_sq / (2 * stiffness)
    sd = math.sqrt(max(start_var, eq_var))
    lo = min(start_mean, 0.0) - n_std * sd
    hi = max(start_mean, 0.0) + n_std * sd
    n = int(math.ceil((hi - lo) / ell)) + 1
    x_min = ell * math.floor(lo / ell)
    sites = x_min + ell * np.arange(n)
    q = jump_probs_from_drift(lambda x, s: -stiffness * x, ell, dt, sites, reflecting=True)
    if stationary_start:
        p = stationary_distribution(q, ell)
    else:
        p = discretize(lambda x: -0.5 * (x - start_mean) ** 2 / start_var, sites)
    steps = int(round(horizon / dt))
    return LatticeState(ell, dt, x_min, p, q, walkers), steps


def write_entropy_csv(path, traj: LatticeTrajectory, kl_running=None):
    """CSV columns: step, s, stot_cumulative, kl_endpoint_running."""
    cum = np.concatenate([[0.0], np.cumsum(step_entropies(traj))])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "s", "stot_cumulative", "kl_endpoint_running"])
        for k, c in enumerate(cum):
            kl = "" if kl_running is None else repr(float(kl_running[k]))
            w.writerow([k, repr(k * traj.spec.dt), repr(float(c)), kl])


def write_snapshots_csv(path, traj: LatticeTrajectory, every: int = 1):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + [repr(float(x)) for x in traj.spec.sites])
        for k in range(0, len(traj.states), every):
            w.writerow([k] + [repr(float(v)) for v in traj.states[k]])
