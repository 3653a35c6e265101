"""Denoising entropy-matching objective, its score-matching twin, and the training loop."""
from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import net
from .process import DiffusionSpec, NoisedSample, diffusion_coeff, mu_sigma, perturb, qid_score

OBJECTIVES = ("EntropyMatching", "ScoreMatching")
WEIGHTINGS = ("Lambda1", "LambdaHo")
DIVERGENCE_LOSS = 1e6


class TrainingAbort(FloatingPointError):
    """Non-finite or divergent loss; carries where it happened."""

    def __init__(self, msg, datum_index=None, s=None, checkpoint=None):
        super().__init__(msg)
        self.datum_index, self.s, self.checkpoint = datum_index, s, checkpoint


@dataclass
class TrainConfig:
    objective: str = "EntropyMatching"
    weighting: str = "LambdaHo"
    epochs: int = 200
    batch_size: int = 256
    lr: float = 1e-3
    time_samples_per_datum: int = 10
    seed: int = 0
    n_features: int = 128
    fourier_scale: float = 1.0
    hidden: tuple = (512, 256)
    dtype: str = "float64"
    probe_grid: int = 100
    probe_per_point: int = 100
    probe_seed: int = 12345
    checkpoint_every: int = 0

    def __post_init__(self):
        aliases = {"EM": "EntropyMatching", "SM": "ScoreMatching"}
        self.objective = aliases.get(self.objective, self.objective)
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}")
        if self.epochs < 1 or self.time_samples_per_datum < 1 or self.batch_size < 1:
            raise ValueError("epochs, batch_size and time_samples_per_datum must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        self.hidden = tuple(self.hidden)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def weighting(s, spec: DiffusionSpec, kind: str):
    """Lambda(s): 1, or 2 Sigma(s)^2 / sigma(s)^2."""
    if kind == "Lambda1":
        return np.ones_like(np.asarray(s, dtype=float))
    _, sig_big = mu_sigma(s, spec)
    return 2.0 * sig_big**2 / diffusion_coeff(s, spec) ** 2


def em_residual(noised: NoisedSample, eps_out, spec: DiffusionSpec):
    """qid_score(y_s) + eps_out - kernel_score."""
    return qid_score(noised.y_s, spec) + eps_out - noised.kernel_score


def sm_residual(noised: NoisedSample, score_out):
    """score_out - kernel_score; equal to em_residual when score_out = qid_score + eps."""
    return score_out - noised.kernel_score


def draw_noised(y_d, spec: DiffusionSpec, k: int, rng: np.random.Generator) -> NoisedSample:
    """Each datum evolved to ``k`` uniform times; rows are datum-major."""
    y_d = np.atleast_2d(np.asarray(y_d, dtype=float))
    n, d = y_d.shape
    s = rng.uniform(spec.s_lo, spec.s_hi, size=n * k)
    noise = rng.standard_normal((n * k, d))
    return perturb(np.repeat(y_d, k, axis=0), s, noise, spec)


def integrand_weight(s, spec: DiffusionSpec, cfg: TrainConfig):
    """Lambda(s) sigma(s)^2 / 2, the prefactor of the squared residual."""
    return weighting(s, spec, cfg.weighting) * diffusion_coeff(s, spec) ** 2 / 2.0


def noised_loss(params, emb, noised: NoisedSample, spec: DiffusionSpec, cfg: TrainConfig,
                k: int = 1):
    """Loss and gradient for pre-drawn noised samples (deterministic)."""
    w = integrand_weight(noised.s, spec, cfg)
    base = noised.kernel_score
    if cfg.objective == "EntropyMatching":
        base = noised.kernel_score - qid_score(noised.y_s, spec)
    interval = spec.s_hi - spec.s_lo

    def loss_fn(out):
        r = out.astype(np.float64) - base
        per = interval * w * np.sum(r * r, axis=1)
        return per, (2.0 * interval) * w[:, None] * r

    try:
        return net.grad(params, emb, (noised.y_s, noised.s), loss_fn, spec.horizon)
    except FloatingPointError as exc:
        idx = int(str(exc).rsplit(" ", 1)[-1]) if "sample" in str(exc) else 0
        s_bad = float(np.asarray(noised.s)[idx])
        raise TrainingAbort(f"non-finite loss at datum {idx // k}, s={s_bad:.6g}",
                            datum_index=idx // k, s=s_bad) from exc


def batch_loss(params, emb, y_d, spec: DiffusionSpec, cfg: TrainConfig, rng: np.random.Generator):
    """Denoising objective over ``y_d``: time-integral of the weighted squared residual.

    Times are drawn ``time_samples_per_datum`` per datum from U(s_lo, s_hi); the
    mean integrand is scaled by the interval length so that, with Lambda = 1
    and a zero network, the expectation is the entropy-matching upper bound.
    """
    if len(y_d) == 0:
        raise ValueError("empty batch")
    k = cfg.time_samples_per_datum
    noised = draw_noised(y_d, spec, k, rng)
    return noised_loss(params, emb, noised, spec, cfg, k)


def eps_model(params, emb, spec: DiffusionSpec, objective: str = "EntropyMatching"):
    """Callable eps(x, s); a score-matching network is shifted by the QID score."""
    model = net.EpsModel(params, emb, spec.horizon)
    if objective in ("ScoreMatching", "SM"):
        return lambda x, s: model(x, s) - qid_score(np.asarray(x, dtype=float), spec)
    return model


@dataclass
class FitResult:
    params: net.MlpParams
    emb: net.FourierEmbedding
    opt_state: net.AdamState
    log: list = field(default_factory=list)
    rng: np.random.Generator | None = None

    def model(self, spec: DiffusionSpec, objective: str = "EntropyMatching"):
        return eps_model(self.params, self.emb, spec, objective)


def init_model(dim: int, cfg: TrainConfig, rng: np.random.Generator):
    emb = net.FourierEmbedding.init(dim, cfg.n_features, cfg.fourier_scale, rng)
    params = net.init_mlp(emb.out_dim + 1, dim, cfg.hidden, rng, dtype=np.dtype(cfg.dtype))
    return emb, params


def neural_entropy_probe(p_d, spec: DiffusionSpec, cfg: TrainConfig):
    """Fixed probe callable ``model -> S_NN(T)`` with common random numbers across calls."""
    from .thermo import default_grid, entropy_curve

    grid = default_grid(spec, cfg.probe_grid)

    def probe(model):
        curve = entropy_curve("Neural", p_d, spec, model, grid=grid, n=cfg.probe_per_point,
                              rng=np.random.default_rng(cfg.probe_seed))
        return float(curve.cumulative[-1])

    return probe


def fit(data, spec: DiffusionSpec, cfg: TrainConfig, p_d=None, callback=None,
        checkpoint_path=None) -> FitResult:
    """Shuffled minibatch Adam on the denoising objective.

    ``p_d`` (a mixture or an array of held-out samples) enables the per-epoch
    neural-entropy probe. ``callback(epoch, result)`` runs after each epoch.
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if not np.all(np.isfinite(data)):
        raise ValueError("training data must be finite")
    rng = np.random.default_rng(cfg.seed)
    emb, params = init_model(data.shape[1], cfg, rng)
    opt = net.AdamState.zeros_like(params)
    result = FitResult(params, emb, opt, [], rng)
    probe = neural_entropy_probe(p_d, spec, cfg) if p_d is not None else None
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(data))
        total, count = 0.0, 0
        for start in range(0, len(data), cfg.batch_size):
            batch = data[order[start:start + cfg.batch_size]]
            loss, grads = batch_loss(params, emb, batch, spec, cfg, rng)
            if loss > DIVERGENCE_LOSS:
                path = checkpoint_path or "diverged_checkpoint.npz"
                net.save_checkpoint(path, params, emb, opt, rng, epoch)
                raise TrainingAbort(f"loss {loss:.3g} exceeds {DIVERGENCE_LOSS:g} at epoch {epoch}",
                                    checkpoint=path)
            params, opt = net.adam_step(params, grads, opt, cfg.lr)
            total += loss * len(batch)
            count += len(batch)
        result.params, result.opt_state = params, opt
        s_nn = probe(result.model(spec, cfg.objective)) if probe else float("nan")
        result.log.append({"epoch": epoch, "loss": total / count, "S_NN_T": s_nn,
                           "wallclock": time.perf_counter() - t0})
        if checkpoint_path and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            net.save_checkpoint(checkpoint_path, params, emb, opt, rng, epoch,
                                {"train_config": cfg.to_dict(), "spec": spec.to_dict()})
        if callback is not None:
            callback(epoch, result)
    return result


def write_training_log(path, log, wallclock: bool = True):
    """CSV of (epoch, loss, S_NN_T[, wallclock]).

    Leave out the wallclock column when the file must be byte-reproducible.
    """
    cols = ["epoch", "loss", "S_NN_T"] + (["wallclock"] if wallclock else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in log:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in cols[1:]])


def smoothed(values, window: int = 10):
    """Trailing moving average (shorter at the start)."""
    v = np.asarray(values, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def block_trend(curves, window: int = 10, k: float = 3.0):
    """Check that seed-averaged block means never drop by more than ``k`` standard errors.

    ``curves`` has one row per seed and one column per epoch. Each row is cut
    into consecutive blocks of ``window`` epochs and averaged per block. The
    standard error of a block-to-block step is pooled over all steps from the
    spread across seeds. Returns ``(ok, block_means, worst_z)`` where
    ``worst_z`` is the most negative step in units of that error.
    """
    c = np.atleast_2d(np.asarray(curves, dtype=float))
    n_seeds, n_epochs = c.shape
    n_blocks = n_epochs // window
    if n_seeds < 2 or n_blocks < 2:
        raise ValueError("need at least two seeds and two blocks")
    blocks = c[:, :n_blocks * window].reshape(n_seeds, n_blocks, window).mean(2)
    steps = np.diff(blocks, axis=1)
    se = math.sqrt(float(np.mean(steps.var(0, ddof=1))) / n_seeds)
    z = steps.mean(0) / se if se > 0 else np.where(steps.mean(0) < 0, -np.inf, 0.0)
    worst = float(z.min())
    return bool(worst >= -k), blocks.mean(0), worst


def gradient_norm(grads: net.MlpParams) -> float:
    return math.sqrt(sum(float(np.sum(a.astype(np.float64) ** 2)) for a in grads.arrays()))
