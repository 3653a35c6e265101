"""Fourier-feature MLP for eps_theta(x, s) with hand-written backprop and Adam.

The network sees ``[cos(2 pi B x), sin(2 pi B x), s / T]`` where ``B`` is a
frozen random frequency matrix. The output layer starts at exactly zero, so a
fresh model stores no neural entropy.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

_INV_SQRT_2PI = 1.0 / math.sqrt(2 * math.pi)


@dataclass
class FourierEmbedding:
    freq_matrix: np.ndarray
    scale: float = 1.0

    @classmethod
    def init(cls, dim: int, n_features: int = 128, scale: float = 1.0,
             rng: np.random.Generator | None = None) -> "FourierEmbedding":
        rng = np.random.default_rng() if rng is None else rng
        return cls(scale * rng.standard_normal((n_features, dim)), scale)

    @property
    def n_features(self) -> int:
        return self.freq_matrix.shape[0]

    @property
    def out_dim(self) -> int:
        return 2 * self.n_features

    def __call__(self, x, dtype=np.float64):
        dtype = np.dtype(dtype)
        x = np.atleast_2d(x).astype(dtype, copy=False)
        z = x @ self.freq_matrix.T.astype(dtype, copy=False)
        z *= dtype.type(2 * np.pi)
        out = np.empty((z.shape[0], 2 * z.shape[1]), dtype=dtype)
        np.cos(z, out=out[:, : z.shape[1]], casting="same_kind")
        np.sin(z, out=out[:, z.shape[1]:], casting="same_kind")
        return out


@dataclass
class MlpParams:
    weights: list
    biases: list
    activation: str = "gelu"

    @property
    def dtype(self):
        return self.weights[0].dtype

    @property
    def widths(self) -> list:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def arrays(self) -> list:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    @classmethod
    def from_arrays(cls, arrays, activation="gelu") -> "MlpParams":
        return cls(list(arrays[0::2]), list(arrays[1::2]), activation)

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         self.activation)

    def astype(self, dtype) -> "MlpParams":
        return MlpParams([w.astype(dtype) for w in self.weights],
                         [b.astype(dtype) for b in self.biases], self.activation)

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())


def init_mlp(in_dim: int, out_dim: int, hidden=(512, 256), rng: np.random.Generator | None = None,
             activation: str = "gelu", dtype=np.float64, zero_output: bool = True) -> MlpParams:
    """He-style init for hidden layers; the output layer is all zeros by default."""
    rng = np.random.default_rng() if rng is None else rng
    widths = [in_dim, *hidden, out_dim]
    weights, biases = [], []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == len(widths) - 2
        if last and zero_output:
            w = np.zeros((a, b))
        else:
            w = rng.standard_normal((a, b)) * math.sqrt(2.0 / a)
        weights.append(w.astype(dtype))
        biases.append(np.zeros(b, dtype=dtype))
    return MlpParams(weights, biases, activation)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


_BLOCK_ROWS = 128  # keeps the elementwise passes in cache


def _gelu_rows(z, val, der):
    """tanh-form GELU and its derivative for a row block, written into ``val``/``der``."""
    f = z.dtype.type
    z2 = z * z
    th = z2 * f(_GELU_C * _GELU_A)
    th += f(_GELU_C)
    th *= z
    np.tanh(th, out=th)
    np.add(th, f(1.0), out=val)
    val *= z
    val *= f(0.5)
    if der is None:
        return
    z2 *= f(3 * _GELU_A)
    z2 += f(1.0)
    np.multiply(th, th, out=der)
    np.subtract(f(1.0), der, out=der)
    der *= z2
    der *= z
    der *= f(0.5 * _GELU_C)
    th += f(1.0)
    th *= f(0.5)
    der += th


def _act_and_grad(z, kind, need_grad=True):
    """Activation value and (optionally) its derivative, computed in one pass.

    ``gelu`` is the tanh form of the Gaussian-error-linear unit (smooth, cheap);
    ``gelu_exact`` uses the normal CDF directly.
    """
    if kind == "gelu":
        val = np.empty_like(z)
        der = np.empty_like(z) if need_grad else None
        for a in range(0, z.shape[0], _BLOCK_ROWS):
            b = a + _BLOCK_ROWS
            _gelu_rows(z[a:b], val[a:b], None if der is None else der[a:b])
        return val, der
    if kind == "gelu_exact":
        cdf = ndtr(z)
        der = cdf + z * (_INV_SQRT_2PI * np.exp(-0.5 * z * z)) if need_grad else None
        return z * cdf, der
    if kind == "identity":
        return z, (np.ones_like(z) if need_grad else None)
    raise ValueError(f"unknown activation {kind!r}")


def network_input(emb: FourierEmbedding | None, x, s, horizon: float = 1.0, dtype=np.float64):
    x = np.atleast_2d(np.asarray(x))
    n = x.shape[0]
    s_col = np.broadcast_to(np.asarray(s, dtype=dtype).reshape(-1, 1) / horizon, (n, 1))
    feats = x.astype(dtype, copy=False) if emb is None else emb(x, dtype)
    return np.concatenate([feats, s_col], axis=1)


def _forward_cache(params: MlpParams, inp, need_grad=True):
    """Output plus what backward needs: layer inputs and activation derivatives."""
    acts, pre = [inp], []
    h = inp
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w
        z += b
        if i == last:
            h = z
        else:
            h, der = _act_and_grad(z, params.activation, need_grad)
            if need_grad:
                pre.append(der)
                acts.append(h)
    return h, acts, pre


def forward(params: MlpParams, emb: FourierEmbedding | None, x, s, horizon: float = 1.0):
    """eps_theta(x, s) for a batch ``x`` (n, D) and times ``s`` (scalar or (n,))."""
    x = np.asarray(x)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(s))):
        raise FloatingPointError("non-finite network input")
    single = x.ndim == 1
    inp = network_input(emb, x, s, horizon, params.dtype)
    out = _forward_cache(params, inp, need_grad=False)[0]
    return out[0] if single else out


def backward(params: MlpParams, acts, act_grads, d_out):
    """Backpropagate ``d_out`` (n, out) through a cached forward pass."""
    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.weights)
    delta = d_out
    for i in range(len(params.weights) - 1, -1, -1):
        grads_w[i] = acts[i].T @ delta
        grads_b[i] = delta.sum(0)
        if i > 0:
            delta = (delta @ params.weights[i].T) * act_grads[i - 1]
    return MlpParams(grads_w, grads_b, params.activation)


def grad(params: MlpParams, emb: FourierEmbedding | None, batch, loss_fn, horizon: float = 1.0):
    """Mean loss over the batch and its gradient with respect to ``params``.

    ``batch`` is ``(x, s)``; ``loss_fn(out)`` returns per-sample losses ``(n,)``
    and their gradients with respect to each sample's output ``(n, out)``.
    """
    x, s = batch
    inp = network_input(emb, x, s, horizon, params.dtype)
    out, acts, pre = _forward_cache(params, inp)
    per_sample, d_per_sample = loss_fn(out)
    per_sample = np.asarray(per_sample)
    bad = ~np.isfinite(per_sample)
    if bad.any():
        raise FloatingPointError(f"non-finite loss at sample {int(np.flatnonzero(bad)[0])}")
    n = per_sample.shape[0]
    loss = math.fsum(per_sample.astype(np.float64).tolist()) / n
    d_out = (np.asarray(d_per_sample) / n).astype(params.dtype, copy=False)
    return loss, backward(params, acts, pre, d_out)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "AdamState":
        return cls([np.zeros_like(a) for a in params.arrays()],
                   [np.zeros_like(a) for a in params.arrays()], 0)


def adam_step(params: MlpParams, grads: MlpParams, state: AdamState, lr: float = 1e-3,
              betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update; returns new (params, state)."""
    b1, b2 = betas
    t = state.t + 1
    new_arrays, new_m, new_v = [], [], []
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        step = (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
        new_arrays.append(p - step)
        new_m.append(m)
        new_v.append(v)
    return MlpParams.from_arrays(new_arrays, params.activation), AdamState(new_m, new_v, t)


@dataclass
class EpsModel:
    """Callable ``eps(x, s)`` backed by an MLP; what the samplers and estimators consume."""
    params: MlpParams
    emb: FourierEmbedding | None
    horizon: float = 1.0

    def __call__(self, x, s):
        x = np.asarray(x)
        out = forward(self.params, self.emb, x, s, self.horizon)
        return np.asarray(out, dtype=np.float64)


def lipschitz_estimate(model, x, s, rng: np.random.Generator, n_probes: int = 100,
                       radius: float = 1e-2) -> float:
    """Largest observed ||eps(x) - eps(y)|| / ||x - y|| over random nearby pairs."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    idx = rng.integers(0, len(x), n_probes)
    xa = x[idx]
    dx = radius * rng.standard_normal(xa.shape)
    fa, fb = model(xa, s), model(xa + dx, s)
    ratio = np.linalg.norm(fa - fb, axis=1) / np.linalg.norm(dx, axis=1)
    return float(ratio.max())


def save_checkpoint(path, params: MlpParams, emb: FourierEmbedding | None, opt_state=None,
                    rng: np.random.Generator | None = None, epoch: int = 0, meta=None):
    """Write a self-describing ``.npz`` container."""
    arrays = {f"param_{i}": a for i, a in enumerate(params.arrays())}
    if emb is not None:
        arrays["fourier"] = emb.freq_matrix
    if opt_state is not None:
        arrays.update({f"adam_m_{i}": a for i, a in enumerate(opt_state.m)})
        arrays.update({f"adam_v_{i}": a for i, a in enumerate(opt_state.v)})
    header = {
        "widths": params.widths, "activation": params.activation,
        "n_arrays": len(params.arrays()), "fourier_scale": None if emb is None else emb.scale,
        "adam_t": None if opt_state is None else opt_state.t,
        "rng_state": None if rng is None else rng.bit_generator.state,
        "epoch": epoch, "meta": meta or {},
    }
    arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of ``save_checkpoint``; returns a dict of the restored objects."""
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        n = header["n_arrays"]
        params = MlpParams.from_arrays([z[f"param_{i}"] for i in range(n)], header["activation"])
        emb = FourierEmbedding(z["fourier"], header["fourier_scale"]) if "fourier" in z else None
        opt = None
        if header["adam_t"] is not None:
            opt = AdamState([z[f"adam_m_{i}"] for i in range(n)],
                            [z[f"adam_v_{i}"] for i in range(n)], header["adam_t"])
    rng = None
    if header["rng_state"] is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = header["rng_state"]
    return {"params": params, "emb": emb, "opt_state": opt, "rng": rng,
            "epoch": header["epoch"], "meta": header["meta"]}
