"""Dense numerical building blocks: init, tanh layers, softmax cross-entropy, Adam, gradient checks.

Weights are stored as ``(d_in, d_out)`` and applied as ``x @ W`` which is the
row-vector form of ``W^T x``. Every function works on a single vector or on a
leading batch axis.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

DTYPE = np.float32


def make_rng(seed: int, stream: str = "") -> np.random.Generator:
    """Independent generator for a named substream of ``seed``."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.default_rng([int(seed), zlib.crc32(stream.encode("utf-8"))])


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return make_rng(int(seed))


def xavier_init(rows: int, cols: int, seed, dtype=DTYPE) -> np.ndarray:
    """Glorot-uniform matrix with bound sqrt(6 / (rows + cols))."""
    if rows < 1 or cols < 1:
        raise ValueError(f"xavier_init needs positive dimensions, got {rows}x{cols}")
    bound = np.sqrt(6.0 / (rows + cols))
    return _as_rng(seed).uniform(-bound, bound, size=(rows, cols)).astype(dtype)


def normal_init(shape, std: float, seed, dtype=DTYPE) -> np.ndarray:
    return (_as_rng(seed).standard_normal(size=shape) * std).astype(dtype)


def affine_tanh(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    """tanh(x @ W + b). Returns the output and a cache for :func:`affine_tanh_backward`."""
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ValueError(f"affine_tanh shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    y = np.tanh(x @ W + b)
    return y, (x, W, y)


def affine_tanh_backward(grad_y: np.ndarray, cache):
    """Returns ``(grad_x, grad_W, grad_b)``; batch axes are summed for the parameters."""
    x, W, y = cache
    if grad_y.shape != y.shape:
        raise ValueError("affine_tanh_backward: gradient shape mismatch")
    gz = grad_y * (1 - y * y)
    grad_x = gz @ W.T
    x2 = x.reshape(-1, x.shape[-1])
    gz2 = gz.reshape(-1, gz.shape[-1])
    return grad_x, x2.T @ gz2, gz2.sum(axis=0)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1 / (1 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1 + ez)
    return out


def log_softmax(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Max-shifted log-softmax over the last axis; masked-out entries are -inf."""
    z = logits if mask is None else np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    return np.exp(log_softmax(logits, mask))


def softmax_xent(logits: np.ndarray, target, mask: np.ndarray | None = None):
    """Cross-entropy of softmax(logits) against ``target``.

    With 1-D logits returns ``(loss, probs)`` for a single example. With 2-D
    logits ``target`` is a vector and the loss is the batch mean.
    """
    logits = np.asarray(logits)
    n = logits.shape[-1]
    if n < 1:
        raise ValueError("softmax_xent needs at least one logit")
    tgt = np.asarray(target)
    if np.any(tgt < 0) or np.any(tgt >= n):
        raise ValueError(f"target {target} out of range for {n} logits")
    logp = log_softmax(logits, mask)
    if logits.ndim == 1:
        loss = -logp[int(tgt)]
    else:
        loss = -np.mean(logp[np.arange(len(tgt)), tgt])
    if not np.isfinite(loss):
        raise ValueError("target falls on a masked-out position")
    return float(loss), np.exp(logp)


def softmax_xent_backward(probs: np.ndarray, target) -> np.ndarray:
    """Gradient of the (mean) loss with respect to the logits: probs - onehot."""
    g = probs.copy()
    if probs.ndim == 1:
        g[int(target)] -= 1
        return g
    tgt = np.asarray(target)
    g[np.arange(len(tgt)), tgt] -= 1
    return g / len(tgt)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def like(cls, param: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param))


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float = 0.001,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place on ``param`` and ``state``."""
    if param.shape != grad.shape or state.m.shape != param.shape or state.v.shape != param.shape:
        raise ValueError(f"adam_step shape mismatch: param{param.shape} grad{grad.shape}")
    state.step += 1
    t = state.step
    state.m *= beta1
    state.m += (1 - beta1) * grad
    state.v *= beta2
    state.v += (1 - beta2) * (grad * grad)
    if lr == 0:
        return
    m_hat = state.m / (1 - beta1 ** t)
    v_hat = state.v / (1 - beta2 ** t)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)


@dataclass
class Adam:
    """Adam over a dict of named parameters."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 0.0
    states: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        if self.clip > 0:
            norm = np.sqrt(sum(float(np.sum(grads[k].astype(np.float64) ** 2)) for k in sorted(grads)))
            if norm > self.clip:
                scale = self.clip / norm
                grads = {k: g * g.dtype.type(scale) for k, g in grads.items()}
        for name in sorted(grads):
            if name not in self.states:
                self.states[name] = AdamState.like(params[name])
            adam_step(params[name], grads[name], self.states[name],
                      self.lr, self.beta1, self.beta2, self.eps)


def flatten(arrays: dict) -> np.ndarray:
    return np.concatenate([np.asarray(arrays[k], dtype=np.float64).ravel() for k in sorted(arrays)])


def unflatten(flat: np.ndarray, like: dict) -> dict:
    out, pos = {}, 0
    for k in sorted(like):
        n = like[k].size
        out[k] = flat[pos:pos + n].reshape(like[k].shape).copy()
        pos += n
    return out


def grad_check(f: Callable[[np.ndarray], tuple], params: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between ``f``'s analytic gradient and central differences.

    ``f`` maps a flat float64 vector to ``(value, gradient)``.
    """
    p = np.array(params, dtype=np.float64)
    _, analytic = f(p.copy())
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if analytic.shape != p.shape:
        raise ValueError("gradient shape does not match parameter vector")
    worst = 0.0
    for i in range(p.size):
        old = p[i]
        p[i] = old + eps
        fp, _ = f(p.copy())
        p[i] = old - eps
        fm, _ = f(p.copy())
        p[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite objective at coordinate {i}")
        numeric = (fp - fm) / (2 * eps)
        denom = max(abs(analytic[i]), abs(numeric), 1e-12)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
