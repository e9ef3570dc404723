"""STAMP session encoder, full-softmax decoder and trainer; STMO as a last-item-only variant.

The encoder summarises a history ``x_0..x_{l-1}`` as

    m_s = mean(V[x_i])
    alpha_i = w0 . sigmoid(W1^T V[x_i] + W2^T V[x_last] + W3^T m_s + b_attn)
    A = sum_i alpha_i V[x_i] + m_s
    h_u = tanh(Wx^T A + bx) * tanh(Wa^T V[x_last] + ba)

and items are scored by ``V h_u``. Item embeddings are rows of ``V``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import numpy as np

from crerank import kernels
from crerank.corpus import ExampleSet
from crerank.numkit import DTYPE, make_rng, normal_init, sigmoid, softmax, softmax_xent, softmax_xent_backward
from crerank.training import TrainConfig, TrainLog, fit, split_validation

log = logging.getLogger(__name__)

ENCODER_TENSORS = ("W1", "W2", "W3", "w0", "b_attn", "Wx", "bx", "Wa", "ba")
STMO_TENSORS = ("V", "Wa")


@dataclass
class StampParams:
    V: np.ndarray
    W1: np.ndarray
    W2: np.ndarray
    W3: np.ndarray
    w0: np.ndarray
    b_attn: np.ndarray
    Wx: np.ndarray
    bx: np.ndarray
    Wa: np.ndarray
    ba: np.ndarray

    @property
    def d(self) -> int:
        return self.V.shape[1]

    @property
    def n_items(self) -> int:
        return self.V.shape[0]

    def tensors(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_tensors(cls, t: dict) -> "StampParams":
        p = cls(**{f.name: t[f.name] for f in fields(cls)})
        p.check()
        return p

    def check(self) -> None:
        d = self.d
        for name in ("W1", "W2", "W3", "Wx", "Wa"):
            if getattr(self, name).shape != (d, d):
                raise ValueError(f"{name} must be {d}x{d}")
        for name in ("w0", "b_attn", "bx", "ba"):
            if getattr(self, name).shape != (d,):
                raise ValueError(f"{name} must have length {d}")

    def astype(self, dtype) -> "StampParams":
        return StampParams(**{k: v.astype(dtype) for k, v in self.tensors().items()})


def init_stamp(n_items: int, d: int, seed, emb_std: float = 0.002, weight_std: float = 0.05,
               dtype=DTYPE) -> StampParams:
    """Gaussian init: embeddings N(0, emb_std), weights N(0, weight_std), zero biases."""
    if n_items < 1 or d < 1:
        raise ValueError("n_items and d must be positive")
    rng = make_rng(seed, "stamp.init") if not isinstance(seed, np.random.Generator) else seed
    zeros = np.zeros(d, dtype=dtype)
    return StampParams(
        V=normal_init((n_items, d), emb_std, rng, dtype),
        W1=normal_init((d, d), weight_std, rng, dtype),
        W2=normal_init((d, d), weight_std, rng, dtype),
        W3=normal_init((d, d), weight_std, rng, dtype),
        w0=normal_init((d,), weight_std, rng, dtype),
        b_attn=zeros.copy(),
        Wx=normal_init((d, d), weight_std, rng, dtype),
        bx=zeros.copy(),
        Wa=normal_init((d, d), weight_std, rng, dtype),
        ba=zeros.copy(),
    )


@dataclass
class EncoderCache:
    hist: np.ndarray
    mask: np.ndarray
    lens: np.ndarray
    last: np.ndarray
    E: np.ndarray
    vl: np.ndarray
    ms: np.ndarray
    s: np.ndarray
    alpha: np.ndarray
    A: np.ndarray
    hx: np.ndarray
    ha: np.ndarray
    normalized: bool = False


def encode_batch(p: StampParams, hist: np.ndarray, mask: np.ndarray, lens: np.ndarray,
                 normalized: bool = False):
    """Batched encoder over left-aligned padded histories. Returns ``(h_u, cache)``."""
    dt = p.V.dtype
    B = len(lens)
    if np.any(lens < 1):
        raise ValueError("every history must be non-empty")
    last = hist[np.arange(B), lens - 1]
    # sum in item-index order so the encoding is bit-identical under history permutations
    key = np.where(mask, hist, np.iinfo(np.int64).max)
    order = np.argsort(key, axis=1, kind="stable")
    hist = np.take_along_axis(hist, order, axis=1)
    mask = np.take_along_axis(mask, order, axis=1)
    E = p.V[hist]
    mf = mask.astype(dt)
    vl = p.V[last]
    ms = (E * mf[..., None]).sum(axis=1) / lens.astype(dt)[:, None]
    pre = E @ p.W1 + (vl @ p.W2 + ms @ p.W3 + p.b_attn)[:, None, :]
    s = sigmoid(pre)
    raw = s @ p.w0
    alpha = softmax(raw, mask) if normalized else raw * mf
    A = (alpha[..., None] * E).sum(axis=1) + ms
    hx = np.tanh(A @ p.Wx + p.bx)
    ha = np.tanh(vl @ p.Wa + p.ba)
    cache = EncoderCache(hist, mask, lens, last, E, vl, ms, s, alpha, A, hx, ha, normalized)
    return hx * ha, cache


def encode_backward(p: StampParams, c: EncoderCache, g_hu: np.ndarray, grads: dict) -> None:
    """Accumulate encoder gradients (including rows of ``V``) into ``grads``."""
    dt = p.V.dtype
    g_hx = g_hu * c.ha
    g_ha = g_hu * c.hx
    gzx = g_hx * (1 - c.hx * c.hx)
    grads["Wx"] += c.A.T @ gzx
    grads["bx"] += gzx.sum(axis=0)
    g_A = gzx @ p.Wx.T
    gza = g_ha * (1 - c.ha * c.ha)
    grads["Wa"] += c.vl.T @ gza
    grads["ba"] += gza.sum(axis=0)
    g_vl = gza @ p.Wa.T

    g_ms = g_A.copy()
    g_E = c.alpha[..., None] * g_A[:, None, :]
    g_alpha = (c.E * g_A[:, None, :]).sum(axis=-1)
    mf = c.mask.astype(dt)
    if c.normalized:
        g_raw = c.alpha * (g_alpha - (c.alpha * g_alpha).sum(axis=1, keepdims=True))
    else:
        g_raw = g_alpha * mf
    grads["w0"] += np.einsum("bl,bld->d", g_raw, c.s)
    g_pre = (g_raw[..., None] * p.w0) * c.s * (1 - c.s)
    d = p.d
    grads["W1"] += c.E.reshape(-1, d).T @ g_pre.reshape(-1, d)
    g_E += g_pre @ p.W1.T
    gp = g_pre.sum(axis=1)
    grads["W2"] += c.vl.T @ gp
    g_vl += gp @ p.W2.T
    grads["W3"] += c.ms.T @ gp
    g_ms += gp @ p.W3.T
    grads["b_attn"] += gp.sum(axis=0)
    g_E += mf[..., None] * (g_ms / c.lens.astype(dt)[:, None])[:, None, :]

    rows = np.concatenate([c.hist[c.mask], c.last])
    src = np.concatenate([g_E[c.mask], g_vl])
    kernels.scatter_add_rows(grads["V"], rows, src)


def stmo_batch(p: StampParams, hist, mask, lens):
    last = hist[np.arange(len(lens)), lens - 1]
    vl = p.V[last]
    hu = np.tanh(vl @ p.Wa)
    return hu, (last, vl, hu)


def stmo_backward(p: StampParams, cache, g_hu, grads: dict) -> None:
    last, vl, hu = cache
    gz = g_hu * (1 - hu * hu)
    grads["Wa"] += vl.T @ gz
    kernels.scatter_add_rows(grads["V"], last, gz @ p.Wa.T)


# single-history views of the batched kernels


@dataclass
class SessionEncoding:
    h_u: np.ndarray
    h_x: np.ndarray
    h_a: np.ndarray
    A: np.ndarray
    alpha: np.ndarray
    m_s: np.ndarray


def _one(history):
    hist = np.asarray(history, dtype=np.int64)
    if hist.ndim != 1 or len(hist) == 0:
        raise ValueError("history must be a non-empty sequence of item indices")
    return hist[None, :], np.ones((1, len(hist)), dtype=bool), np.array([len(hist)])


def attention(V_hist: np.ndarray, v_last: np.ndarray, v_avg: np.ndarray, p: StampParams,
              normalized: bool = False):
    """Attention summary of explicit history embeddings ``(l, d)``. Returns ``(A, alpha)``."""
    V_hist = np.asarray(V_hist)
    d = p.d
    if V_hist.ndim != 2 or V_hist.shape[1] != d or v_last.shape != (d,) or v_avg.shape != (d,):
        raise ValueError("attention shape mismatch")
    s = sigmoid(V_hist @ p.W1 + v_last @ p.W2 + v_avg @ p.W3 + p.b_attn)
    raw = s @ p.w0
    alpha = softmax(raw) if normalized else raw
    return alpha @ V_hist, alpha


def encode(p: StampParams, history, normalized: bool = False) -> SessionEncoding:
    hist, mask, lens = _one(history)
    if hist.max() >= p.n_items or hist.min() < 0:
        raise ValueError("history item outside the vocabulary")
    hu, c = encode_batch(p, hist, mask, lens, normalized)
    alpha = np.empty_like(c.alpha[0])
    alpha[np.argsort(hist[0], kind="stable")] = c.alpha[0]  # back to history order
    return SessionEncoding(hu[0], c.hx[0], c.ha[0], c.A[0], alpha, c.ms[0])


def encode_stmo(p: StampParams, history) -> np.ndarray:
    hist, mask, lens = _one(history)
    return stmo_batch(p, hist, mask, lens)[0][0]


def score_full(p: StampParams, h_u: np.ndarray) -> np.ndarray:
    """Logits over every item; apply softmax only for probabilities or the loss."""
    return h_u @ p.V.T


def rank_by_scores(scores: np.ndarray, depth: int | None = None) -> np.ndarray:
    """Indices by descending score, ties by ascending index, truncated to ``depth``."""
    n = len(scores)
    if depth is None or depth >= n:
        return np.lexsort((np.arange(n), -scores))
    thr = np.partition(scores, n - depth)[n - depth]
    cand = np.flatnonzero(scores >= thr)
    order = np.lexsort((cand, -scores[cand]))
    return cand[order][:depth]


@dataclass
class StampConfig:
    kind: str = "stamp"  # stamp | stmo
    d: int = 100
    attention_normalized: bool = False
    emb_std: float = 0.002
    weight_std: float = 0.05
    train: TrainConfig = field(default_factory=TrainConfig)


def batch_loss(p: StampParams, examples: ExampleSet, idx, kind: str = "stamp",
               normalized: bool = False, with_grad: bool = True):
    """Mean full-softmax cross-entropy over ``examples[idx]`` and its gradient."""
    hist, mask, lens = examples.padded(idx)
    targets = examples.targets[np.asarray(idx)].astype(np.int64)
    if kind == "stmo":
        hu, cache = stmo_batch(p, hist, mask, lens)
    else:
        hu, cache = encode_batch(p, hist, mask, lens, normalized)
    logits = hu @ p.V.T
    loss, probs = softmax_xent(logits, targets)
    if not with_grad:
        return loss, None
    g_logits = softmax_xent_backward(probs, targets).astype(p.V.dtype)
    names = STMO_TENSORS if kind == "stmo" else ("V",) + ENCODER_TENSORS
    grads = {k: np.zeros_like(getattr(p, k)) for k in names}
    grads["V"] += g_logits.T @ hu
    g_hu = g_logits @ p.V
    if kind == "stmo":
        stmo_backward(p, cache, g_hu, grads)
    else:
        encode_backward(p, cache, g_hu, grads)
    return loss, grads


class StampGenerator:
    """Trained STAMP/STMO model exposed as a candidate generator."""

    def __init__(self, params: StampParams, kind: str = "stamp", normalized: bool = False,
                 chunk: int = 512):
        if kind not in ("stamp", "stmo"):
            raise ValueError(f"unknown generator kind {kind!r}")
        self.params = params
        self.kind = kind
        self.normalized = normalized
        self.chunk = chunk

    @property
    def n_items(self) -> int:
        return self.params.n_items

    def encode_batch(self, hist, mask, lens):
        if self.kind == "stmo":
            return stmo_batch(self.params, hist, mask, lens)[0]
        return encode_batch(self.params, hist, mask, lens, self.normalized)[0]

    def scores(self, examples: ExampleSet, idx) -> np.ndarray:
        hist, mask, lens = examples.padded(idx)
        return self.encode_batch(hist, mask, lens) @ self.params.V.T

    def rank(self, history, depth: int) -> np.ndarray:
        hist, mask, lens = _one(history)
        s = (self.encode_batch(hist, mask, lens) @ self.params.V.T)[0]
        return rank_by_scores(s, depth)

    def rank_batch(self, examples: ExampleSet, depth: int) -> list[np.ndarray]:
        out = []
        for lo in range(0, len(examples), self.chunk):
            idx = np.arange(lo, min(lo + self.chunk, len(examples)))
            for row in self.scores(examples, idx):
                out.append(rank_by_scores(row, depth))
        return out


def recall_at(generator, examples: ExampleSet, n: int = 5) -> float:
    if len(examples) == 0:
        return 0.0
    lists = generator.rank_batch(examples, n)
    hits = sum(int(t in lst[:n]) for t, lst in zip(examples.targets.tolist(), lists))
    return hits / len(examples)


def train_generator(train: ExampleSet, n_items: int, cfg: StampConfig | None = None,
                    init: StampParams | None = None) -> tuple[StampParams, TrainLog]:
    """Full-softmax training with best-by-validation-Recall@5 selection."""
    cfg = cfg or StampConfig()
    tc = cfg.train
    if len(train) == 0:
        raise ValueError("training set is empty")
    params = init if init is not None else init_stamp(
        n_items, cfg.d, make_rng(tc.seed, "generator.init"), cfg.emb_std, cfg.weight_std)
    if tc.epochs == 0:
        return params, TrainLog()
    tr_idx, val_idx = split_validation(len(train), tc.val_fraction, tc.seed)
    fit_set, val_set = train.subset(tr_idx), train.subset(val_idx)
    names = list(STMO_TENSORS) if cfg.kind == "stmo" else ["V", *ENCODER_TENSORS]

    def loss_and_grad(t, idx):
        return batch_loss(StampParams(**t), fit_set, idx, cfg.kind, cfg.attention_normalized)

    def validate(t):
        gen = StampGenerator(StampParams(**t), cfg.kind, cfg.attention_normalized)
        return recall_at(gen, val_set, 5)

    best, tlog = fit(params.tensors(), loss_and_grad, len(fit_set), tc,
                     validate if len(val_set) else None, stream="generator.shuffle", trainable=names)
    return StampParams(**best), tlog
