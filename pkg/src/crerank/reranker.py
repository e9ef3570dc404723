"""Candidate Rank Embedding re-ranker and the two-stage pipeline.

For a session encoding ``h_u`` and the generator's top-k list ``C``::

    h_e = tanh(We1^T tanh(We2^T h_u + be2) + be1)
    h_r = tanh(Wr1^T tanh(Wr2^T h_u + br2) + br1)
    score_i = V[C_i] . h_e + W_CR[i] . h_r

The rank term uses one learned row of ``W_CR`` per candidate position and is
shared by every session. The final list is the re-ranked ``C`` followed by
the generator's untouched tail.
"""

from __future__ import annotations

import hashlib
import logging
import struct
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from crerank import kernels
from crerank.corpus import ExampleSet
from crerank.errors import ConsistencyError, EmptyTrainingSetError, FormatError
from crerank.numkit import (DTYPE, affine_tanh, affine_tanh_backward, make_rng, softmax,
                            softmax_xent, softmax_xent_backward, xavier_init)
from crerank.stampgen import (ENCODER_TENSORS, StampParams, _one, encode_batch, encode_backward,
                              init_stamp)
from crerank.training import TrainConfig, TrainLog, fit, split_validation

log = logging.getLogger(__name__)

HEAD_TENSORS = ("We2", "be2", "We1", "be1", "Wr2", "br2", "Wr1", "br1", "W_CR")


@dataclass
class RerankerConfig:
    k: int = 100
    d: int = 100
    d_cre: int = 0  # 0 means d
    cre_enabled: bool = True
    cre_stride: int = 1
    attention_normalized: bool = False
    emb_std: float = 0.002
    weight_std: float = 0.05
    select_on: str = "composed"  # composed | candidates
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def cre_dim(self) -> int:
        return self.d_cre or self.d

    @property
    def cre_rows(self) -> int:
        return -(-self.k // self.cre_stride)

    def validate(self) -> None:
        if self.k < 1 or self.d < 1 or self.cre_dim < 1 or self.cre_stride < 1:
            raise ValueError("k, d, d_cre and cre_stride must be positive")
        if self.select_on not in ("composed", "candidates"):
            raise ValueError(f"select_on must be 'composed' or 'candidates', got {self.select_on!r}")


@dataclass
class RerankerParams:
    encoder: StampParams
    We2: np.ndarray
    be2: np.ndarray
    We1: np.ndarray
    be1: np.ndarray
    Wr2: np.ndarray
    br2: np.ndarray
    Wr1: np.ndarray
    br1: np.ndarray
    W_CR: np.ndarray
    cre_stride: int = 1

    @property
    def V(self) -> np.ndarray:
        return self.encoder.V

    @property
    def k(self) -> int:
        return self.W_CR.shape[0] * self.cre_stride

    def cre_rows(self, n: int) -> np.ndarray:
        return np.arange(n) // self.cre_stride

    def tensors(self) -> dict:
        out = self.encoder.tensors()
        for name in HEAD_TENSORS:
            out[name] = getattr(self, name)
        return out

    @classmethod
    def from_tensors(cls, t: dict, cre_stride: int = 1) -> "RerankerParams":
        enc = StampParams.from_tensors({k: t[k] for k in ("V", *ENCODER_TENSORS)})
        p = cls(enc, *(t[name] for name in HEAD_TENSORS), cre_stride=cre_stride)
        p.check()
        return p

    def check(self) -> None:
        d = self.encoder.d
        dc = self.Wr1.shape[1]
        shapes = {"We2": (d, d), "be2": (d,), "We1": (d, d), "be1": (d,), "Wr2": (d, d),
                  "br2": (d,), "Wr1": (d, dc), "br1": (dc,)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {getattr(self, name).shape}")
        if self.W_CR.ndim != 2 or self.W_CR.shape[1] != dc or self.W_CR.shape[0] < 1:
            raise ValueError(f"W_CR must be (rows, {dc})")


def init_reranker(n_items: int, cfg: RerankerConfig, seed: int = 0, dtype=DTYPE) -> RerankerParams:
    cfg.validate()
    rng = make_rng(seed, "reranker.init")
    d, dc = cfg.d, cfg.cre_dim
    enc = init_stamp(n_items, d, rng, cfg.emb_std, cfg.weight_std, dtype)
    return RerankerParams(
        encoder=enc,
        We2=xavier_init(d, d, rng, dtype), be2=np.zeros(d, dtype),
        We1=xavier_init(d, d, rng, dtype), be1=np.zeros(d, dtype),
        Wr2=xavier_init(d, d, rng, dtype), br2=np.zeros(d, dtype),
        Wr1=xavier_init(d, dc, rng, dtype), br1=np.zeros(dc, dtype),
        W_CR=xavier_init(cfg.cre_rows, dc, rng, dtype),
        cre_stride=cfg.cre_stride,
    )


def _heads(p: RerankerParams, hu: np.ndarray):
    he2, c_e2 = affine_tanh(hu, p.We2, p.be2)
    he, c_e1 = affine_tanh(he2, p.We1, p.be1)
    hr2, c_r2 = affine_tanh(hu, p.Wr2, p.br2)
    hr, c_r1 = affine_tanh(hr2, p.Wr1, p.br1)
    return he, hr, (c_e2, c_e1, c_r2, c_r1)


def batch_scores(p: RerankerParams, hist, mask, lens, cand: np.ndarray, cre_enabled: bool = True,
                 normalized: bool = False):
    """Raw scores ``(B, k)`` for padded candidates (``-1`` marks an empty slot)."""
    k = cand.shape[1]
    if k > p.k:
        raise ValueError(f"{k} candidates exceed the {p.k} rank embeddings")
    hu, enc_cache = encode_batch(p.encoder, hist, mask, lens, normalized)
    he, hr, head_cache = _heads(p, hu)
    cmask = cand >= 0
    cidx = np.where(cmask, cand, 0)
    Vc = p.V[cidx]
    scores = kernels.gather_dot(p.V, cidx, he)
    rows = p.cre_rows(k)
    if cre_enabled:
        scores = scores + kernels.gather_dot(p.W_CR, np.broadcast_to(rows, cidx.shape), hr)
    cache = (hu, enc_cache, he, hr, head_cache, cmask, cidx, Vc, rows)
    return scores, cmask, cache


def batch_loss(p: RerankerParams, hist, mask, lens, cand, target_pos, cre_enabled: bool = True,
               normalized: bool = False, with_grad: bool = True):
    """Mean cross-entropy of the target's position among the candidates, and its gradient."""
    scores, cmask, cache = batch_scores(p, hist, mask, lens, cand, cre_enabled, normalized)
    loss, probs = softmax_xent(scores, target_pos, cmask)
    if not with_grad:
        return loss, None
    hu, enc_cache, he, hr, (c_e2, c_e1, c_r2, c_r1), cmask, cidx, Vc, rows = cache
    gs = softmax_xent_backward(probs, target_pos).astype(p.V.dtype)
    grads = {k: np.zeros_like(v) for k, v in p.tensors().items()}

    g_he = np.einsum("bk,bkd->bd", gs, Vc)
    kernels.scatter_add_rows(grads["V"], cidx[cmask], (gs[..., None] * he[:, None, :])[cmask])
    g_he2, grads["We1"], grads["be1"] = affine_tanh_backward(g_he, c_e1)
    g_hu_e, grads["We2"], grads["be2"] = affine_tanh_backward(g_he2, c_e2)
    g_hu = g_hu_e
    if cre_enabled:
        g_hr = gs @ p.W_CR[rows]
        g_rows = gs.T @ hr
        if p.cre_stride == 1:
            grads["W_CR"][:len(rows)] += g_rows
        else:
            kernels.scatter_add_rows(grads["W_CR"], rows, g_rows)
        g_hr2, grads["Wr1"], grads["br1"] = affine_tanh_backward(g_hr, c_r1)
        g_hu_r, grads["Wr2"], grads["br2"] = affine_tanh_backward(g_hr2, c_r2)
        g_hu = g_hu + g_hu_r
    encode_backward(p.encoder, enc_cache, g_hu, grads)
    return loss, grads


def rerank_scores(p: RerankerParams, history, C, cre_enabled: bool = True,
                  normalized: bool = False) -> np.ndarray:
    """Probability over the candidates ``C`` for one session."""
    C = np.asarray(C, dtype=np.int64)
    if C.ndim != 1 or len(C) == 0:
        raise ValueError("candidate list must be non-empty")
    if len(C) > p.k:
        raise ValueError(f"{len(C)} candidates exceed k={p.k}")
    if len(np.unique(C)) != len(C):
        raise ValueError("candidate list contains duplicates")
    hist, mask, lens = _one(history)
    scores, cmask, _ = batch_scores(p, hist, mask, lens, C[None, :], cre_enabled, normalized)
    return softmax(scores[0])


def order_by_scores(scores: np.ndarray) -> np.ndarray:
    """Positions by descending score; equal scores keep the generator's order."""
    return np.lexsort((np.arange(len(scores)), -scores))


def compose_final(L_YG, reranked_C) -> np.ndarray:
    """Re-ranked head followed by the generator's untouched tail."""
    L_YG = np.asarray(L_YG)
    reranked_C = np.asarray(reranked_C)
    k = len(reranked_C)
    head = L_YG[:k]
    if len(head) != k or not np.array_equal(np.sort(head), np.sort(reranked_C)) \
            or len(np.unique(reranked_C)) != k:
        raise ConsistencyError("re-ranked candidates are not a permutation of the generator's top-k")
    return np.concatenate([reranked_C, L_YG[k:]]).astype(L_YG.dtype, copy=False)


def candidate_matrix(lists, k: int) -> np.ndarray:
    """Stack the first ``k`` items of each list into ``(n, k)`` with ``-1`` padding."""
    out = np.full((len(lists), k), -1, dtype=np.int32)
    for i, lst in enumerate(lists):
        head = lst[:k]
        out[i, :len(head)] = head
    return out


class TwoStagePipeline:
    """Generator followed by the re-ranker over its top-k."""

    def __init__(self, generator, params: RerankerParams, k: int | None = None,
                 cre_enabled: bool = True, normalized: bool = False, chunk: int = 512):
        self.generator = generator
        self.params = params
        self.k = k if k is not None else params.k
        if self.k > params.k:
            raise ValueError("pipeline k exceeds the re-ranker's rank embeddings")
        self.cre_enabled = cre_enabled
        self.normalized = normalized
        self.chunk = chunk

    @property
    def n_items(self) -> int:
        return self.generator.n_items

    def infer(self, history, depth: int | None = None) -> np.ndarray:
        L_YG = np.asarray(self.generator.rank(history, max(self.k, depth or 0)))
        C = L_YG[:self.k]
        probs = rerank_scores(self.params, history, C, self.cre_enabled, self.normalized)
        return compose_final(L_YG, C[order_by_scores(probs)])

    rank = infer

    def rerank_lists(self, examples: ExampleSet, lists) -> list[np.ndarray]:
        out = []
        for lo in range(0, len(examples), self.chunk):
            idx = np.arange(lo, min(lo + self.chunk, len(examples)))
            cand = candidate_matrix([lists[i] for i in idx], self.k)
            hist, mask, lens = examples.padded(idx)
            scores, cmask, _ = batch_scores(self.params, hist, mask, lens, cand,
                                            self.cre_enabled, self.normalized)
            scores = np.where(cmask, scores, -np.inf)
            for row, i in enumerate(idx):
                L_YG = np.asarray(lists[i])
                n = int(cmask[row].sum())
                order = order_by_scores(scores[row, :n])
                out.append(compose_final(L_YG, L_YG[:n][order]))
        return out

    def rank_batch(self, examples: ExampleSet, depth: int) -> list[np.ndarray]:
        lists = self.generator.rank_batch(examples, max(self.k, depth))
        return self.rerank_lists(examples, lists)


@dataclass
class RerankerData:
    """Training view: examples whose target is among the generator's top-k."""

    examples: ExampleSet
    cand: np.ndarray
    target_pos: np.ndarray
    coverage: float

    @classmethod
    def build(cls, examples: ExampleSet, cand: np.ndarray) -> "RerankerData":
        hit = cand == examples.targets[:, None]
        keep = np.flatnonzero(hit.any(axis=1))
        coverage = len(keep) / len(examples) if len(examples) else 0.0
        return cls(examples.subset(keep), cand[keep], hit[keep].argmax(axis=1), coverage)

    def __len__(self) -> int:
        return len(self.target_pos)


def recall_composed(pipeline: TwoStagePipeline, examples: ExampleSet, lists, n: int = 5) -> float:
    if len(examples) == 0:
        return 0.0
    ranked = pipeline.rerank_lists(examples, lists)
    hits = sum(int(t in r[:n]) for t, r in zip(examples.targets.tolist(), ranked))
    return hits / len(examples)


def train_reranker(generator, train: ExampleSet, n_items: int, cfg: RerankerConfig | None = None,
                   candidates: np.ndarray | None = None):
    """Train a re-ranker on top of a frozen generator.

    ``candidates`` optionally supplies the generator's top-k for every
    training example (see :func:`write_candidate_cache`). Returns
    ``(params, train_log, info)``.
    """
    cfg = cfg or RerankerConfig()
    cfg.validate()
    tc = cfg.train
    params = init_reranker(n_items, cfg, tc.seed)
    if candidates is None:
        candidates = candidate_matrix(generator.rank_batch(train, cfg.k), cfg.k)
    elif candidates.shape != (len(train), cfg.k):
        raise FormatError(f"candidate cache shape {candidates.shape} does not match ({len(train)}, {cfg.k})")
    fit_idx, val_idx = split_validation(len(train), tc.val_fraction, tc.seed, "reranker.split")
    data = RerankerData.build(train.subset(fit_idx), candidates[fit_idx])
    info = {"train_examples": len(fit_idx), "kept_examples": len(data), "coverage": data.coverage,
            "validation_examples": len(val_idx)}
    log.info("re-ranker training set: %s", info)
    if len(data) == 0:
        raise EmptyTrainingSetError(
            f"no training example has its target in the generator's top-{cfg.k} "
            f"(generator coverage {data.coverage:.4f})")
    if tc.epochs == 0:
        return params, TrainLog(), info

    val = train.subset(val_idx)
    if cfg.select_on == "composed":
        val_lists = generator.rank_batch(val, max(cfg.k, 5)) if len(val) else []
    else:
        vdata = RerankerData.build(val, candidates[val_idx])
        val, val_lists = vdata.examples, [row[row >= 0] for row in vdata.cand]

    stride = cfg.cre_stride

    def loss_and_grad(t, idx):
        p = RerankerParams.from_tensors(t, stride)
        hist, mask, lens = data.examples.padded(idx)
        return batch_loss(p, hist, mask, lens, data.cand[idx].astype(np.int64), data.target_pos[idx],
                          cfg.cre_enabled, cfg.attention_normalized)

    def validate(t):
        pipe = TwoStagePipeline(generator, RerankerParams.from_tensors(t, stride), cfg.k,
                                cfg.cre_enabled, cfg.attention_normalized)
        return recall_composed(pipe, val, val_lists, 5)

    best, tlog = fit(params.tensors(), loss_and_grad, len(data), tc,
                     validate if len(val) else None, stream="reranker.shuffle")
    return RerankerParams.from_tensors(best, stride), tlog, info


CACHE_MAGIC = b"CRECAND\x00"
CACHE_VERSION = 1


def write_candidate_cache(path, cand: np.ndarray, generator_hash: str, corpus_hash: str) -> None:
    """Records of ``(example id, k candidate indices)``; ``-1`` pads short lists."""
    cand = np.ascontiguousarray(cand, dtype="<i4")
    n, k = cand.shape
    gh, ch = generator_hash.encode(), corpus_hash.encode()
    ids = np.arange(n, dtype="<i8")
    body = b"".join([
        CACHE_MAGIC, struct.pack("<IIQ", CACHE_VERSION, k, n),
        struct.pack("<I", len(gh)), gh, struct.pack("<I", len(ch)), ch,
        np.concatenate([ids[:, None].view("<i4"), cand], axis=1).tobytes(),
    ])
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_candidate_cache(path, generator_hash: str | None = None, corpus_hash: str | None = None):
    data = Path(path).read_bytes()
    if data[:8] != CACHE_MAGIC:
        raise FormatError("not a candidate cache (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("candidate cache checksum mismatch")
    version, k, n = struct.unpack_from("<IIQ", body, 8)
    if version != CACHE_VERSION:
        raise FormatError(f"unsupported candidate cache version {version}")
    pos = 24
    (lg,) = struct.unpack_from("<I", body, pos)
    gh = body[pos + 4:pos + 4 + lg].decode()
    pos += 4 + lg
    (lc,) = struct.unpack_from("<I", body, pos)
    ch = body[pos + 4:pos + 4 + lc].decode()
    pos += 4 + lc
    if generator_hash is not None and gh != generator_hash:
        raise FormatError("candidate cache was built by a different generator")
    if corpus_hash is not None and ch != corpus_hash:
        raise FormatError("candidate cache was built from a different corpus")
    recs = np.frombuffer(body, dtype="<i4", offset=pos)
    if recs.size != n * (k + 2):
        raise FormatError("candidate cache record count mismatch")
    recs = recs.reshape(n, k + 2)
    ids = recs[:, :2].copy().view("<i8").ravel()
    if not np.array_equal(ids, np.arange(n)):
        raise FormatError("candidate cache example ids are not contiguous")
    return recs[:, 2:].astype(np.int32)


def params_digest(tensors: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
