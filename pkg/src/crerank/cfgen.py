"""Item-item collaborative filtering over session co-occurrence.

Similarity of candidate ``j`` for anchor ``i`` is the asymmetric cosine
``n_ij / (n_i**alpha * n_j**(1 - alpha))`` where ``n_i`` counts sessions that
contain ``i`` and ``n_ij`` sessions that contain both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from crerank import kernels
from crerank.corpus import ExampleSet


@dataclass
class CooccurrenceCounts:
    support: np.ndarray  # n_i, int64 (n_items,)
    indptr: np.ndarray  # CSR over anchors
    indices: np.ndarray
    counts: np.ndarray  # n_ij

    @property
    def n_items(self) -> int:
        return len(self.support)

    def pair(self, i: int, j: int) -> int:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        pos = np.searchsorted(self.indices[lo:hi], j)
        if pos < hi - lo and self.indices[lo + pos] == j:
            return int(self.counts[lo + pos])
        return 0


def count_sessions(sess_indptr, sess_items, n_items: int) -> CooccurrenceCounts:
    """Counts from explicit sessions; duplicate items inside a session count once."""
    sess_indptr = np.asarray(sess_indptr, dtype=np.int64)
    sess_items = np.asarray(sess_items, dtype=np.int64)
    owner = np.repeat(np.arange(len(sess_indptr) - 1), np.diff(sess_indptr))
    pairs = np.unique(np.stack([owner, sess_items], axis=1), axis=0) if len(owner) else np.zeros((0, 2), np.int64)
    indptr = np.zeros(len(sess_indptr), dtype=np.int64)
    np.cumsum(np.bincount(pairs[:, 0], minlength=len(sess_indptr) - 1), out=indptr[1:])
    items = pairs[:, 1].astype(np.int32)
    support = np.bincount(items, minlength=n_items).astype(np.int64)
    ptr, idx, cnt = kernels.cooccurrence(indptr, items, n_items)
    return CooccurrenceCounts(support, ptr, idx, cnt)


def build_counts(train: ExampleSet, n_items: int) -> CooccurrenceCounts:
    """Session-level counts over the original sessions behind ``train``'s prefixes."""
    indptr, items = train.session_sets()
    return count_sessions(indptr, items, n_items)


@dataclass
class SimilarityTable:
    """Per-anchor candidate lists sorted by score (desc), ties by item index (asc)."""

    indptr: np.ndarray
    indices: np.ndarray
    scores: np.ndarray
    popularity: np.ndarray  # all items, most popular first
    alpha: float = 0.5

    @property
    def n_items(self) -> int:
        return len(self.indptr) - 1

    def neighbors(self, anchor: int):
        lo, hi = self.indptr[anchor], self.indptr[anchor + 1]
        return self.indices[lo:hi], self.scores[lo:hi]

    @classmethod
    def from_lists(cls, lists, popularity=None, n_items=None) -> "SimilarityTable":
        """Table from explicit ``{anchor: [(item, score), ...]}`` lists (resorted)."""
        n = n_items if n_items is not None else 1 + max(
            [a for a in lists] + [j for row in lists.values() for j, _ in row], default=-1)
        lens = np.zeros(n, dtype=np.int64)
        for a, row in lists.items():
            lens[a] = len(row)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(lens, out=indptr[1:])
        idx = np.zeros(indptr[-1], dtype=np.int32)
        sc = np.zeros(indptr[-1], dtype=np.float64)
        for a, row in lists.items():
            for t, (j, s) in enumerate(row):
                idx[indptr[a] + t], sc[indptr[a] + t] = j, s
        ptr, idx, sc = kernels.topk_rows(indptr, idx, sc, max(int(lens.max(initial=0)), 1))
        pop = np.arange(n, dtype=np.int32) if popularity is None else np.asarray(popularity, np.int32)
        return cls(ptr, idx, sc, pop)


def popularity_order(support: np.ndarray) -> np.ndarray:
    return np.lexsort((np.arange(len(support)), -support)).astype(np.int32)


def _bounded_score(ri, rj, alpha: float):
    # alpha in {0, 1/2, 1} only uses correctly rounded operations
    if alpha == 0.0:
        return rj
    if alpha == 1.0:
        return ri
    if alpha == 0.5:
        return np.sqrt(ri) * np.sqrt(rj)
    return ri ** alpha * rj ** (1.0 - alpha)


def asym_cosine(counts: CooccurrenceCounts, alpha: float = 0.5, width: int = 500) -> SimilarityTable:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if width < 1:
        raise ValueError("table width must be positive")
    rows = np.repeat(np.arange(counts.n_items), np.diff(counts.indptr))
    n_i = counts.support[rows].astype(np.float64)
    n_j = counts.support[counts.indices].astype(np.float64)
    n_ij = counts.counts.astype(np.float64)
    # same value as n_ij / (n_i**a * n_j**(1-a)), but both factors are <= 1 so the
    # rounded score can never exceed 1
    scores = _bounded_score(n_ij / n_i, n_ij / n_j, alpha)
    ptr, idx, sc = kernels.topk_rows(counts.indptr, counts.indices, scores, width)
    return SimilarityTable(ptr, idx, sc, popularity_order(counts.support), alpha)


def generate(table: SimilarityTable, history, k: int) -> np.ndarray:
    """Ranked candidates for the last item of ``history``, padded with popular items up to ``k``."""
    if len(history) == 0:
        raise ValueError("history must be non-empty")
    anchor = int(history[-1])
    known = 0 <= anchor < table.n_items
    ranked = table.neighbors(anchor)[0] if known else np.zeros(0, dtype=np.int32)
    if len(ranked) >= k:
        return ranked.copy()
    need = k - len(ranked)
    taken = set(ranked.tolist())
    taken.add(anchor)
    fill = []
    for item in table.popularity:
        if item not in taken:
            fill.append(item)
            if len(fill) == need:
                break
    return np.concatenate([ranked, np.asarray(fill, dtype=np.int32)])


class CFGenerator:
    """Candidate generator backed by a precomputed :class:`SimilarityTable`."""

    kind = "cf"

    def __init__(self, table: SimilarityTable):
        self.table = table

    @classmethod
    def fit(cls, train: ExampleSet, n_items: int, alpha: float = 0.5, width: int = 500) -> "CFGenerator":
        return cls(asym_cosine(build_counts(train, n_items), alpha, width))

    @property
    def n_items(self) -> int:
        return self.table.n_items

    def rank(self, history, depth: int) -> np.ndarray:
        return generate(self.table, history, depth)

    def rank_batch(self, examples: ExampleSet, depth: int) -> list[np.ndarray]:
        cache: dict[int, np.ndarray] = {}
        out = []
        for anchor in examples.last_items().tolist():
            lst = cache.get(anchor)
            if lst is None:
                lst = cache[anchor] = generate(self.table, [anchor], depth)
            out.append(lst)
        return out
