"""Shared fixtures: gradient-check harnesses and synthetic corpora."""

from __future__ import annotations

import numpy as np

from crerank.cfgen import CFGenerator, SimilarityTable
from crerank.corpus import ExampleSet, SessionExample
from crerank.numkit import flatten, grad_check, unflatten
from crerank.reranker import RerankerConfig, RerankerParams, batch_loss as rr_loss, init_reranker
from crerank.stampgen import StampParams, batch_loss as stamp_loss, init_stamp

# Model-level checks run at 64-bit with O(1) weights; with the tiny production
# init most gradients are ~1e-8 and central differences drown in roundoff.
GC_EPS = 1e-4
GC_STD = 0.5


def random_examples(rng, n_items: int, n: int, max_len: int = 4) -> ExampleSet:
    out = []
    for s in range(n):
        hist = tuple(int(x) for x in rng.integers(0, n_items, size=rng.integers(1, max_len + 1)))
        out.append(SessionExample(hist, int(rng.integers(0, n_items)), s))
    return ExampleSet.from_examples(out)


def stamp_objective(seed: int = 0, d: int = 8, n_items: int = 20, kind: str = "stamp",
                    normalized: bool = False):
    """``(f, p0)``: full generator loss over flat float64 parameters."""
    rng = np.random.default_rng(seed)
    p = init_stamp(n_items, d, seed, GC_STD, GC_STD, np.float64)
    p.b_attn[:] = rng.normal(size=d) * GC_STD
    p.bx[:] = rng.normal(size=d) * GC_STD
    p.ba[:] = rng.normal(size=d) * GC_STD
    ex = random_examples(rng, n_items, 6)
    idx = np.arange(len(ex))
    like = p.tensors()
    if kind == "stmo":
        like = {k: like[k] for k in ("V", "Wa")}

    def f(flat):
        t = {**p.tensors(), **unflatten(flat, like)}
        loss, grads = stamp_loss(StampParams(**t), ex, idx, kind, normalized)
        return loss, flatten({k: grads[k] for k in like})

    return f, flatten(like)


def stamp_grad_error(*args, **kw) -> float:
    return grad_check(*stamp_objective(*args, **kw), GC_EPS)


def reranker_objective(seed: int = 0, d: int = 8, k: int = 5, n_items: int = 20,
                       cre_enabled: bool = True, stride: int = 1, normalized: bool = False):
    """``(f, p0)``: full re-ranker loss over every tensor, flattened."""
    rng = np.random.default_rng(seed)
    cfg = RerankerConfig(k=k, d=d, cre_stride=stride, emb_std=GC_STD, weight_std=GC_STD)
    p = init_reranker(n_items, cfg, seed, np.float64)
    t0 = p.tensors()
    for name in ("b_attn", "bx", "ba", "be1", "be2", "br1", "br2"):
        t0[name][:] = rng.normal(size=t0[name].shape) * GC_STD
    ex = random_examples(rng, n_items, 6)
    hist, mask, lens = ex.padded()
    cand = np.stack([rng.permutation(n_items)[:k] for _ in range(len(ex))]).astype(np.int64)
    cand[0, k - 2:] = -1  # one short candidate list
    pos = rng.integers(0, k - 2, size=len(ex))

    def f(flat):
        q = RerankerParams.from_tensors(unflatten(flat, t0), stride)
        loss, grads = rr_loss(q, hist, mask, lens, cand, pos, cre_enabled, normalized)
        return loss, flatten(grads)

    return f, flatten(t0)


def reranker_grad_error(*args, **kw) -> float:
    return grad_check(*reranker_objective(*args, **kw), GC_EPS)


# ranks of the 10-example metric fixture; None is a miss
FIXTURE_RANKS = [1, 2, 3, 25, None, 1, 20, 4, 6, None]


class ListModel:
    """Model whose ranked list for example ``i`` is fixed in advance."""

    def __init__(self, lists):
        self.lists = lists

    def rank_batch(self, examples, depth):
        return [np.asarray(self.lists[int(s)][:depth]) for s in examples.sessions]


def rank_fixture(n_items: int = 100):
    """Ten test examples and a model placing each target at ``FIXTURE_RANKS``."""
    examples, lists = [], {}
    for i, r in enumerate(FIXTURE_RANKS):
        target = i
        others = [j for j in range(n_items) if j != target]
        lst = others[:40]
        if r is not None:
            lst.insert(r - 1, target)
        examples.append(SessionExample((n_items - 1,), target, i))
        lists[i] = np.array(lst)
    return ListModel(lists), ExampleSet.from_examples(examples)


def planted_rank_setup(seed: int = 0, n_items: int = 500, k: int = 10, n_train: int = 13000,
                       n_test: int = 2000, p_plant: float = 0.6, plant_pos: int = 2):
    """Frozen CF generator plus train/test sets whose targets sit at rank ``plant_pos + 1``
    with probability ``p_plant`` and at another top-k position otherwise."""
    rng = np.random.default_rng(seed)
    lists = {}
    for a in range(n_items):
        cands = rng.permutation(np.delete(np.arange(n_items), a))[:k]
        lists[a] = [(int(j), float(k - r)) for r, j in enumerate(cands)]
    table = SimilarityTable.from_lists(lists, n_items=n_items)
    gen = CFGenerator(table)
    others = [r for r in range(k) if r != plant_pos]

    def make(n, offset):
        out = []
        for s in range(n):
            anchor = int(rng.integers(0, n_items))
            prefix = tuple(int(x) for x in rng.integers(0, n_items, size=rng.integers(0, 3)))
            pos = plant_pos if rng.random() < p_plant else int(rng.choice(others))
            out.append(SessionExample(prefix + (anchor,), lists[anchor][pos][0], offset + s))
        return ExampleSet.from_examples(out)

    return gen, make(n_train, 0), make(n_test, n_train), n_items


def planted_rule_corpus(n_sessions: int = 200, n_items: int = 20, length: int = 5, seed: int = 0):
    """Sessions following ``next = (item + 1) % n_items``."""
    rng = np.random.default_rng(seed)
    out = []
    for s in range(n_sessions):
        start = int(rng.integers(0, n_items))
        items = [(start + j) % n_items for j in range(length)]
        for t in range(1, length):
            out.append(SessionExample(tuple(items[:t]), items[t], s))
    return ExampleSet.from_examples(out)


def numeric_grad(f, p: np.ndarray, eps: float = GC_EPS) -> np.ndarray:
    p = np.array(p, dtype=np.float64)
    out = np.zeros_like(p)
    for i in range(p.size):
        q = p.copy()
        q[i] += eps
        fp, _ = f(q)
        q[i] -= 2 * eps
        fm, _ = f(q)
        out[i] = (fp - fm) / (2 * eps)
    return out


def write_toy_csv(path, n_sessions: int = 300, n_items: int = 30, seed: int = 0) -> None:
    """Generic-format click log over ten days with a mostly-successor pattern."""
    rng = np.random.default_rng(seed)
    t0 = 1_600_000_000_000
    lines = ["session_id,timestamp,item_id"]
    for s in range(n_sessions):
        start = t0 + int(s * 10 * 86_400_000 / n_sessions)
        item = int(rng.integers(0, n_items))
        for j in range(int(rng.integers(2, 7))):
            lines.append(f"s{s},{start + 1000 * j},i{item}")
            item = (item + 1) % n_items if rng.random() < 0.7 else int(rng.integers(0, n_items))
    path.write_text("\n".join(lines) + "\n")
