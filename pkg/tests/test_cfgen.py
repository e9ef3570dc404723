import math

import numpy as np
import pytest

from crerank.cfgen import (CFGenerator, SimilarityTable, asym_cosine, build_counts, count_sessions,
                           generate, popularity_order)
from crerank.corpus import ExampleSet, SessionExample


def _csr(sessions):
    indptr = np.zeros(len(sessions) + 1, dtype=np.int64)
    np.cumsum([len(s) for s in sessions], out=indptr[1:])
    return indptr, np.array([i for s in sessions for i in s], dtype=np.int64)


def brute_similarity(sessions, n, alpha):
    sets = [set(s) for s in sessions]
    support = [sum(i in s for s in sets) for i in range(n)]
    out = {}
    for i in range(n):
        row = []
        for j in range(n):
            if i == j:
                continue
            nij = sum(i in s and j in s for s in sets)
            if nij:
                ri, rj = nij / support[i], nij / support[j]
                if alpha == 0.5:
                    row.append((j, math.sqrt(ri) * math.sqrt(rj)))
                else:
                    row.append((j, ri ** alpha * rj ** (1.0 - alpha)))
        row.sort(key=lambda t: (-t[1], t[0]))
        out[i] = row
    return out, support


def test_counts_example():
    a, b, c = 0, 1, 2
    counts = count_sessions(*_csr([[a, b], [a, b], [a, c]]), 3)
    assert counts.support.tolist() == [3, 2, 1]
    assert counts.pair(a, b) == 2 and counts.pair(a, c) == 1 and counts.pair(b, c) == 0
    assert counts.pair(b, a) == 2


def test_counts_single_session_and_dedup():
    counts = count_sessions(*_csr([[0]]), 2)
    assert len(counts.counts) == 0
    counts = count_sessions(*_csr([[0, 0, 1]]), 2)
    assert counts.support[0] == 1 and counts.pair(0, 1) == 1


def test_build_counts_uses_full_sessions():
    train = ExampleSet.from_examples([SessionExample((0,), 1, 0), SessionExample((0, 1), 2, 0),
                                      SessionExample((3,), 0, 1)])
    counts = build_counts(train, 4)
    assert counts.support.tolist() == [2, 1, 1, 1]
    assert counts.pair(1, 2) == 1 and counts.pair(0, 3) == 1


def test_similarity_examples():
    counts = count_sessions(*_csr([[0, 1]] * 4), 2)
    for alpha in (0.0, 0.3, 1.0):
        assert asym_cosine(counts, alpha).neighbors(0)[1][0] == 1.0
    counts = count_sessions(*_csr([[0, 1], [0, 1], [0, 2]]), 3)
    idx, sc = asym_cosine(counts, 0.5).neighbors(0)
    assert idx[0] == 1 and sc[0] == pytest.approx(2 / math.sqrt(6), abs=1e-6)
    assert sc[0] == pytest.approx(0.816497, abs=1e-6)


def test_alpha_range():
    counts = count_sessions(*_csr([[0, 1]]), 2)
    for bad in (-0.1, 1.5):
        with pytest.raises(ValueError):
            asym_cosine(counts, bad)


@pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
@pytest.mark.parametrize("seed", range(4))
def test_brute_force_bitwise(seed, alpha):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 30))
    sessions = [list(rng.integers(0, n, size=rng.integers(1, 6))) for _ in range(40)]
    table = asym_cosine(count_sessions(*_csr(sessions), n), alpha)
    expected, _ = brute_similarity(sessions, n, alpha)
    for i in range(n):
        idx, sc = table.neighbors(i)
        assert list(zip(idx.tolist(), sc.tolist())) == expected[i]


@pytest.mark.parametrize("alpha", [0.25, 0.9])
def test_brute_force_general_alpha(alpha):
    # vectorised pow may differ from libm pow in the last bit
    rng = np.random.default_rng(11)
    sessions = [list(rng.integers(0, 20, size=rng.integers(1, 6))) for _ in range(60)]
    table = asym_cosine(count_sessions(*_csr(sessions), 20), alpha)
    expected, _ = brute_similarity(sessions, 20, alpha)
    for i in range(20):
        idx, sc = table.neighbors(i)
        assert sorted(idx.tolist()) == sorted(j for j, _ in expected[i])
        got = dict(zip(idx.tolist(), sc.tolist()))
        for j, s in expected[i]:
            assert got[j] == pytest.approx(s, rel=1e-15, abs=0)


def test_symmetric_at_half_and_range():
    rng = np.random.default_rng(9)
    sessions = [list(rng.integers(0, 12, size=4)) for _ in range(30)]
    t = asym_cosine(count_sessions(*_csr(sessions), 12), 0.5)
    score = {(i, int(j)): s for i in range(12) for j, s in zip(*t.neighbors(i))}
    for (i, j), s in score.items():
        assert score[(j, i)] == s and 0 < s <= 1


def test_width_truncates():
    sessions = [[0, 1, 2, 3, 4]]
    t = asym_cosine(count_sessions(*_csr(sessions), 5), 0.5, width=2)
    assert t.neighbors(0)[0].tolist() == [1, 2]


def test_generate_lookup_and_fallback():
    t = SimilarityTable.from_lists({0: [(2, 0.5), (1, 0.9)], 3: [(4, 0.7)]},
                                   popularity=[4, 1, 3, 0, 2], n_items=5)
    assert generate(t, [5, 0], 2).tolist() == [1, 2]
    assert generate(t, [99], 3).tolist() == [4, 1, 3]
    # one scored neighbor plus popular items, skipping the anchor and duplicates
    assert generate(t, [3], 3).tolist() == [4, 1, 0]
    with pytest.raises(ValueError):
        generate(t, [], 2)


def test_generator_lists_are_permutation_free_of_duplicates():
    rng = np.random.default_rng(2)
    sessions = [SessionExample(tuple(int(x) for x in rng.integers(0, 15, size=3)), int(rng.integers(0, 15)), s)
                for s in range(50)]
    train = ExampleSet.from_examples(sessions)
    gen = CFGenerator.fit(train, 15)
    for lst in gen.rank_batch(train, 10):
        assert len(lst) == len(set(lst.tolist())) >= 10


def test_popularity_order_ties():
    assert popularity_order(np.array([1, 3, 3, 0])).tolist() == [1, 2, 0, 3]
