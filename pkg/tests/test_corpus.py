import json

import numpy as np
import pytest

from crerank.corpus import (CORPUS_MAGIC, DAY_MS, RECIPES, ExampleSet, PreprocessConfig, RawEvent,
                            SessionExample, decode_corpus, encode_corpus, parse_diginetica,
                            parse_sessions_csv, parse_timestamp, parse_yoochoose, preprocess,
                            read_corpus, write_corpus, write_stats)
from crerank.errors import EmptyCorpusError, FormatError

H = 3_600_000


def ev(sid, t, item):
    return RawEvent(sid, t, item)


# Six sessions, support threshold 2, one-day test window.
#   s1 @0h   a b c     -> train
#   s2 @1h   a b       -> train
#   s3 @2h   b c e     -> e has support 1, becomes b c -> train
#   s4 @3h   d         -> length 1, dropped
#   s5 @48h  a c f     -> f dropped, becomes a c -> test (starts after 48h - 24h)
#   s6 @49h  c g       -> g dropped, length 1, dropped
SIX = [
    ev("s1", 0, "a"), ev("s1", 1, "b"), ev("s1", 2, "c"),
    ev("s2", H, "a"), ev("s2", H + 1, "b"),
    ev("s3", 2 * H, "b"), ev("s3", 2 * H + 1, "c"), ev("s3", 2 * H + 2, "e"),
    ev("s4", 3 * H, "d"),
    ev("s5", 48 * H, "a"), ev("s5", 48 * H + 1, "c"), ev("s5", 48 * H + 2, "f"),
    ev("s6", 49 * H, "c"), ev("s6", 49 * H + 1, "g"),
]


def test_six_session_fixture_hand_enumerated():
    c = preprocess(SIX, PreprocessConfig(min_item_support=2, test_window_days=1.0))
    assert c.vocab.ids == ["a", "b", "c"]
    a, b, cc = 0, 1, 2
    assert list(c.train) == [
        SessionExample((a,), b, 0), SessionExample((a, b), cc, 0),
        SessionExample((a,), b, 1),
        SessionExample((b,), cc, 2),
    ]
    assert list(c.test) == [SessionExample((a,), cc, 3)]
    assert c.stats() == {"items": 3, "train_examples": 4, "test_examples": 1,
                         "train_sessions": 3, "test_sessions": 1}


def test_length_one_rule_and_prefixes():
    evs = [ev("x", 0, "a"), ev("x", 1, "b"), ev("x", 2, "c"), ev("y", 3, "d"),
           ev("z", 5 * DAY_MS, "a"), ev("z", 5 * DAY_MS + 1, "b")]
    c = preprocess(evs, PreprocessConfig(min_item_support=1))
    assert "d" not in c.vocab
    assert [(e.history, e.target) for e in c.train] == [((0,), 1), ((0, 1), 2)]


def test_unseen_test_items_dropped_and_max_len():
    evs = [ev("x", 0, "a"), ev("x", 1, "b"), ev("x", 2, "c"), ev("x", 3, "a"),
           ev("t", 3 * DAY_MS, "a"), ev("t", 3 * DAY_MS + 1, "zz"), ev("t", 3 * DAY_MS + 2, "b")]
    c = preprocess(evs, PreprocessConfig(min_item_support=1, max_len=2))
    assert [e.history for e in c.train] == [(0,), (0, 1), (1, 2)]
    assert [(e.history, e.target) for e in c.test] == [((0,), 1)]


def test_train_fraction_keeps_most_recent():
    evs = [ev(f"s{i}", i * H, it) for i in range(8) for it in ("a",)]
    evs += [ev(f"s{i}", i * H + 1, "b") for i in range(8)]
    evs += [ev("late", 10 * DAY_MS, "a"), ev("late", 10 * DAY_MS + 1, "b")]
    c = preprocess(evs, PreprocessConfig(min_item_support=1, train_fraction=0.25))
    assert list(c.train.sessions) == [6, 7]


def test_prefix_count_and_disjoint_split():
    rng = np.random.default_rng(0)
    evs = []
    for s in range(60):
        for j in range(rng.integers(1, 7)):
            evs.append(ev(f"s{s}", s * 4 * H + j, f"i{rng.integers(0, 9)}"))
    c = preprocess(evs, PreprocessConfig(min_item_support=1))
    assert not set(c.train.sessions) & set(c.test.sessions)
    for ex in (c.train, c.test):
        assert ex.items.max() < c.n_items and ex.targets.max() < c.n_items
        _, per = np.unique(ex.sessions, return_counts=True)
        lens = {int(s): 0 for s in ex.sessions}
        for e in ex:
            lens[e.session] = max(lens[e.session], e.length + 1)
        assert sorted(per) == sorted(n - 1 for n in lens.values())


def test_empty_after_filtering():
    with pytest.raises(EmptyCorpusError):
        preprocess([ev("a", 0, "x")], PreprocessConfig(min_item_support=1))
    with pytest.raises(EmptyCorpusError):
        preprocess([])


def test_preprocess_reproducible_hash():
    a = preprocess(SIX, PreprocessConfig(min_item_support=2))
    b = preprocess(list(SIX), PreprocessConfig(min_item_support=2))
    assert a.digest() == b.digest()


def test_parse_timestamp():
    assert parse_timestamp("2014-04-07T10:51:09.277Z") == 1396867869277
    assert parse_timestamp("1396867869277") == 1396867869277
    assert parse_timestamp("2016-05-09") == 1462752000000


def test_parse_yoochoose(tmp_path):
    p = tmp_path / "clicks.dat"
    rows = [f"{i},2014-04-07T10:51:0{i}.277Z,21453650{i},0" for i in range(9)]
    rows.insert(4, "broken,row")
    p.write_text("\n".join(rows) + "\n")
    events, report = parse_yoochoose(p)
    assert len(events) == 9 and report.skipped == 1 and report.rows == 10
    assert events[1] == RawEvent("1", parse_timestamp("2014-04-07T10:51:01.277Z"), "214536501")

    empty = tmp_path / "empty.dat"
    empty.write_text("")
    events, report = parse_yoochoose(empty)
    assert events == [] and report.skipped == 0 and report.warnings == []


def test_parse_yoochoose_single_row(tmp_path):
    p = tmp_path / "one.dat"
    p.write_text("1,2014-04-07T10:51:09.277Z,214536502,0\n")
    (e,), _ = parse_yoochoose(p)
    assert (e.session_id, e.item_id) == ("1", "214536502")


def test_parse_diginetica(tmp_path):
    p = tmp_path / "views.csv"
    lines = ["sessionId;userId;itemId;timeframe;eventdate",
             "1;NA;81766;526309;2016-05-09",
             "2;NA;5;200;2016-05-10",
             "2;NA;6;100;2016-05-10",
             "3;NA;7;abc;2016-05-10",
             "3;NA;8;10;2016-05-11"]
    p.write_text("\n".join(lines) + "\n")
    events, report = parse_diginetica(p)
    assert (events[0].session_id, events[0].item_id) == ("1", "81766")
    assert [e.item_id for e in events if e.session_id == "2"] == ["6", "5"]
    # oracle: independent line scan
    raw = p.read_text().splitlines()
    assert len(events) == len(raw) - 1 - report.skipped
    assert report.skipped == 1


def test_parse_sessions_csv(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("session_id,timestamp,item_id\nA,1000,x\nA,2000,y\nB,,z\n")
    events, report = parse_sessions_csv(p)
    assert events == [RawEvent("A", 1000, "x"), RawEvent("A", 2000, "y")] and report.skipped == 1
    bad = tmp_path / "nohdr.csv"
    bad.write_text("A,1000,x\n")
    with pytest.raises(FormatError):
        parse_sessions_csv(bad)
    with pytest.raises(OSError):
        parse_sessions_csv(tmp_path / "missing.csv")


def test_binary_round_trip_and_stability(tmp_path):
    c = preprocess(SIX, PreprocessConfig(min_item_support=2))
    path = tmp_path / "c.bin"
    write_corpus(c, path)
    back = read_corpus(path)
    assert back.train == c.train and back.test == c.test and back.vocab == c.vocab
    assert back.meta == c.meta
    assert encode_corpus(back) == path.read_bytes()


def test_binary_rejects_corruption():
    blob = encode_corpus(preprocess(SIX, PreprocessConfig(min_item_support=2)))
    assert blob.startswith(CORPUS_MAGIC)
    with pytest.raises(FormatError):
        decode_corpus(b"X" + blob[1:])
    with pytest.raises(FormatError):
        decode_corpus(blob[:-9])
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0xFF
    with pytest.raises(FormatError):
        decode_corpus(bytes(flipped))
    bumped = bytearray(blob)
    bumped[8] += 1  # version field follows the magic
    with pytest.raises(FormatError):
        decode_corpus(bytes(bumped))


def test_stats_sidecar(tmp_path):
    c = preprocess(SIX, PreprocessConfig(min_item_support=2), "toy")
    write_stats(c, tmp_path / "s.json")
    stats = json.loads((tmp_path / "s.json").read_text())
    assert stats["items"] == 3 and stats["dataset"] == "toy"


def test_recipes():
    assert RECIPES["yoochoose"].train_fraction == 0.25
    assert RECIPES["diginetica"].test_window_days == 7.0
    assert RECIPES["yoochoose"].min_item_support == RECIPES["diginetica"].min_item_support == 5


def test_example_set_views():
    ex = ExampleSet.from_examples([SessionExample((1, 2), 3, 0), SessionExample((4,), 5, 1)])
    hist, mask, lens = ex.padded()
    assert hist.tolist() == [[1, 2], [4, 0]] and mask.tolist() == [[True, True], [True, False]]
    assert list(ex.last_items()) == [2, 4]
    assert ex.subset([1]) == ExampleSet.from_examples([SessionExample((4,), 5, 1)])
    ptr, items = ex.session_sets()
    assert ptr.tolist() == [0, 3, 5] and items.tolist() == [1, 2, 3, 4, 5]
