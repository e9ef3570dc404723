"""Click-log ingestion, session preprocessing and the binary ``.corpus`` format."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from crerank import kernels
from crerank.errors import EmptyCorpusError, FormatError

log = logging.getLogger(__name__)

DAY_MS = 86_400_000

CORPUS_MAGIC = b"CRECORP\x00"
CORPUS_VERSION = 1


@dataclass(frozen=True)
class RawEvent:
    session_id: str
    timestamp: int  # epoch milliseconds
    item_id: str


@dataclass
class ParseReport:
    rows: int = 0
    skipped: int = 0
    warnings: list[str] = field(default_factory=list)

    def skip(self, lineno: int, reason: str) -> None:
        self.skipped += 1
        if len(self.warnings) < 100:
            self.warnings.append(f"line {lineno}: {reason}")
        log.warning("skipping line %d: %s", lineno, reason)


def parse_timestamp(text: str) -> int:
    """ISO-8601 (naive means UTC) or integer epoch milliseconds."""
    text = text.strip()
    if text.lstrip("-").isdigit():
        return int(text)
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(round(dt.timestamp() * 1000))


def _open_text(path):
    return open(path, newline="", encoding="utf-8")


def parse_yoochoose(path) -> tuple[list[RawEvent], ParseReport]:
    """``session_id,timestamp,item_id,category`` rows, no header."""
    events: list[RawEvent] = []
    report = ParseReport()
    with _open_text(path) as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            report.rows += 1
            if len(row) != 4:
                report.skip(lineno, f"expected 4 fields, got {len(row)}")
                continue
            sid, ts, item = row[0].strip(), row[1].strip(), row[2].strip()
            if not sid or not item:
                report.skip(lineno, "empty session or item id")
                continue
            try:
                stamp = parse_timestamp(ts)
            except ValueError:
                report.skip(lineno, f"bad timestamp {ts!r}")
                continue
            events.append(RawEvent(sid, stamp, item))
    return events, report


def parse_diginetica(path) -> tuple[list[RawEvent], ParseReport]:
    """``sessionId;userId;itemId;timeframe;eventdate`` with a header line.

    Events carry the event date as timestamp and come out grouped by session
    (first-appearance order) and sorted by timeframe within each session.
    """
    rows: list[tuple[str, int, int, str]] = []
    report = ParseReport()
    with _open_text(path) as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter=";"), start=1):
            if not row:
                continue
            if lineno == 1 and row[0].strip() == "sessionId":
                continue
            report.rows += 1
            if len(row) != 5:
                report.skip(lineno, f"expected 5 fields, got {len(row)}")
                continue
            sid, item, tf, date = row[0].strip(), row[2].strip(), row[3].strip(), row[4].strip()
            if not sid or not item:
                report.skip(lineno, "empty session or item id")
                continue
            try:
                stamp = parse_timestamp(date)
                frame = int(tf)
            except ValueError:
                report.skip(lineno, f"bad timeframe/date {tf!r}/{date!r}")
                continue
            rows.append((sid, frame, stamp, item))
    first_seen: dict[str, int] = {}
    for sid, *_ in rows:
        first_seen.setdefault(sid, len(first_seen))
    order = sorted(range(len(rows)), key=lambda i: (first_seen[rows[i][0]], rows[i][1], i))
    events = [RawEvent(rows[i][0], rows[i][2], rows[i][3]) for i in order]
    return events, report


def parse_sessions_csv(path) -> tuple[list[RawEvent], ParseReport]:
    """Generic ``session_id,timestamp,item_id`` CSV with a header row."""
    events: list[RawEvent] = []
    report = ParseReport()
    with _open_text(path) as fh:
        reader = csv.DictReader(fh)
        needed = {"session_id", "timestamp", "item_id"}
        if reader.fieldnames is None:
            return events, report
        if not needed.issubset(f.strip() for f in reader.fieldnames):
            raise FormatError(f"{path}: header must contain {sorted(needed)}")
        for lineno, row in enumerate(reader, start=2):
            report.rows += 1
            row = {(k or "").strip(): (v or "").strip() for k, v in row.items() if k is not None}
            sid, item = row.get("session_id", ""), row.get("item_id", "")
            if not sid or not item:
                report.skip(lineno, "empty session or item id")
                continue
            try:
                stamp = parse_timestamp(row.get("timestamp", ""))
            except ValueError:
                report.skip(lineno, f"bad timestamp {row.get('timestamp')!r}")
                continue
            events.append(RawEvent(sid, stamp, item))
    return events, report


PARSERS = {
    "yoochoose": parse_yoochoose,
    "diginetica": parse_diginetica,
    "generic": parse_sessions_csv,
}


@dataclass
class PreprocessConfig:
    min_item_support: int = 5
    test_window_days: float = 1.0
    train_fraction: float = 1.0
    max_len: int = 0  # 0 keeps the full history

    def digest(self, dataset: str = "") -> str:
        blob = json.dumps({"dataset": dataset, **asdict(self)}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


RECIPES = {
    "yoochoose": PreprocessConfig(min_item_support=5, test_window_days=1.0, train_fraction=0.25),
    "diginetica": PreprocessConfig(min_item_support=5, test_window_days=7.0),
    "generic": PreprocessConfig(min_item_support=1, test_window_days=1.0),
}


@dataclass(frozen=True)
class SessionExample:
    history: tuple[int, ...]
    target: int
    session: int = -1

    @property
    def length(self) -> int:
        return len(self.history)


class ItemVocab:
    """Bijection between raw item ids and dense indices ``0..n-1``."""

    def __init__(self, ids: Iterable[str] = ()):
        self._ids: list[str] = []
        self._index: dict[str, int] = {}
        for raw in ids:
            self.add(raw)

    def add(self, raw: str) -> int:
        idx = self._index.get(raw)
        if idx is None:
            idx = len(self._ids)
            self._index[raw] = idx
            self._ids.append(raw)
        return idx

    def index(self, raw: str) -> int:
        return self._index[raw]

    def get(self, raw: str, default=None):
        return self._index.get(raw, default)

    def raw(self, idx: int) -> str:
        return self._ids[idx]

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    def __contains__(self, raw) -> bool:
        return raw in self._index

    def __len__(self) -> int:
        return len(self._ids)

    def __eq__(self, other) -> bool:
        return isinstance(other, ItemVocab) and self._ids == other._ids


class ExampleSet:
    """Prefix examples stored column-wise; histories are CSR slices of ``items``."""

    def __init__(self, offsets, items, targets, sessions):
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.items = np.asarray(items, dtype=np.int32)
        self.targets = np.asarray(targets, dtype=np.int32)
        self.sessions = np.asarray(sessions, dtype=np.int64)
        n = len(self.targets)
        if len(self.offsets) != n + 1 or len(self.sessions) != n:
            raise ValueError("inconsistent example columns")
        if n and (self.offsets[0] != 0 or self.offsets[-1] != len(self.items)):
            raise ValueError("offsets do not cover the item column")
        if n and np.any(np.diff(self.offsets) < 1):
            raise ValueError("every example needs a non-empty history")

    @classmethod
    def from_examples(cls, examples: Sequence[SessionExample]) -> "ExampleSet":
        lens = [len(e.history) for e in examples]
        offsets = np.zeros(len(examples) + 1, dtype=np.int64)
        np.cumsum(lens, out=offsets[1:])
        items = [i for e in examples for i in e.history]
        return cls(offsets, items, [e.target for e in examples], [e.session for e in examples])

    @classmethod
    def empty(cls) -> "ExampleSet":
        return cls([0], [], [], [])

    def __len__(self) -> int:
        return len(self.targets)

    def __getitem__(self, i: int) -> SessionExample:
        lo, hi = self.offsets[i], self.offsets[i + 1]
        return SessionExample(tuple(int(x) for x in self.items[lo:hi]), int(self.targets[i]),
                              int(self.sessions[i]))

    def __iter__(self) -> Iterator[SessionExample]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other) -> bool:
        return (isinstance(other, ExampleSet)
                and np.array_equal(self.offsets, other.offsets)
                and np.array_equal(self.items, other.items)
                and np.array_equal(self.targets, other.targets)
                and np.array_equal(self.sessions, other.sessions))

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    def history(self, i: int) -> np.ndarray:
        return self.items[self.offsets[i]:self.offsets[i + 1]]

    def last_items(self) -> np.ndarray:
        return self.items[self.offsets[1:] - 1]

    def subset(self, idx) -> "ExampleSet":
        idx = np.asarray(idx, dtype=np.int64)
        lens = self.lengths[idx]
        offsets = np.zeros(len(idx) + 1, dtype=np.int64)
        np.cumsum(lens, out=offsets[1:])
        starts = np.repeat(self.offsets[idx], lens)
        within = np.arange(offsets[-1]) - np.repeat(offsets[:-1], lens)
        return ExampleSet(offsets, self.items[starts + within], self.targets[idx], self.sessions[idx])

    def padded(self, idx=None):
        """``(hist, mask, lens)`` with histories left-aligned in a ``(B, L)`` matrix."""
        sub = self if idx is None else self.subset(idx)
        lens = sub.lengths
        width = int(lens.max()) if len(lens) else 1
        hist = np.zeros((len(sub), width), dtype=np.int64)
        mask = np.arange(width)[None, :] < lens[:, None]
        hist[mask] = sub.items
        return hist, mask, lens

    def session_sets(self):
        """Distinct items per original session as a CSR pair ``(indptr, items)``.

        A session is the union of its examples' histories and targets, so the
        result is independent of prefix augmentation.
        """
        if len(self) == 0:
            return np.zeros(1, dtype=np.int64), np.zeros(0, dtype=np.int32)
        owner = np.concatenate([np.repeat(self.sessions, self.lengths), self.sessions])
        item = np.concatenate([self.items, self.targets]).astype(np.int64)
        pairs = np.unique(np.stack([owner, item], axis=1), axis=0)
        _, counts = np.unique(pairs[:, 0], return_counts=True)
        indptr = np.zeros(len(counts) + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        return indptr, pairs[:, 1].astype(np.int32)


@dataclass
class ProcessedCorpus:
    train: ExampleSet
    test: ExampleSet
    vocab: ItemVocab
    meta: dict = field(default_factory=dict)

    @property
    def n_items(self) -> int:
        return len(self.vocab)

    def stats(self) -> dict:
        return {
            "items": self.n_items,
            "train_examples": len(self.train),
            "test_examples": len(self.test),
            "train_sessions": int(len(np.unique(self.train.sessions))),
            "test_sessions": int(len(np.unique(self.test.sessions))),
        }

    def digest(self) -> str:
        return hashlib.sha256(encode_corpus(self)).hexdigest()


def _group_sessions(events: Sequence[RawEvent]):
    sessions: dict[str, list[tuple[int, str]]] = {}
    for ev in events:
        sessions.setdefault(ev.session_id, []).append((ev.timestamp, ev.item_id))
    grouped = []
    for sid, evs in sessions.items():
        evs.sort(key=lambda e: e[0])  # stable: ties keep input order
        grouped.append((evs[0][0], sid, [it for _, it in evs]))
    grouped.sort(key=lambda g: (g[0], g[1]))
    return grouped


def _augment(sessions, max_len: int) -> list[SessionExample]:
    out = []
    for sid, items in sessions:
        for t in range(1, len(items)):
            hist = items[:t] if max_len <= 0 else items[max(0, t - max_len):t]
            out.append(SessionExample(tuple(hist), items[t], sid))
    return out


def preprocess(events: Sequence[RawEvent], cfg: PreprocessConfig | None = None,
               dataset: str = "generic") -> ProcessedCorpus:
    """Sessionize, filter, split by time, build the vocabulary and prefix-augment."""
    cfg = cfg or PreprocessConfig()
    if not events:
        raise EmptyCorpusError("no events to preprocess")
    grouped = [g for g in _group_sessions(events) if len(g[2]) >= 2]

    support: dict[str, int] = {}
    for _, _, items in grouped:
        for it in items:
            support[it] = support.get(it, 0) + 1
    grouped = [(start, sid, [it for it in items if support[it] >= cfg.min_item_support])
               for start, sid, items in grouped]
    grouped = [g for g in grouped if len(g[2]) >= 2]
    if not grouped:
        raise EmptyCorpusError("every session was removed by the length/support filters")

    last_start = max(g[0] for g in grouped)
    cutoff = last_start - cfg.test_window_days * DAY_MS
    train_sess = [g for g in grouped if g[0] <= cutoff]
    test_sess = [g for g in grouped if g[0] > cutoff]
    if not train_sess:
        raise EmptyCorpusError("no training sessions before the test window")

    vocab = ItemVocab(it for _, _, items in train_sess for it in items)
    train_idx = [(n, [vocab.index(it) for it in items])
                 for n, (_, _, items) in enumerate(train_sess)]
    test_idx = []
    for n, (_, _, items) in enumerate(test_sess, start=len(train_sess)):
        kept = [vocab.index(it) for it in items if it in vocab]
        if len(kept) >= 2:
            test_idx.append((n, kept))

    train_ex = _augment(train_idx, cfg.max_len)
    if cfg.train_fraction < 1.0:
        keep = int(len(train_ex) * cfg.train_fraction)
        train_ex = train_ex[len(train_ex) - keep:]
    if not train_ex:
        raise EmptyCorpusError("no training examples after augmentation")
    test_ex = _augment(test_idx, cfg.max_len)

    meta = {
        "dataset": dataset,
        "config": asdict(cfg),
        "config_hash": cfg.digest(dataset),
        "format_version": CORPUS_VERSION,
    }
    corpus = ProcessedCorpus(ExampleSet.from_examples(train_ex), ExampleSet.from_examples(test_ex),
                             vocab, meta)
    log.info("preprocessed %s: %s", dataset, corpus.stats())
    return corpus


def _pack_column(values) -> bytes:
    blob = kernels.varint_encode(np.asarray(values, dtype=np.uint64))
    return struct.pack("<QQ", len(values), len(blob)) + blob


def _unpack_column(buf: memoryview, pos: int):
    if pos + 16 > len(buf):
        raise FormatError("truncated corpus column header")
    count, nbytes = struct.unpack_from("<QQ", buf, pos)
    pos += 16
    if pos + nbytes > len(buf):
        raise FormatError("truncated corpus column")
    try:
        values = kernels.varint_decode(bytes(buf[pos:pos + nbytes]))
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    if len(values) != count:
        raise FormatError("corpus column length mismatch")
    return values, pos + nbytes


def _pack_examples(ex: ExampleSet) -> bytes:
    return (_pack_column(ex.sessions) + _pack_column(ex.targets)
            + _pack_column(ex.lengths) + _pack_column(ex.items))


def _unpack_examples(buf, pos):
    sessions, pos = _unpack_column(buf, pos)
    targets, pos = _unpack_column(buf, pos)
    lengths, pos = _unpack_column(buf, pos)
    items, pos = _unpack_column(buf, pos)
    offsets = np.zeros(len(lengths) + 1, dtype=np.int64)
    np.cumsum(lengths.astype(np.int64), out=offsets[1:])
    try:
        ex = ExampleSet(offsets, items.astype(np.int32), targets.astype(np.int32),
                        sessions.astype(np.int64))
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    return ex, pos


def encode_corpus(corpus: ProcessedCorpus) -> bytes:
    meta = json.dumps(corpus.meta, sort_keys=True, separators=(",", ":")).encode()
    raw_ids = [s.encode("utf-8") for s in corpus.vocab.ids]
    body = b"".join([
        CORPUS_MAGIC,
        struct.pack("<I", CORPUS_VERSION),
        struct.pack("<Q", len(meta)), meta,
        _pack_column([len(r) for r in raw_ids]), b"".join(raw_ids),
        _pack_examples(corpus.train),
        _pack_examples(corpus.test),
    ])
    return body + struct.pack("<I", zlib.crc32(body))


def decode_corpus(data: bytes) -> ProcessedCorpus:
    if len(data) < 12 or data[:8] != CORPUS_MAGIC:
        raise FormatError("not a corpus file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != CORPUS_VERSION:
        raise FormatError(f"unsupported corpus version {version}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("corpus checksum mismatch")
    buf = memoryview(body)
    (meta_len,) = struct.unpack_from("<Q", buf, 12)
    pos = 20 + meta_len
    meta = json.loads(bytes(buf[20:pos]))
    lens, pos = _unpack_column(buf, pos)
    ids = []
    for n in lens.astype(np.int64):
        ids.append(bytes(buf[pos:pos + n]).decode("utf-8"))
        pos += n
    train, pos = _unpack_examples(buf, pos)
    test, pos = _unpack_examples(buf, pos)
    if pos != len(buf):
        raise FormatError("trailing bytes in corpus file")
    vocab = ItemVocab(ids)
    if len(vocab) != len(ids):
        raise FormatError("duplicate item ids in vocabulary")
    for part in (train, test):
        if len(part) and (max(part.items.max(), part.targets.max()) >= len(vocab)):
            raise FormatError("item index outside the vocabulary")
    return ProcessedCorpus(train, test, vocab, meta)


def write_corpus(corpus: ProcessedCorpus, path) -> None:
    Path(path).write_bytes(encode_corpus(corpus))


def read_corpus(path) -> ProcessedCorpus:
    return decode_corpus(Path(path).read_bytes())


def write_stats(corpus: ProcessedCorpus, path, report: ParseReport | None = None) -> None:
    stats = {**corpus.stats(), "dataset": corpus.meta.get("dataset"),
             "config_hash": corpus.meta.get("config_hash")}
    if report is not None:
        stats["parsed_rows"] = report.rows
        stats["skipped_rows"] = report.skipped
    Path(path).write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
