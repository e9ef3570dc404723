"""Versioned little-endian checkpoint container for generators and re-rankers.

Layout::

    magic "CRECKPT\\0" | u32 version | str kind | str config_hash | str config_json
    u32 n_records | records... | u32 crc32 of everything before

Strings are u32-length-prefixed UTF-8. A record is ``u8 type | str name``
followed by either a float32 tensor (``u8 ndim | u64 dims | data``) or a
similarity table (``u64 n_items | u64 nnz | f64 alpha | i64 indptr |
i32 indices | f64 scores | i32 popularity``).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from crerank.cfgen import CFGenerator, SimilarityTable
from crerank.config import config_hash
from crerank.errors import ConfigError, FormatError
from crerank.reranker import RerankerParams, params_digest
from crerank.stampgen import StampGenerator, StampParams

MAGIC = b"CRECKPT\x00"
VERSION = 1
TENSOR, SIMTABLE = 1, 2


@dataclass
class Container:
    kind: str
    config: dict
    tensors: dict = field(default_factory=dict)
    table: SimilarityTable | None = None

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)


def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def str(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


def encode(c: Container) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), _str(c.kind), _str(c.config_hash),
             _str(json.dumps(c.config, sort_keys=True))]
    n_records = len(c.tensors) + (c.table is not None)
    parts.append(struct.pack("<I", n_records))
    for name in sorted(c.tensors):
        arr = np.ascontiguousarray(c.tensors[name], dtype="<f4")
        parts += [struct.pack("<B", TENSOR), _str(name), struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes()]
    if c.table is not None:
        t = c.table
        parts += [struct.pack("<B", SIMTABLE), _str("similarity"),
                  struct.pack("<QQd", t.n_items, len(t.indices), t.alpha),
                  np.ascontiguousarray(t.indptr, "<i8").tobytes(),
                  np.ascontiguousarray(t.indices, "<i4").tobytes(),
                  np.ascontiguousarray(t.scores, "<f8").tobytes(),
                  np.ascontiguousarray(t.popularity, "<i4").tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(data: bytes, expect_shapes: dict | None = None) -> Container:
    if len(data) < 16 or data[:8] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.take(8)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint checksum mismatch")
    kind, stored_hash, config = r.str(), r.str(), json.loads(r.str())
    c = Container(kind, config)
    if c.config_hash != stored_hash:
        raise FormatError("checkpoint config hash does not match its config snapshot")
    (n,) = r.unpack("<I")
    for _ in range(n):
        (rtype,) = r.unpack("<B")
        name = r.str()
        if rtype == TENSOR:
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}Q") if ndim else ()
            arr = r.array("<f4", int(np.prod(shape, dtype=np.int64))).reshape(shape)
            if expect_shapes and name in expect_shapes and tuple(expect_shapes[name]) != tuple(shape):
                raise FormatError(f"tensor {name!r} has shape {tuple(shape)}, expected {tuple(expect_shapes[name])}")
            c.tensors[name] = arr.astype(np.float32)
        elif rtype == SIMTABLE:
            n_items, nnz, alpha = r.unpack("<QQd")
            c.table = SimilarityTable(r.array("<i8", n_items + 1), r.array("<i4", nnz),
                                      r.array("<f8", nnz), r.array("<i4", n_items), alpha)
        else:
            raise FormatError(f"unknown record type {rtype} for {name!r}")
    if r.pos != len(body):
        raise FormatError("trailing bytes in checkpoint")
    return c


def write(path, c: Container) -> None:
    Path(path).write_bytes(encode(c))


def read(path, expect_config: dict | None = None, force: bool = False,
         expect_shapes: dict | None = None) -> Container:
    """Load a container; ``expect_config`` must hash-match the stored config unless ``force``."""
    c = decode(Path(path).read_bytes(), expect_shapes)
    if expect_config is not None and not force and config_hash(expect_config) != c.config_hash:
        diff = sorted(k for k in set(expect_config) | set(c.config)
                      if expect_config.get(k) != c.config.get(k))
        raise ConfigError(f"{path}: config differs from checkpoint in {diff} (use --force to override)")
    return c


def generator_container(gen, config: dict) -> Container:
    if isinstance(gen, CFGenerator):
        return Container("cf", config, table=gen.table)
    return Container(gen.kind, config, tensors=gen.params.tensors())


def generator_from_container(c: Container):
    if c.kind == "cf":
        if c.table is None:
            raise FormatError("cf checkpoint lacks a similarity table")
        return CFGenerator(c.table)
    if c.kind in ("stamp", "stmo"):
        try:
            params = StampParams.from_tensors(c.tensors)
        except (KeyError, ValueError) as exc:
            raise FormatError(f"bad generator tensors: {exc}") from exc
        return StampGenerator(params, c.kind, bool(c.config.get("attention_normalized", False)))
    raise FormatError(f"checkpoint kind {c.kind!r} is not a generator")


def reranker_from_container(c: Container) -> RerankerParams:
    if c.kind != "reranker":
        raise FormatError(f"checkpoint kind {c.kind!r} is not a re-ranker")
    try:
        return RerankerParams.from_tensors(c.tensors, int(c.config.get("cre_stride", 1)))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad re-ranker tensors: {exc}") from exc


def container_digest(c: Container) -> str:
    if c.table is not None:
        t = c.table
        return params_digest({"indptr": t.indptr, "indices": t.indices, "scores": t.scores,
                              "popularity": t.popularity})
    return params_digest(c.tensors)
