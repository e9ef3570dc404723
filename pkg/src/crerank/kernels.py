"""Hot-loop kernels with a compiled backend and a numpy fallback.

The compiled module is used when it was built; set ``CRERANK_PURE_PYTHON=1``
to force the fallback. Both backends produce bit-identical outputs.
"""

from __future__ import annotations

import os

import numpy as np

from crerank import _pykernels

_compiled = None
if not os.environ.get("CRERANK_PURE_PYTHON"):
    try:
        from crerank import _ckernels as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"


def backends() -> dict:
    """Available implementations by name, for tests and benchmarks."""
    out = {"python": _pykernels}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def _impl():
    return _compiled if _compiled is not None else _pykernels


def cooccurrence(sess_indptr, sess_items, n_items: int):
    sess_indptr = np.ascontiguousarray(sess_indptr, dtype=np.int64)
    sess_items = np.ascontiguousarray(sess_items, dtype=np.int32)
    if len(sess_items) and (sess_items.min() < 0 or sess_items.max() >= n_items):
        raise ValueError("session item index out of range")
    return _impl().cooccurrence(sess_indptr, sess_items, int(n_items))


def topk_rows(indptr, indices, scores, width: int):
    return _impl().topk_rows(
        np.ascontiguousarray(indptr, dtype=np.int64),
        np.ascontiguousarray(indices, dtype=np.int32),
        np.ascontiguousarray(scores, dtype=np.float64),
        int(width),
    )


def varint_encode(values) -> bytes:
    return _impl().varint_encode(np.ascontiguousarray(values, dtype=np.uint64))


def varint_decode(buf) -> np.ndarray:
    return _impl().varint_decode(np.frombuffer(bytes(buf), dtype=np.uint8))


def scatter_add_rows(dst: np.ndarray, idx, src: np.ndarray) -> None:
    """``dst[idx[r]] += src[r]`` for every row, accumulated in row order."""
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if len(idx) and (idx.min() < 0 or idx.max() >= dst.shape[0]):
        raise IndexError("scatter_add_rows: row index out of range")
    src = np.ascontiguousarray(src, dtype=dst.dtype)
    if _compiled is not None and dst.flags.c_contiguous:
        _compiled.scatter_add_rows(dst, idx, src)
    else:
        _pykernels.scatter_add_rows(dst, idx, src)


def gather_dot(V: np.ndarray, cidx, H: np.ndarray) -> np.ndarray:
    """Candidate dot products ``V[cidx[b, i]] . H[b]`` summed in feature order.

    A fixed accumulation order keeps scores independent of BLAS builds and
    thread counts, so they can be compared bitwise.
    """
    cidx = np.ascontiguousarray(cidx, dtype=np.int64)
    if cidx.size and (cidx.min() < 0 or cidx.max() >= V.shape[0]):
        raise IndexError("gather_dot: row index out of range")
    H = np.ascontiguousarray(H, dtype=V.dtype)
    return _impl().gather_dot(np.ascontiguousarray(V), cidx, H)
