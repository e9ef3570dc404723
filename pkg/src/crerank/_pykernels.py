"""Pure numpy/scipy implementations of the hot kernels.

Every function here has a compiled twin in ``_ckernels.pyx`` and both must
return bit-identical results; ``tests/test_kernels.py`` checks this.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def cooccurrence(sess_indptr: np.ndarray, sess_items: np.ndarray, n_items: int):
    """Pairwise session co-occurrence counts as a CSR triple.

    ``sess_items`` must hold distinct items within each session. The diagonal
    is dropped and each row's columns come out in ascending order.
    """
    n_sess = len(sess_indptr) - 1
    data = np.ones(len(sess_items), dtype=np.int64)
    b = sp.csr_matrix((data, sess_items, sess_indptr), shape=(n_sess, n_items))
    c = (b.T @ b).tocoo()
    keep = c.row != c.col
    rows, cols, vals = c.row[keep], c.col[keep], c.data[keep]
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    indptr = np.zeros(n_items + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n_items), out=indptr[1:])
    return indptr, cols.astype(np.int32), vals.astype(np.int64)


def topk_rows(indptr: np.ndarray, indices: np.ndarray, scores: np.ndarray, width: int):
    """Sort each CSR row by (score desc, column asc) and keep ``width`` entries."""
    n_rows = len(indptr) - 1
    rows = np.repeat(np.arange(n_rows), np.diff(indptr))
    order = np.lexsort((indices, -scores, rows))
    rows, idx, sc = rows[order], indices[order], scores[order]
    pos = np.arange(len(rows)) - indptr[:-1][rows]
    keep = pos < width
    rows, idx, sc = rows[keep], idx[keep], sc[keep]
    out_ptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n_rows), out=out_ptr[1:])
    return out_ptr, idx.astype(np.int32), sc.astype(np.float64)


def varint_encode(values: np.ndarray) -> bytes:
    values = np.asarray(values, dtype=np.uint64)
    if values.size == 0:
        return b""
    nbytes = np.ones(len(values), dtype=np.int64)
    for k in range(1, 10):
        nbytes += values >= np.uint64(1 << (7 * k))
    total = int(nbytes.sum())
    starts = np.zeros(len(values), dtype=np.int64)
    np.cumsum(nbytes[:-1], out=starts[1:])
    out = np.zeros(total, dtype=np.uint8)
    for k in range(10):
        has = nbytes > k
        if not has.any():
            break
        chunk = (values[has] >> np.uint64(7 * k)) & np.uint64(0x7F)
        more = (nbytes[has] > k + 1).astype(np.uint64) << np.uint64(7)
        out[starts[has] + k] = (chunk | more).astype(np.uint8)
    return out.tobytes()


def varint_decode(buf) -> np.ndarray:
    b = np.frombuffer(bytes(buf), dtype=np.uint8)
    if b.size == 0:
        return np.zeros(0, dtype=np.uint64)
    if b[-1] >= 0x80:
        raise ValueError("truncated varint stream")
    ends = np.flatnonzero(b < 0x80)
    starts = np.concatenate(([0], ends[:-1] + 1))
    group = np.repeat(np.arange(len(ends)), ends - starts + 1)
    shift = (np.arange(len(b)) - starts[group]).astype(np.uint64) * np.uint64(7)
    parts = (b & 0x7F).astype(np.uint64) << shift
    out = np.zeros(len(ends), dtype=np.uint64)
    np.bitwise_or.at(out, group, parts)
    return out


def scatter_add_rows(dst: np.ndarray, idx: np.ndarray, src: np.ndarray) -> None:
    if src.shape != (len(idx), dst.shape[1]):
        raise ValueError("scatter_add_rows: shape mismatch")
    np.add.at(dst, idx, src)


def gather_dot(V: np.ndarray, cidx: np.ndarray, H: np.ndarray) -> np.ndarray:
    """``out[b, i] = sum_j V[cidx[b, i], j] * H[b, j]``, accumulated in ``j`` order."""
    if H.shape != (cidx.shape[0], V.shape[1]):
        raise ValueError("gather_dot: shape mismatch")
    Vc = V[cidx]
    acc = np.zeros(cidx.shape, dtype=V.dtype)
    for j in range(V.shape[1]):
        acc += Vc[..., j] * H[:, None, j]
    return acc
