# cython: language_level=3
"""Compiled inner loops. Mirrors ``_pykernels`` exactly; see that module for contracts."""

import numpy as np

cimport numpy as cnp
from libc.stdint cimport int32_t, int64_t, uint8_t, uint64_t
from libcpp.algorithm cimport sort
from libcpp.pair cimport pair
from libcpp.vector cimport vector

cnp.import_array()

ctypedef fused real:
    float
    double


def cooccurrence(const int64_t[::1] sess_indptr, const int32_t[::1] sess_items, Py_ssize_t n_items):
    cdef Py_ssize_t n_sess = sess_indptr.shape[0] - 1
    cdef Py_ssize_t s, p, q, i, j, t
    cdef int64_t[::1] item_ptr = np.zeros(n_items + 1, dtype=np.int64)
    cdef int64_t[::1] fill
    cdef int64_t[::1] item_sess
    cdef int64_t[::1] acc = np.zeros(n_items, dtype=np.int64)
    cdef vector[int32_t] touched
    cdef vector[int32_t] out_idx
    cdef vector[int64_t] out_cnt
    cdef int64_t[::1] indptr = np.zeros(n_items + 1, dtype=np.int64)

    for p in range(sess_items.shape[0]):
        item_ptr[sess_items[p] + 1] += 1
    for i in range(n_items):
        item_ptr[i + 1] += item_ptr[i]
    fill = np.array(item_ptr[:n_items], dtype=np.int64)
    item_sess = np.empty(sess_items.shape[0], dtype=np.int64)
    for s in range(n_sess):
        for p in range(sess_indptr[s], sess_indptr[s + 1]):
            i = sess_items[p]
            item_sess[fill[i]] = s
            fill[i] += 1

    with nogil:
        for i in range(n_items):
            touched.clear()
            for q in range(item_ptr[i], item_ptr[i + 1]):
                s = item_sess[q]
                for p in range(sess_indptr[s], sess_indptr[s + 1]):
                    j = sess_items[p]
                    if j == i:
                        continue
                    if acc[j] == 0:
                        touched.push_back(<int32_t>j)
                    acc[j] += 1
            sort(touched.begin(), touched.end())
            for t in range(<Py_ssize_t>touched.size()):
                j = touched[t]
                out_idx.push_back(<int32_t>j)
                out_cnt.push_back(acc[j])
                acc[j] = 0
            indptr[i + 1] = <int64_t>out_idx.size()

    indices = np.empty(out_idx.size(), dtype=np.int32)
    counts = np.empty(out_cnt.size(), dtype=np.int64)
    cdef int32_t[::1] iv = indices
    cdef int64_t[::1] cv = counts
    for t in range(<Py_ssize_t>out_idx.size()):
        iv[t] = out_idx[t]
        cv[t] = out_cnt[t]
    return np.asarray(indptr), indices, counts


def topk_rows(const int64_t[::1] indptr, const int32_t[::1] indices, const double[::1] scores, Py_ssize_t width):
    cdef Py_ssize_t n_rows = indptr.shape[0] - 1
    cdef Py_ssize_t r, p, t, m
    cdef vector[pair[double, int32_t]] row
    cdef vector[int32_t] out_idx
    cdef vector[double] out_sc
    cdef int64_t[::1] out_ptr = np.zeros(n_rows + 1, dtype=np.int64)

    with nogil:
        for r in range(n_rows):
            row.clear()
            for p in range(indptr[r], indptr[r + 1]):
                row.push_back(pair[double, int32_t](-scores[p], indices[p]))
            sort(row.begin(), row.end())
            m = <Py_ssize_t>row.size()
            if m > width:
                m = width
            for t in range(m):
                out_idx.push_back(row[t].second)
                out_sc.push_back(-row[t].first)
            out_ptr[r + 1] = <int64_t>out_idx.size()

    idx = np.empty(out_idx.size(), dtype=np.int32)
    sc = np.empty(out_sc.size(), dtype=np.float64)
    cdef int32_t[::1] iv = idx
    cdef double[::1] sv = sc
    for t in range(<Py_ssize_t>out_idx.size()):
        iv[t] = out_idx[t]
        sv[t] = out_sc[t]
    return np.asarray(out_ptr), idx, sc


def varint_encode(const uint64_t[::1] values):
    cdef Py_ssize_t n = values.shape[0]
    cdef Py_ssize_t i, pos = 0
    cdef uint64_t v
    out = np.empty(n * 10, dtype=np.uint8)
    cdef uint8_t[::1] buf = out
    with nogil:
        for i in range(n):
            v = values[i]
            while v >= 0x80:
                buf[pos] = <uint8_t>((v & 0x7F) | 0x80)
                v >>= 7
                pos += 1
            buf[pos] = <uint8_t>v
            pos += 1
    return out[:pos].tobytes()


def varint_decode(const uint8_t[::1] buf):
    cdef Py_ssize_t n = buf.shape[0]
    cdef Py_ssize_t i, count = 0
    cdef uint64_t v = 0
    cdef int shift = 0
    for i in range(n):
        if buf[i] < 0x80:
            count += 1
    if n and buf[n - 1] >= 0x80:
        raise ValueError("truncated varint stream")
    out = np.empty(count, dtype=np.uint64)
    cdef uint64_t[::1] ov = out
    count = 0
    with nogil:
        for i in range(n):
            v |= (<uint64_t>(buf[i] & 0x7F)) << shift
            if buf[i] < 0x80:
                ov[count] = v
                count += 1
                v = 0
                shift = 0
            else:
                shift += 7
    return out


def scatter_add_rows(real[:, ::1] dst, const int64_t[::1] idx, const real[:, ::1] src):
    cdef Py_ssize_t r, c, i
    cdef Py_ssize_t n = idx.shape[0]
    cdef Py_ssize_t d = dst.shape[1]
    if src.shape[0] != n or src.shape[1] != d:
        raise ValueError("scatter_add_rows: shape mismatch")
    with nogil:
        for r in range(n):
            i = idx[r]
            for c in range(d):
                dst[i, c] += src[r, c]


def gather_dot(const real[:, ::1] V, const int64_t[:, ::1] cidx, const real[:, ::1] H):
    cdef Py_ssize_t B = cidx.shape[0]
    cdef Py_ssize_t k = cidx.shape[1]
    cdef Py_ssize_t d = V.shape[1]
    cdef Py_ssize_t b, i, j, row
    cdef real acc
    if H.shape[0] != B or H.shape[1] != d:
        raise ValueError("gather_dot: shape mismatch")
    out = np.empty((B, k), dtype=np.float64 if real is double else np.float32)
    cdef real[:, ::1] ov = out
    with nogil:
        for b in range(B):
            for i in range(k):
                row = cidx[b, i]
                acc = 0.0
                for j in range(d):
                    acc = acc + V[row, j] * H[b, j]
                ov[b, i] = acc
    return out
