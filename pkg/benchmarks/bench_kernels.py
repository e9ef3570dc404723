"""Compiled vs numpy kernels on workloads shaped like the training and CF paths.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""

from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from crerank import kernels


def workloads(rng):
    n_items, n_sess = 20_000, 50_000
    lens = rng.integers(2, 8, size=n_sess)
    indptr = np.zeros(n_sess + 1, dtype=np.int64)
    np.cumsum(lens, out=indptr[1:])
    items = np.concatenate([rng.choice(n_items, size=n, replace=False) for n in lens]).astype(np.int32)
    co_ptr, co_idx, co_cnt = kernels.cooccurrence(indptr, items, n_items)
    scores = co_cnt / (1.0 + rng.random(len(co_cnt)))
    values = rng.integers(0, 2**40, size=200_000).astype(np.uint64)
    blob = kernels.varint_encode(values)
    V = rng.normal(size=(n_items, 100)).astype(np.float32)
    H = rng.normal(size=(512, 100)).astype(np.float32)
    cidx = rng.integers(0, n_items, size=(512, 100)).astype(np.int64)
    src = rng.normal(size=(512 * 20, 100)).astype(np.float32)
    rows = rng.integers(0, n_items, size=len(src)).astype(np.int64)
    return {
        "cooccurrence (50k sessions)": lambda m: m.cooccurrence(indptr, items, n_items),
        "topk_rows (width 500)": lambda m: m.topk_rows(co_ptr, co_idx, scores, 500),
        "varint_encode (200k)": lambda m: m.varint_encode(values),
        "varint_decode (200k)": lambda m: m.varint_decode(np.frombuffer(blob, dtype=np.uint8)),
        "gather_dot (512x100, d=100)": lambda m: m.gather_dot(V, cidx, H),
        "scatter_add_rows (10k rows)": lambda m: m.scatter_add_rows(np.zeros_like(V), rows, src),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    impls = kernels.backends()
    if "cython" not in impls:
        print("compiled kernels not built; only the numpy backend is available")
    results = {}
    print(f"{'kernel':32s} " + " ".join(f"{name:>12s}" for name in impls) + "   speedup")
    for label, fn in workloads(np.random.default_rng(0)).items():
        row = {}
        for name, mod in impls.items():
            row[name] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
        results[label] = row
        speed = f"{row['python'] / row['cython']:8.1f}x" if "cython" in row else ""
        print(f"{label:32s} " + " ".join(f"{row[n] * 1e3:10.2f}ms" for n in impls) + f"  {speed}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
