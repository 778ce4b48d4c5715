"""Compiled vs pure-Python kernel timings.

    python benchmarks/bench_kernels.py [--points 20000] [--queries 200] [--repeat 3]

Both backends get identical inputs and their outputs are cross-checked before
anything is timed. Requires the compiled extension to be built.
"""

import argparse
import time

import numpy as np

from memdex import _pykernels
from memdex.index import ApproxParams, build_index
from memdex.synth import SynthConfig, generate_synthetic

try:
    from memdex import _ckernels
except ImportError:
    raise SystemExit("compiled kernels not built; run `pip install -e . --no-build-isolation`")


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def as_tuple(out):
    return tuple(np.asarray(x) for x in out) if isinstance(out, tuple) else (np.asarray(out),)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=20000, help="indexed keypoints (approx.)")
    ap.add_argument("--queries", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()

    per_subject = 200
    ds = generate_synthetic(SynthConfig(n_families=max(1, a.points // (2 * per_subject)),
                                        keypoints_per_subject=per_subject, seed=a.seed))
    params = ApproxParams(n_trees=8, leaf_size=32, max_checks=2048)
    idx = build_index(ds, "keypoints", "approximate", params)
    rng = np.random.default_rng(a.seed)
    pick = rng.choice(idx.size, a.queries, replace=False)
    q = np.ascontiguousarray(idx.points[pick])
    ex = idx.owner[pick].copy()
    bits = rng.random((a.queries, 4096)) < 0.5
    packed = np.ascontiguousarray(np.packbits(bits.astype(np.uint8), axis=1))
    rand = rng.integers(0, 2**32, size=2 * idx.size, dtype=np.uint32)

    cases = {
        "sqdist_rows": lambda k: k.sqdist_rows(idx.points, q[0]),
        "knn_exact k=1": lambda k: k.knn_exact(idx.points, q[:20], 1, idx.owner, ex[:20]),
        "kdtree_build": lambda k: k.kdtree_build(idx.points, params.leaf_size,
                                                 params.sample_size, rand),
        "kdforest_search k=64": lambda k: k.kdforest_search(idx.points, q, 64, idx.owner, ex,
                                                            *idx.trees, params.max_checks),
        "hamming_matrix 4096b": lambda k: k.hamming_matrix(packed, packed),
    }

    print(f"{idx.size} points x {idx.dim} dims, {a.queries} queries, best of {a.repeat}")
    print(f"{'kernel':<24}{'compiled s':>12}{'python s':>12}{'speedup':>10}")
    for name, fn in cases.items():
        for c_arr, p_arr in zip(as_tuple(fn(_ckernels)), as_tuple(fn(_pykernels))):
            if c_arr.dtype.kind == "f":
                assert np.allclose(c_arr, p_arr, rtol=1e-12, atol=0), name
            else:
                assert np.array_equal(c_arr, p_arr), name
        tc = best_of(lambda: fn(_ckernels), a.repeat)
        tp = best_of(lambda: fn(_pykernels), a.repeat)
        print(f"{name:<24}{tc:>12.4f}{tp:>12.4f}{tp / tc:>9.1f}x")


if __name__ == "__main__":
    main()
