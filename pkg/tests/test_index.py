import importlib

import numpy as np
import pytest

import oracles
from conftest import make_subject, random_dataset
from memdex import _pykernels
from memdex.index import (
    MAGIC,
    ApproxParams,
    EmptyIndexError,
    build_index,
    knn,
    load_index,
    range_kernel_sums,
    save_index,
)
from memdex.model import Dataset, DimensionMismatchError, leave_subject_out

try:
    _ck = importlib.import_module("memdex._ckernels")
except ImportError:  # extension not built
    _ck = None

# small budget so the tree search, not the exhaustive fallback, is exercised
SMALL = ApproxParams(n_trees=4, leaf_size=8, max_checks=48)

needs_ext = pytest.mark.skipif(_ck is None, reason="compiled kernels not built")


def _points_ds(points, owners_per_subject):
    subs, start = [], 0
    for i, n in enumerate(owners_per_subject):
        subs.append(make_subject(f"S{i:02d}", f"C{i % 2}", "AB"[i % 2], points[start:start + n]))
        start += n
    return Dataset(tuple(subs), points.shape[1])


def test_three_point_index():
    ds = _points_ds(np.eye(3), [1, 1, 1])
    idx = build_index(ds, "keypoints", "exact")
    assert idx.size == 3 and idx.dim == 3
    assert idx.owner_of(2) == ("S02", "C0", "A")


def test_empty_index_rejected():
    ds = Dataset((make_subject("S0", "F", "A", np.zeros((0, 4))),), 4)
    with pytest.raises(EmptyIndexError):
        build_index(ds)


def test_query_equal_to_stored_point(rng):
    pts = rng.normal(size=(12, 5))
    ds = _points_ds(pts, [4, 4, 4])
    idx = build_index(ds)
    hit = knn(idx, pts[5], 1)[0]
    assert hit.point_index == 5 and hit.distance == 0.0 and hit.subject_id == "S01"
    hits = knn(idx, pts[5], 3, exclude_subject="S01")
    assert all(h.subject_id != "S01" for h in hits)


def test_exact_knn_matches_bruteforce(rng):
    pts = rng.normal(size=(200, 6))
    ds = _points_ds(pts, [50] * 4)
    idx = build_index(ds)
    owner = np.repeat(np.arange(4), 50)
    for q in rng.normal(size=(10, 6)):
        got = [(h.point_index, h.distance) for h in knn(idx, q, 10)]
        want = oracles.knn(pts, owner, q, 10)
        assert [g[0] for g in got] == [w[1] for w in want]
        np.testing.assert_allclose([g[1] ** 2 for g in got], [w[0] for w in want], rtol=1e-12)


def test_ties_broken_by_point_index():
    pts = np.array([[1.0, 0], [0, 1.0], [-1.0, 0], [0, -1.0], [2.0, 0]])
    ds = _points_ds(pts, [5])
    hits = knn(build_index(ds), np.zeros(2), 4)
    assert [h.point_index for h in hits] == [0, 1, 2, 3]


def test_exclusion_equals_view(rng):
    pts = rng.normal(size=(60, 4))
    ds = _points_ds(pts, [20, 20, 20])
    full = build_index(ds)
    view = build_index(leave_subject_out(ds, "S01"))
    for q in rng.normal(size=(5, 4)):
        a = [h.distance for h in knn(full, q, 7, exclude_subject="S01")]
        b = [h.distance for h in knn(view, q, 7)]
        assert a == b


def test_knn_dimension_mismatch(rng):
    idx = build_index(random_dataset(rng, 2, 3, 4))
    with pytest.raises(DimensionMismatchError):
        knn(idx, np.zeros(5), 1)


def test_approximate_build_is_deterministic(rng):
    ds = random_dataset(rng, 8, 40, 8)
    qs = rng.normal(size=(30, 8))
    a = build_index(ds, mode="approximate", approx_params=SMALL).search(qs, 5)
    b = build_index(ds, mode="approximate", approx_params=SMALL).search(qs, 5)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_approximate_results_are_true_distances_sorted(rng):
    ds = random_dataset(rng, 6, 50, 5)
    idx = build_index(ds, mode="approximate", approx_params=SMALL)
    qs = rng.normal(size=(20, 5))
    hits, d2 = idx.search(qs, 8)
    for q, h, d in zip(qs, hits, d2):
        np.testing.assert_allclose(d, ((idx.points[h] - q) ** 2).sum(axis=1), rtol=1e-12)
        assert np.all(np.diff(d) >= 0)


def test_search_is_thread_count_independent(rng):
    ds = random_dataset(rng, 6, 60, 6)
    idx = build_index(ds, mode="approximate", approx_params=SMALL)
    qs = rng.normal(size=(64, 6))
    one = idx.search(qs, 4, threads=1)
    four = idx.search(qs, 4, threads=4)
    np.testing.assert_array_equal(one[0], four[0])
    np.testing.assert_array_equal(one[1], four[1])


def test_range_kernel_sums_untruncated_matches_bruteforce(rng):
    ds = random_dataset(rng, 6, 10, 3, n_classes=3)
    idx = build_index(ds)
    q = rng.normal(size=3)
    got = range_kernel_sums(idx, q, 2.5, k_trunc=idx.size)
    want = {}
    for s in ds:
        for f in s.keypoints.descriptors:
            want[s.instance_label] = want.get(s.instance_label, 0.0) + \
                np.exp(-oracles.sqdist(q, f) / 2.5)
    for lab, v in want.items():
        assert got[lab] == pytest.approx(v, rel=1e-12)


def test_range_kernel_single_point_and_decay():
    ds = _points_ds(np.array([[3.0, 4.0]]), [1])
    idx = build_index(ds)
    assert range_kernel_sums(idx, [0.0, 0.0], 2.0) == {"C0": pytest.approx(np.exp(-25 / 2.0))}
    far = range_kernel_sums(idx, [0.0, 0.0], (5.0 / 7.0) ** 2)
    assert far["C0"] < 1e-15
    with pytest.raises(ValueError):
        range_kernel_sums(idx, [0.0, 0.0], 0.0)


@pytest.mark.parametrize("mode", ["exact", "approximate"])
def test_serialization_round_trip(tmp_path, rng, mode):
    ds = random_dataset(rng, 5, 20, 4)
    idx = build_index(ds, "keypoints", mode, SMALL)
    path = tmp_path / "i.mdx"
    save_index(idx, path)
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    back = load_index(path)
    assert back.mode == mode and back.owners == idx.owners
    qs = rng.normal(size=(10, 4))
    np.testing.assert_array_equal(back.search(qs, 3)[0], idx.search(qs, 3)[0])
    save_index(back, tmp_path / "j.mdx")
    assert (tmp_path / "j.mdx").read_bytes() == raw


def test_full_budget_search_is_exact(rng):
    ds = random_dataset(rng, 5, 30, 4)
    qs = rng.normal(size=(20, 4))
    approx = build_index(ds, mode="approximate").search(qs, 6)
    exact = build_index(ds).search(qs, 6)
    np.testing.assert_array_equal(approx[0], exact[0])


def test_small_budget_recall_is_high_on_clustered_points(rng):
    centers = rng.normal(scale=8.0, size=(50, 6))
    pts = centers[rng.integers(0, 50, size=600)] + rng.normal(size=(600, 6))
    ds = _points_ds(pts, [600])
    idx = build_index(ds, mode="approximate",
                      approx_params=ApproxParams(n_trees=4, leaf_size=8, max_checks=128))
    qs = pts[:100] + 0.1 * rng.normal(size=(100, 6))
    approx = idx.search(qs, 1)[0][:, 0]
    exact = build_index(ds).search(qs, 1)[0][:, 0]
    assert np.mean(approx == exact) >= 0.95


def test_load_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.mdx"
    p.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(Exception, match="magic"):
        load_index(p)


# -- backend cross-checks ----------------------------------------------------------

@needs_ext
def test_backends_agree_on_exact_knn(rng):
    pts = rng.normal(size=(300, 8))
    owner = np.repeat(np.arange(10), 30).astype(np.int64)
    qs = rng.normal(size=(25, 8))
    ex = rng.integers(-1, 10, size=25).astype(np.int64)
    a = _pykernels.knn_exact(pts, qs, 12, owner, ex)
    b = _ck.knn_exact(pts, qs, 12, owner, ex)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_allclose(a[1], b[1], rtol=1e-12, atol=1e-12)


@needs_ext
def test_backends_build_identical_trees_and_results(rng):
    pts = rng.normal(size=(500, 6))
    owner = np.repeat(np.arange(5), 100).astype(np.int64)
    rand = rng.integers(0, 2**32, size=1000, dtype=np.uint32)
    ta = _pykernels.kdtree_build(pts, 8, 100, rand)
    tb = _ck.kdtree_build(pts, 8, 100, rand)
    for x, y in zip(ta, tb):
        np.testing.assert_array_equal(x, y)
    trees = tuple(np.ascontiguousarray(a[None, ...]) for a in ta)
    qs = rng.normal(size=(40, 6))
    ex = np.full(40, 2, dtype=np.int64)
    ra = _pykernels.kdforest_search(pts, qs, 5, owner, ex, *trees, 64)
    rb = _ck.kdforest_search(pts, qs, 5, owner, ex, *trees, 64)
    np.testing.assert_array_equal(ra[0], rb[0])
    # distances agree to rounding; the two backends sum dimensions differently
    np.testing.assert_allclose(ra[1], rb[1], rtol=1e-12, atol=1e-12)


@needs_ext
def test_backends_agree_on_hamming(rng):
    a = np.packbits(rng.integers(0, 2, size=(7, 100)).astype(np.uint8), axis=1)
    b = np.packbits(rng.integers(0, 2, size=(9, 100)).astype(np.uint8), axis=1)
    np.testing.assert_array_equal(_pykernels.hamming_matrix(a, b), _ck.hamming_matrix(a, b))
    ua, ub = np.unpackbits(a, axis=1), np.unpackbits(b, axis=1)
    want = (ua[:, None, :] != ub[None, :, :]).sum(axis=2)
    np.testing.assert_array_equal(_ck.hamming_matrix(a, b), want)
