"""Nearest-neighbor index over keypoint descriptors or deep vectors.

Two modes share one query surface:

* ``exact``: brute-force scan, the oracle for everything else.
* ``approximate``: a forest of randomized kd-trees searched best-bin-first
  with a shared priority queue and a cap on the number of checked points.

Hits are always ordered by ascending distance with ties broken by ascending
point index.
"""

from __future__ import annotations

import io
import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from memdex._backend import kernels
from memdex.model import Dataset, DimensionMismatchError, MemdexError

MAGIC = b"MDX1"
_HEADER = struct.Struct("<4sBIQ")
_PARAMS = struct.Struct("<IIIIQ")


class EmptyIndexError(MemdexError):
    pass


def default_threads() -> int:
    """Worker count from ``MEMDEX_THREADS`` (0 or unset means one per CPU)."""
    raw = os.environ.get("MEMDEX_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise MemdexError(f"MEMDEX_THREADS must be an integer, got {raw!r}") from None
    return n if n > 0 else (os.cpu_count() or 1)


@dataclass(frozen=True)
class ApproxParams:
    # chosen to meet recall@1 >= 0.95 on 100k generator descriptors, D=64
    n_trees: int = 16
    leaf_size: int = 64
    max_checks: int = 16384
    sample_size: int = 100
    seed: int = 0

    def __post_init__(self):
        if min(self.n_trees, self.leaf_size, self.max_checks, self.sample_size) < 1:
            raise ValueError("approximate index parameters must be positive")


@dataclass(frozen=True)
class NeighborHit:
    point_index: int
    distance: float
    subject_id: str
    instance_label: str
    group_label: str


@dataclass(eq=False)
class DescriptorIndex:
    points: np.ndarray
    owner: np.ndarray
    owners: tuple[tuple[str, str, str], ...]
    mode: str = "exact"
    approx_params: ApproxParams = field(default_factory=ApproxParams)
    which: str = "keypoints"
    trees: tuple[np.ndarray, ...] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ("exact", "approximate"):
            raise ValueError(f"unknown index mode {self.mode!r}")
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        self.owner = np.ascontiguousarray(self.owner, dtype=np.int64)
        self.points.setflags(write=False)
        self.owner.setflags(write=False)
        self._subject_pos = {o[0]: i for i, o in enumerate(self.owners)}
        self._label_cache = {}

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def owner_of(self, point_index: int) -> tuple[str, str, str]:
        """(subject_id, instance_label, group_label) of a stored point."""
        return self.owners[self.owner[point_index]]

    def subject_position(self, subject_id: str | None) -> int:
        if subject_id is None:
            return -1
        # a subject with no stored points excludes nothing
        return self._subject_pos.get(subject_id, -1)

    def point_labels(self, kind: str) -> tuple[list[str], np.ndarray]:
        """Distinct labels of ``kind`` and the per-point label code."""
        if kind in self._label_cache:
            return self._label_cache[kind]
        col = {"subject": 0, "instance": 1, "group": 2}[kind]
        labels = list(dict.fromkeys(o[col] for o in self.owners))
        code = {lab: i for i, lab in enumerate(labels)}
        per_owner = np.array([code[o[col]] for o in self.owners], dtype=np.int64)
        codes = per_owner[self.owner] if self.size else np.zeros(0, np.int64)
        codes.setflags(write=False)
        self._label_cache[kind] = (labels, codes)
        return labels, codes

    def search(self, queries: np.ndarray, k: int | None, exclude=-1,
               threads: int | None = 1) -> tuple[np.ndarray, np.ndarray]:
        """Raw k-NN: (point indices, squared distances), padded with -1 / inf.

        ``k=None`` returns every admissible point. ``exclude`` is a subject
        position (or one per query) whose points are skipped.
        """
        queries = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
        if queries.shape[1] != self.dim:
            raise DimensionMismatchError(
                f"query dimension {queries.shape[1]} != index dimension {self.dim}")
        if k is None:
            k = self.size
        if k < 1:
            raise ValueError("k must be >= 1")
        k = min(k, self.size)
        m = queries.shape[0]
        excl = np.broadcast_to(np.asarray(exclude, dtype=np.int64), (m,)).copy()
        threads = default_threads() if threads is None else threads
        if threads <= 1 or m < 2 * threads:
            return self._search_block(queries, k, excl)
        bounds = np.linspace(0, m, threads + 1).astype(int)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(
                lambda ab: self._search_block(queries[ab[0]:ab[1]], k, excl[ab[0]:ab[1]]),
                zip(bounds[:-1], bounds[1:])))
        return (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))

    def _search_block(self, queries, k, excl):
        # a check budget covering every point makes the tree search exhaustive anyway
        if self.mode == "exact" or k >= self.size or self.approx_params.max_checks >= self.size:
            return kernels.knn_exact(self.points, queries, k, self.owner, excl)
        return kernels.kdforest_search(self.points, queries, k, self.owner, excl,
                                       *self.trees, self.approx_params.max_checks)


def _collect(ds: Dataset, which: str):
    owners = tuple((s.subject_id, s.instance_label, s.group_label) for s in ds.subjects)
    if which == "keypoints":
        points, owner = ds.keypoint_matrix
    elif which == "vectors":
        rows = [(i, s.deep_vector.values) for i, s in enumerate(ds.subjects)
                if s.deep_vector is not None]
        dim = ds.d_dv or (len(rows[0][1]) if rows else 0)
        points = np.array([r[1] for r in rows]).reshape(len(rows), dim)
        owner = np.array([r[0] for r in rows], dtype=np.int64)
    else:
        raise ValueError(f"which must be 'keypoints' or 'vectors', got {which!r}")
    return points, owner, owners


def _build_forest(points: np.ndarray, p: ApproxParams) -> tuple[np.ndarray, ...]:
    n = points.shape[0]
    rng = np.random.default_rng(p.seed)
    built = [kernels.kdtree_build(points, p.leaf_size, p.sample_size,
                                  rng.integers(0, 2**32, size=max(1, 2 * n), dtype=np.uint32))
             for _ in range(p.n_trees)]
    width = max(t[1].shape[0] for t in built)

    def stack(i, fill, dtype):
        return np.ascontiguousarray(np.stack(
            [np.concatenate([t[i], np.full(width - t[i].shape[0], fill, dtype=dtype)])
             for t in built]))

    perms = np.ascontiguousarray(np.stack([t[0] for t in built]))
    return (perms, stack(1, -1, np.int64), stack(2, 0.0, np.float64), stack(3, -1, np.int64),
            stack(4, -1, np.int64), stack(5, 0, np.int64), stack(6, 0, np.int64))


def build_index(ds: Dataset, which: str = "keypoints", mode: str = "exact",
                approx_params: ApproxParams | None = None) -> DescriptorIndex:
    points, owner, owners = _collect(ds, which)
    if points.shape[0] == 0:
        raise EmptyIndexError(f"no {which} to index")
    params = approx_params or ApproxParams()
    trees = _build_forest(points, params) if mode == "approximate" else None
    return DescriptorIndex(points, owner, owners, mode, params, which, trees)


def knn(idx: DescriptorIndex, query, k: int, exclude_subject: str | None = None
        ) -> list[NeighborHit]:
    hits, d2 = idx.search(np.asarray(query, dtype=np.float64)[None, :], k,
                          idx.subject_position(exclude_subject))
    out = []
    for p, dd in zip(hits[0].tolist(), d2[0].tolist()):
        if p < 0:
            break
        sid, inst, grp = idx.owner_of(p)
        out.append(NeighborHit(p, float(np.sqrt(dd)), sid, inst, grp))
    return out


def accumulate_class_mass(hit_idx: np.ndarray, kernel: np.ndarray, point_class: np.ndarray,
                          n_classes: int) -> np.ndarray:
    """Per-query, per-class kernel mass.

    Contributions are added in hit order (ascending distance), which keeps the
    reduction independent of how the training points are stored.
    """
    m = hit_idx.shape[0]
    mass = np.zeros((m, n_classes))
    valid = hit_idx >= 0
    rows = np.broadcast_to(np.arange(m)[:, None], hit_idx.shape)[valid]
    np.add.at(mass, (rows, point_class[hit_idx[valid]]), kernel[valid])
    return mass


def range_kernel_sums(idx: DescriptorIndex, query, bandwidth_sq: float,
                      k_trunc: int | None = None, exclude_subject: str | None = None,
                      label: str = "instance") -> dict[str, float]:
    """Sum of exp(-d^2/bandwidth_sq) per class over the k_trunc nearest admissible points."""
    if not bandwidth_sq > 0:
        raise ValueError("bandwidth_sq must be positive")
    hits, d2 = idx.search(np.asarray(query, dtype=np.float64)[None, :], k_trunc,
                          idx.subject_position(exclude_subject))
    labels, point_class = idx.point_labels(label)
    kern = np.where(hits >= 0, np.exp(-d2 / bandwidth_sq), 0.0)
    mass = accumulate_class_mass(hits, kern, point_class, len(labels))[0]
    return {lab: float(mass[i]) for i, lab in enumerate(labels)}


# -- serialization ------------------------------------------------------------

def save_index(idx: DescriptorIndex, path) -> None:
    p = idx.approx_params
    meta = json.dumps({"which": idx.which, "owners": [list(o) for o in idx.owners]},
                      separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, 1 if idx.mode == "approximate" else 0, idx.dim, idx.size))
    buf.write(_PARAMS.pack(p.n_trees, p.leaf_size, p.max_checks, p.sample_size, p.seed))
    buf.write(struct.pack("<Q", len(meta)))
    buf.write(meta)
    buf.write(idx.points.astype("<f8").tobytes())
    buf.write(idx.owner.astype("<i8").tobytes())
    if idx.mode == "approximate":
        buf.write(struct.pack("<Q", idx.trees[1].shape[1]))
        for arr in idx.trees:
            buf.write(arr.astype("<f8" if arr.dtype.kind == "f" else "<i8").tobytes())
    _atomic_write_bytes(path, buf.getvalue())


def load_index(path) -> DescriptorIndex:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise MemdexError(f"{path}: not an index file (bad magic)")
    _, mode, dim, count = _HEADER.unpack_from(raw, 0)
    off = _HEADER.size
    params = ApproxParams(*_PARAMS.unpack_from(raw, off))
    off += _PARAMS.size
    (meta_len,) = struct.unpack_from("<Q", raw, off)
    off += 8
    meta = json.loads(raw[off:off + meta_len])
    off += meta_len

    def take(n_items, dtype, shape):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=n_items, offset=off).reshape(shape)
        off += arr.nbytes
        return arr.astype(dtype[1:], copy=True)

    points = take(count * dim, "<f8", (count, dim))
    owner = take(count, "<i8", (count,))
    trees = None
    if mode == 1:
        (width,) = struct.unpack_from("<Q", raw, off)
        off += 8
        t = params.n_trees
        trees = (take(t * count, "<i8", (t, count)),) + tuple(
            take(t * width, dt, (t, width))
            for dt in ("<i8", "<f8", "<i8", "<i8", "<i8", "<i8"))
    owners = tuple(tuple(o) for o in meta["owners"])
    return DescriptorIndex(points, owner, owners, "approximate" if mode == 1 else "exact",
                           params, meta["which"], trees)


def _atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
