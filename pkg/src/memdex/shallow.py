"""Keypoint-set log-likelihood with adaptive per-keypoint bandwidth.

For a query set {f_i} and class k::

    log p({f_i} | k) = sum_i log( (1/N_k) * sum_{j in k} exp(-|f_i - f_j|^2 / (1 + dNN_i^2)) + 1 )

where dNN_i is the distance from f_i to its nearest admissible training
keypoint of any class, and the inner sum runs over the ``k_trunc`` nearest
admissible neighbors. The +1 models uniform background clutter, so every
per-keypoint factor is at least 1 and the total is non-negative.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from memdex._backend import kernels
from memdex.index import DescriptorIndex, accumulate_class_mass
from memdex.model import DimensionMismatchError, Keypoint, KeypointSet, SubjectRecord


@dataclass(frozen=True)
class ShallowScoreConfig:
    k_trunc: int | None = 64
    dnn_mode: str = "approximate"
    exclude_self_subject: bool = True

    def __post_init__(self):
        if self.k_trunc is not None and self.k_trunc < 1:
            raise ValueError("k_trunc must be >= 1")
        if self.dnn_mode not in ("exact", "approximate"):
            raise ValueError(f"unknown dnn_mode {self.dnn_mode!r}")


@dataclass(frozen=True)
class KeypointBandwidth:
    dnn: float

    @property
    def value(self) -> float:
        """Kernel denominator 1 + dNN^2; never below 1."""
        return 1.0 + self.dnn * self.dnn


def _descriptors(query_kps, dim: int) -> np.ndarray:
    if isinstance(query_kps, KeypointSet):
        desc = query_kps.descriptors
    elif isinstance(query_kps, np.ndarray):
        desc = query_kps
    else:
        kps: Sequence[Keypoint] = list(query_kps)
        desc = np.array([k.descriptor for k in kps]) if kps else np.zeros((0, dim))
    desc = np.ascontiguousarray(np.atleast_2d(desc), dtype=np.float64)
    if desc.shape[0] and desc.shape[1] != dim:
        raise DimensionMismatchError(
            f"query descriptor dimension {desc.shape[1]} != index dimension {dim}")
    return desc


def _exclusion(idx: DescriptorIndex, cfg: ShallowScoreConfig, query_subject: str | None) -> int:
    return idx.subject_position(query_subject) if cfg.exclude_self_subject else -1


def keypoint_bandwidths(query_kps, idx: DescriptorIndex, cfg: ShallowScoreConfig = ShallowScoreConfig(),
                        query_subject: str | None = None) -> list[KeypointBandwidth]:
    desc = _descriptors(query_kps, idx.dim)
    if desc.shape[0] == 0:
        return []
    ex = _exclusion(idx, cfg, query_subject)
    exact = cfg.dnn_mode == "exact" or idx.mode == "exact"
    if exact:
        _, d2 = kernels.knn_exact(idx.points, desc, 1, idx.owner,
                                  np.full(desc.shape[0], ex, dtype=np.int64))
    else:
        _, d2 = idx.search(desc, 1, ex)
    return [KeypointBandwidth(float(np.sqrt(v))) for v in d2[:, 0]]


def keypoint_terms(desc: np.ndarray, idx: DescriptorIndex, cfg: ShallowScoreConfig,
                   exclude: int, label: str, threads: int | None = 1
                   ) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Per-keypoint, per-class log factors.

    Returns (class labels, admissible counts N_k, terms of shape (m, n_classes)).
    ``threads`` splits the neighbor search over query keypoints; results do not
    depend on it.
    """
    labels, point_class = idx.point_labels(label)
    n_classes = len(labels)
    admissible = idx.owner != exclude if exclude >= 0 else np.ones(idx.size, dtype=bool)
    counts = np.bincount(point_class[admissible], minlength=n_classes)
    m = desc.shape[0]
    if m == 0:
        return labels, counts, np.zeros((0, n_classes))

    hits, d2 = idx.search(desc, cfg.k_trunc, exclude, threads)
    if cfg.dnn_mode == "exact" and idx.mode == "approximate":
        _, nn = kernels.knn_exact(idx.points, desc, 1, idx.owner,
                                  np.full(m, exclude, dtype=np.int64))
        dnn2 = nn[:, 0]
    else:
        dnn2 = d2[:, 0]
    # rows without any admissible hit carry no mass; keep the bandwidth finite
    dnn2 = np.where(np.isfinite(dnn2), dnn2, 0.0)
    valid = hits >= 0
    kern = np.zeros_like(d2)
    kern[valid] = np.exp(-d2[valid] / (1.0 + np.broadcast_to(dnn2[:, None], d2.shape)[valid]))
    mass = accumulate_class_mass(hits, kern, point_class, n_classes)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(counts > 0, np.log1p(mass / np.maximum(counts, 1)), 0.0)
    return labels, counts, terms


def _reduce_terms(terms: np.ndarray) -> np.ndarray:
    # sorting first makes the sum independent of query keypoint order
    return np.sort(terms, axis=0).sum(axis=0) if terms.shape[0] else np.zeros(terms.shape[1])


def batch_shallow_scores(query_subject: SubjectRecord | KeypointSet, idx: DescriptorIndex,
                         class_set: Sequence[str] | None = None,
                         cfg: ShallowScoreConfig = ShallowScoreConfig(),
                         label: str = "instance", query_subject_id: str | None = None,
                         threads: int | None = 1) -> dict[str, float]:
    """Shallow log-likelihood of one query against every class in ``class_set``.

    Neighbor lists and dNN are computed once per query keypoint and shared by
    all classes. Classes absent from the index score 0 (background only).
    """
    if isinstance(query_subject, SubjectRecord):
        kps = query_subject.keypoints
        query_subject_id = query_subject.subject_id
    else:
        kps = query_subject
    desc = _descriptors(kps, idx.dim)
    labels, _, terms = keypoint_terms(desc, idx, cfg, _exclusion(idx, cfg, query_subject_id),
                                      label, threads)
    totals = _reduce_terms(terms)
    pos = {lab: i for i, lab in enumerate(labels)}
    if class_set is None:
        class_set = labels
    return {c: float(totals[pos[c]]) if c in pos else 0.0 for c in class_set}


def keypoint_log_likelihood(query_kps, idx: DescriptorIndex, target_class: str,
                            cfg: ShallowScoreConfig = ShallowScoreConfig(),
                            label: str = "instance", query_subject: str | None = None) -> float:
    return batch_shallow_scores(query_kps, idx, [target_class], cfg, label,
                                query_subject)[target_class]
