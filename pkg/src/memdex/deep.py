"""Deep-vector log-likelihood with a mean-distance bandwidth.

    log p(v | k) = log( (1/N_k) * sum_{j in k} exp(-|v - v_j|^2 / mu^2) + 1 )

mu is the mean distance from the query to the admissible training vectors
(all of them, or only class k, depending on ``mu_mode``), floored at
``mu_floor``. Binary vectors are compared through packed Hamming distance,
which equals the squared Euclidean distance on {0, 1} vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from memdex._backend import kernels
from memdex.model import (
    Dataset,
    DeepVector,
    DimensionMismatchError,
    MissingEvidenceError,
    MissingModalityError,
)

MU_MODES = ("per-query-all-training", "per-query-class")


@dataclass(frozen=True)
class DeepScoreConfig:
    mu_mode: str = "per-query-all-training"
    exclude_self_subject: bool = True
    mu_floor: float = 1e-12

    def __post_init__(self):
        if self.mu_mode not in MU_MODES:
            raise ValueError(f"unknown mu_mode {self.mu_mode!r}; expected one of {MU_MODES}")
        if not self.mu_floor > 0:
            raise ValueError("mu_floor must be positive")


class DeepTraining:
    """Training deep vectors with their owners, in canonical dataset order."""

    def __init__(self, vectors: Sequence[DeepVector], subject_ids: Sequence[str],
                 labels: dict[str, Sequence[str]]):
        if not vectors:
            raise MissingEvidenceError("no training deep vectors")
        kinds = {v.is_binary for v in vectors}
        if len(kinds) != 1:
            raise ValueError("training mixes binary and real-valued deep vectors")
        dims = {len(v) for v in vectors}
        if len(dims) != 1:
            raise DimensionMismatchError("training deep vectors differ in dimension")
        self.is_binary = kinds.pop()
        self.values = np.ascontiguousarray(np.stack([v.values for v in vectors]))
        self.values.setflags(write=False)
        self.subject_ids = list(subject_ids)
        self.labels = {k: list(v) for k, v in labels.items()}
        self.labels.setdefault("subject", self.subject_ids)

    @classmethod
    def from_dataset(cls, ds: Dataset, require_all: bool = False) -> "DeepTraining":
        if require_all:
            ds.require_deep()
        subs = [s for s in ds.subjects if s.deep_vector is not None]
        if not subs:
            raise MissingModalityError("dataset has no deep vectors")
        return cls([s.deep_vector for s in subs], [s.subject_id for s in subs],
                   {"instance": [s.instance_label for s in subs],
                    "group": [s.group_label for s in subs]})

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @cached_property
    def packed(self) -> np.ndarray:
        return np.ascontiguousarray(np.packbits(self.values.astype(np.uint8), axis=1))

    def sq_distances(self, query: DeepVector) -> np.ndarray:
        if len(query) != self.dim:
            raise DimensionMismatchError(
                f"query dimension {len(query)} != training dimension {self.dim}")
        if query.is_binary != self.is_binary:
            raise ValueError("query and training must both be binary or both real-valued")
        if self.is_binary:
            ham = kernels.hamming_matrix(np.ascontiguousarray(query.packed[None, :]), self.packed)
            return ham[0].astype(np.float64)
        return kernels.sqdist_rows(self.values, np.ascontiguousarray(query.values))


def _class_sums(values: np.ndarray, codes: np.ndarray, n_classes: int) -> np.ndarray:
    """Per-class sums taken in ascending-value order, so storage order never matters."""
    out = np.zeros(n_classes)
    if values.shape[0] == 0:
        return out
    order = np.lexsort((values, codes))
    sv, sc = values[order], codes[order]
    starts = np.flatnonzero(np.r_[True, sc[1:] != sc[:-1]])
    out[sc[starts]] = np.add.reduceat(sv, starts)
    return out


def batch_deep_scores(query: DeepVector, training: DeepTraining,
                      class_set: Sequence[str] | None = None,
                      cfg: DeepScoreConfig = DeepScoreConfig(), label: str = "instance",
                      query_subject: str | None = None, strict: bool = False
                      ) -> dict[str, float]:
    """Deep log-likelihood of ``query`` for each class; mu is shared across classes
    in ``per-query-all-training`` mode.

    A class with no admissible vectors scores 0 (the background floor), or
    raises :class:`MissingEvidenceError` when ``strict``.
    """
    d2 = training.sq_distances(query)
    lab = np.asarray(training.labels[label], dtype=object)
    adm = np.ones(len(training), dtype=bool)
    if cfg.exclude_self_subject and query_subject is not None:
        adm &= np.asarray(training.subject_ids, dtype=object) != query_subject
    if not adm.any():
        raise MissingEvidenceError("no admissible training vectors")
    d2 = d2[adm]
    lab = lab[adm]
    classes = list(dict.fromkeys(lab.tolist()))
    code_of = {c: i for i, c in enumerate(classes)}
    codes = np.array([code_of[c] for c in lab], dtype=np.int64)
    counts = np.bincount(codes, minlength=len(classes))
    dist = np.sqrt(d2)

    if cfg.mu_mode == "per-query-all-training":
        mu = np.full(len(classes), max(cfg.mu_floor, math.fsum(dist) / dist.shape[0]))
    else:
        mu = np.maximum(cfg.mu_floor, _class_sums(dist, codes, len(classes)) / counts)
    kern = np.exp(-d2 / (mu[codes] ** 2))
    mass = _class_sums(kern, codes, len(classes))
    scores = np.log1p(mass / counts)

    if class_set is None:
        class_set = classes
    out = {}
    for c in class_set:
        if c in code_of:
            out[c] = float(scores[code_of[c]])
        elif strict:
            raise MissingEvidenceError(f"no admissible training vectors of class {c!r}")
        else:
            out[c] = 0.0
    return out


def deep_log_likelihood(query: DeepVector, training: DeepTraining, target_class: str,
                        cfg: DeepScoreConfig = DeepScoreConfig(), label: str = "instance",
                        query_subject: str | None = None, strict: bool = False) -> float:
    return batch_deep_scores(query, training, [target_class], cfg, label, query_subject,
                             strict)[target_class]
