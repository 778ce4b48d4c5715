"""Domain types and the in-memory dataset container.

Keypoints are stored per subject as packed arrays rather than one object per
keypoint; :class:`Keypoint` is the element type handed out when a set is
indexed or iterated.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np

DEFAULT_D_KP = 64

LABEL_KINDS = ("subject", "instance", "group")


class MemdexError(Exception):
    """Base class for all errors raised by this package."""


class DataFormatError(MemdexError):
    """A file or record violates its declared format."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None,
                 subject_id: str | None = None):
        self.path = path
        self.line = line
        self.subject_id = subject_id
        where = []
        if path is not None:
            where.append(str(path) if line is None else f"{path}:{line}")
        if subject_id is not None:
            where.append(f"subject {subject_id}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


class DimensionMismatchError(DataFormatError, ValueError):
    pass


class MissingModalityError(MemdexError):
    """A fused or deep operation touched a subject without a deep vector."""


class MissingEvidenceError(MemdexError):
    pass


@dataclass(frozen=True, eq=False)
class Keypoint:
    position: np.ndarray
    scale: float
    descriptor: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64)
        desc = np.asarray(self.descriptor, dtype=np.float64)
        if pos.shape != (3,):
            raise ValueError("keypoint position must be a 3-vector")
        if not (self.scale > 0):
            raise ValueError(f"keypoint scale must be positive, got {self.scale}")
        if desc.ndim != 1 or not np.all(np.isfinite(desc)) or not np.all(np.isfinite(pos)):
            raise ValueError("keypoint descriptor must be a finite 1-d sequence")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "descriptor", desc)


class KeypointSet(Sequence):
    """The keypoints of one subject, held as three read-only arrays."""

    def __init__(self, positions, scales, descriptors, d_kp: int | None = None):
        positions = np.array(positions, dtype=np.float64, ndmin=2, copy=True)
        scales = np.array(scales, dtype=np.float64, ndmin=1, copy=True)
        descriptors = np.array(descriptors, dtype=np.float64, ndmin=2, copy=True)
        n = scales.shape[0]
        if n == 0:
            dim = d_kp if d_kp is not None else (descriptors.shape[1] if descriptors.size else 0)
            positions = np.zeros((0, 3))
            descriptors = np.zeros((0, dim))
        if positions.shape != (n, 3) or descriptors.shape[0] != n:
            raise ValueError("inconsistent keypoint array shapes")
        if d_kp is not None and descriptors.shape[1] != d_kp:
            raise DimensionMismatchError(
                f"descriptor dimension {descriptors.shape[1]} != declared {d_kp}")
        if np.any(scales <= 0):
            raise ValueError("keypoint scales must be positive")
        for arr in (positions, scales, descriptors):
            if not np.all(np.isfinite(arr)):
                raise ValueError("keypoint values must be finite")
            arr.setflags(write=False)
        self.positions = positions
        self.scales = scales
        self.descriptors = np.ascontiguousarray(descriptors)
        self.descriptors.setflags(write=False)

    @classmethod
    def empty(cls, d_kp: int) -> "KeypointSet":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros((0, d_kp)), d_kp)

    @classmethod
    def from_keypoints(cls, kps: Sequence[Keypoint], d_kp: int) -> "KeypointSet":
        if not kps:
            return cls.empty(d_kp)
        return cls([k.position for k in kps], [k.scale for k in kps],
                   [k.descriptor for k in kps], d_kp)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    def __len__(self) -> int:
        return self.scales.shape[0]

    def __getitem__(self, i):
        if isinstance(i, slice):
            return KeypointSet(self.positions[i], self.scales[i], self.descriptors[i], self.dim)
        return Keypoint(self.positions[i], self.scales[i], self.descriptors[i])

    def __iter__(self) -> Iterator[Keypoint]:
        for i in range(len(self)):
            yield self[i]


@dataclass(frozen=True, eq=False)
class DeepVector:
    values: np.ndarray
    is_binary: bool = False

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64, copy=True)
        if vals.ndim != 1:
            raise ValueError("deep vector must be 1-d")
        if not np.all(np.isfinite(vals)):
            raise ValueError("deep vector entries must be finite")
        if self.is_binary and not np.all((vals == 0) | (vals == 1)):
            raise ValueError("binary deep vector entries must be 0 or 1")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return self.values.shape[0]

    @cached_property
    def packed(self) -> np.ndarray:
        """Bit-packed form (one bit per element) used for Hamming distances."""
        if not self.is_binary:
            raise ValueError("only binary vectors have a packed form")
        return np.packbits(self.values.astype(np.uint8))


@dataclass(frozen=True, eq=False)
class SubjectRecord:
    subject_id: str
    instance_label: str
    group_label: str
    keypoints: KeypointSet
    deep_vector: DeepVector | None = None

    def __post_init__(self):
        for name in ("subject_id", "instance_label", "group_label"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be non-empty")

    def label(self, kind: str) -> str:
        if kind == "subject":
            return self.subject_id
        if kind == "instance":
            return self.instance_label
        if kind == "group":
            return self.group_label
        raise ValueError(f"unknown label kind {kind!r}; expected one of {LABEL_KINDS}")


@dataclass(frozen=True, eq=False)
class Dataset:
    """An ordered, immutable collection of subjects.

    Subject order is the canonical order for every deterministic reduction
    downstream. Views produced by :func:`leave_subject_out` are themselves
    ``Dataset`` instances that share the underlying arrays.
    """

    subjects: tuple[SubjectRecord, ...]
    d_kp: int = DEFAULT_D_KP
    d_dv: int | None = None
    parent: "Dataset | None" = field(default=None, repr=False)

    def __post_init__(self):
        subjects = tuple(self.subjects)
        object.__setattr__(self, "subjects", subjects)
        seen = set()
        for s in subjects:
            if s.subject_id in seen:
                raise DataFormatError("duplicate subject_id", subject_id=s.subject_id)
            seen.add(s.subject_id)
            if len(s.keypoints) and s.keypoints.dim != self.d_kp:
                raise DimensionMismatchError(
                    f"subject {s.subject_id}: descriptor dimension {s.keypoints.dim} "
                    f"!= D_kp {self.d_kp}")
            if s.deep_vector is not None and self.d_dv is not None \
                    and len(s.deep_vector) != self.d_dv:
                raise DimensionMismatchError(
                    f"subject {s.subject_id}: deep vector dimension "
                    f"{len(s.deep_vector)} != D_dv {self.d_dv}")

    def __len__(self) -> int:
        return len(self.subjects)

    def __iter__(self) -> Iterator[SubjectRecord]:
        return iter(self.subjects)

    @cached_property
    def _position(self) -> dict[str, int]:
        return {s.subject_id: i for i, s in enumerate(self.subjects)}

    @property
    def subject_ids(self) -> list[str]:
        return [s.subject_id for s in self.subjects]

    def index_of(self, subject_id: str) -> int:
        try:
            return self._position[subject_id]
        except KeyError:
            raise KeyError(f"unknown subject_id {subject_id!r}") from None

    def __getitem__(self, subject_id: str) -> SubjectRecord:
        return self.subjects[self.index_of(subject_id)]

    def __contains__(self, subject_id) -> bool:
        return subject_id in self._position

    def labels(self, kind: str) -> list[str]:
        return [s.label(kind) for s in self.subjects]

    def class_labels(self, kind: str) -> list[str]:
        """Distinct labels of ``kind`` in first-appearance order."""
        return list(dict.fromkeys(self.labels(kind)))

    @property
    def n_keypoints(self) -> int:
        return sum(len(s.keypoints) for s in self.subjects)

    def keypoint_counts(self, kind: str = "instance") -> Counter:
        """N_{k,f}: number of keypoints per class label."""
        counts = Counter()
        for s in self.subjects:
            counts[s.label(kind)] += len(s.keypoints)
        return counts

    def vector_counts(self, kind: str = "instance") -> Counter:
        """N_{k,v}: number of deep vectors per class label."""
        counts = Counter()
        for s in self.subjects:
            if s.deep_vector is not None:
                counts[s.label(kind)] += 1
        return counts

    @cached_property
    def keypoint_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """All descriptors stacked in canonical order, plus the owning subject index."""
        parts = [s.keypoints.descriptors for s in self.subjects]
        owners = [np.full(len(s.keypoints), i, dtype=np.int64)
                  for i, s in enumerate(self.subjects)]
        if parts:
            desc = np.ascontiguousarray(np.concatenate(parts, axis=0))
            own = np.concatenate(owners)
        else:
            desc, own = np.zeros((0, self.d_kp)), np.zeros(0, dtype=np.int64)
        desc.setflags(write=False)
        own.setflags(write=False)
        return desc, own

    def require_deep(self) -> None:
        for s in self.subjects:
            if s.deep_vector is None:
                raise MissingModalityError(f"subject {s.subject_id} has no deep vector")

    def subset(self, subject_ids) -> "Dataset":
        keep = set(subject_ids)
        unknown = keep - set(self._position)
        if unknown:
            raise KeyError(f"unknown subject_id(s) {sorted(unknown)}")
        return Dataset(tuple(s for s in self.subjects if s.subject_id in keep),
                       self.d_kp, self.d_dv, parent=self)

    def replace_vectors(self, vectors: dict[str, DeepVector]) -> "Dataset":
        """Copy of the dataset with some deep vectors swapped out."""
        subs = []
        for s in self.subjects:
            if s.subject_id in vectors:
                s = SubjectRecord(s.subject_id, s.instance_label, s.group_label,
                                  s.keypoints, vectors[s.subject_id])
            subs.append(s)
        return Dataset(tuple(subs), self.d_kp, self.d_dv)


def leave_subject_out(ds: Dataset, subject_id: str) -> Dataset:
    """View of ``ds`` without ``subject_id``; ``ds`` itself is untouched."""
    if subject_id not in ds:
        raise KeyError(f"unknown subject_id {subject_id!r}")
    return Dataset(tuple(s for s in ds.subjects if s.subject_id != subject_id),
                   ds.d_kp, ds.d_dv, parent=ds)
