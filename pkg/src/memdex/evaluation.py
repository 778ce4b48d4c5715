"""Score fusion, the all-pairs protocols, ROC/AUC and the alpha sweep.

Two protocols are supported:

``family``
    Every subject is its own candidate class with a single exemplar. Each
    ordered pair (q, s), q != s, gets the shallow and deep log-likelihood of
    q's features under class "s", with q's own features excluded from the
    training side. Pairs are labelled positive when both subjects share an
    instance (family) label; directed scores are averaged per unordered pair.

``group``
    Leave-one-subject-out: each subject is scored against every group label
    with all other subjects as training.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from memdex.binarize import ThresholdTable, apply_thresholds, fit_thresholds
from memdex.deep import DeepScoreConfig, DeepTraining, batch_deep_scores
from memdex.index import ApproxParams, DescriptorIndex, build_index, default_threads
from memdex.model import Dataset, DeepVector, MemdexError, SubjectRecord
from memdex.shallow import ShallowScoreConfig, batch_shallow_scores

MODES = ("shallow", "deep", "fused")
PROTOCOLS = ("family", "group")
DEFAULT_ALPHA = 0.5


class ProtocolError(MemdexError):
    pass


@dataclass(frozen=True)
class FusionParams:
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


def fuse(shallow, deep, p: FusionParams = FusionParams()):
    """alpha * shallow + (1 - alpha) * deep; works elementwise on arrays."""
    if not (np.all(np.isfinite(shallow)) and np.all(np.isfinite(deep))):
        raise ValueError("fusion inputs must be finite")
    return p.alpha * shallow + (1.0 - p.alpha) * deep


@dataclass(frozen=True)
class ScoringConfig:
    """Everything that controls how a score matrix is produced."""

    shallow: ShallowScoreConfig = field(default_factory=ShallowScoreConfig)
    deep: DeepScoreConfig = field(default_factory=DeepScoreConfig)
    index_mode: str = "approximate"
    approx_params: ApproxParams = field(default_factory=ApproxParams)
    binarize: bool = False
    # "auto": disjoint calibration families for the family protocol,
    # per-query refit (leave-one-subject-out) for the group protocol
    fold_policy: str = "auto"
    calibration_fraction: float = 0.25
    seed: int = 0
    thresholds: ThresholdTable | None = None
    threads: int | None = None

    def __post_init__(self):
        if self.fold_policy not in ("auto", "loo", "calibration"):
            raise ValueError(f"unknown fold_policy {self.fold_policy!r}")
        if not 0.0 < self.calibration_fraction < 1.0:
            raise ValueError("calibration_fraction must lie in (0, 1)")


@dataclass(eq=False)
class ScoreMatrix:
    """Directed scores: rows are queries, columns are candidate classes.

    Entries of a modality that was not computed are NaN. ``fused`` optionally
    carries a fused column read back from a file; it is used for the fused
    mode when no alpha is given.
    """

    subject_ids: list[str]
    candidate_ids: list[str]
    shallow: np.ndarray
    deep: np.ndarray
    valid_mask: np.ndarray
    protocol: str = "family"
    fused: np.ndarray | None = None

    def __post_init__(self):
        shape = (len(self.subject_ids), len(self.candidate_ids))
        for name in ("shallow", "deep", "valid_mask", "fused"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def has_shallow(self) -> bool:
        return bool(np.any(np.isfinite(self.shallow[self.valid_mask])))

    @property
    def has_deep(self) -> bool:
        return bool(np.any(np.isfinite(self.deep[self.valid_mask])))

    def values(self, mode: str, p: FusionParams | None = None) -> np.ndarray:
        """Matrix for one mode; invalid cells are NaN."""
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "fused" and p is None and self.fused is not None:
            out = np.full(self.shallow.shape, np.nan)
            out[self.valid_mask] = self.fused[self.valid_mask]
            return out
        if mode in ("shallow", "fused") and not self.has_shallow:
            raise ProtocolError("score matrix has no shallow scores")
        if mode in ("deep", "fused") and not self.has_deep:
            raise ProtocolError("score matrix has no deep scores")
        out = np.full(self.shallow.shape, np.nan)
        v = self.valid_mask
        if mode == "shallow":
            out[v] = self.shallow[v]
        elif mode == "deep":
            out[v] = self.deep[v]
        else:
            out[v] = fuse(self.shallow[v], self.deep[v], p or FusionParams())
        return out


@dataclass(eq=False)
class RocCurve:
    points: np.ndarray
    thresholds: np.ndarray
    auc: float
    positives: int
    negatives: int

    @property
    def fpr(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def tpr(self) -> np.ndarray:
        return self.points[:, 1]


def roc_auc(scores: Sequence[float], labels: Sequence) -> RocCurve:
    """ROC by a descending threshold sweep, tied scores forming one step.

    The area is accumulated in integer arithmetic, so it equals the
    Mann-Whitney statistic (ties counted one half) exactly.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-d and equally long")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    n_pos = int(y.sum())
    n_neg = int(y.shape[0] - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ProtocolError("ROC needs at least one positive and one negative")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    last_of_run = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    tp = np.cumsum(y_sorted)[last_of_run]
    fp = np.cumsum(~y_sorted)[last_of_run]
    tp = np.r_[0, tp].astype(np.int64)
    fp = np.r_[0, fp].astype(np.int64)
    twice_area = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    auc = twice_area / (2 * n_pos * n_neg)
    points = np.column_stack([fp / n_neg, tp / n_pos])
    thresholds = np.r_[np.inf, s_sorted[last_of_run]]
    return RocCurve(points, thresholds, auc, n_pos, n_neg)


# -- all-pairs scoring ---------------------------------------------------------

def _split_calibration(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    families = sorted(set(ds.labels("instance")))
    rng = np.random.default_rng(seed)
    n_cal = max(1, int(math.ceil(fraction * len(families))))
    if n_cal >= len(families):
        raise ProtocolError("calibration split leaves no families to evaluate")
    cal = {families[i] for i in rng.permutation(len(families))[:n_cal]}
    cal_ids = [s.subject_id for s in ds if s.instance_label in cal]
    eval_ids = [s.subject_id for s in ds if s.instance_label not in cal]
    return ds.subset(cal_ids), ds.subset(eval_ids)


def _binarized_training(ds: Dataset, table: ThresholdTable) -> Dataset:
    return ds.replace_vectors({s.subject_id: apply_thresholds(s.deep_vector, table)
                               for s in ds})


def _fit_on(ds: Dataset, label: str) -> ThresholdTable:
    return fit_thresholds([s.deep_vector for s in ds], ds.labels(label))


def _map_rows(fn, items, threads):
    threads = default_threads() if threads is None else threads
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def all_pairs_scores(ds: Dataset, cfgs: ScoringConfig = ScoringConfig(),
                     p: FusionParams | None = None, protocol: str = "family",
                     mode: str = "fused", index: DescriptorIndex | None = None) -> ScoreMatrix:
    """Directed score matrix for ``protocol``.

    ``p`` is accepted for interface symmetry; fusion is applied at evaluation
    time so one matrix serves every alpha. ``index`` is a prebuilt keypoint
    index over exactly the scored subjects, in dataset order.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    need_shallow = mode in ("shallow", "fused")
    need_deep = mode in ("deep", "fused")
    if need_deep:
        ds.require_deep()

    label = "instance" if protocol == "family" else "group"
    policy = cfgs.fold_policy
    if policy == "auto":
        policy = "calibration" if protocol == "family" else "loo"

    per_query_fit = False
    if need_deep and cfgs.binarize:
        if cfgs.thresholds is not None:
            ds = _binarized_training(ds, cfgs.thresholds)
        elif policy == "calibration":
            cal, ds = _split_calibration(ds, cfgs.calibration_fraction, cfgs.seed)
            ds = _binarized_training(ds, _fit_on(cal, label))
        else:
            per_query_fit = True

    ids = ds.subject_ids
    if protocol == "family":
        candidates = list(ids)
        class_label = "subject"
        valid = ~np.eye(len(ids), dtype=bool)
    else:
        candidates = sorted(set(ds.labels("group")))
        class_label = "group"
        valid = np.ones((len(ids), len(candidates)), dtype=bool)

    shallow = np.full(valid.shape, np.nan)
    deep = np.full(valid.shape, np.nan)
    idx = None
    if need_shallow and index is not None:
        if index.which != "keypoints" or [o[0] for o in index.owners] != list(ids):
            raise ProtocolError("prebuilt index does not cover exactly the scored subjects")
        if index.dim != ds.d_kp:
            raise ProtocolError(f"index dimension {index.dim} != dataset D_kp {ds.d_kp}")
        idx = index
    elif need_shallow and ds.n_keypoints:
        idx = build_index(ds, "keypoints", cfgs.index_mode, cfgs.approx_params)
    training = DeepTraining.from_dataset(ds) if need_deep and not per_query_fit else None

    def score_row(q: SubjectRecord):
        row_s = np.zeros(len(candidates)) if need_shallow else None
        row_d = None
        if idx is not None:
            sc = batch_shallow_scores(q, idx, candidates, cfgs.shallow, class_label)
            row_s = np.array([sc[c] for c in candidates])
        if need_deep:
            tr, qv = training, q.deep_vector
            if per_query_fit:
                others = [s for s in ds if s.subject_id != q.subject_id]
                table = fit_thresholds([s.deep_vector for s in others],
                                       [s.label(label) for s in others])
                tr = DeepTraining.from_dataset(_binarized_training(ds, table))
                qv = _training_vector(tr, q.subject_id)
            sd = batch_deep_scores(qv, tr, candidates, cfgs.deep, class_label,
                                   query_subject=q.subject_id)
            row_d = np.array([sd[c] for c in candidates])
        return row_s, row_d

    rows = _map_rows(score_row, list(ds.subjects), cfgs.threads)
    for i, (rs, rd) in enumerate(rows):
        if rs is not None:
            shallow[i] = rs
        if rd is not None:
            deep[i] = rd
    shallow[~valid] = np.nan
    deep[~valid] = np.nan
    return ScoreMatrix(list(ids), candidates, shallow, deep, valid, protocol)


def _training_vector(tr: DeepTraining, subject_id: str) -> DeepVector:
    row = tr.subject_ids.index(subject_id)
    return DeepVector(tr.values[row], is_binary=tr.is_binary)


# -- evaluation ------------------------------------------------------------------

def family_pairs(sm: ScoreMatrix, ds: Dataset, mode: str = "fused",
                 p: FusionParams | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Symmetrized score and same-family label for every unordered pair."""
    if sm.protocol != "family":
        raise ProtocolError("family evaluation needs a family-protocol score matrix")
    vals = sm.values(mode, p)
    fam = np.array([ds[sid].instance_label for sid in sm.subject_ids], dtype=object)
    col = {c: j for j, c in enumerate(sm.candidate_ids)}
    cols = np.array([col[sid] for sid in sm.subject_ids])
    sub = vals[:, cols]
    iu, ju = np.triu_indices(len(sm.subject_ids), k=1)
    scores = (sub[iu, ju] + sub[ju, iu]) / 2.0
    labels = fam[iu] == fam[ju]
    return scores, labels.astype(bool)


def family_roc(sm: ScoreMatrix, ds: Dataset, mode: str = "fused",
               p: FusionParams | None = None) -> RocCurve:
    scores, labels = family_pairs(sm, ds, mode, p)
    if not labels.any():
        raise ProtocolError("no positive pairs: every family has a single member")
    return roc_auc(scores, labels)


def group_scores(sm: ScoreMatrix, ds: Dataset, mode: str = "fused",
                 p: FusionParams | None = None) -> tuple[np.ndarray, np.ndarray, str]:
    """Per-subject score difference (positive group minus the other) and labels.

    The positive group is the lexicographically first label.
    """
    if sm.protocol != "group":
        raise ProtocolError("group evaluation needs a group-protocol score matrix")
    groups = sorted(set(ds.labels("group")))
    if len(groups) != 2 or sorted(sm.candidate_ids) != groups:
        raise ProtocolError(f"group ROC needs exactly two group labels, got {groups}")
    vals = sm.values(mode, p)
    pos, neg = sm.candidate_ids.index(groups[0]), sm.candidate_ids.index(groups[1])
    scores = vals[:, pos] - vals[:, neg]
    labels = np.array([ds[sid].group_label == groups[0] for sid in sm.subject_ids])
    return scores, labels, groups[0]


def group_roc(sm: ScoreMatrix, ds: Dataset, mode: str = "fused",
              p: FusionParams | None = None) -> RocCurve:
    scores, labels, _ = group_scores(sm, ds, mode, p)
    return roc_auc(scores, labels)


def evaluate(sm: ScoreMatrix, ds: Dataset, mode: str = "fused",
             p: FusionParams | None = None) -> RocCurve:
    return (family_roc if sm.protocol == "family" else group_roc)(sm, ds, mode, p)


def alpha_grid(grid_step: float) -> list[float]:
    n = round(1.0 / grid_step)
    if grid_step <= 0 or n < 1 or abs(n * grid_step - 1.0) > 1e-9:
        raise ValueError(f"grid_step {grid_step} does not divide 1 evenly")
    return [i / n for i in range(n + 1)]


@dataclass
class AlphaSweep:
    points: list[tuple[float, float]]
    best_alpha: float
    best_auc: float

    def __iter__(self):
        return iter(self.points)

    def auc_at(self, alpha: float) -> float:
        return dict(self.points)[alpha]


def alpha_sweep(ds: Dataset, cfgs: ScoringConfig = ScoringConfig(), grid_step: float = 0.1,
                protocol: str = "family", sm: ScoreMatrix | None = None) -> AlphaSweep:
    """AUC at every alpha on an even grid; best alpha ties go to the smaller value."""
    grid = alpha_grid(grid_step)
    if sm is None:
        sm = all_pairs_scores(ds, cfgs, protocol=protocol, mode="fused")
    if sm.protocol == "family":
        # binarized calibration folds score a subset; evaluate on that subset
        ds = ds.subset(sm.subject_ids) if len(sm.subject_ids) != len(ds) else ds
    points = []
    for a in grid:
        points.append((a, evaluate(sm, ds, "fused", FusionParams(a)).auc))
    best_alpha, best_auc = points[0]
    for a, auc in points[1:]:
        if auc > best_auc:
            best_alpha, best_auc = a, auc
    return AlphaSweep(points, best_alpha, best_auc)


def independence_diagnostic(sm: ScoreMatrix) -> float:
    """Pearson correlation between shallow and deep scores over valid cells."""
    cells = sm.valid_mask & np.isfinite(sm.shallow) & np.isfinite(sm.deep)
    if cells.sum() < 3:
        raise ProtocolError("need at least 3 cells carrying both modalities")
    x, y = sm.shallow[cells], sm.deep[cells]
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ProtocolError("zero variance in one modality; correlation undefined")
    xc, yc = x - x.mean(), y - y.mean()
    return float(np.dot(xc, yc) / math.sqrt(np.dot(xc, xc) * np.dot(yc, yc)))
