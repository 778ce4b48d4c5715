"""memdex: keypoint and deep-vector likelihood fusion for subject similarity search."""

from memdex._backend import BACKEND
from memdex.binarize import ThresholdTable, apply_thresholds, binarize_vectors, fit_thresholds
from memdex.deep import DeepScoreConfig, DeepTraining, batch_deep_scores, deep_log_likelihood
from memdex.evaluation import (
    AlphaSweep,
    FusionParams,
    ProtocolError,
    RocCurve,
    ScoreMatrix,
    ScoringConfig,
    all_pairs_scores,
    alpha_sweep,
    evaluate,
    family_roc,
    fuse,
    group_roc,
    independence_diagnostic,
    roc_auc,
)
from memdex.index import (
    ApproxParams,
    DescriptorIndex,
    EmptyIndexError,
    build_index,
    knn,
    load_index,
    range_kernel_sums,
    save_index,
)
from memdex.model import (
    Dataset,
    DataFormatError,
    DeepVector,
    DimensionMismatchError,
    Keypoint,
    KeypointSet,
    MemdexError,
    MissingEvidenceError,
    MissingModalityError,
    SubjectRecord,
    leave_subject_out,
)
from memdex.shallow import ShallowScoreConfig, batch_shallow_scores, keypoint_log_likelihood
from memdex.synth import SynthConfig, generate_synthetic

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
