import numpy as np
import pytest

from conftest import make_subject, random_dataset
from memdex.model import (
    DataFormatError,
    Dataset,
    DeepVector,
    DimensionMismatchError,
    Keypoint,
    KeypointSet,
    MissingModalityError,
    SubjectRecord,
    leave_subject_out,
)


def test_keypoint_rejects_bad_scale_and_values():
    with pytest.raises(ValueError):
        Keypoint([0, 0, 0], 0.0, [1.0, 2.0])
    with pytest.raises(ValueError):
        Keypoint([0, 0, 0], 1.0, [1.0, np.nan])
    with pytest.raises(ValueError):
        Keypoint([0, 0], 1.0, [1.0])


def test_keypoint_set_is_read_only_and_iterable():
    kps = KeypointSet(np.zeros((2, 3)), [1.0, 2.0], [[1, 2], [3, 4]], 2)
    assert len(kps) == 2 and kps.dim == 2
    with pytest.raises(ValueError):
        kps.descriptors[0, 0] = 9.0
    assert [k.scale for k in kps] == [1.0, 2.0]
    again = KeypointSet.from_keypoints(list(kps), 2)
    np.testing.assert_array_equal(again.descriptors, kps.descriptors)
    assert len(KeypointSet.empty(5)) == 0 and KeypointSet.empty(5).dim == 5


def test_keypoint_set_dimension_checked():
    with pytest.raises(DimensionMismatchError):
        KeypointSet(np.zeros((1, 3)), [1.0], [[1, 2, 3]], 2)


def test_deep_vector_binary_invariant():
    DeepVector([0, 1, 1], is_binary=True)
    with pytest.raises(ValueError):
        DeepVector([0, 0.5], is_binary=True)
    with pytest.raises(ValueError):
        DeepVector([np.inf])
    with pytest.raises(ValueError):
        DeepVector([0.2, 0.3]).packed


def test_subject_labels_non_empty():
    with pytest.raises(ValueError):
        SubjectRecord("S1", "", "A", KeypointSet.empty(4))
    s = SubjectRecord("S1", "F1", "A", KeypointSet.empty(4))
    assert (s.label("subject"), s.label("instance"), s.label("group")) == ("S1", "F1", "A")
    with pytest.raises(ValueError):
        s.label("colour")


def test_dataset_rejects_duplicates_and_mismatched_dims(rng):
    a = make_subject("S01", "F", "A", rng.normal(size=(2, 4)))
    with pytest.raises(DataFormatError, match="duplicate"):
        Dataset((a, a), 4)
    with pytest.raises(DimensionMismatchError):
        Dataset((a,), 5)
    b = make_subject("S02", "F", "A", rng.normal(size=(2, 4)), vec=np.zeros(3))
    with pytest.raises(DimensionMismatchError):
        Dataset((b,), 4, 4)


def test_class_counts_match_recount(rng):
    ds = random_dataset(rng, 9, 5, 4, n_classes=3, d_dv=3)
    kp = ds.keypoint_counts("instance")
    for label in ds.class_labels("instance"):
        assert kp[label] == sum(len(s.keypoints) for s in ds if s.instance_label == label)
    assert sum(ds.vector_counts("group").values()) == 9
    desc, owner = ds.keypoint_matrix
    assert desc.shape == (45, 4) and np.all(np.diff(owner) >= 0)


def test_leave_subject_out_counts_and_immutability(rng):
    ds = random_dataset(rng, 3, 4, 2, n_classes=3)
    view = leave_subject_out(ds, "S00")
    assert view.subject_ids == ["S01", "S02"]
    assert len(ds) == 3
    assert view.n_keypoints == ds.n_keypoints - len(ds["S00"].keypoints)
    # S00 was the only member of class C0
    assert view.keypoint_counts("instance")["C0"] == 0
    other = leave_subject_out(ds, "S01")
    assert view.subject_ids != other.subject_ids
    with pytest.raises(KeyError):
        leave_subject_out(ds, "nope")


def test_require_deep_names_subject(rng):
    ds = random_dataset(rng, 2, 1, 2)
    with pytest.raises(MissingModalityError, match="S00"):
        ds.require_deep()


def test_subset_keeps_canonical_order(rng):
    ds = random_dataset(rng, 5, 1, 2)
    assert ds.subset(["S03", "S01"]).subject_ids == ["S01", "S03"]
