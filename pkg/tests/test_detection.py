"""Out-of-scope detection: scoring, threshold calibration, partitioning."""

import numpy as np
import pytest

from intentflow.centroid import fit
from intentflow.data import dataset_from_matrix
from intentflow.detection import (DetectionCalibration, calibrate, judge,
                                  partition, score, score_batch,
                                  write_score_dump)


@pytest.fixture()
def two_class_model():
    rng = np.random.default_rng(0)
    h = np.concatenate([rng.normal(size=(60, 3)) + [6, 0, 0],
                        rng.normal(size=(60, 3)) - [6, 0, 0]])
    y = np.array([0] * 60 + [1] * 60)
    return fit(h, y, epsilon=1e-6)


# ---------------------------------------------------------------------------
# scoring


def test_score_is_min_distance_over_classes(two_class_model):
    rng = np.random.default_rng(1)
    for _ in range(20):
        probe = rng.normal(size=3) * 4
        per_class = [two_class_model.mahalanobis(probe, c)
                     for c in two_class_model.classes]
        assert score(two_class_model, probe) == pytest.approx(min(per_class))


def test_score_rejects_batches(two_class_model):
    with pytest.raises(ValueError, match="single vector"):
        score(two_class_model, np.zeros((2, 3)))


def test_score_batch_matches_singles(two_class_model):
    rng = np.random.default_rng(2)
    probes = rng.normal(size=(15, 3)) * 3
    batch = score_batch(two_class_model, probes)
    assert batch.shape == (15,)
    for i, probe in enumerate(probes):
        assert batch[i] == pytest.approx(score(two_class_model, probe))


# ---------------------------------------------------------------------------
# calibration


def test_calibrate_hand_example():
    scores = np.arange(1.0, 11.0)  # 1..10
    cal = calibrate(scores, target_tpr=0.90)
    assert cal.lam == 2.0
    assert cal.achieved_tpr == pytest.approx(0.9)
    cal_all = calibrate(scores, target_tpr=1.0)
    assert cal_all.lam == 1.0
    assert cal_all.achieved_tpr == 1.0


def test_calibrate_is_largest_feasible_threshold():
    rng = np.random.default_rng(3)
    for _ in range(30):
        s = rng.normal(size=rng.integers(5, 60))
        target = float(rng.uniform(0.05, 1.0))
        cal = calibrate(s, target_tpr=target)
        assert np.mean(s >= cal.lam) >= target
        # every strictly larger candidate drawn from the data fails
        for cand in np.unique(s[s > cal.lam]):
            assert np.mean(s >= cand) < target


def test_calibrate_rejects_empty():
    with pytest.raises(ValueError, match="empty"):
        calibrate([], target_tpr=0.9)


def test_calibration_record_validation_and_json():
    with pytest.raises(ValueError, match="target_tpr"):
        DetectionCalibration(lam=1.0, target_tpr=0.0, calibrated_on="val",
                             achieved_tpr=1.0)
    with pytest.raises(ValueError, match="below target"):
        DetectionCalibration(lam=1.0, target_tpr=0.9, calibrated_on="val",
                             achieved_tpr=0.8)
    cal = DetectionCalibration(lam=2.5, target_tpr=0.9, calibrated_on="val",
                               achieved_tpr=0.95)
    obj = cal.to_json()
    assert obj == {"lambda": 2.5, "target_tpr": 0.9, "calibrated_on": "val",
                   "achieved_tpr": 0.95}
    assert DetectionCalibration.from_json(obj) == cal


def test_judge_boundary_counts_as_ood():
    assert judge(2.0, 2.0) == "OOD"
    assert judge(np.nextafter(2.0, -np.inf), 2.0) == "IND"
    assert judge(3.0, 2.0) == "OOD"
    assert judge(0.0, 2.0) == "IND"


# ---------------------------------------------------------------------------
# partitioning


def make_mixed_dataset(rng, n_near=30, n_far=20):
    near = rng.normal(size=(n_near, 3)) + np.where(
        rng.random(n_near)[:, None] < 0.5, [6, 0, 0], [-6, 0, 0])
    far = rng.normal(size=(n_far, 3)) + [0, 40, 0]
    mat = np.concatenate([near, far])
    labels = np.array([0] * n_near + [1] * n_far)  # placeholder labels
    return dataset_from_matrix(mat, labels, id_prefix="probe"), n_near


def test_partition_splits_by_judge_and_preserves_order(two_class_model):
    rng = np.random.default_rng(4)
    data, _ = make_mixed_dataset(rng)
    scores = score_batch(two_class_model, data.matrix())
    cal = calibrate(scores[-20:], target_tpr=0.95)
    ind, ood = partition(two_class_model, cal, data)
    judged = [judge(s, cal.lam) for s in scores]
    want_ind = [data.ids()[i] for i in range(len(data)) if judged[i] == "IND"]
    want_ood = [data.ids()[i] for i in range(len(data)) if judged[i] == "OOD"]
    assert ind.ids() == want_ind
    assert ood.ids() == want_ood
    assert len(ind) + len(ood) == len(data)


def test_partition_pseudo_labels_ind_and_strips_ood(two_class_model):
    rng = np.random.default_rng(5)
    data, _ = make_mixed_dataset(rng)
    scores = score_batch(two_class_model, data.matrix())
    cal = calibrate(scores[-20:], target_tpr=0.95)
    ind, ood = partition(two_class_model, cal, data)
    assert len(ind) > 0 and len(ood) > 0
    preds = two_class_model.classify_batch(ind.matrix())
    assert ind.labels().tolist() == preds.tolist()
    assert all(s.label is None for s in ood.samples)


def test_partition_keeps_raw_vectors(two_class_model):
    rng = np.random.default_rng(6)
    data, _ = make_mixed_dataset(rng)
    scores = score_batch(two_class_model, data.matrix())
    cal = calibrate(scores[-20:], target_tpr=0.95)
    ind, ood = partition(two_class_model, cal, data)
    by_id = {s.id: s.vector() for s in data.samples}
    for side in (ind, ood):
        for s in side.samples:
            assert np.array_equal(s.vector(), by_id[s.id])


def test_partition_applies_transform_for_scoring_only(two_class_model):
    rng = np.random.default_rng(7)
    data, _ = make_mixed_dataset(rng)
    # stored vectors have their columns rolled; the transform rolls them
    # back (exact in floating point, unlike an additive shift)
    rolled = dataset_from_matrix(np.roll(data.matrix(), 1, axis=1),
                                 data.labels(), id_prefix="probe")
    scores = score_batch(two_class_model, data.matrix())
    cal = calibrate(scores[-20:], target_tpr=0.95)
    ind1, ood1 = partition(two_class_model, cal, rolled,
                           transform=lambda m: np.roll(m, -1, axis=1))
    base_ind, base_ood = partition(two_class_model, cal, data)
    assert len(base_ind) > 0 and len(base_ood) > 0
    assert ind1.ids() == base_ind.ids()
    assert ood1.ids() == base_ood.ids()
    # stored vectors stay in the rolled space
    pos = {i: j for j, i in enumerate(data.ids())}
    assert np.array_equal(
        ind1.matrix(),
        np.roll(data.matrix(), 1, axis=1)[[pos[i] for i in ind1.ids()]])


def test_partition_empty_input(two_class_model):
    data = dataset_from_matrix(np.zeros((0, 3)))
    cal = DetectionCalibration(lam=1.0, target_tpr=0.9, calibrated_on="val",
                               achieved_tpr=1.0)
    ind, ood = partition(two_class_model, cal, data)
    assert len(ind) == 0 and len(ood) == 0


# ---------------------------------------------------------------------------
# score dump


def test_write_score_dump_format(tmp_path):
    path = tmp_path / "scores.csv"
    write_score_dump(path, ["a", "b"], [1.5, 0.123456789012345],
                     ["OOD", "IND"], true_is_ood=[True, False])
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines == ["id,true_is_ood,score,judged",
                     "a,1,1.5,OOD",
                     "b,0,0.123456789012,IND"]


def test_write_score_dump_without_gold(tmp_path):
    path = tmp_path / "scores.csv"
    write_score_dump(path, ["x"], [2.0], ["OOD"])
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines == ["id,true_is_ood,score,judged", "x,,2,OOD"]
