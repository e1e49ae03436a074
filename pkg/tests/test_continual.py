"""Replay-set assembly, contrastive retraining, final-split evaluation."""

from dataclasses import replace

import numpy as np
import pytest

from intentflow.centroid import fit
from intentflow.continual import (PSEUDO_IND, PSEUDO_OOD, ReplaySet,
                                  build_replay_set, evaluate_continual,
                                  map_discovered_predictions, retrain)
from intentflow.data import LabelCatalog, dataset_from_matrix
from intentflow.encoder import ProjectionEncoder
from intentflow.metrics import micro_macro_f1
from intentflow.scl import SclConfig

from test_scl import tiny_training_setup


def labeled_dataset(rng, labels, catalog, prefix, dim=4, names=None):
    labels = np.asarray(labels)
    mat = rng.normal(size=(labels.size, dim))
    ds = dataset_from_matrix(mat, labels, id_prefix=prefix)
    return replace(ds, catalog=catalog, label_names=dict(names or {}))


@pytest.fixture()
def replay_catalog():
    return LabelCatalog(known=(0, 1), unknown=(5,), discovered=(6, 7))


# ---------------------------------------------------------------------------
# replay assembly


def test_build_replay_set_concatenates_with_provenance(replay_catalog):
    rng = np.random.default_rng(0)
    ind = labeled_dataset(rng, [0, 1, 0], replay_catalog, "ind",
                          names={0: "billing", 1: "refund"})
    ood = labeled_dataset(rng, [6, 7], replay_catalog, "dis",
                          names={6: "6", 7: "7"})
    replay = build_replay_set(ind, ood, replay_catalog)
    assert len(replay) == 5
    assert replay.data.ids() == ind.ids() + ood.ids()
    assert replay.provenance == (PSEUDO_IND,) * 3 + (PSEUDO_OOD,) * 2
    assert replay.tag_counts() == {PSEUDO_IND: 3, PSEUDO_OOD: 2}
    assert replay.data.catalog == replay_catalog
    assert replay.data.label_names == {0: "billing", 1: "refund",
                                       6: "6", 7: "7"}


def test_build_replay_set_rejects_id_overlap(replay_catalog):
    rng = np.random.default_rng(1)
    ind = labeled_dataset(rng, [0, 1], replay_catalog, "same")
    ood = labeled_dataset(rng, [6, 7], replay_catalog, "same")
    with pytest.raises(ValueError, match="both replay sides"):
        build_replay_set(ind, ood, replay_catalog)


def test_build_replay_set_rejects_dim_mismatch(replay_catalog):
    rng = np.random.default_rng(2)
    ind = labeled_dataset(rng, [0, 1], replay_catalog, "ind", dim=4)
    ood = labeled_dataset(rng, [6], replay_catalog, "dis", dim=5)
    with pytest.raises(ValueError, match="mismatched dimensions"):
        build_replay_set(ind, ood, replay_catalog)


def test_replay_set_validates_tags_and_label_sides(replay_catalog):
    rng = np.random.default_rng(3)
    ind = labeled_dataset(rng, [0, 1], replay_catalog, "ind")
    ood = labeled_dataset(rng, [6], replay_catalog, "dis")
    good = build_replay_set(ind, ood, replay_catalog)
    with pytest.raises(ValueError, match="one provenance tag"):
        ReplaySet(data=good.data, provenance=(PSEUDO_IND,))
    with pytest.raises(ValueError, match="unknown provenance"):
        ReplaySet(data=good.data,
                  provenance=(PSEUDO_IND, PSEUDO_IND, "gold"))
    # a pseudo-IND sample must not carry a discovered label, and vice versa
    with pytest.raises(ValueError, match="outside known"):
        ReplaySet(data=good.data,
                  provenance=(PSEUDO_IND, PSEUDO_IND, PSEUDO_IND))
    with pytest.raises(ValueError, match="outside discovered"):
        ReplaySet(data=good.data,
                  provenance=(PSEUDO_OOD, PSEUDO_IND, PSEUDO_OOD))


# ---------------------------------------------------------------------------
# retraining


def continual_setup(seed=0):
    """Pretraining-shaped data recast as a replay pool with one minted class."""
    train, val, catalog = tiny_training_setup(seed=seed)
    minted = max(catalog.known + catalog.unknown) + 1  # 4
    grown = LabelCatalog(known=catalog.known, unknown=catalog.unknown,
                         discovered=(minted,))
    rng = np.random.default_rng(seed + 100)
    # discovered side: a fresh cluster far from the known ones
    dis = labeled_dataset(rng, [minted] * 18, grown, "dis", dim=train.dim)
    mat = dis.matrix() + 12.0
    dis = replace(dataset_from_matrix(mat, [minted] * 18, id_prefix="dis"),
                  catalog=grown)
    ind = replace(train, catalog=grown)
    replay = build_replay_set(ind, dis, grown)
    return replay, replace(val, catalog=grown), grown


def test_retrain_expands_the_label_space():
    replay, val, grown = continual_setup()
    enc = ProjectionEncoder.create(input_dim=replay.data.dim, seed=1)
    cfg = SclConfig(max_epochs=3, batch_size=24, seed=5)
    best_enc, model, history, cal = retrain(enc, replay, val, cfg)
    assert model.classes == (0, 1, 2, 4)
    assert len(history) == 3
    assert sum(1 for r in history if r.is_best) == 1
    assert cal.lam > 0.0
    # warm start: the input encoder is untouched
    fresh = ProjectionEncoder.create(input_dim=replay.data.dim, seed=1)
    assert np.array_equal(enc.layers[0][0], fresh.layers[0][0])


def test_retrain_skips_absent_classes():
    replay, val, grown = continual_setup()
    keep = [i for i, s in enumerate(replay.data.samples) if s.label != 2]
    thinned = ReplaySet(
        data=replay.data.subset(keep),
        provenance=tuple(replay.provenance[i] for i in keep))
    enc = ProjectionEncoder.create(input_dim=replay.data.dim, seed=1)
    cfg = SclConfig(max_epochs=2, batch_size=24, seed=5)
    _, model, _, _ = retrain(enc, thinned, val, cfg)
    assert model.classes == (0, 1, 4)


def test_retrain_rejects_degenerate_pools():
    replay, val, _ = continual_setup()
    enc = ProjectionEncoder.create(input_dim=replay.data.dim, seed=1)
    cfg = SclConfig(max_epochs=2, batch_size=24, seed=5)
    with pytest.raises(ValueError, match="empty"):
        retrain(enc, ReplaySet(data=replay.data.subset([]), provenance=()),
                val, cfg)
    only_zero = [i for i, s in enumerate(replay.data.samples)
                 if s.label == 0]
    single = ReplaySet(data=replay.data.subset(only_zero),
                       provenance=tuple(replay.provenance[i]
                                        for i in only_zero))
    with pytest.raises(ValueError, match="two classes"):
        retrain(enc, single, val, cfg)


def test_retrain_is_deterministic():
    replay, val, _ = continual_setup()
    cfg = SclConfig(max_epochs=3, batch_size=24, seed=5)
    outs = []
    for _ in range(2):
        enc = ProjectionEncoder.create(input_dim=replay.data.dim, seed=1)
        best_enc, model, history, cal = retrain(enc, replay, val, cfg)
        outs.append((best_enc, model, [r.train_loss for r in history], cal.lam))
    assert outs[0][2] == outs[1][2]
    assert outs[0][3] == outs[1][3]
    for (w0, b0), (w1, b1) in zip(outs[0][0].layers, outs[1][0].layers):
        assert np.array_equal(w0, w1)
        assert np.array_equal(b0, b1)
    assert np.array_equal(outs[0][1].centroids, outs[1][1].centroids)


# ---------------------------------------------------------------------------
# prediction mapping


def test_map_discovered_predictions_translates_only_discovered():
    catalog = LabelCatalog(known=(0, 1, 2), unknown=(3,), discovered=(4, 5))
    mapping = {4: 3}
    preds = [0, 4, 5, 2, 4]
    out = map_discovered_predictions(preds, catalog, mapping)
    assert out.tolist() == [0, 3, 5, 2, 3]
    assert out.dtype == np.int64
    # ids outside the discovered set never consult the mapping
    out2 = map_discovered_predictions([2], catalog, {2: 9})
    assert out2.tolist() == [2]


# ---------------------------------------------------------------------------
# final evaluation


class IdentityEncoder:
    @staticmethod
    def encode(mat):
        return np.asarray(mat, dtype=np.float64)


def eval_setup():
    catalog = LabelCatalog(known=(0, 1), unknown=(2,), discovered=(3,))
    centers = {0: [0.0, 0.0], 1: [10.0, 0.0], 3: [0.0, 10.0]}
    fit_mat, fit_labels = [], []
    rng = np.random.default_rng(4)
    for c, mu in centers.items():
        fit_mat.append(rng.normal(size=(12, 2)) * 0.2 + mu)
        fit_labels.extend([c] * 12)
    model = fit(np.concatenate(fit_mat), fit_labels, epsilon=1e-6)
    gold = [0, 0, 1, 1, 2, 2]
    test_mat = np.array([centers[0], centers[0], centers[1], centers[1],
                         centers[3], centers[3]])
    test2 = replace(dataset_from_matrix(test_mat, gold, id_prefix="t2"),
                    catalog=catalog)
    return model, test2, catalog


def test_evaluate_continual_perfect_predictions():
    model, test2, catalog = eval_setup()
    out = evaluate_continual(IdentityEncoder(), model, test2, catalog,
                             mapping={3: 2})
    for name in ("overall", "on_ind", "on_ood"):
        assert out[name].micro_f1 == 1.0
        assert out[name].macro_f1 == 1.0


def test_evaluate_continual_unmatched_cluster_scores_as_error():
    model, test2, catalog = eval_setup()
    out = evaluate_continual(IdentityEncoder(), model, test2, catalog,
                             mapping={})
    # the OOD slice is predicted as the minted id 3, never the gold 2
    assert out["on_ood"].micro_f1 == 0.0
    assert out["on_ind"].micro_f1 == 1.0
    gold = test2.labels()
    preds = np.array([0, 0, 1, 1, 3, 3])
    micro, macro = micro_macro_f1(gold, preds)
    assert out["overall"].micro_f1 == pytest.approx(micro)
    assert out["overall"].macro_f1 == pytest.approx(macro)


def test_evaluate_continual_slices_partition_by_gold():
    model, test2, catalog = eval_setup()
    out = evaluate_continual(IdentityEncoder(), model, test2, catalog,
                             mapping={3: 2})
    gold = test2.labels()
    is_ind = np.isin(gold, list(catalog.known))
    preds = gold  # perfect setup
    mi_ind, ma_ind = micro_macro_f1(gold[is_ind], preds[is_ind])
    mi_ood, ma_ood = micro_macro_f1(gold[~is_ind], preds[~is_ind])
    assert out["on_ind"].micro_f1 == pytest.approx(mi_ind)
    assert out["on_ood"].macro_f1 == pytest.approx(ma_ood)


def test_evaluate_continual_empty_slice_and_empty_split():
    model, test2, catalog = eval_setup()
    ind_only = test2.subset([0, 1, 2, 3])
    out = evaluate_continual(IdentityEncoder(), model, ind_only, catalog,
                             mapping={3: 2})
    assert out["on_ood"].micro_f1 is None and out["on_ood"].macro_f1 is None
    assert out["on_ind"].micro_f1 == 1.0
    with pytest.raises(ValueError, match="empty"):
        evaluate_continual(IdentityEncoder(), model, test2.subset([]),
                           catalog, mapping={})
