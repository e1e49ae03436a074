"""Dataset containers, interchange formats, splits, and the generator."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from intentflow.data import (Dataset, LabelCatalog, Sample, dataset_from_matrix,
                             generate_synthetic, load_embedding_matrix,
                             load_jsonl, load_labels, make_splits, save_jsonl,
                             save_embedding_matrix, save_labels,
                             segment_intents, write_split_manifest)


def make_dataset(n=6, dim=3, n_classes=2, seed=0):
    rng = np.random.default_rng(seed)
    samples = tuple(
        Sample(id=f"s{i}", embedding=rng.normal(size=dim).astype(np.float32),
               label=i % n_classes, text=f"utterance {i}")
        for i in range(n))
    return Dataset(samples=samples, dim=dim,
                   catalog=LabelCatalog(known=tuple(range(n_classes))))


# ---------------------------------------------------------------------------
# containers


def test_sample_requires_exactly_one_embedding_kind():
    with pytest.raises(ValueError, match="exactly one"):
        Sample(id="x")
    with pytest.raises(ValueError, match="exactly one"):
        Sample(id="x", embedding=np.ones(2), token_embeddings=np.ones((2, 2)))


def test_sample_token_mean_pooling():
    s = Sample(id="x", token_embeddings=np.array([[1.0, 3.0], [3.0, 5.0]]))
    assert np.allclose(s.vector(), [2.0, 4.0])
    assert s.dim == 2


def test_catalog_disjointness_and_discovered_ordering():
    with pytest.raises(ValueError, match="disjoint"):
        LabelCatalog(known=(0, 1), unknown=(1, 2))
    with pytest.raises(ValueError, match="exceed"):
        LabelCatalog(known=(0, 5), unknown=(1,), discovered=(3,))
    cat = LabelCatalog(known=(0, 1), unknown=(2,), discovered=(3, 4))
    assert cat.all_ids() == {0, 1, 2, 3, 4}


def test_catalog_json_round_trip():
    cat = LabelCatalog(known=(0, 2), unknown=(1,), discovered=(7,))
    assert LabelCatalog.from_json(cat.to_json()) == cat


def test_dataset_rejects_duplicate_ids_and_dim_mismatch():
    a = Sample(id="a", embedding=np.zeros(2), label=0)
    with pytest.raises(ValueError, match="duplicate"):
        Dataset(samples=(a, a), dim=2, catalog=LabelCatalog(known=(0,)))
    b = Sample(id="b", embedding=np.zeros(3), label=0)
    with pytest.raises(ValueError, match="dimension"):
        Dataset(samples=(a, b), dim=2, catalog=LabelCatalog(known=(0,)))


def test_dataset_matrix_is_float64_and_ordered():
    ds = make_dataset()
    mat = ds.matrix()
    assert mat.dtype == np.float64 and mat.shape == (6, 3)
    assert np.allclose(mat[2], ds.samples[2].embedding)


def test_with_labels_replaces_all_labels():
    ds = make_dataset(n=3)
    out = ds.with_labels([5, 6, 7])
    assert out.labels().tolist() == [5, 6, 7]
    with pytest.raises(ValueError, match="count"):
        ds.with_labels([1])


# ---------------------------------------------------------------------------
# jsonl round trip


def test_jsonl_round_trip_bit_exact(tmp_path):
    ds = make_dataset(n=10, dim=5)
    path = tmp_path / "data.jsonl"
    save_jsonl(ds, path)
    back = load_jsonl(path)
    assert back.ids() == ds.ids()
    assert back.labels().tolist() == ds.labels().tolist()
    for s1, s2 in zip(ds.samples, back.samples):
        assert np.array_equal(s1.embedding, s2.embedding)
        assert s1.text == s2.text


def test_jsonl_token_level_round_trip(tmp_path):
    s = Sample(id="t", token_embeddings=np.arange(6, dtype=np.float32).reshape(2, 3),
               label=0)
    ds = Dataset(samples=(s,), dim=3, catalog=LabelCatalog(known=(0,)),
                 label_names={0: "zero"})
    path = tmp_path / "tok.jsonl"
    save_jsonl(ds, path)
    back = load_jsonl(path)
    assert np.array_equal(back.samples[0].token_embeddings,
                          s.token_embeddings)


def test_jsonl_errors_name_the_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "a", "embedding": [1.0]}\nnot json\n')
    with pytest.raises(ValueError, match="line 2"):
        load_jsonl(path)
    path.write_text('{"id": "a", "embedding": [1.0]}\n'
                    '{"id": "b", "embedding": [1.0, 2.0]}\n')
    with pytest.raises(ValueError, match="line 2.*dimension"):
        load_jsonl(path)
    path.write_text('{"id": "a"}\n')
    with pytest.raises(ValueError, match="line 1.*exactly one"):
        load_jsonl(path)
    path.write_text('{"id": "a", "embedding": [1.0]}\n'
                    '{"id": "a", "embedding": [2.0]}\n')
    with pytest.raises(ValueError, match="duplicate"):
        load_jsonl(path)


def test_jsonl_integer_label_names_keep_numeric_ids(tmp_path):
    path = tmp_path / "num.jsonl"
    path.write_text('{"id": "a", "label": "7", "embedding": [1.0]}\n'
                    '{"id": "b", "label": "3", "embedding": [2.0]}\n')
    ds = load_jsonl(path)
    assert ds.labels().tolist() == [7, 3]
    assert ds.catalog.known == (3, 7)


def test_jsonl_first_seen_ids_for_string_labels(tmp_path):
    path = tmp_path / "str.jsonl"
    path.write_text('{"id": "a", "label": "refund", "embedding": [1.0]}\n'
                    '{"id": "b", "label": "cancel", "embedding": [2.0]}\n'
                    '{"id": "c", "label": "refund", "embedding": [3.0]}\n')
    ds = load_jsonl(path)
    assert ds.labels().tolist() == [0, 1, 0]
    assert ds.label_names == {0: "refund", 1: "cancel"}


def test_jsonl_pinned_label_mapping(tmp_path):
    path = tmp_path / "pin.jsonl"
    path.write_text('{"id": "a", "label": "cancel", "embedding": [1.0]}\n')
    ds = load_jsonl(path, label_ids={"refund": 0, "cancel": 1})
    assert ds.labels().tolist() == [1]
    with pytest.raises(ValueError, match="outside the supplied mapping"):
        load_jsonl(path, label_ids={"refund": 0})


def test_jsonl_unlabeled_samples_load(tmp_path):
    path = tmp_path / "unl.jsonl"
    path.write_text('{"id": "a", "embedding": [1.0, 2.0]}\n')
    ds = load_jsonl(path, label_ids={})
    assert ds.samples[0].label is None
    with pytest.raises(ValueError, match="unlabeled"):
        ds.labels()


# ---------------------------------------------------------------------------
# binary formats


def test_embedding_matrix_round_trip(tmp_path):
    mat = np.random.default_rng(0).normal(size=(7, 4)).astype(np.float32)
    path = tmp_path / "m.emb"
    save_embedding_matrix(mat, path)
    assert np.array_equal(load_embedding_matrix(path), mat)


def test_embedding_matrix_truncation_detected(tmp_path):
    mat = np.ones((3, 2), dtype=np.float32)
    path = tmp_path / "m.emb"
    save_embedding_matrix(mat, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-4])
    with pytest.raises(ValueError):
        load_embedding_matrix(path)
    path.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError, match="magic"):
        load_embedding_matrix(path)


def test_labels_round_trip(tmp_path):
    labels = np.array([0, 5, 2, 2, 9], dtype=np.int64)
    path = tmp_path / "l.lbl"
    save_labels(labels, path)
    assert np.array_equal(load_labels(path), labels)


def test_dataset_from_matrix_wraps_rows():
    ds = dataset_from_matrix(np.ones((3, 2)), labels=[4, 4, 5])
    assert len(ds) == 3 and ds.catalog.known == (4, 5)


# ---------------------------------------------------------------------------
# segmentation and splits


def test_segment_intents_sizes_and_determinism():
    cat = LabelCatalog(known=tuple(range(16)))
    seg = segment_intents(cat, 0.75, 7)
    assert len(seg.known) == 12 and len(seg.unknown) == 4
    assert set(seg.known) | set(seg.unknown) == set(range(16))
    assert segment_intents(cat, 0.75, 7) == seg
    assert segment_intents(cat, 0.75, 8) != seg


def test_segment_intents_rejects_degenerate_fractions():
    cat = LabelCatalog(known=(0, 1))
    with pytest.raises(ValueError):
        segment_intents(cat, 0.01, 0)  # zero known classes
    with pytest.raises(ValueError):
        segment_intents(cat, 0.99, 0)  # zero unknown classes


def test_make_splits_partition_and_no_unknown_in_train():
    ds = generate_synthetic(6, 40, 8, 6.0, 3)
    cat = segment_intents(ds.catalog, 0.67, 3)
    bundle = make_splits(ds, cat, 0.20, 3, val_fraction=0.10,
                         test1_fraction=0.10)
    all_ids = [s.id for part in bundle.parts().values() for s in part.samples]
    assert sorted(all_ids) == sorted(ds.ids())  # exact partition
    unknown = set(cat.unknown)
    assert not any(s.label in unknown for s in bundle.train.samples)
    # unknown-class leftovers all land in test1
    unknown_total = sum(1 for s in ds.samples if s.label in unknown)
    in_test1 = sum(1 for s in bundle.test1.samples if s.label in unknown)
    in_val = sum(1 for s in bundle.val.samples if s.label in unknown)
    in_test2 = sum(1 for s in bundle.test2.samples if s.label in unknown)
    assert in_test1 + in_val + in_test2 == unknown_total
    assert in_test1 > in_val and in_test1 > in_test2


def test_make_splits_expected_sizes_for_acceptance_scenario():
    ds = generate_synthetic(16, 200, 32, 6.0, 7)
    cat = segment_intents(ds.catalog, 0.75, 7)
    bundle = make_splits(ds, cat, 0.20, 7, val_fraction=0.10,
                         test1_fraction=0.10)
    # per known class: 20 test1, 20 val, 32 test2, 128 train
    assert len(bundle.train) == 12 * 128
    assert len(bundle.val) == 16 * 20
    assert len(bundle.test1) == 12 * 20 + 4 * 148
    assert len(bundle.test2) == 16 * 32


def test_make_splits_deterministic():
    ds = generate_synthetic(5, 30, 6, 6.0, 1)
    cat = segment_intents(ds.catalog, 0.8, 1)
    b1 = make_splits(ds, cat, 0.25, 9, val_fraction=0.1, test1_fraction=0.1)
    b2 = make_splits(ds, cat, 0.25, 9, val_fraction=0.1, test1_fraction=0.1)
    for p1, p2 in zip(b1.parts().values(), b2.parts().values()):
        assert p1.ids() == p2.ids()


def test_split_bundle_rejects_overlap():
    ds = make_dataset(n=4)
    half = ds.subset([0, 1])
    with pytest.raises(ValueError, match="appears in"):
        from intentflow.data import SplitBundle
        SplitBundle(train=half, val=half, test1=ds.subset([2]),
                    test2=ds.subset([3]), seed=0)


def test_write_split_manifest(tmp_path):
    ds = generate_synthetic(4, 10, 5, 6.0, 2)
    cat = segment_intents(ds.catalog, 0.75, 2)
    bundle = make_splits(ds, cat, 0.25, 2)
    path = tmp_path / "splits.tsv"
    write_split_manifest(bundle, path)
    lines = path.read_text().splitlines()
    assert len(lines) == len(ds)
    assert all(line.split("\t")[1] in ("train", "val", "test1", "test2")
               for line in lines)


# ---------------------------------------------------------------------------
# synthetic generator


def test_generate_synthetic_shapes_and_labels():
    ds = generate_synthetic(5, 12, 9, 4.0, 0)
    assert len(ds) == 60 and ds.dim == 9
    counts = np.bincount(ds.labels())
    assert counts.tolist() == [12] * 5
    assert ds.catalog.known == tuple(range(5))


def test_generate_synthetic_minimum_separation_exact():
    for seed in (0, 5, 9):
        ds = generate_synthetic(8, 2, 16, 6.0, seed)
        # reconstruct the true means from huge per-class samples instead:
        big = generate_synthetic(8, 4000, 16, 6.0, seed)
        mat, y = big.matrix(), big.labels()
        means = np.stack([mat[y == c].mean(axis=0) for c in range(8)])
        gaps = np.linalg.norm(means[:, None] - means[None, :], axis=2)
        off = gaps[~np.eye(8, dtype=bool)]
        # empirical means estimate the true means to ~ 1/sqrt(4000)
        assert abs(off.min() - 6.0) < 0.15
        assert ds.dim == 16


def test_generate_synthetic_unit_class_variance():
    ds = generate_synthetic(2, 5000, 4, 8.0, 3)
    mat, y = ds.matrix(), ds.labels()
    for c in (0, 1):
        cov = np.cov(mat[y == c].T)
        assert np.allclose(np.diag(cov), 1.0, atol=0.1)
        assert np.allclose(cov - np.diag(np.diag(cov)), 0.0, atol=0.1)


def test_generate_synthetic_deterministic():
    a = generate_synthetic(3, 4, 5, 2.0, 11)
    b = generate_synthetic(3, 4, 5, 2.0, 11)
    assert np.array_equal(a.matrix(), b.matrix())


def test_generate_synthetic_rejects_bad_args():
    with pytest.raises(ValueError):
        generate_synthetic(0, 1, 1, 1.0, 0)
    with pytest.raises(ValueError):
        generate_synthetic(2, 2, 2, -1.0, 0)


@given(st.integers(2, 10), st.integers(2, 12), st.floats(1.0, 10.0),
       st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_generate_synthetic_means_meet_separation(n_classes, dim, sep, seed):
    per_class = 400
    ds = generate_synthetic(n_classes, per_class, dim, sep, seed)
    mat, y = ds.matrix(), ds.labels()
    means = np.stack([mat[y == c].mean(axis=0) for c in range(n_classes)])
    gaps = np.linalg.norm(means[:, None] - means[None, :], axis=2)
    off = gaps[~np.eye(n_classes, dtype=bool)]
    # sample means wobble around true means by ~ sqrt(dim/per_class)
    assert off.min() > sep - 4.0 * np.sqrt(dim / per_class)
