"""Format layer: input parsing and byte-level writer conformance.

The writers here must produce files the downstream package parses
bit-exactly, so the oracle for EMB1/LBL1 is byte equality against that
package's own writers, and record lines are round-tripped through its
loader.  Importing the downstream package is allowed in tests only —
the files are the interface.
"""

import json

import numpy as np
import pytest

from embed_export.formats import (
    assign_label_ids,
    atomic_writer,
    format_record,
    pack_labels,
    pack_matrix_header,
    pack_matrix_rows,
    read_text_records,
)


def write_lines(path, objs):
    path.write_text("\n".join(json.dumps(o) for o in objs) + "\n",
                    encoding="utf-8")


# ---------------------------------------------------------------- input


def test_read_text_records_order_and_fields(tmp_path):
    path = tmp_path / "in.jsonl"
    write_lines(path, [
        {"id": "a", "text": "hello", "label": "greet"},
        {"id": "b", "text": "pay the bill"},
        {"id": "c", "text": "  ", "label": "blank"},
    ])
    recs = read_text_records(path)
    assert [r.id for r in recs] == ["a", "b", "c"]
    assert recs[0].label == "greet" and recs[1].label is None
    assert recs[2].text == "  "


def test_read_text_records_skips_blank_lines(tmp_path):
    path = tmp_path / "in.jsonl"
    path.write_text('{"id": "a", "text": "x"}\n\n   \n{"id": "b", "text": "y"}\n',
                    encoding="utf-8")
    assert [r.id for r in read_text_records(path)] == ["a", "b"]


@pytest.mark.parametrize("line, message", [
    ('{"id": "a", "text"', "malformed record"),
    ('[1, 2]', "object with an id"),
    ('{"text": "x"}', "object with an id"),
    ('{"id": "a"}', "text string"),
    ('{"id": "a", "text": 7}', "text string"),
])
def test_read_text_records_line_errors(tmp_path, line, message):
    path = tmp_path / "in.jsonl"
    path.write_text('{"id": "ok", "text": "fine"}\n' + line + "\n",
                    encoding="utf-8")
    with pytest.raises(ValueError, match="line 2"):
        read_text_records(path)
    with pytest.raises(ValueError, match=message):
        read_text_records(path)


def test_read_text_records_duplicate_id(tmp_path):
    path = tmp_path / "in.jsonl"
    write_lines(path, [{"id": "a", "text": "x"}, {"id": "a", "text": "y"}])
    with pytest.raises(ValueError, match="duplicate record id 'a'"):
        read_text_records(path)


def test_read_text_records_empty_file(tmp_path):
    path = tmp_path / "in.jsonl"
    path.write_text("\n\n", encoding="utf-8")
    with pytest.raises(ValueError, match="empty input file"):
        read_text_records(path)


def test_read_text_records_unreadable_path(tmp_path):
    with pytest.raises(ValueError, match="cannot read input"):
        read_text_records(tmp_path / "missing.jsonl")


# --------------------------------------------------------------- labels


def test_assign_label_ids_first_seen():
    assert assign_label_ids(["b", "a", "b", "c"]) == {"b": 0, "a": 1, "c": 2}


def test_assign_label_ids_numeric_names_keep_values():
    assert assign_label_ids(["7", "3", "7"]) == {"7": 7, "3": 3}


def test_assign_label_ids_mixed_names_fall_back_to_first_seen():
    assert assign_label_ids(["7", "x"]) == {"7": 0, "x": 1}


# ------------------------------------------------- binary writer oracle


def test_emb1_bytes_match_consumer_writer(tmp_path):
    from intentflow.data import load_embedding_matrix, save_embedding_matrix

    rng = np.random.default_rng(3)
    mat = rng.normal(size=(5, 7)).astype(np.float32)
    ours = tmp_path / "ours.emb"
    ours.write_bytes(pack_matrix_header(5, 7) + pack_matrix_rows(mat))
    theirs = tmp_path / "theirs.emb"
    save_embedding_matrix(mat, theirs)
    assert ours.read_bytes() == theirs.read_bytes()
    loaded = load_embedding_matrix(ours)
    assert loaded.dtype == np.float32
    assert loaded.tobytes() == mat.tobytes()


def test_lbl1_bytes_match_consumer_writer(tmp_path):
    from intentflow.data import load_labels, save_labels

    ids = [3, 0, 2, 2, 11]
    ours = tmp_path / "ours.lbl"
    ours.write_bytes(pack_labels(ids))
    theirs = tmp_path / "theirs.lbl"
    save_labels(ids, theirs)
    assert ours.read_bytes() == theirs.read_bytes()
    assert load_labels(ours).tolist() == ids


def test_pack_rows_rejects_non_2d():
    with pytest.raises(ValueError, match="2-D"):
        pack_matrix_rows(np.zeros(4, dtype=np.float32))


def test_pack_labels_rejects_negative():
    with pytest.raises(ValueError, match="non-negative"):
        pack_labels([1, -2])


# ------------------------------------------------- record-line oracle


def test_record_lines_round_trip_bit_exact(tmp_path):
    from intentflow.data import load_jsonl

    rng = np.random.default_rng(11)
    vecs = rng.normal(size=(3, 6)).astype(np.float32)
    lines = [
        format_record("r0", "check balance", "billing", vecs[0], False),
        format_record("r1", "lost card", "cards", vecs[1], False),
        format_record("r2", None, None, vecs[2], False),
    ]
    path = tmp_path / "recs.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    ds = load_jsonl(path)
    assert ds.ids() == ["r0", "r1", "r2"]
    assert ds.samples[0].text == "check balance"
    assert ds.label_names == {0: "billing", 1: "cards"}
    got = np.stack([s.embedding for s in ds.samples])
    assert got.tobytes() == vecs.tobytes()


def test_token_record_round_trip_bit_exact(tmp_path):
    from intentflow.data import load_jsonl

    rng = np.random.default_rng(12)
    tokens = rng.normal(size=(4, 6)).astype(np.float32)
    path = tmp_path / "tok.jsonl"
    path.write_text(format_record("t0", "hi", None, tokens, True) + "\n",
                    encoding="utf-8")
    ds = load_jsonl(path)
    assert ds.samples[0].token_embeddings.tobytes() == tokens.tobytes()


# --------------------------------------------------------------- atomic


def test_atomic_writer_success_leaves_no_temp(tmp_path):
    target = tmp_path / "sub" / "out.bin"
    with atomic_writer(target) as fh:
        fh.write(b"abc")
    assert target.read_bytes() == b"abc"
    assert list(target.parent.glob("*.tmp")) == []


def test_atomic_writer_failure_leaves_nothing(tmp_path):
    target = tmp_path / "out.bin"
    with pytest.raises(RuntimeError):
        with atomic_writer(target) as fh:
            fh.write(b"partial")
            raise RuntimeError("boom")
    assert not target.exists()
    assert list(tmp_path.iterdir()) == []


def test_atomic_writer_text_mode(tmp_path):
    target = tmp_path / "out.txt"
    with atomic_writer(target, "w") as fh:
        fh.write("line\n")
    assert target.read_text(encoding="utf-8") == "line\n"
