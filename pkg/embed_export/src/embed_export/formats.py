"""Interchange-format readers and writers.

The exporter talks to downstream consumers purely through files, so the
byte layouts here are the interface contract:

- Record line: one JSON object per line with ``id`` (string), optional
  ``text`` and ``label`` (strings), and exactly one of ``embedding``
  (flat list of floats) or ``token_embeddings`` (list of rows).
- EMB1 matrix: magic ``EMB1``, u32-LE row count, u32-LE column count,
  then row-major float32-LE values.
- LBL1 labels: magic ``LBL1``, u32-LE count, then that many u32-LE
  non-negative class ids.

All vector payloads are float32; JSON floats are emitted via Python's
shortest-round-trip repr, so a float32 value survives the write/parse
cycle bit-exactly.
"""

from __future__ import annotations

import json
import os
import struct
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EMB_MAGIC = b"EMB1"
LBL_MAGIC = b"LBL1"


@dataclass(frozen=True)
class TextRecord:
    """One raw-text inquiry prior to encoding."""

    id: str
    text: str
    label: str | None = None


def read_text_records(path) -> list[TextRecord]:
    """Parse input lines of the form ``{"id", "text", "label"?}``.

    Blank lines are ignored; parse errors name the offending line
    number.  Record order is preserved and ids must be unique.
    """
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValueError(f"cannot read input {path}: {exc}") from exc
    records: list[TextRecord] = []
    for line_no, line in enumerate(raw.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"line {line_no}: malformed record ({exc.msg})")
        if not isinstance(rec, dict) or "id" not in rec:
            raise ValueError(f"line {line_no}: record must be an object with an id")
        if not isinstance(rec.get("text"), str):
            raise ValueError(f"line {line_no}: record must carry a text string")
        label = rec.get("label")
        records.append(TextRecord(id=str(rec["id"]), text=rec["text"],
                                  label=None if label is None else str(label)))
    if not records:
        raise ValueError(f"{path}: empty input file")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise ValueError(f"{path}: duplicate record id {dup!r}")
    return records


def assign_label_ids(names) -> dict[str, int]:
    """Dense integer ids in first-seen order.

    All-digit label names keep their numeric values instead, matching
    how consumers of the record lines re-derive ids, so the LBL1
    companion stays consistent with the records.
    """
    uniq = list(dict.fromkeys(names))
    if uniq and all(s.isdigit() for s in uniq):
        return {s: int(s) for s in uniq}
    return {s: i for i, s in enumerate(uniq)}


def format_record(rec_id: str, text: str | None, label: str | None,
                  vectors, token_level: bool) -> str:
    """One record line; ``vectors`` is a sentence vector or a token matrix."""
    obj: dict = {"id": rec_id}
    if text is not None:
        obj["text"] = text
    if label is not None:
        obj["label"] = label
    if token_level:
        obj["token_embeddings"] = [[float(x) for x in row] for row in vectors]
    else:
        obj["embedding"] = [float(x) for x in vectors]
    return json.dumps(obj)


def pack_matrix_header(n: int, m: int) -> bytes:
    return EMB_MAGIC + struct.pack("<II", n, m)


def pack_matrix_rows(rows) -> bytes:
    mat = np.ascontiguousarray(np.asarray(rows, dtype=np.float32))
    if mat.ndim != 2:
        raise ValueError("matrix rows must form a 2-D array")
    return mat.astype("<f4").tobytes()


def pack_labels(label_ids) -> bytes:
    arr = np.asarray(label_ids, dtype=np.int64)
    if arr.ndim != 1 or (arr < 0).any():
        raise ValueError("labels must be a vector of non-negative ids")
    return LBL_MAGIC + struct.pack("<I", arr.size) + arr.astype("<u4").tobytes()


@contextmanager
def atomic_writer(path, mode: str = "wb"):
    """Append to ``<name>.tmp`` and rename into place on clean exit.

    A failure mid-write removes the temporary file and leaves no final
    file behind, so readers only ever observe complete outputs.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    fh = tmp.open(mode, encoding=None if "b" in mode else "utf-8")
    try:
        yield fh
    except BaseException:
        fh.close()
        tmp.unlink(missing_ok=True)
        raise
    else:
        fh.close()
        os.replace(tmp, path)
