"""Export orchestration: raw text in, interchange artifacts out.

One job reads a JSON-lines text file, encodes every non-empty text with
a pretrained checkpoint, and writes three outputs: record lines, an
EMB1 sentence matrix, and (when every record is labeled) an LBL1 label
companion.  The sentence vector is the arithmetic mean of the text's
real-token hidden states (padding excluded via the attention mask),
optionally L2-normalized, truncated to float32.

With ``token_level`` set, the record lines carry the per-token vectors
instead so a consumer can do its own pooling; the EMB1 matrix still
holds the pooled sentence vectors.  Normalization applies to the pooled
vectors only — token rows are always raw hidden states.

Each output is appended batch-by-batch by a single writer and renamed
into place atomically once complete.
"""

from __future__ import annotations

from contextlib import ExitStack
from dataclasses import dataclass
from hashlib import sha256
from pathlib import Path

import numpy as np

from embed_export.encoding import CheckpointEncoder
from embed_export.formats import (
    assign_label_ids,
    atomic_writer,
    format_record,
    pack_labels,
    pack_matrix_header,
    pack_matrix_rows,
    read_text_records,
)


@dataclass(frozen=True)
class ExportJob:
    """One export run.

    ``records_path``/``matrix_path``/``labels_path`` receive the record
    lines, the EMB1 matrix, and the LBL1 companion.  Records whose text
    is empty after trimming whitespace are skipped and counted, never
    encoded.
    """

    input_path: str | Path
    checkpoint: str
    records_path: str | Path
    matrix_path: str | Path
    labels_path: str | Path
    batch_size: int = 32
    normalize: bool = False
    token_level: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")


def _pool(tokens: np.ndarray, normalize: bool) -> np.ndarray:
    pooled = tokens.astype(np.float64).mean(axis=0)
    if normalize:
        norm = float(np.linalg.norm(pooled))
        if norm == 0.0:
            raise ValueError("cannot normalize a zero sentence vector")
        pooled = pooled / norm
    return pooled.astype(np.float32)


def export(job: ExportJob, encoder: CheckpointEncoder | None = None) -> dict:
    """Run the job and return a summary.

    The summary reports the record count ``n``, the embedding dimension
    ``m``, the SHA-256 of the matrix file, how many empty-text records
    were skipped, and whether a labels file was written.  Passing an
    already-loaded ``encoder`` skips the checkpoint load.
    """
    records = read_text_records(job.input_path)
    kept, skipped = [], 0
    for rec in records:
        if rec.text.strip():
            kept.append(rec)
        else:
            skipped += 1
    if not kept:
        raise ValueError("no encodable records: every text is empty after trimming")

    n_labeled = sum(rec.label is not None for rec in kept)
    if 0 < n_labeled < len(kept):
        raise ValueError(
            "labeled and unlabeled records are mixed; label all records or none")
    write_labels = n_labeled == len(kept)
    label_ids = assign_label_ids([rec.label for rec in kept]) if write_labels else {}

    if encoder is None:
        encoder = CheckpointEncoder.load(job.checkpoint)

    n, m = len(kept), encoder.hidden_size
    digest = sha256()
    with ExitStack() as stack:
        rec_fh = stack.enter_context(atomic_writer(job.records_path, "w"))
        mat_fh = stack.enter_context(atomic_writer(job.matrix_path, "wb"))
        header = pack_matrix_header(n, m)
        mat_fh.write(header)
        digest.update(header)
        for start in range(0, n, job.batch_size):
            chunk = kept[start:start + job.batch_size]
            token_arrays = encoder.encode_tokens([rec.text for rec in chunk])
            for rec, tokens in zip(chunk, token_arrays):
                pooled = _pool(tokens, job.normalize)
                row = pack_matrix_rows(pooled[None, :])
                mat_fh.write(row)
                digest.update(row)
                payload = tokens if job.token_level else pooled
                rec_fh.write(format_record(rec.id, rec.text, rec.label,
                                           payload, job.token_level) + "\n")
    if write_labels:
        with atomic_writer(job.labels_path, "wb") as fh:
            fh.write(pack_labels([label_ids[rec.label] for rec in kept]))

    return {
        "n": n,
        "m": m,
        "sha256": digest.hexdigest(),
        "skipped_empty": skipped,
        "labels_written": write_labels,
        "outputs": {
            "records": str(job.records_path),
            "matrix": str(job.matrix_path),
            "labels": str(job.labels_path) if write_labels else None,
        },
    }
