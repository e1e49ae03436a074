"""Embedding datasets: loading, validation, persistence, segmentation, splits.

Two interchange formats:

* Record lines (JSONL): ``{"id": str, "text": str?, "label": str?,
  "embedding": [f32...]}``; the token-level variant carries
  ``token_embeddings`` (a list of equal-length vectors) instead.
* Binary matrix: magic ``EMB1``, u32-LE n, u32-LE m, then n*m float32-LE
  values row-major. Companion labels file: magic ``LBL1``, u32-LE n,
  then n u32-LE class ids.

Label ids are dense non-negative integers. String labels are assigned ids
in first-seen order; labels that are all decimal integers keep their
numeric value so synthetic data round-trips unchanged.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "Sample",
    "LabelCatalog",
    "Dataset",
    "SplitBundle",
    "load_jsonl",
    "save_jsonl",
    "load_embedding_matrix",
    "save_embedding_matrix",
    "load_labels",
    "save_labels",
    "dataset_from_matrix",
    "segment_intents",
    "make_splits",
    "write_split_manifest",
    "generate_synthetic",
]

EMB_MAGIC = b"EMB1"
LBL_MAGIC = b"LBL1"


@dataclass(frozen=True)
class Sample:
    """One inquiry: an id plus either a sentence vector or token vectors."""

    id: str
    embedding: np.ndarray | None = None
    token_embeddings: np.ndarray | None = None  # shape (n_tokens, m)
    text: str | None = None
    label: int | None = None

    def __post_init__(self):
        if (self.embedding is None) == (self.token_embeddings is None):
            raise ValueError(
                f"sample {self.id!r}: exactly one of embedding/token_embeddings required")
        if self.label is not None and self.label < 0:
            raise ValueError(f"sample {self.id!r}: label must be non-negative")

    @property
    def dim(self) -> int:
        if self.embedding is not None:
            return int(self.embedding.shape[0])
        return int(self.token_embeddings.shape[1])

    def vector(self) -> np.ndarray:
        """Sentence vector; token-level samples are mean-pooled."""
        if self.embedding is not None:
            return self.embedding
        return self.token_embeddings.mean(axis=0)


@dataclass(frozen=True)
class LabelCatalog:
    """Known / unknown / discovered class-id partition."""

    known: tuple[int, ...] = ()
    unknown: tuple[int, ...] = ()
    discovered: tuple[int, ...] = ()

    def __post_init__(self):
        k, u, d = set(self.known), set(self.unknown), set(self.discovered)
        if k & u or k & d or u & d:
            raise ValueError("catalog sets must be pairwise disjoint")
        base = k | u
        if d and base and min(d) <= max(base):
            raise ValueError("discovered ids must exceed all known/unknown ids")

    def all_ids(self) -> set[int]:
        return set(self.known) | set(self.unknown) | set(self.discovered)

    def to_json(self) -> dict:
        return {"known": list(self.known), "unknown": list(self.unknown),
                "discovered": list(self.discovered)}

    @classmethod
    def from_json(cls, obj: dict) -> "LabelCatalog":
        return cls(known=tuple(obj.get("known", ())),
                   unknown=tuple(obj.get("unknown", ())),
                   discovered=tuple(obj.get("discovered", ())))


@dataclass(frozen=True)
class Dataset:
    """Immutable collection of dimension-consistent samples."""

    samples: tuple[Sample, ...]
    dim: int
    catalog: LabelCatalog
    label_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise ValueError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
            if s.dim != self.dim:
                raise ValueError(
                    f"sample {s.id!r} has dimension {s.dim}, expected {self.dim}")

    def __len__(self) -> int:
        return len(self.samples)

    def labels(self) -> np.ndarray:
        if any(s.label is None for s in self.samples):
            raise ValueError("dataset contains unlabeled samples")
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def matrix(self) -> np.ndarray:
        """Stacked sentence vectors, float64, shape (n, dim)."""
        if not self.samples:
            return np.zeros((0, self.dim), dtype=np.float64)
        return np.stack([s.vector() for s in self.samples]).astype(np.float64)

    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def subset(self, indices) -> "Dataset":
        return replace(self, samples=tuple(self.samples[i] for i in indices))

    def with_labels(self, labels) -> "Dataset":
        if len(labels) != len(self.samples):
            raise ValueError("label count must match sample count")
        new = tuple(replace(s, label=int(l)) for s, l in zip(self.samples, labels))
        return replace(self, samples=new)

    def label_name(self, label: int) -> str:
        return self.label_names.get(label, str(label))


@dataclass(frozen=True)
class SplitBundle:
    """Train / val / test-I / test-II division of one dataset."""

    train: Dataset
    val: Dataset
    test1: Dataset
    test2: Dataset
    seed: int

    def __post_init__(self):
        parts = {"train": self.train, "val": self.val,
                 "test1": self.test1, "test2": self.test2}
        seen: dict[str, str] = {}
        for name, ds in parts.items():
            for s in ds.samples:
                if s.id in seen:
                    raise ValueError(
                        f"sample {s.id!r} appears in both {seen[s.id]} and {name}")
                seen[s.id] = name
        unknown = set(self.train.catalog.unknown)
        for s in self.train.samples:
            if s.label in unknown:
                raise ValueError(f"unknown-label sample {s.id!r} present in train")

    def parts(self) -> dict[str, Dataset]:
        return {"train": self.train, "val": self.val,
                "test1": self.test1, "test2": self.test2}


def _parse_vector(raw, line_no: int, what: str) -> np.ndarray:
    try:
        vec = np.asarray(raw, dtype=np.float32)
    except (TypeError, ValueError):
        raise ValueError(f"line {line_no}: {what} is not a numeric array")
    if vec.ndim != 1 or vec.size == 0:
        raise ValueError(f"line {line_no}: {what} must be a non-empty vector")
    return vec


def load_jsonl(path, label_ids: dict[str, int] | None = None) -> Dataset:
    """Load record lines into a validated Dataset.

    ``label_ids`` pins the label-name-to-id mapping (labels outside it
    are an error); without it, ids are assigned first-seen, except that
    all-integer label names keep their numeric values. All observed
    labels land in the catalog's known set. Errors name the offending
    line number.
    """
    path = Path(path)
    samples: list[Sample] = []
    dim: int | None = None
    raw_labels: list[str | None] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"line {line_no}: malformed record ({exc.msg})")
            if not isinstance(rec, dict) or "id" not in rec:
                raise ValueError(f"line {line_no}: record must be an object with an id")
            has_emb = "embedding" in rec
            has_tok = "token_embeddings" in rec
            if has_emb == has_tok:
                raise ValueError(
                    f"line {line_no}: exactly one of embedding/token_embeddings required")
            if has_emb:
                vec = _parse_vector(rec["embedding"], line_no, "embedding")
                emb, tok = vec, None
                d = vec.shape[0]
            else:
                rows = rec["token_embeddings"]
                if not isinstance(rows, list) or not rows:
                    raise ValueError(f"line {line_no}: token_embeddings must be non-empty")
                mat = [
                    _parse_vector(r, line_no, f"token_embeddings[{i}]")
                    for i, r in enumerate(rows)
                ]
                widths = {v.shape[0] for v in mat}
                if len(widths) != 1:
                    raise ValueError(f"line {line_no}: ragged token_embeddings")
                emb, tok = None, np.stack(mat)
                d = tok.shape[1]
            if dim is None:
                dim = d
            elif d != dim:
                raise ValueError(
                    f"line {line_no}: dimension mismatch ({d} vs expected {dim})")
            label = rec.get("label")
            raw_labels.append(None if label is None else str(label))
            samples.append(Sample(id=str(rec["id"]), embedding=emb,
                                  token_embeddings=tok, text=rec.get("text"),
                                  label=None))
    if not samples:
        raise ValueError(f"{path}: empty dataset file")

    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise ValueError(f"{path}: duplicate sample id {dup!r}")

    observed = [l for l in raw_labels if l is not None]
    if label_ids is None:
        label_ids = _assign_label_ids(observed)
    else:
        unlisted = sorted(set(observed) - set(label_ids))
        if unlisted:
            raise ValueError(f"{path}: labels outside the supplied mapping: "
                             f"{unlisted[:5]}")
    labeled = []
    for s, raw in zip(samples, raw_labels):
        labeled.append(s if raw is None else replace(s, label=label_ids[raw]))
    names = {v: k for k, v in label_ids.items()}
    catalog = LabelCatalog(known=tuple(sorted(names)))
    return Dataset(samples=tuple(labeled), dim=dim, catalog=catalog,
                   label_names=names)


def _assign_label_ids(observed: list[str]) -> dict[str, int]:
    uniq = list(dict.fromkeys(observed))
    if uniq and all(s.isdigit() for s in uniq):
        return {s: int(s) for s in uniq}
    return {s: i for i, s in enumerate(uniq)}


def save_jsonl(dataset: Dataset, path) -> None:
    """Write record lines; inverse of load_jsonl (bit-exact embeddings)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for s in dataset.samples:
            rec: dict = {"id": s.id}
            if s.text is not None:
                rec["text"] = s.text
            if s.label is not None:
                rec["label"] = dataset.label_name(s.label)
            if s.embedding is not None:
                rec["embedding"] = [float(x) for x in s.embedding]
            else:
                rec["token_embeddings"] = [
                    [float(x) for x in row] for row in s.token_embeddings]
            fh.write(json.dumps(rec) + "\n")


def save_embedding_matrix(matrix, path) -> None:
    mat = np.ascontiguousarray(np.asarray(matrix, dtype=np.float32))
    if mat.ndim != 2:
        raise ValueError("embedding matrix must be 2-D")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
        fh.write(mat.astype("<f4").tobytes())


def load_embedding_matrix(path) -> np.ndarray:
    """Read an EMB1 file into an (n, m) float32 matrix."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != EMB_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {EMB_MAGIC!r}")
    if len(blob) < 12:
        raise ValueError(f"{path}: truncated header")
    n, m = struct.unpack("<II", blob[4:12])
    expected = n * m * 4
    payload = blob[12:]
    if len(payload) != expected:
        raise ValueError(
            f"{path}: truncated payload ({len(payload)} bytes, expected {expected})")
    return np.frombuffer(payload, dtype="<f4").reshape(n, m).copy()


def save_labels(labels, path) -> None:
    arr = np.asarray(labels, dtype=np.int64)
    if arr.ndim != 1 or (arr < 0).any():
        raise ValueError("labels must be a vector of non-negative ids")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(LBL_MAGIC)
        fh.write(struct.pack("<I", arr.size))
        fh.write(arr.astype("<u4").tobytes())


def load_labels(path) -> np.ndarray:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != LBL_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {LBL_MAGIC!r}")
    (n,) = struct.unpack("<I", blob[4:8])
    payload = blob[8:]
    if len(payload) != n * 4:
        raise ValueError(f"{path}: truncated payload ({len(payload)} bytes, expected {n * 4})")
    return np.frombuffer(payload, dtype="<u4").astype(np.int64)


def dataset_from_matrix(matrix, labels=None, id_prefix: str = "row") -> Dataset:
    """Wrap a raw matrix (and optional label vector) as a Dataset."""
    mat = np.asarray(matrix, dtype=np.float32)
    if labels is not None and len(labels) != mat.shape[0]:
        raise ValueError("label count must match matrix rows")
    samples = tuple(
        Sample(id=f"{id_prefix}-{i:06d}", embedding=mat[i].copy(),
               label=None if labels is None else int(labels[i]))
        for i in range(mat.shape[0]))
    known = tuple(sorted({int(l) for l in labels})) if labels is not None else ()
    return Dataset(samples=samples, dim=mat.shape[1],
                   catalog=LabelCatalog(known=known))


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def segment_intents(catalog: LabelCatalog, ind_fraction: float, seed: int) -> LabelCatalog:
    """Randomly mark a fraction of the labels as known, the rest unknown."""
    if not 0.0 < ind_fraction < 1.0:
        raise ValueError(f"ind_fraction must be in (0, 1), got {ind_fraction}")
    labels = sorted(set(catalog.known) | set(catalog.unknown))
    if not labels:
        raise ValueError("catalog has no labels to segment")
    n_known = _round_half_up(ind_fraction * len(labels))
    if n_known == 0 or n_known == len(labels):
        raise ValueError(
            f"fraction {ind_fraction} leaves {n_known} known of {len(labels)} labels")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(labels))
    known = tuple(sorted(labels[i] for i in perm[:n_known]))
    unknown = tuple(sorted(labels[i] for i in perm[n_known:]))
    return LabelCatalog(known=known, unknown=unknown, discovered=catalog.discovered)


def make_splits(dataset: Dataset, catalog: LabelCatalog, test2_fraction: float,
                seed: int, val_fraction: float = 0.0,
                test1_fraction: float = 0.0) -> SplitBundle:
    """Per-class stratified split into train/val/test1/test2.

    Order per class: test1 and val are carved first, then test2 takes
    test2_fraction of the remaining training pool. Unknown-class leftovers
    go to test1 (never train), so every sample lands in exactly one split.
    """
    if not 0.0 < test2_fraction < 1.0:
        raise ValueError(f"test2_fraction must be in (0, 1), got {test2_fraction}")
    known = set(catalog.known)
    unknown = set(catalog.unknown)
    for s in dataset.samples:
        if s.label is None or s.label not in known | unknown:
            raise ValueError(f"sample {s.id!r} has label outside the catalog")

    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(dataset.samples):
        by_class.setdefault(s.label, []).append(i)

    rng = np.random.default_rng(seed)
    parts: dict[str, list[int]] = {"train": [], "val": [], "test1": [], "test2": []}
    for label in sorted(by_class):
        idx = by_class[label]
        if len(idx) < 2:
            raise ValueError(f"class {label} has {len(idx)} sample(s); cannot stratify")
        order = rng.permutation(len(idx))
        shuffled = [idx[i] for i in order]
        n = len(shuffled)
        n_test1 = _round_half_up(test1_fraction * n)
        n_val = _round_half_up(val_fraction * n)
        if n_test1 + n_val >= n:
            raise ValueError(f"class {label}: carve-outs consume every sample")
        test1_part = shuffled[:n_test1]
        val_part = shuffled[n_test1:n_test1 + n_val]
        pool = shuffled[n_test1 + n_val:]
        n_test2 = _round_half_up(test2_fraction * len(pool))
        test2_part = pool[:n_test2]
        rest = pool[n_test2:]
        parts["test1"].extend(test1_part)
        parts["val"].extend(val_part)
        parts["test2"].extend(test2_part)
        if label in known:
            parts["train"].extend(rest)
        else:
            parts["test1"].extend(rest)

    def build(indices: list[int]) -> Dataset:
        sub = dataset.subset(sorted(indices))
        return replace(sub, catalog=catalog)

    return SplitBundle(train=build(parts["train"]), val=build(parts["val"]),
                       test1=build(parts["test1"]), test2=build(parts["test2"]),
                       seed=seed)


def write_split_manifest(bundle: SplitBundle, path) -> None:
    """One line per sample id with its split name."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for name, ds in bundle.parts().items():
            for s in ds.samples:
                fh.write(f"{s.id}\t{name}\n")


def generate_synthetic(n_classes: int, per_class: int, dim: int,
                       separation: float, seed: int) -> Dataset:
    """Isotropic unit-variance Gaussian classes with correlated means.

    Class means share a low-dimensional subspace (rank
    min(dim, max(2, n_classes // 2))), mimicking embedding spaces where
    classes are built from common feature directions rather than being
    mutually orthogonal, and are scaled so the minimum pairwise
    Euclidean distance equals separation exactly. Unit-variance noise
    fills all ambient dimensions.
    """
    if n_classes <= 0 or per_class <= 0 or dim <= 0:
        raise ValueError("all counts must be positive")
    if separation <= 0:
        raise ValueError("separation must be positive")
    rng = np.random.default_rng(seed)
    rank = min(dim, max(2, n_classes // 2))
    if n_classes == 1:
        means = np.zeros((1, dim))
    else:
        while True:
            z = rng.standard_normal((n_classes, rank))
            gaps = np.linalg.norm(z[:, None, :] - z[None, :, :], axis=2)
            min_gap = gaps[~np.eye(n_classes, dtype=bool)].min()
            if min_gap > 1e-9:
                break
        z *= separation / min_gap
        basis, _ = np.linalg.qr(rng.standard_normal((dim, rank)))
        means = z @ basis.T

    samples = []
    for c in range(n_classes):
        points = means[c] + rng.standard_normal((per_class, dim))
        for j in range(per_class):
            samples.append(Sample(id=f"syn-{c:03d}-{j:05d}",
                                  embedding=points[j].astype(np.float32),
                                  label=c))
    catalog = LabelCatalog(known=tuple(range(n_classes)))
    names = {c: str(c) for c in range(n_classes)}
    return Dataset(samples=tuple(samples), dim=dim, catalog=catalog,
                   label_names=names)
