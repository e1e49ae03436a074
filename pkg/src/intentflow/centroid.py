"""Nearest-centroid classification under a shared Mahalanobis metric.

Fitting computes one centroid per class and a single pooled within-class
covariance S = (1/N) * sum_c sum_i (h_ci - mean_c)(h_ci - mean_c)^T,
regularized by epsilon * (trace(S)/d) * I before a Cholesky
factorization. Distances are evaluated through triangular solves against
that factor; no explicit matrix inverse is ever formed. When the scatter
is identically zero the regularizer falls back to epsilon * I.

Model file layout (little-endian): magic ``CEN1``, u32 class count,
u32 dimension, f32 epsilon actually applied, u32 class ids, then the
centroid matrix and covariance matrix as float32 row-major.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

__all__ = ["CentroidModel", "fit", "mahalanobis", "classify"]

CEN_MAGIC = b"CEN1"


@dataclass(frozen=True)
class CentroidModel:
    """Per-class means plus one shared, regularized covariance."""

    classes: tuple[int, ...]
    centroids: np.ndarray        # (|C|, d) float64
    covariance: np.ndarray       # (d, d) float64, after regularization
    cholesky: np.ndarray         # lower-triangular factor of covariance
    epsilon: float               # regularization magnitude actually applied

    def __post_init__(self):
        if len(self.classes) != self.centroids.shape[0]:
            raise ValueError("one centroid row required per class")
        d = self.centroids.shape[1]
        if self.covariance.shape != (d, d):
            raise ValueError("covariance shape must match embedding dimension")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-9):
            raise ValueError("covariance must be symmetric")
        if (np.diag(self.cholesky) <= 0).any():
            raise ValueError("factorization pivots must be positive")

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])

    def class_index(self, c: int) -> int:
        try:
            return self.classes.index(c)
        except ValueError:
            raise KeyError(f"class {c} not in model classes {self.classes}")

    # -- distances ---------------------------------------------------------

    def mahalanobis(self, h: np.ndarray, c: int) -> float:
        """Distance from one vector to the centroid of class c."""
        diff = np.asarray(h, dtype=np.float64) - self.centroids[self.class_index(c)]
        if diff.shape != (self.dim,):
            raise ValueError(f"probe dimension {diff.shape} != model dim {self.dim}")
        y = solve_triangular(self.cholesky, diff, lower=True)
        return float(np.linalg.norm(y))

    def distances(self, h: np.ndarray) -> np.ndarray:
        """Mahalanobis distances to every centroid.

        Accepts a single vector (returns shape (|C|,)) or a batch of rows
        (returns shape (n, |C|)).
        """
        arr = np.asarray(h, dtype=np.float64)
        single = arr.ndim == 1
        if single:
            arr = arr[None, :]
        if arr.shape[1] != self.dim:
            raise ValueError(f"probe dimension {arr.shape[1]} != model dim {self.dim}")
        # Solve L y = (h - mean_c)^T for all probes and centroids at once.
        out = np.empty((arr.shape[0], len(self.classes)), dtype=np.float64)
        for j in range(len(self.classes)):
            diffs = arr - self.centroids[j]
            y = solve_triangular(self.cholesky, diffs.T, lower=True)
            out[:, j] = np.linalg.norm(y, axis=0)
        return out[0] if single else out

    # -- classification ----------------------------------------------------

    def classify(self, h: np.ndarray) -> int:
        """Label of the nearest centroid; ties break toward the lowest id."""
        dists = self.distances(h)
        if dists.ndim != 1:
            raise ValueError("classify takes a single vector; use classify_batch")
        return int(self.classes[int(np.argmin(dists))])

    def classify_batch(self, h: np.ndarray) -> np.ndarray:
        dists = self.distances(np.atleast_2d(np.asarray(h, dtype=np.float64)))
        idx = np.argmin(dists, axis=1)
        cls = np.asarray(self.classes, dtype=np.int64)
        return cls[idx]

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as fh:
            fh.write(CEN_MAGIC)
            fh.write(struct.pack("<IIf", len(self.classes), self.dim, self.epsilon))
            fh.write(np.asarray(self.classes, dtype="<u4").tobytes())
            fh.write(self.centroids.astype("<f4").tobytes())
            fh.write(self.covariance.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "CentroidModel":
        path = Path(path)
        blob = path.read_bytes()
        if blob[:4] != CEN_MAGIC:
            raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {CEN_MAGIC!r}")
        n, d, eps = struct.unpack("<IIf", blob[4:16])
        off = 16
        need = n * 4 + n * d * 4 + d * d * 4
        if len(blob) - off != need:
            raise ValueError(f"{path}: payload is {len(blob) - off} bytes, expected {need}")
        classes = tuple(int(x) for x in np.frombuffer(blob[off:off + n * 4], dtype="<u4"))
        off += n * 4
        cents = np.frombuffer(blob[off:off + n * d * 4], dtype="<f4").reshape(n, d)
        off += n * d * 4
        cov = np.frombuffer(blob[off:off + d * d * 4], dtype="<f4").reshape(d, d)
        cov = cov.astype(np.float64)
        cov = 0.5 * (cov + cov.T)
        chol = _factorize(cov)
        return cls(classes=classes, centroids=cents.astype(np.float64),
                   covariance=cov, cholesky=chol, epsilon=float(eps))


def _factorize(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        cond = float(np.linalg.cond(cov))
        raise np.linalg.LinAlgError(
            f"covariance not positive definite after regularization "
            f"(condition estimate {cond:.3e})")


def fit(embeddings: np.ndarray, labels, epsilon: float = 1e-6,
        classes=None) -> CentroidModel:
    """Fit per-class centroids and the pooled within-class covariance.

    ``classes`` optionally pins the class list; every listed class must
    appear in ``labels``. ``epsilon`` scales the trace-proportional ridge
    added before factorization.
    """
    h = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if h.ndim != 2:
        raise ValueError("embeddings must be a 2-D matrix")
    if h.shape[0] != y.shape[0]:
        raise ValueError("embedding and label counts differ")
    if h.shape[0] < 2:
        raise ValueError("need at least two samples to estimate covariance")
    present = sorted(int(c) for c in np.unique(y))
    if classes is None:
        class_list = present
    else:
        class_list = sorted(int(c) for c in classes)
        missing = sorted(set(class_list) - set(present))
        if missing:
            raise ValueError(f"classes with zero samples: {missing}")
        extra = sorted(set(present) - set(class_list))
        if extra:
            raise ValueError(f"labels outside the declared class list: {extra}")

    n, d = h.shape
    centroids = np.empty((len(class_list), d), dtype=np.float64)
    scatter = np.zeros((d, d), dtype=np.float64)
    for j, c in enumerate(class_list):
        rows = h[y == c]
        centroids[j] = rows.mean(axis=0)
        dev = rows - centroids[j]
        scatter += dev.T @ dev
    cov = scatter / n
    cov = 0.5 * (cov + cov.T)
    trace = float(np.trace(cov))
    scale = trace / d if trace > 0.0 else 1.0
    cov_reg = cov + (epsilon * scale) * np.eye(d)
    chol = _factorize(cov_reg)
    return CentroidModel(classes=tuple(class_list), centroids=centroids,
                         covariance=cov_reg, cholesky=chol,
                         epsilon=float(epsilon * scale))


def mahalanobis(model: CentroidModel, h: np.ndarray, c: int) -> float:
    return model.mahalanobis(h, c)


def classify(model: CentroidModel, h: np.ndarray) -> int:
    return model.classify(h)
