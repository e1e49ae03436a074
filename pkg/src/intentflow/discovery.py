"""New-intent discovery: KMeans over detected-OOD embeddings.

Lloyd's algorithm under squared Euclidean distance with distance-weighted
greedy seeding (each new seed drawn with probability proportional to its
squared distance from the chosen seeds), a configurable number of
restarts keeping the lowest-inertia run, and deterministic behaviour for
a fixed seed. Empty clusters are repaired by donating the point farthest
from its centroid among clusters that can spare one.

Cluster indices are minted into fresh class ids placed after every
existing id so discovered intents never collide with the known or the
held-out gold labels.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import LabelCatalog

__all__ = ["ClusteringResult", "kmeans", "assign_pseudo_labels",
           "write_clustering_report"]

_MONOTONE_SLACK = 1e-9


@dataclass(frozen=True)
class ClusteringResult:
    """Output of one KMeans fit (the winning restart)."""

    k: int
    centroids: np.ndarray     # (k, d)
    assignments: np.ndarray   # (n,) ints in [0, k)
    inertia: float
    iterations: int
    restart: int = 0
    repair_exhausted: bool = False

    def __post_init__(self):
        if self.centroids.shape[0] != self.k:
            raise ValueError("centroid count must equal k")
        a = self.assignments
        if a.size and (a.min() < 0 or a.max() >= self.k):
            raise ValueError("assignments outside [0, k)")
        if self.inertia < 0:
            raise ValueError("inertia must be non-negative")


def _squared_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # (n, k) matrix of squared Euclidean distances via the expansion
    # |x - c|^2 = |x|^2 - 2 x.c + |c|^2, clipped at zero for roundoff.
    d2 = (np.einsum("ij,ij->i", x, x)[:, None]
          - 2.0 * x @ centroids.T
          + np.einsum("ij,ij->i", centroids, centroids)[None, :])
    return np.maximum(d2, 0.0)


def _seed_centroids(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = float(d2.sum())
        if total > 0.0:
            probs = d2 / total
            idx = int(rng.choice(n, p=probs))
        else:
            idx = int(rng.integers(n))
        chosen.append(idx)
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return x[chosen].copy()


def _lloyd(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int,
           init_centroids=None) -> ClusteringResult:
    n, _ = x.shape
    if init_centroids is None:
        centroids = _seed_centroids(x, k, rng)
    else:
        centroids = np.array(init_centroids, dtype=np.float64)
        if centroids.shape != (k, x.shape[1]):
            raise ValueError(
                f"init centroids shape {centroids.shape} != ({k}, {x.shape[1]})")

    prev_assign = None
    prev_inertia = np.inf
    repair_exhausted = False
    assign = np.zeros(n, dtype=np.int64)
    inertia = 0.0
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        d2 = _squared_distances(x, centroids)
        assign = np.argmin(d2, axis=1)

        sizes = np.bincount(assign, minlength=k)
        for j in np.flatnonzero(sizes == 0):
            point_d2 = d2[np.arange(n), assign]
            donorable = sizes[assign] >= 2
            if not donorable.any():
                repair_exhausted = True
                continue
            point_d2 = np.where(donorable, point_d2, -np.inf)
            i_star = int(np.argmax(point_d2))
            sizes[assign[i_star]] -= 1
            assign[i_star] = j
            sizes[j] = 1

        for j in range(k):
            members = x[assign == j]
            if members.shape[0]:
                centroids[j] = members.mean(axis=0)
        d2_new = _squared_distances(x, centroids)
        inertia = float(d2_new[np.arange(n), assign].sum())
        if inertia > prev_inertia * (1.0 + _MONOTONE_SLACK) + _MONOTONE_SLACK:
            raise AssertionError(
                f"inertia increased: {prev_inertia} -> {inertia}")
        prev_inertia = inertia
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign.copy()

    return ClusteringResult(k=k, centroids=centroids, assignments=assign,
                            inertia=inertia, iterations=iterations,
                            repair_exhausted=repair_exhausted)


def kmeans(embeddings: np.ndarray, k: int, seed: int, max_iter: int = 300,
           n_restarts: int = 10, init_centroids=None) -> ClusteringResult:
    """Best-of-restarts KMeans; deterministic in (data, k, seed).

    ``init_centroids`` pins the starting centroids (single run, no
    seeding) — useful for warm starts and fixed-point checks. The winner
    among restarts is the lowest inertia, earliest restart on ties.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("embeddings must be a 2-D matrix")
    n = x.shape[0]
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds sample count n={n}")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")

    if init_centroids is not None:
        return _lloyd(x, k, np.random.default_rng(seed), max_iter,
                      init_centroids=init_centroids)

    best: ClusteringResult | None = None
    for r in range(n_restarts):
        rng = np.random.default_rng([seed, r])
        result = _lloyd(x, k, rng, max_iter)
        if best is None or result.inertia < best.inertia:
            best = ClusteringResult(k=result.k, centroids=result.centroids,
                                    assignments=result.assignments,
                                    inertia=result.inertia,
                                    iterations=result.iterations,
                                    restart=r,
                                    repair_exhausted=result.repair_exhausted)
    return best


def assign_pseudo_labels(result: ClusteringResult,
                         catalog: LabelCatalog) -> tuple[np.ndarray, LabelCatalog]:
    """Mint one fresh class id per cluster, after every existing id.

    Cluster j becomes class (max existing id) + 1 + j. The catalog must
    not already carry discovered ids (minting twice would break the
    disjointness guarantee).
    """
    if catalog.discovered:
        raise ValueError("catalog already has discovered ids; labels were "
                         "minted for a previous clustering")
    existing = set(catalog.known) | set(catalog.unknown)
    base = (max(existing) + 1) if existing else 0
    labels = base + result.assignments.astype(np.int64)
    discovered = tuple(range(base, base + result.k))
    updated = LabelCatalog(known=catalog.known, unknown=catalog.unknown,
                           discovered=discovered)
    return labels, updated


def write_clustering_report(path, ids, result: ClusteringResult,
                            minted_labels, n_restarts: int) -> None:
    """CSV of id, cluster, minted class id, with a trailing summary line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "cluster", "class_id"])
        for i, sample_id in enumerate(ids):
            writer.writerow([sample_id, int(result.assignments[i]),
                             int(minted_labels[i])])
        writer.writerow([f"# k={result.k} inertia={result.inertia:.9g} "
                         f"iterations={result.iterations} restarts={n_restarts}"])
