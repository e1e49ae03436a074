"""Out-of-scope detection by minimum Mahalanobis distance.

The score of a probe is its distance to the nearest known-class centroid;
large scores mean far from every known intent. The decision threshold
lambda is calibrated so that at least ``target_tpr`` of held-out OOD
scores fall at or above it (scores equal to lambda count as OOD), and
lambda is the largest threshold achieving that rate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .centroid import CentroidModel
from .data import Dataset
from .metrics import calibrate_threshold

__all__ = [
    "IND",
    "OOD",
    "DetectionCalibration",
    "score",
    "score_batch",
    "calibrate",
    "judge",
    "partition",
    "write_score_dump",
]

IND = "IND"
OOD = "OOD"


@dataclass(frozen=True)
class DetectionCalibration:
    """Threshold lambda plus the rate it was tuned to achieve."""

    lam: float
    target_tpr: float
    calibrated_on: str
    achieved_tpr: float

    def __post_init__(self):
        if not 0.0 < self.target_tpr <= 1.0:
            raise ValueError(f"target_tpr must be in (0, 1], got {self.target_tpr}")
        if self.achieved_tpr < self.target_tpr:
            raise ValueError(
                f"achieved TPR {self.achieved_tpr} below target {self.target_tpr}")

    def to_json(self) -> dict:
        return {"lambda": self.lam, "target_tpr": self.target_tpr,
                "calibrated_on": self.calibrated_on,
                "achieved_tpr": self.achieved_tpr}

    @classmethod
    def from_json(cls, obj: dict) -> "DetectionCalibration":
        return cls(lam=float(obj["lambda"]), target_tpr=float(obj["target_tpr"]),
                   calibrated_on=str(obj["calibrated_on"]),
                   achieved_tpr=float(obj["achieved_tpr"]))


def score(model: CentroidModel, h: np.ndarray) -> float:
    """Minimum Mahalanobis distance from h to any known centroid."""
    dists = model.distances(h)
    if dists.ndim != 1:
        raise ValueError("score takes a single vector; use score_batch")
    return float(dists.min())


def score_batch(model: CentroidModel, h: np.ndarray) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(h, dtype=np.float64))
    return model.distances(arr).min(axis=1)


def calibrate(ood_scores, target_tpr: float = 0.90,
              calibrated_on: str = "val") -> DetectionCalibration:
    """Largest lambda keeping at least target_tpr of the OOD scores >= lambda."""
    s = np.asarray(ood_scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("cannot calibrate on empty OOD scores")
    lam = calibrate_threshold(s, target_tpr)
    achieved = float(np.mean(s >= lam))
    return DetectionCalibration(lam=lam, target_tpr=float(target_tpr),
                                calibrated_on=calibrated_on,
                                achieved_tpr=achieved)


def judge(sco: float, lam: float) -> str:
    """OOD iff the score reaches the threshold (boundary counts as OOD)."""
    return OOD if sco >= lam else IND


def partition(model: CentroidModel, cal: DetectionCalibration,
              data: Dataset, transform=None) -> tuple[Dataset, Dataset]:
    """Split a dataset into detected-IND and detected-OOD sides.

    Detected-IND samples are pseudo-labeled by nearest-centroid
    classification; detected-OOD samples keep label=None (their labels
    are minted later by discovery). Input order is preserved within each
    side. ``transform`` optionally maps the stored vectors into the
    model's space (e.g. an encoder) before scoring; the returned
    datasets keep the stored vectors untouched.
    """
    if len(data) == 0:
        empty = data.subset([])
        return empty, empty
    mat = data.matrix()
    if transform is not None:
        mat = transform(mat)
    scores = score_batch(model, mat)
    is_ood = scores >= cal.lam
    ind_idx = [i for i in range(len(data)) if not is_ood[i]]
    ood_idx = [i for i in range(len(data)) if is_ood[i]]
    detected_ind = data.subset(ind_idx)
    if ind_idx:
        preds = model.classify_batch(mat[ind_idx])
        detected_ind = detected_ind.with_labels(preds)
    detected_ood = data.subset(ood_idx)
    stripped = tuple(replace(s, label=None) for s in detected_ood.samples)
    detected_ood = replace(detected_ood, samples=stripped)
    return detected_ind, detected_ood


def write_score_dump(path, ids, scores, judged, true_is_ood=None) -> None:
    """CSV of per-sample detection scores and decisions."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(ids)
    if true_is_ood is None:
        true_col = [""] * n
    else:
        true_col = [str(int(bool(t))) for t in true_is_ood]
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "true_is_ood", "score", "judged"])
        for i in range(n):
            writer.writerow([ids[i], true_col[i], f"{scores[i]:.12g}", judged[i]])
