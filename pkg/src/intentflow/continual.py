"""Replay-based continual retraining over the expanded label set.

The replay set concatenates the detection stage's pseudo-labeled IND
samples with the discovery stage's pseudo-labeled OOD clusters — model
outputs only, never gold labels. Retraining warm-starts from the current
encoder, runs the identical contrastive loop, and refits centroids over
the union of known and discovered classes. Final evaluation maps each
discovered class back to a gold held-out class through the assignment
computed during discovery scoring (never recomputed on the final test
split) and reports Micro/Macro F1 overall, on the IND slice, and on the
OOD slice.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import centroid as centroid_mod
from .centroid import CentroidModel
from .data import Dataset, LabelCatalog
from .detection import DetectionCalibration
from .encoder import ProjectionEncoder
from .metrics import MetricsReport, micro_macro_f1
from .scl import SclConfig, TrainRecord, pretrain

__all__ = ["ReplaySet", "build_replay_set", "retrain", "evaluate_continual",
           "map_discovered_predictions"]

PSEUDO_IND = "pseudo-ind"
PSEUDO_OOD = "pseudo-ood"


@dataclass(frozen=True)
class ReplaySet:
    """Pseudo-labeled retraining pool with per-sample provenance."""

    data: Dataset
    provenance: tuple[str, ...]

    def __post_init__(self):
        if len(self.provenance) != len(self.data):
            raise ValueError("one provenance tag required per sample")
        known = set(self.data.catalog.known)
        discovered = set(self.data.catalog.discovered)
        for s, tag in zip(self.data.samples, self.provenance):
            if tag not in (PSEUDO_IND, PSEUDO_OOD):
                raise ValueError(f"unknown provenance tag {tag!r}")
            if tag == PSEUDO_IND and s.label not in known:
                raise ValueError(
                    f"pseudo-IND sample {s.id!r} labeled outside known classes")
            if tag == PSEUDO_OOD and s.label not in discovered:
                raise ValueError(
                    f"pseudo-OOD sample {s.id!r} labeled outside discovered classes")

    def __len__(self) -> int:
        return len(self.data)

    def tag_counts(self) -> dict[str, int]:
        counts = {PSEUDO_IND: 0, PSEUDO_OOD: 0}
        for tag in self.provenance:
            counts[tag] += 1
        return counts


def build_replay_set(detected_ind: Dataset, discovered: Dataset,
                     catalog: LabelCatalog) -> ReplaySet:
    """Concatenate the two pseudo-labeled sides under the updated catalog."""
    overlap = set(detected_ind.ids()) & set(discovered.ids())
    if overlap:
        raise ValueError(f"sample ids on both replay sides: {sorted(overlap)[:5]}")
    if detected_ind.samples and discovered.samples:
        if detected_ind.dim != discovered.dim:
            raise ValueError("replay sides have mismatched dimensions")
    dim = detected_ind.dim if detected_ind.samples else discovered.dim
    samples = detected_ind.samples + discovered.samples
    provenance = ((PSEUDO_IND,) * len(detected_ind)
                  + (PSEUDO_OOD,) * len(discovered))
    names = dict(detected_ind.label_names)
    names.update(discovered.label_names)
    data = Dataset(samples=samples, dim=dim, catalog=catalog,
                   label_names=names)
    return ReplaySet(data=data, provenance=provenance)


def retrain(enc: ProjectionEncoder, replay: ReplaySet, val: Dataset,
            cfg: SclConfig, log_fn=None, on_improve=None
            ) -> tuple[ProjectionEncoder, CentroidModel, list[TrainRecord],
                       DetectionCalibration]:
    """Warm-start contrastive retraining on the replay set.

    The loop is pretrain's verbatim (loss, batching, early stopping on
    validation OOD AUROC); only the starting parameters and the training
    pool differ. Returns the new encoder, centroids refit over the
    known + discovered classes present in the replay pool (a class the
    detector starved of samples cannot have a centroid), the history,
    and the recalibrated threshold.
    """
    if len(replay) == 0:
        raise ValueError("replay set is empty")
    labels = replay.data.labels()
    if np.unique(labels).size < 2:
        raise ValueError("replay set needs at least two classes")
    warm = enc.copy()
    best_enc, history, cal = pretrain(warm, replay.data, val, cfg,
                                      log_fn=log_fn, on_improve=on_improve)
    catalog = replay.data.catalog
    expanded = sorted(set(catalog.known) | set(catalog.discovered))
    present = {int(l) for l in labels}
    model = centroid_mod.fit(best_enc.encode(replay.data.matrix()), labels,
                             epsilon=cfg.centroid_epsilon,
                             classes=[c for c in expanded if c in present])
    return best_enc, model, history, cal


def map_discovered_predictions(predictions, catalog: LabelCatalog,
                               mapping: dict[int, int]) -> np.ndarray:
    """Translate discovered-class predictions into gold class ids.

    ``mapping`` sends discovered ids to the gold classes matched during
    discovery scoring. Unmatched discovered predictions keep their minted
    id — an id no gold label carries — so they score as plain errors.
    """
    discovered = set(catalog.discovered)
    out = []
    for p in predictions:
        p = int(p)
        if p in discovered:
            out.append(int(mapping.get(p, p)))
        else:
            out.append(p)
    return np.asarray(out, dtype=np.int64)


def evaluate_continual(enc: ProjectionEncoder, model: CentroidModel,
                       test2: Dataset, catalog: LabelCatalog,
                       mapping: dict[int, int]) -> dict[str, MetricsReport]:
    """Micro/Macro F1 on the final test split: overall, on-IND, on-OOD.

    Gold labels range over known + unknown classes; predictions range
    over known + discovered and are translated via ``mapping`` before
    scoring. Slices partition the split by gold label.
    """
    if len(test2) == 0:
        raise ValueError("final test split is empty")
    gold = test2.labels()
    h = enc.encode(test2.matrix())
    raw_preds = model.classify_batch(h)
    preds = map_discovered_predictions(raw_preds, catalog, mapping)

    known = set(catalog.known)
    is_ind = np.array([int(l) in known for l in gold], dtype=bool)
    slices = {"overall": np.ones(len(gold), dtype=bool),
              "on_ind": is_ind,
              "on_ood": ~is_ind}
    out: dict[str, MetricsReport] = {}
    for name, mask in slices.items():
        if not mask.any():
            out[name] = MetricsReport()
            continue
        micro, macro = micro_macro_f1(gold[mask], preds[mask])
        out[name] = MetricsReport(micro_f1=micro, macro_f1=macro)
    return out
