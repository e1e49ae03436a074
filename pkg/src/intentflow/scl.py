"""Supervised contrastive pre-training with early stopping on validation
OOD-detection AUROC.

The loss over a batch of paired views is the mean over anchors i of

    -(1/|Pos(i)|) * sum_{p in Pos(i)} log[ exp(h_i.h_p / T)
                                           / sum_{q in Neg(i)} exp(h_i.h_q / T) ]

where Pos(i) holds the same-label rows (the anchor itself excluded) and
Neg(i) the different-label rows. The denominator ranges over negatives
only, so the loss can go negative; ``inclusive_denominator`` switches to
the variant whose denominator also includes the positives. Every anchor
must have at least one positive (guaranteed by paired views) and at
least one negative, otherwise the batch is rejected.

Training uses plain SGD over class-aware shuffled batches; after every
epoch a centroid model is fitted on the training embeddings and the
validation OOD AUROC decides the running-best checkpoint (strict
improvement, earliest epoch kept on ties). The detection threshold is
calibrated on validation OOD scores at the best epoch.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import centroid as centroid_mod
from .data import Dataset
from .detection import DetectionCalibration, calibrate, score_batch
from .encoder import ProjectionEncoder
from .metrics import roc_auroc

__all__ = [
    "SclConfig",
    "TrainRecord",
    "scl_loss",
    "scl_grad",
    "make_batches",
    "encode_views",
    "run_training",
    "pretrain",
    "format_train_log",
    "write_history_csv",
]


@dataclass(frozen=True)
class SclConfig:
    """Hyperparameters shared by the contrastive and cross-entropy trainers."""

    temperature: float = 0.1
    n_views: int = 2
    dropout_p: float = 0.1
    learning_rate: float = 5e-2
    batch_size: int = 64
    max_epochs: int = 20
    seed: int = 0
    inclusive_denominator: bool = False
    centroid_epsilon: float = 1e-6
    target_tpr: float = 0.90

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.n_views < 2:
            raise ValueError("n_views must be at least 2")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")


@dataclass(frozen=True)
class TrainRecord:
    """One completed epoch of either trainer."""

    epoch: int
    train_loss: float
    val_auroc: float
    is_best: bool
    wall_time: float  # seconds


def _pair_masks(labels) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(labels)
    same = y[:, None] == y[None, :]
    eye = np.eye(y.shape[0], dtype=bool)
    return same & ~eye, ~same


def _check_batch(pos: np.ndarray, neg: np.ndarray) -> None:
    if not pos.any(axis=1).all():
        bad = int(np.argmin(pos.any(axis=1)))
        raise ValueError(f"anchor {bad} has no positive in the batch")
    if not neg.any(axis=1).all():
        bad = int(np.argmin(neg.any(axis=1)))
        raise ValueError(
            f"anchor {bad} has no negative in the batch; batch rejected")


def scl_loss(h, labels, temperature: float,
             inclusive_denominator: bool = False) -> float:
    """Mean per-anchor contrastive loss; rows of h are expected unit-norm."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    hm = np.asarray(h, dtype=np.float64)
    if hm.ndim != 2 or hm.shape[0] != len(labels):
        raise ValueError("h must be (n, d) with one label per row")
    pos, neg = _pair_masks(labels)
    _check_batch(pos, neg)
    sims = (hm @ hm.T) / temperature
    denom = (pos | neg) if inclusive_denominator else neg
    lse = logsumexp(sims, axis=1, b=denom.astype(np.float64))
    pos_mean = (sims * pos).sum(axis=1) / pos.sum(axis=1)
    return float(np.mean(lse - pos_mean))


def scl_grad(h, labels, temperature: float,
             inclusive_denominator: bool = False) -> np.ndarray:
    """Exact gradient of scl_loss with respect to each row of h."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    hm = np.asarray(h, dtype=np.float64)
    if hm.ndim != 2 or hm.shape[0] != len(labels):
        raise ValueError("h must be (n, d) with one label per row")
    pos, neg = _pair_masks(labels)
    _check_batch(pos, neg)
    m = hm.shape[0]
    sims = (hm @ hm.T) / temperature
    denom = (pos | neg) if inclusive_denominator else neg

    # Softmax over each row's denominator set, max-subtracted for stability.
    shifted = np.where(denom, sims, -np.inf)
    row_max = shifted.max(axis=1, keepdims=True)
    expd = np.exp(shifted - row_max)
    weights = expd / expd.sum(axis=1, keepdims=True)

    g = weights / m
    g -= pos / (m * pos.sum(axis=1, keepdims=True))
    return ((g + g.T) @ hm) / temperature


def make_batches(labels, batch_size: int, rng: np.random.Generator,
                 max_attempts: int = 100) -> list[np.ndarray]:
    """Seeded shuffle into batches, each containing at least two classes.

    Shuffles are redrawn until every batch is multi-class; after
    ``max_attempts`` failures a deterministic class-interleaved order is
    tried, and data that still cannot form valid batches (for example a
    single-class dataset) raises. A trailing batch of fewer than two
    samples is folded into its predecessor.
    """
    y = np.asarray(labels)
    n = y.shape[0]
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2")
    if n < 2:
        raise ValueError("need at least two samples")
    if np.unique(y).size < 2:
        raise ValueError("training data has a single class; contrastive "
                         "batches need at least two")

    def split(order: np.ndarray) -> list[np.ndarray]:
        chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
        if len(chunks) > 1 and chunks[-1].size < 2:
            chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
            chunks.pop()
        return chunks

    def valid(chunks: list[np.ndarray]) -> bool:
        return all(np.unique(y[c]).size >= 2 for c in chunks)

    for _ in range(max_attempts):
        batches = split(rng.permutation(n))
        if valid(batches):
            return batches

    # Deterministic fallback: deal samples from per-class queues in turn.
    queues = [list(rng.permutation(np.flatnonzero(y == c)))
              for c in np.unique(y)]
    order = []
    while any(queues):
        for q in queues:
            if q:
                order.append(q.pop())
    batches = split(np.asarray(order, dtype=np.int64))
    if not valid(batches):
        raise ValueError("class balance too skewed to form multi-class batches")
    return batches


def encode_views(enc: ProjectionEncoder, x: np.ndarray,
                 rng: np.random.Generator, n_views: int = 2,
                 want_caches: bool = False):
    """Stack n_views stochastic encodings per sample.

    Row v_views*i + v holds view v of sample i, so for two views the pair
    of one sample sits at adjacent indices 2i and 2i+1.
    """
    xb = np.asarray(x, dtype=np.float64)
    n = xb.shape[0]
    out = np.empty((n * n_views, enc.output_dim), dtype=np.float64)
    caches = []
    for v in range(n_views):
        mults = enc.sample_mask_multipliers(rng, n)
        if want_caches:
            hv, cache = enc.forward_batch(xb, mults, want_cache=True)
            caches.append(cache)
        else:
            hv = enc.forward_batch(xb, mults)
        out[v::n_views] = hv
    if want_caches:
        return out, caches
    return out


def format_train_log(rec: TrainRecord) -> str:
    return (f"epoch={rec.epoch} loss={rec.train_loss:.12g} "
            f"val_auroc={rec.val_auroc:.12g} best={str(rec.is_best).lower()} "
            f"elapsed_ms={rec.wall_time * 1000.0:.1f}")


def write_history_csv(history, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_auroc", "is_best",
                         "wall_time_s"])
        for rec in history:
            writer.writerow([rec.epoch, f"{rec.train_loss:.12g}",
                             f"{rec.val_auroc:.12g}",
                             str(rec.is_best).lower(),
                             f"{rec.wall_time:.3f}"])


def run_training(enc: ProjectionEncoder, train: Dataset, val: Dataset,
                 cfg: SclConfig, batch_step, snapshot,
                 log_fn=None, on_improve=None):
    """Epoch loop shared by the contrastive and cross-entropy trainers.

    ``batch_step(indices, rng) -> loss`` performs one parameter update;
    ``snapshot()`` captures the current parameters. After each epoch the
    harness fits a centroid model on the training embeddings, scores the
    validation set, and keeps the snapshot with the highest OOD AUROC
    (ties keep the earliest epoch). Returns (best snapshot, history,
    calibration at the best epoch).
    """
    x_train, y_train = train.matrix(), train.labels()
    x_val, y_val = val.matrix(), val.labels()
    unknown = set(val.catalog.unknown)
    forbidden = unknown & {int(l) for l in y_train}
    if forbidden:
        raise ValueError(f"training data contains unknown-catalog labels "
                         f"{sorted(forbidden)}")
    is_ood = np.array([int(l) in unknown for l in y_val], dtype=bool)
    if not is_ood.any() or is_ood.all():
        raise ValueError("validation set needs both known- and "
                         "unknown-label samples to compute OOD AUROC")

    rng = np.random.default_rng(cfg.seed)
    history: list[TrainRecord] = []
    best_idx = None
    best_auroc = -np.inf
    best_snapshot = None
    best_epoch = 0
    best_ood_scores = None
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        batches = make_batches(y_train, cfg.batch_size, rng)
        losses = [batch_step(idx, rng) for idx in batches]
        train_loss = float(np.mean(losses))

        model = centroid_mod.fit(enc.encode(x_train), y_train,
                                 epsilon=cfg.centroid_epsilon)
        scores = score_batch(model, enc.encode(x_val))
        auroc = roc_auroc(scores, is_ood)

        improved = auroc > best_auroc
        rec = TrainRecord(epoch=epoch, train_loss=train_loss,
                          val_auroc=float(auroc), is_best=improved,
                          wall_time=time.perf_counter() - t0)
        if improved:
            if best_idx is not None:
                history[best_idx] = replace(history[best_idx], is_best=False)
            best_idx = len(history)
            best_auroc = auroc
            best_snapshot = snapshot()
            best_epoch = epoch
            best_ood_scores = scores[is_ood]
            if on_improve is not None:
                on_improve(best_snapshot, epoch)
        history.append(rec)
        if log_fn is not None:
            log_fn(format_train_log(rec))

    cal = calibrate(best_ood_scores, cfg.target_tpr,
                    calibrated_on=f"val@epoch{best_epoch}")
    return best_snapshot, history, cal


def pretrain(enc: ProjectionEncoder, train: Dataset, val: Dataset,
             cfg: SclConfig, log_fn=None, on_improve=None
             ) -> tuple[ProjectionEncoder, list[TrainRecord], DetectionCalibration]:
    """Contrastive pre-training; returns the best encoder, the epoch
    history, and the detection threshold calibrated at the best epoch."""
    x_train, y_train = train.matrix(), train.labels()
    n_views = cfg.n_views

    def batch_step(idx: np.ndarray, rng: np.random.Generator) -> float:
        xb, yb = x_train[idx], y_train[idx]
        h, caches = encode_views(enc, xb, rng, n_views, want_caches=True)
        labels2 = np.repeat(yb, n_views)
        loss = scl_loss(h, labels2, cfg.temperature, cfg.inclusive_denominator)
        grad_h = scl_grad(h, labels2, cfg.temperature, cfg.inclusive_denominator)
        total = None
        for v, cache in enumerate(caches):
            grads = enc.backward(cache, grad_h[v::n_views])
            if total is None:
                total = grads
            else:
                total = [(tw + gw, tb + gb)
                         for (tw, tb), (gw, gb) in zip(total, grads)]
        enc.apply_gradients(total, cfg.learning_rate)
        return loss

    return run_training(enc, train, val, cfg, batch_step, snapshot=enc.copy,
                        log_fn=log_fn, on_improve=on_improve)
