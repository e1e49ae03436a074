"""Cross-entropy fine-tuning baseline: a linear head over the encoder.

Mirrors the contrastive trainer in everything but the loss so metric
differences are attributable to the representation: same optimizer,
batching, epoch cap, logging, and best-checkpoint rule. Early stopping
still uses validation OOD AUROC computed through the centroid model on
encoder outputs (the nearest-distance evaluation path); the head itself
serves the fully-connected classification variant.

Head checkpoint layout (little-endian): magic ``HED1``, u32 dimension,
u32 class count, u32 class ids, then weights (d x |C|) and bias as
float32 row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .data import Dataset
from .encoder import ProjectionEncoder
from .scl import SclConfig, run_training

__all__ = ["LinearHead", "ce_loss", "ce_grad", "ft_train", "fc_classify",
           "fc_classify_batch"]

HEAD_MAGIC = b"HED1"


class LinearHead:
    """Dense classification layer mapping embeddings to class logits."""

    def __init__(self, weights, bias, classes):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        self.classes = tuple(int(c) for c in classes)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("weights must be 2-D and bias 1-D")
        if self.weights.shape[1] != len(self.classes):
            raise ValueError("one weight column required per class")
        if self.bias.shape[0] != len(self.classes):
            raise ValueError("one bias entry required per class")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ValueError("head parameters must be finite")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("duplicate class ids")

    @classmethod
    def create(cls, dim: int, classes, seed: int = 0) -> "LinearHead":
        classes = tuple(sorted(int(c) for c in classes))
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(dim)
        w = rng.uniform(-bound, bound, size=(dim, len(classes)))
        b = rng.uniform(-bound, bound, size=len(classes))
        return cls(w, b, classes)

    @property
    def dim(self) -> int:
        return int(self.weights.shape[0])

    def logits(self, h: np.ndarray) -> np.ndarray:
        arr = np.asarray(h, dtype=np.float64)
        return arr @ self.weights + self.bias

    def class_index(self, label: int) -> int:
        try:
            return self.classes.index(int(label))
        except ValueError:
            raise KeyError(f"label {label} not among head classes")

    def copy(self) -> "LinearHead":
        return LinearHead(self.weights.copy(), self.bias.copy(), self.classes)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as fh:
            fh.write(HEAD_MAGIC)
            fh.write(struct.pack("<II", self.dim, len(self.classes)))
            fh.write(np.asarray(self.classes, dtype="<u4").tobytes())
            fh.write(self.weights.astype("<f4").tobytes())
            fh.write(self.bias.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "LinearHead":
        path = Path(path)
        blob = path.read_bytes()
        if blob[:4] != HEAD_MAGIC:
            raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {HEAD_MAGIC!r}")
        d, c = struct.unpack("<II", blob[4:12])
        off = 12
        need = c * 4 + d * c * 4 + c * 4
        if len(blob) - off != need:
            raise ValueError(f"{path}: payload is {len(blob) - off} bytes, expected {need}")
        classes = np.frombuffer(blob[off:off + c * 4], dtype="<u4")
        off += c * 4
        w = np.frombuffer(blob[off:off + d * c * 4], dtype="<f4").reshape(d, c)
        off += d * c * 4
        b = np.frombuffer(blob[off:off + c * 4], dtype="<f4")
        return cls(w.astype(np.float64), b.astype(np.float64),
                   tuple(int(x) for x in classes))


def ce_loss(logits, label_indices) -> float:
    """Mean softmax cross-entropy with max-logit subtraction.

    ``label_indices`` index columns of ``logits`` (0 .. C-1).
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(label_indices, dtype=np.int64)
    if z.ndim != 2 or z.shape[0] != y.shape[0]:
        raise ValueError("logits must be (n, C) with one label per row")
    if y.size and (y.min() < 0 or y.max() >= z.shape[1]):
        raise ValueError("label index outside logit columns")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    correct = shifted[np.arange(z.shape[0]), y]
    return float(np.mean(lse - correct))


def ce_grad(logits, label_indices) -> np.ndarray:
    """Gradient of ce_loss with respect to the logits: (softmax - onehot)/n."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(label_indices, dtype=np.int64)
    shifted = z - z.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=1, keepdims=True)
    probs[np.arange(z.shape[0]), y] -= 1.0
    return probs / z.shape[0]


def ft_train(enc: ProjectionEncoder, head: LinearHead, train: Dataset,
             val: Dataset, cfg: SclConfig, log_fn=None, on_improve=None,
             reset_head: bool = False):
    """Joint SGD on encoder and head under cross-entropy.

    With ``reset_head`` the head is re-initialized whenever the training
    class set differs from the head's (the workflow's answer to a grown
    label space); otherwise a mismatch is an error. Returns (best
    encoder, best head, history, calibration at the best epoch).
    """
    x_train, y_train = train.matrix(), train.labels()
    train_classes = tuple(sorted(int(c) for c in np.unique(y_train)))
    if train_classes != head.classes:
        if reset_head:
            head = LinearHead.create(enc.output_dim, train_classes,
                                     seed=cfg.seed)
        else:
            raise ValueError(
                f"head classes {head.classes} do not match training classes "
                f"{train_classes}; pass reset_head to re-initialize")
    label_to_idx = {c: i for i, c in enumerate(head.classes)}
    y_idx = np.array([label_to_idx[int(l)] for l in y_train], dtype=np.int64)

    def batch_step(idx: np.ndarray, rng: np.random.Generator) -> float:
        xb, yb = x_train[idx], y_idx[idx]
        mults = enc.sample_mask_multipliers(rng, len(idx))
        h, cache = enc.forward_batch(xb, mults, want_cache=True)
        logits = head.logits(h)
        loss = ce_loss(logits, yb)
        d_logits = ce_grad(logits, yb)
        dw_head = h.T @ d_logits
        db_head = d_logits.sum(axis=0)
        d_h = d_logits @ head.weights.T
        enc_grads = enc.backward(cache, d_h)
        enc.apply_gradients(enc_grads, cfg.learning_rate)
        head.weights -= cfg.learning_rate * dw_head
        head.bias -= cfg.learning_rate * db_head
        return loss

    def snapshot():
        return enc.copy(), head.copy()

    (best_enc, best_head), history, cal = run_training(
        enc, train, val, cfg, batch_step, snapshot=snapshot,
        log_fn=log_fn, on_improve=on_improve)
    return best_enc, best_head, history, cal


def fc_classify(enc: ProjectionEncoder, head: LinearHead, x: np.ndarray) -> int:
    """Fully-connected classification: argmax logit, ties to lowest id."""
    h = enc.forward(np.asarray(x, dtype=np.float64))
    logits = head.logits(h)
    return int(head.classes[int(np.argmax(logits))])


def fc_classify_batch(enc: ProjectionEncoder, head: LinearHead,
                      x: np.ndarray) -> np.ndarray:
    h = enc.encode(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    logits = head.logits(h)
    cls = np.asarray(head.classes, dtype=np.int64)
    return cls[np.argmax(logits, axis=1)]
