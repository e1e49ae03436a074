"""Trainable projection network producing unit-norm embeddings.

A small multilayer perceptron maps frozen input vectors to the
representation space used by every downstream task. Hyperbolic tangent
sits between layers; inverted dropout (scale 1/(1-p)) acts on hidden
activations only — never on the input or the output layer — and the final
output is L2-normalized. All arithmetic runs in float64; checkpoints
store float32.

Checkpoint layout (little-endian): magic ``ENC1``, u32 layer count,
f32 dropout rate, then per layer u32 rows, u32 cols, rows*cols f32
weights row-major, cols f32 biases.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "DropoutMask",
    "ProjectionEncoder",
    "mean_pool",
    "l2_normalize",
]

ENC_MAGIC = b"ENC1"
_NORM_EPS = 1e-12


def mean_pool(token_embeddings) -> np.ndarray:
    """Elementwise arithmetic mean over a non-empty token sequence."""
    mat = np.asarray(token_embeddings, dtype=np.float64)
    if mat.size == 0:
        raise ValueError("mean_pool requires a non-empty sequence")
    if mat.ndim == 1:
        mat = mat[None, :]
    if mat.ndim != 2:
        raise ValueError("token embeddings must form a 2-D array")
    return mat.mean(axis=0)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale a vector (or each row of a matrix) to unit Euclidean norm."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim == 1:
        norm = float(np.linalg.norm(arr))
        if norm < _NORM_EPS:
            raise ValueError("cannot normalize a zero-norm vector")
        return arr / norm
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    if (norms < _NORM_EPS).any():
        bad = int(np.argmin(norms))
        raise ValueError(f"cannot normalize zero-norm row {bad}")
    return arr / norms


@dataclass(frozen=True)
class DropoutMask:
    """Kept-unit indicator for one hidden layer plus the inverse-keep scale."""

    kept: np.ndarray
    scale: float

    def multiplier(self) -> np.ndarray:
        return self.kept.astype(np.float64) * self.scale


class ProjectionEncoder:
    """Tanh MLP with L2-normalized outputs and manual backprop.

    ``layers`` is a list of (weights, bias) pairs; activations use the
    row-vector convention z = a @ W + b. Dropout applies to the tanh
    outputs of every non-final layer.
    """

    def __init__(self, layers, dropout_p: float = 0.1):
        if not layers:
            raise ValueError("encoder needs at least one layer")
        if not 0.0 <= dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {dropout_p}")
        self.layers = [(np.asarray(w, dtype=np.float64),
                        np.asarray(b, dtype=np.float64)) for w, b in layers]
        self.dropout_p = float(dropout_p)
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ValueError(f"layer {i}: weight/bias shapes inconsistent")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {i}: non-finite parameters")
            if i > 0 and self.layers[i - 1][0].shape[1] != w.shape[0]:
                raise ValueError(f"layers {i - 1}->{i} do not compose")

    # -- construction ------------------------------------------------------

    @classmethod
    def create(cls, input_dim: int, hidden_dims=None, output_dim=None,
               dropout_p: float = 0.1, seed: int = 0) -> "ProjectionEncoder":
        """Fresh encoder with symmetric-uniform init scaled by 1/sqrt(fan_in).

        Defaults to one hidden layer of width 2*input_dim and an output
        width equal to the input width.
        """
        if input_dim <= 0:
            raise ValueError("input_dim must be positive")
        if hidden_dims is None:
            hidden_dims = [2 * input_dim]
        if output_dim is None:
            output_dim = input_dim
        widths = [input_dim, *hidden_dims, output_dim]
        rng = np.random.default_rng(seed)
        layers = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
            layers.append((w, b))
        return cls(layers, dropout_p=dropout_p)

    # -- geometry ----------------------------------------------------------

    @property
    def input_dim(self) -> int:
        return int(self.layers[0][0].shape[0])

    @property
    def output_dim(self) -> int:
        return int(self.layers[-1][0].shape[1])

    @property
    def hidden_widths(self) -> list[int]:
        return [int(w.shape[1]) for w, _ in self.layers[:-1]]

    def copy(self) -> "ProjectionEncoder":
        return ProjectionEncoder([(w.copy(), b.copy()) for w, b in self.layers],
                                 dropout_p=self.dropout_p)

    # -- dropout -----------------------------------------------------------

    def sample_masks(self, rng: np.random.Generator) -> list[DropoutMask]:
        """One independent mask per hidden layer for a single forward pass."""
        p = self.dropout_p
        scale = 1.0 if p == 0.0 else 1.0 / (1.0 - p)
        return [DropoutMask(kept=rng.random(width) >= p, scale=scale)
                for width in self.hidden_widths]

    def sample_mask_multipliers(self, rng: np.random.Generator,
                                n: int) -> list[np.ndarray]:
        """Per-sample inverted-dropout multipliers, one (n, width) array
        per hidden layer."""
        p = self.dropout_p
        scale = 1.0 if p == 0.0 else 1.0 / (1.0 - p)
        return [(rng.random((n, width)) >= p).astype(np.float64) * scale
                for width in self.hidden_widths]

    # -- forward -----------------------------------------------------------

    def forward(self, x: np.ndarray, masks=None) -> np.ndarray:
        """Encode one vector; ``masks`` is an optional DropoutMask per
        hidden layer."""
        mults = None
        if masks is not None:
            if len(masks) != len(self.hidden_widths):
                raise ValueError("need one mask per hidden layer")
            mults = [m.multiplier()[None, :] for m in masks]
        out = self.forward_batch(np.asarray(x, dtype=np.float64)[None, :],
                                 mask_multipliers=mults)
        return out[0]

    def forward_batch(self, x: np.ndarray, mask_multipliers=None,
                      want_cache: bool = False):
        """Encode a batch of row vectors; optionally keep the activation
        cache needed by backward()."""
        a = np.asarray(x, dtype=np.float64)
        if a.ndim != 2 or a.shape[1] != self.input_dim:
            raise ValueError(
                f"input shape {a.shape} incompatible with input_dim {self.input_dim}")
        n_hidden = len(self.layers) - 1
        if mask_multipliers is not None and len(mask_multipliers) != n_hidden:
            raise ValueError("need one mask array per hidden layer")
        inputs = []      # layer inputs (post-dropout from previous layer)
        tanh_outs = []   # post-tanh, pre-dropout hidden activations
        for i, (w, b) in enumerate(self.layers):
            inputs.append(a)
            z = a @ w + b
            if i < n_hidden:
                t = np.tanh(z)
                tanh_outs.append(t)
                if mask_multipliers is not None:
                    mult = mask_multipliers[i]
                    if mult.shape != t.shape:
                        raise ValueError(
                            f"mask {i} shape {mult.shape} != activation {t.shape}")
                    a = t * mult
                else:
                    a = t
            else:
                a = z
        norms = np.linalg.norm(a, axis=1, keepdims=True)
        if (norms < _NORM_EPS).any():
            bad = int(np.argmin(norms))
            raise ValueError(f"zero-norm pre-normalization output at row {bad}")
        h = a / norms
        if not want_cache:
            return h
        cache = {"inputs": inputs, "tanh_outs": tanh_outs, "pre_norm": a,
                 "norms": norms, "h": h, "masks": mask_multipliers}
        return h, cache

    def encode(self, x: np.ndarray) -> np.ndarray:
        """Deterministic no-dropout embeddings for a batch."""
        return self.forward_batch(x)

    def make_views(self, x: np.ndarray, rng: np.random.Generator):
        """Two stochastic encodings of one vector under independent masks."""
        v1 = self.forward(x, masks=self.sample_masks(rng))
        v2 = self.forward(x, masks=self.sample_masks(rng))
        return v1, v2

    # -- backward ----------------------------------------------------------

    def backward(self, cache: dict, grad_h: np.ndarray):
        """Parameter gradients given dLoss/d(normalized output).

        Chains through the unit-sphere projection (h = u/|u| gives
        du = (g - (h.g)h)/|u|), the linear layers, dropout multipliers,
        and tanh. Returns [(dW, db), ...] aligned with self.layers.
        """
        g = np.asarray(grad_h, dtype=np.float64)
        h, norms = cache["h"], cache["norms"]
        inner = np.sum(h * g, axis=1, keepdims=True)
        d_pre = (g - inner * h) / norms

        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.layers)
        n_hidden = len(self.layers) - 1
        upstream = d_pre
        for i in range(len(self.layers) - 1, -1, -1):
            w, _ = self.layers[i]
            a_in = cache["inputs"][i]
            grads[i] = (a_in.T @ upstream, upstream.sum(axis=0))
            if i == 0:
                break
            d_a = upstream @ w.T  # gradient wrt layer i's (post-dropout) input
            j = i - 1             # that input is hidden layer j's output
            if cache["masks"] is not None:
                d_a = d_a * cache["masks"][j]
            t = cache["tanh_outs"][j]
            upstream = d_a * (1.0 - t * t)
        return grads

    def apply_gradients(self, grads, lr: float) -> None:
        """In-place SGD step: params -= lr * grad."""
        for (w, b), (dw, db) in zip(self.layers, grads):
            w -= lr * dw
            b -= lr * db

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as fh:
            fh.write(ENC_MAGIC)
            fh.write(struct.pack("<If", len(self.layers), self.dropout_p))
            for w, b in self.layers:
                fh.write(struct.pack("<II", w.shape[0], w.shape[1]))
                fh.write(w.astype("<f4").tobytes())
                fh.write(b.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "ProjectionEncoder":
        path = Path(path)
        blob = path.read_bytes()
        if blob[:4] != ENC_MAGIC:
            raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {ENC_MAGIC!r}")
        n_layers, dropout_p = struct.unpack("<If", blob[4:12])
        off = 12
        layers = []
        for i in range(n_layers):
            if off + 8 > len(blob):
                raise ValueError(f"{path}: truncated at layer {i} header")
            rows, cols = struct.unpack("<II", blob[off:off + 8])
            off += 8
            w_bytes, b_bytes = rows * cols * 4, cols * 4
            if off + w_bytes + b_bytes > len(blob):
                raise ValueError(f"{path}: truncated at layer {i} parameters")
            w = np.frombuffer(blob[off:off + w_bytes], dtype="<f4").reshape(rows, cols)
            off += w_bytes
            b = np.frombuffer(blob[off:off + b_bytes], dtype="<f4")
            off += b_bytes
            layers.append((w.astype(np.float64), b.astype(np.float64)))
        if off != len(blob):
            raise ValueError(f"{path}: {len(blob) - off} trailing bytes")
        return cls(layers, dropout_p=float(dropout_p))
