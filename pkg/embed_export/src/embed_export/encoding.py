"""Checkpoint loading and batched inference-only text encoding.

Wraps any checkpoint loadable through ``AutoModel``/``AutoTokenizer``.
Each text is tokenized and run through the frozen body; what comes back
is the sequence of last-layer hidden states for the text's real tokens.
Padding positions are dropped via the attention mask, so downstream
pooling never sees pad vectors; special tokens ([CLS]/[SEP]-style)
count as real tokens and are kept.  Hidden states are truncated to
float32, the precision of the interchange formats.
"""

from __future__ import annotations

import numpy as np


class CheckpointEncoder:
    """A frozen pretrained encoder ready for batch inference."""

    def __init__(self, tokenizer, model):
        self.tokenizer = tokenizer
        self.model = model
        self.hidden_size = int(model.config.hidden_size)

    @classmethod
    def load(cls, checkpoint: str) -> "CheckpointEncoder":
        try:
            from transformers import AutoModel, AutoTokenizer

            tokenizer = AutoTokenizer.from_pretrained(checkpoint)
            model = AutoModel.from_pretrained(checkpoint)
        except Exception as exc:
            raise RuntimeError(
                f"cannot load checkpoint {checkpoint!r}: {exc}") from exc
        model.eval()
        return cls(tokenizer, model)

    def encode_tokens(self, texts) -> list[np.ndarray]:
        """Per-text float32 arrays of shape (n_real_tokens, hidden_size)."""
        import torch

        texts = list(texts)
        if not texts:
            return []
        batch = self.tokenizer(texts, padding=True, truncation=True,
                               return_tensors="pt")
        with torch.no_grad():
            out = self.model(**batch)
        hidden = out.last_hidden_state.numpy().astype(np.float32, copy=False)
        mask = batch["attention_mask"].numpy().astype(bool)
        return [hidden[i][mask[i]] for i in range(hidden.shape[0])]
