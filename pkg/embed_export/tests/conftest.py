import os

os.environ.setdefault("HF_HUB_OFFLINE", "1")
os.environ.setdefault("TRANSFORMERS_OFFLINE", "1")
os.environ.setdefault("TOKENIZERS_PARALLELISM", "false")

import pytest

VOCAB = [
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]",
    "the", "a", "is", "was", "how", "do", "i", "my", "me", "to", "of",
    "account", "balance", "card", "transfer", "payment", "refund",
    "order", "status", "cancel", "update", "help", "need", "want",
    "check", "change", "new", "lost", "report", "issue", "charge",
    "##s", "##ing", "##ed", ".", ",", "?", "!",
]


@pytest.fixture(scope="session")
def checkpoint_dir(tmp_path_factory):
    """A tiny randomly initialized BERT checkpoint built on disk, no network."""
    import torch
    from transformers import BertConfig, BertModel, BertTokenizer

    root = tmp_path_factory.mktemp("ckpt")
    vocab_file = root / "vocab.txt"
    vocab_file.write_text("\n".join(VOCAB) + "\n", encoding="utf-8")
    config = BertConfig(vocab_size=len(VOCAB), hidden_size=16,
                        num_hidden_layers=2, num_attention_heads=2,
                        intermediate_size=32, max_position_embeddings=64)
    torch.manual_seed(20240814)
    model = BertModel(config)
    model.save_pretrained(root)
    tokenizer = BertTokenizer(str(vocab_file), model_max_length=64)
    tokenizer.save_pretrained(root)
    return root


@pytest.fixture(scope="session")
def encoder(checkpoint_dir):
    from embed_export.encoding import CheckpointEncoder

    return CheckpointEncoder.load(str(checkpoint_dir))
