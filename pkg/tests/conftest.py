import numpy as np
import pytest

from memaug import EncoderConfig, EncoderModel, Vocab


@pytest.fixture
def tiny_vocab():
    return Vocab([f"w{i:02d}" for i in range(20)])


@pytest.fixture
def tiny_config(tiny_vocab):
    return EncoderConfig(num_layers=2, d_model=8, num_heads=2, d_ff=16,
                         vocab_size=len(tiny_vocab), max_seq_len=16)


@pytest.fixture
def tiny_model(tiny_config, tiny_vocab):
    return EncoderModel(tiny_config, tiny_vocab, seed=7)


def random_batch(vocab, rng, batch=2, length=6):
    """ids/pad for a batch of CLS + random content + SEP sequences."""
    n = length + 2
    ids = np.zeros((batch, n), dtype=np.int64)
    pad = np.ones((batch, n), dtype=bool)
    for b in range(batch):
        ids[b, 0] = 2  # CLS
        ids[b, 1:length + 1] = rng.integers(5, len(vocab), size=length)
        ids[b, length + 1] = 3  # SEP
    return ids, pad
