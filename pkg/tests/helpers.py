"""Small builders shared by the test modules."""

import numpy as np
import torch

from fewmatch.corpus import TokenSequence
from fewmatch.matchers import Matcher, SeqBatch, TransformerConfig

torch.set_num_threads(1)

KINDS = ("bica", "ca", "sn", "owp", "transformer")


def small_matcher(kind, vocab_size=30, dim=6, layers=1, heads=2):
    tcfg = TransformerConfig(layers=layers, heads=heads, d_model=8, d_ff=12, dropout=0.1) if kind == "transformer" else None
    return Matcher(kind, vocab_size=vocab_size, embed_dim=dim, hidden_dim=dim, channels=dim, transformer=tcfg)


def random_seq(rng, vocab_size, max_len=7, width=None):
    length = int(rng.integers(1, max_len + 1))
    width = width or length
    idx = np.zeros(width, dtype=np.int64)
    idx[:length] = rng.integers(2, vocab_size, length)
    return TokenSequence(idx, length)


def batch(seqs):
    return SeqBatch.from_sequences(seqs)

# one line per acceptance criterion, printed in the terminal summary
REPORT = []
