"""Synthetic keyword-matching corpora for tests, demos and trend checks.

Each class owns a handful of keywords whose word vectors scatter around a
class centroid; sentences are filler words with one or two keywords of
their class mixed in. Two sentences match when their keywords come from
the same class, which a reference sentence alone only partly reveals: the
reference shows one or two of the class keywords, the support set shows
more.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import LabeledInstance, write_dataset


@dataclass(frozen=True)
class KeywordCorpusConfig:
    n_classes: int = 20
    per_class: int = 200
    keywords_per_class: int = 8
    n_filler: int = 300
    dim: int = 50
    min_words: int = 5
    max_words: int = 10
    keyword_share: float = 0.55
    filler_scale: float = 0.5
    topic_dim: int = 10
    multi_aspect_rate: float = 0.0
    seed: int = 0


def make_keyword_corpus(cfg: KeywordCorpusConfig = KeywordCorpusConfig()):
    """Return ``(instances, vectors)`` where ``vectors`` maps every token to a word vector.

    ``keyword_share`` is the weight of the class centroid in a keyword
    vector (the rest is keyword-specific noise), so it sets how well one
    keyword predicts its siblings. All keyword vectors live in one shared
    ``topic_dim``-dimensional subspace, so what a model learns about the
    geometry of training-class keywords carries over to unseen classes.
    """
    rng = np.random.default_rng(cfg.seed)
    d = cfg.dim
    basis, _ = np.linalg.qr(rng.normal(size=(d, min(cfg.topic_dim, d))))
    vectors: dict[str, np.ndarray] = {}
    fillers = [f"w{i}" for i in range(cfg.n_filler)]
    for w in fillers:
        vectors[w] = rng.normal(0.0, cfg.filler_scale / np.sqrt(d), d)
    keywords = {}
    for c in range(cfg.n_classes):
        centroid = basis @ rng.normal(0.0, 1.0, basis.shape[1])
        centroid /= np.linalg.norm(centroid)
        kws = [f"c{c:02d}k{j}" for j in range(cfg.keywords_per_class)]
        for w in kws:
            noise = basis @ rng.normal(0.0, 1.0, basis.shape[1])
            noise /= np.linalg.norm(noise)
            v = cfg.keyword_share * centroid + (1 - cfg.keyword_share) * noise
            vectors[w] = v / np.linalg.norm(v) * 1.5
        keywords[c] = kws

    instances = []
    for c in range(cfg.n_classes):
        label = f"class{c:02d}"
        for _ in range(cfg.per_class):
            n_words = int(rng.integers(cfg.min_words, cfg.max_words + 1))
            words = [fillers[i] for i in rng.integers(0, cfg.n_filler, n_words)]
            n_kw = int(rng.integers(1, 3))
            for kw in rng.choice(cfg.keywords_per_class, n_kw, replace=False):
                words.insert(int(rng.integers(0, len(words) + 1)), keywords[c][kw])
            aspects = None
            if cfg.multi_aspect_rate > 0:
                aspects = 1
                if rng.random() < cfg.multi_aspect_rate:
                    other = int(rng.integers(cfg.n_classes - 1))
                    other += other >= c
                    words.insert(int(rng.integers(0, len(words) + 1)),
                                 keywords[other][int(rng.integers(cfg.keywords_per_class))])
                    aspects = 2
            instances.append(LabeledInstance(" ".join(words), label, aspects, uid=len(instances)))
    return instances, vectors


def keyword_task_data(cfg: KeywordCorpusConfig = KeywordCorpusConfig(), split=None, max_len: int = 16):
    """In-memory ``(TaskData, Vocabulary)`` for a synthetic corpus.

    ``split`` defaults to a seeded 10/5/5 class ratio.
    """
    from .corpus import PAD_TOKEN, UNK, UNK_TOKEN, Vocabulary, encode_corpus, split_classes
    from .metalearn import TaskData

    instances, vectors = make_keyword_corpus(cfg)
    tokens = [PAD_TOKEN, UNK_TOKEN] + list(vectors)
    table = np.zeros((len(tokens), cfg.dim))
    table[UNK] = np.random.default_rng(cfg.seed).uniform(-0.1, 0.1, cfg.dim)
    table[2:] = np.stack(list(vectors.values()))
    vocab = Vocabulary(tokens, table)
    split = split_classes(instances, split or {"ratio": [10, 5, 5], "seed": cfg.seed})
    return TaskData(encode_corpus(instances, vocab, max_len), split), vocab


def write_glove(vectors: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok, vec in vectors.items():
            fh.write(tok + " " + " ".join(f"{x:.6f}" for x in vec) + "\n")


def write_keyword_corpus(directory, cfg: KeywordCorpusConfig = KeywordCorpusConfig()) -> tuple[Path, Path]:
    """Materialize a corpus as ``corpus.jsonl`` and ``vectors.txt`` under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    instances, vectors = make_keyword_corpus(cfg)
    corpus, emb = directory / "corpus.jsonl", directory / "vectors.txt"
    write_dataset(instances, corpus)
    write_glove(vectors, emb)
    return corpus, emb
