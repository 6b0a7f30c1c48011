"""Corpus ingestion: labeled instances, class splits, vocabulary and encoding.

Corpora are UTF-8 JSONL files with one ``{"text", "label", "num_aspects"?}``
object per line. Word vectors are read from GloVe-style text files.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD = 0
UNK = 1

DEFAULT_MAX_LEN = {"review": 64, "headline": 32}

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class CorpusError(ValueError):
    """Raised for unreadable or malformed corpus, embedding or split inputs."""


@dataclass(frozen=True)
class LabeledInstance:
    text: str
    label: str
    num_aspects: int | None = None
    uid: int = -1

    def __post_init__(self):
        if self.num_aspects is not None and self.num_aspects < 1:
            raise CorpusError(f"num_aspects must be >= 1, got {self.num_aspects}")


@dataclass(frozen=True)
class ClassSplit:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def __post_init__(self):
        for name in ("train", "val", "test"):
            if not getattr(self, name):
                raise CorpusError(f"split '{name}' is empty")
        seen: dict[str, str] = {}
        for name in ("train", "val", "test"):
            for c in getattr(self, name):
                if c in seen:
                    raise CorpusError(f"class {c!r} appears in both '{seen[c]}' and '{name}'")
                seen[c] = name

    def to_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test)}

    def part(self, name: str) -> tuple[str, ...]:
        return getattr(self, name)


@dataclass(frozen=True, eq=False)
class TokenSequence:
    """Index-encoded sentence padded to a fixed width."""

    indices: np.ndarray
    length: int

    def __post_init__(self):
        if self.length < 1:
            raise CorpusError("a token sequence needs at least one token")
        if self.length > len(self.indices):
            raise CorpusError("length exceeds padded width")

    @property
    def mask(self) -> np.ndarray:
        return np.arange(len(self.indices)) < self.length

    def padded(self, extra: int) -> "TokenSequence":
        """The same sequence with ``extra`` PAD positions appended."""
        pad = np.full(extra, PAD, dtype=self.indices.dtype)
        return TokenSequence(np.concatenate([self.indices, pad]), self.length)

    def __eq__(self, other):
        if not isinstance(other, TokenSequence):
            return NotImplemented
        return self.length == other.length and np.array_equal(self.indices, other.indices)

    def __hash__(self):
        return hash((self.length, self.indices.tobytes()))


@dataclass
class Vocabulary:
    tokens: list[str]
    vectors: np.ndarray
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.tokens[PAD] != PAD_TOKEN or self.tokens[UNK] != UNK_TOKEN:
            raise CorpusError("vocabulary must start with PAD and UNK")
        if self.vectors.shape[0] != len(self.tokens):
            raise CorpusError("vector table and token list disagree in size")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def lookup(self, token: str) -> int:
        return self.index.get(token, UNK)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "vocab.txt").write_text("\n".join(self.tokens) + "\n", encoding="utf-8")
        with open(directory / "vectors.npy", "wb") as fh:
            np.save(fh, self.vectors)

    @classmethod
    def load(cls, directory: str | Path) -> "Vocabulary":
        directory = Path(directory)
        tokens = (directory / "vocab.txt").read_text(encoding="utf-8").split("\n")[:-1]
        return cls(tokens, np.load(directory / "vectors.npy"))


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and keep punctuation marks as tokens."""
    return _TOKEN_RE.findall(text.lower())


def load_dataset(path: str | Path, schema: str = "jsonl") -> list[LabeledInstance]:
    """Read a JSONL corpus. Each instance gets its zero-based line position as uid."""
    if schema != "jsonl":
        raise CorpusError(f"unsupported corpus schema {schema!r}")
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"corpus file not found: {path}")
    instances = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise CorpusError(f"{path}:{lineno}: record is not an object")
            for key in ("text", "label"):
                if key not in rec:
                    raise CorpusError(f"{path}:{lineno}: missing field {key!r}")
            text, label = rec["text"], rec["label"]
            if not isinstance(text, str) or not tokenize(text):
                raise CorpusError(f"{path}:{lineno}: text is empty after tokenization")
            aspects = rec.get("num_aspects")
            if aspects is not None and (not isinstance(aspects, int) or aspects < 1):
                raise CorpusError(f"{path}:{lineno}: num_aspects must be a positive integer")
            instances.append(LabeledInstance(text, str(label), aspects, uid=len(instances)))
    if not instances:
        raise CorpusError(f"{path}: corpus is empty")
    return instances


def write_dataset(instances: Iterable[LabeledInstance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            rec = {"text": inst.text, "label": inst.label}
            if inst.num_aspects is not None:
                rec["num_aspects"] = inst.num_aspects
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def split_classes(instances: Sequence[LabeledInstance], split_spec: dict) -> ClassSplit:
    """Partition the corpus classes into disjoint train/val/test sets.

    ``split_spec`` is either ``{"train": [...], "val": [...], "test": [...]}``
    or ``{"ratio": [a, b, c], "seed": s}``. Ratios are scaled to the number
    of classes; classes are shuffled with the seed after sorting by name, so
    the result does not depend on corpus order.
    """
    classes = sorted({inst.label for inst in instances})
    if "ratio" in split_spec:
        ratio = np.asarray(split_spec["ratio"], dtype=float)
        if ratio.shape != (3,) or np.any(ratio < 0) or ratio.sum() <= 0:
            raise CorpusError(f"bad split ratio {split_spec['ratio']!r}")
        n = len(classes)
        sizes = np.floor(ratio / ratio.sum() * n).astype(int)
        # hand out remainders to the largest fractional parts, train first on ties
        frac = ratio / ratio.sum() * n - sizes
        for i in np.argsort(-frac, kind="stable")[: n - sizes.sum()]:
            sizes[i] += 1
        rng = np.random.default_rng(split_spec.get("seed", 0))
        order = [classes[i] for i in rng.permutation(n)]
        a, b = sizes[0], sizes[0] + sizes[1]
        return ClassSplit(tuple(order[:a]), tuple(order[a:b]), tuple(order[b:]))

    known = set(classes)
    parts = []
    for name in ("train", "val", "test"):
        names = split_spec.get(name)
        if names is None:
            raise CorpusError(f"split spec lacks {name!r}")
        unknown = [c for c in names if c not in known]
        if unknown:
            raise CorpusError(f"unknown class(es) in '{name}': {unknown}")
        parts.append(tuple(names))
    return ClassSplit(*parts)


def load_split_spec(path: str | Path) -> dict:
    try:
        spec = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CorpusError(f"cannot read split spec {path}: {exc}") from None
    if not isinstance(spec, dict):
        raise CorpusError("split spec must be a JSON object")
    return spec


def read_embeddings(path: str | Path) -> dict[str, np.ndarray]:
    """Parse a GloVe text file into ``{token: vector}``."""
    vectors: dict[str, np.ndarray] = {}
    dim = None
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read embeddings {path}: {exc}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                continue
            try:
                vec = np.asarray(parts[1:], dtype=np.float64)
            except ValueError:
                raise CorpusError(f"{path}:{lineno}: non-numeric vector entry") from None
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise CorpusError(f"{path}:{lineno}: dimension {len(vec)} != {dim}")
            vectors.setdefault(parts[0], vec)
    if dim is None:
        raise CorpusError(f"{path}: no vectors found")
    return vectors


def build_vocab(
    instances: Sequence[LabeledInstance],
    embeddings_path: str | Path,
    max_len: int = 64,
    seed: int = 0,
) -> Vocabulary:
    """Vocabulary over corpus tokens that have a pre-trained vector.

    Tokens are ordered by descending frequency, then alphabetically. Only the
    first ``max_len`` tokens of each text are counted since the rest are
    truncated away by :func:`encode_text`. The UNK row is a seeded
    uniform(-0.1, 0.1) draw and the PAD row is zero.
    """
    pretrained = read_embeddings(embeddings_path)
    dim = len(next(iter(pretrained.values())))
    counts = Counter()
    for inst in instances:
        counts.update(tokenize(inst.text)[:max_len])
    kept = sorted((t for t in counts if t in pretrained), key=lambda t: (-counts[t], t))
    tokens = [PAD_TOKEN, UNK_TOKEN] + kept
    table = np.zeros((len(tokens), dim))
    table[UNK] = np.random.default_rng(seed).uniform(-0.1, 0.1, dim)
    for i, tok in enumerate(kept, start=2):
        table[i] = pretrained[tok]
    return Vocabulary(tokens, table)


def encode_text(text: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    if max_len < 1:
        raise CorpusError("max_len must be >= 1")
    toks = tokenize(text)[:max_len]
    if not toks:
        raise CorpusError(f"text {text!r} is empty after tokenization")
    idx = np.full(max_len, PAD, dtype=np.int64)
    idx[: len(toks)] = [vocab.lookup(t) for t in toks]
    return TokenSequence(idx, len(toks))


@dataclass(frozen=True, eq=False)
class EncodedInstance:
    uid: int
    label: str
    seq: TokenSequence
    num_aspects: int | None = None


def encode_corpus(
    instances: Sequence[LabeledInstance], vocab: Vocabulary, max_len: int
) -> dict[str, list[EncodedInstance]]:
    """Group encoded instances by class, keeping file order within each class."""
    pool: dict[str, list[EncodedInstance]] = {}
    for inst in instances:
        enc = EncodedInstance(inst.uid, inst.label, encode_text(inst.text, vocab, max_len), inst.num_aspects)
        pool.setdefault(inst.label, []).append(enc)
    return pool
