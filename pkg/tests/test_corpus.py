import json

import numpy as np
import pytest

from fewmatch.corpus import (
    PAD,
    UNK,
    ClassSplit,
    CorpusError,
    LabeledInstance,
    Vocabulary,
    build_vocab,
    encode_corpus,
    encode_text,
    load_dataset,
    read_embeddings,
    split_classes,
    tokenize,
    write_dataset,
)


def write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


def glove(path, rows):
    path.write_text("".join(t + " " + " ".join(str(x) for x in v) + "\n" for t, v in rows.items()))
    return path


def test_load_three_records(tmp_path):
    p = write_lines(tmp_path / "c.jsonl", [{"text": "good food", "label": "food"},
                                          {"text": "rude staff", "label": "service", "num_aspects": 2},
                                          {"text": "cheap", "label": "price"}])
    out = load_dataset(p)
    assert [(i.text, i.label, i.num_aspects, i.uid) for i in out] == [
        ("good food", "food", None, 0), ("rude staff", "service", 2, 1), ("cheap", "price", None, 2)]


def test_missing_label_names_line(tmp_path):
    p = write_lines(tmp_path / "c.jsonl", [{"text": "a", "label": "x"}, {"text": "b"}])
    with pytest.raises(CorpusError, match=r":2: missing field 'label'"):
        load_dataset(p)


@pytest.mark.parametrize("line", ["{not json", '"just a string"', '{"text": "!!!", "label": 1, "num_aspects": 0}'])
def test_malformed_records(tmp_path, line):
    p = tmp_path / "c.jsonl"
    p.write_text(line + "\n")
    with pytest.raises(CorpusError, match=":1:"):
        load_dataset(p)


def test_empty_and_missing_corpus(tmp_path):
    (tmp_path / "e.jsonl").write_text("\n")
    with pytest.raises(CorpusError, match="empty"):
        load_dataset(tmp_path / "e.jsonl")
    with pytest.raises(CorpusError, match="not found"):
        load_dataset(tmp_path / "nope.jsonl")


def test_headline_corpus_loads_without_loss(tmp_path):
    """41 classes with 900 instances each, the size of the news-headline benchmark."""
    records = [{"text": f"headline {c} number {i}", "label": f"topic{c}"} for c in range(41) for i in range(900)]
    out = load_dataset(write_lines(tmp_path / "h.jsonl", records))
    assert len(out) == 41 * 900
    counts = {}
    for inst in out:
        counts[inst.label] = counts.get(inst.label, 0) + 1
    assert len(counts) == 41 and set(counts.values()) == {900}
    split = split_classes(out, {"ratio": [20, 5, 16], "seed": 0})
    assert tuple(map(len, (split.train, split.val, split.test))) == (20, 5, 16)


def _classes(n):
    return [LabeledInstance("x", f"c{i:03d}") for i in range(n)]


def test_ratio_split_sizes():
    split = split_classes(_classes(100), {"ratio": [64, 16, 20], "seed": 7})
    assert (len(split.train), len(split.val), len(split.test)) == (64, 16, 20)
    assert split_classes(_classes(100), {"ratio": [64, 16, 20], "seed": 7}) == split
    assert split_classes(_classes(100), {"ratio": [64, 16, 20], "seed": 8}) != split


def test_ratio_split_rounding():
    split = split_classes(_classes(7), {"ratio": [1, 1, 1], "seed": 0})
    assert sorted(map(len, (split.train, split.val, split.test))) == [2, 2, 3]
    assert len(set(split.train + split.val + split.test)) == 7


def test_split_ignores_corpus_order():
    inst = _classes(20)
    a = split_classes(inst, {"ratio": [10, 5, 5], "seed": 3})
    b = split_classes(inst[::-1], {"ratio": [10, 5, 5], "seed": 3})
    assert a == b


def test_overlapping_split_rejected():
    with pytest.raises(CorpusError, match="both"):
        split_classes(_classes(4), {"train": ["c000", "c001"], "val": ["c002"], "test": ["c001"]})
    with pytest.raises(CorpusError, match="unknown"):
        split_classes(_classes(4), {"train": ["c000"], "val": ["c002"], "test": ["c999"]})
    with pytest.raises(CorpusError):
        ClassSplit((), ("a",), ("b",))


def test_tokenize():
    assert tokenize("Good food!") == ["good", "food", "!"]
    assert tokenize("  The pasta's   fine. ") == ["the", "pasta", "'", "s", "fine", "."]


def test_vocab_from_embeddings(tmp_path):
    emb = glove(tmp_path / "g.txt", {t: np.arange(50) * 0.01 + i for i, t in enumerate(["good", "food", "!", "bad"])})
    inst = [LabeledInstance("Good food!", "a"), LabeledInstance("good zzz", "b")]
    vocab = build_vocab(inst, emb)
    assert vocab.tokens[:2] == ["<pad>", "<unk>"]
    assert vocab.tokens[2] == "good"  # most frequent first
    assert "bad" not in vocab.index and "zzz" not in vocab.index
    assert vocab.vectors.shape[1] == 50
    assert np.all(vocab.vectors[PAD] == 0)
    assert np.all(np.abs(vocab.vectors[UNK]) <= 0.1)
    assert vocab.lookup("zzz") == UNK
    np.testing.assert_array_equal(vocab.vectors[vocab.lookup("food")], np.arange(50) * 0.01 + 1)


def test_embeddings_dimension_mismatch(tmp_path):
    (tmp_path / "g.txt").write_text("a 1 2 3\nb 1 2\n")
    with pytest.raises(CorpusError, match=":2:"):
        read_embeddings(tmp_path / "g.txt")


def _vocab():
    toks = ["<pad>", "<unk>", "good", "food", "!"]
    return Vocabulary(toks, np.zeros((5, 3)))


def test_encode_padding():
    seq = encode_text("Good food!", _vocab(), 5)
    assert seq.indices.tolist() == [2, 3, 4, PAD, PAD] and seq.length == 3
    assert seq.mask.tolist() == [True, True, True, False, False]


def test_encode_truncation():
    seq = encode_text(" ".join(["good"] * 80), _vocab(), 64)
    assert seq.length == 64 and PAD not in seq.indices.tolist()


def test_encode_determinism_and_unk():
    v = _vocab()
    assert encode_text("good soup", v, 4) == encode_text("good soup", v, 4)
    assert encode_text("good soup", v, 4).indices.tolist() == [2, UNK, PAD, PAD]
    with pytest.raises(CorpusError):
        encode_text("   ", v, 4)


def test_vocab_save_load(tmp_path):
    v = Vocabulary(["<pad>", "<unk>", "a b"], np.arange(6.0).reshape(3, 2))
    v.save(tmp_path)
    w = Vocabulary.load(tmp_path)
    assert w.tokens == v.tokens and np.array_equal(w.vectors, v.vectors)


def test_encode_corpus_groups_by_class(tmp_path):
    inst = [LabeledInstance("good", "x", uid=0), LabeledInstance("food", "y", uid=1), LabeledInstance("!", "x", uid=2)]
    pool = encode_corpus(inst, _vocab(), 4)
    assert sorted(pool) == ["x", "y"] and [e.uid for e in pool["x"]] == [0, 2]


def test_write_then_load_round_trip(tmp_path):
    inst = [LabeledInstance("good food", "x", 2, uid=0), LabeledInstance("ok", "y", uid=1)]
    write_dataset(inst, tmp_path / "c.jsonl")
    assert load_dataset(tmp_path / "c.jsonl") == inst
