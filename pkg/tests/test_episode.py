import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewmatch.corpus import EncodedInstance, TokenSequence
from fewmatch.episode import (
    EpisodeError,
    batch_seed,
    dump_episodes,
    episode_stream,
    sample_batch,
    sample_episode,
)


def make_pool(n_classes=8, per_class=25, aspects=False, seed=0):
    rng = np.random.default_rng(seed)
    pool, uid = {}, 0
    for c in range(n_classes):
        items = []
        for i in range(per_class):
            seq = TokenSequence(rng.integers(2, 50, 4), 4)
            na = (1 if i % 3 else 2) if aspects else None
            items.append(EncodedInstance(uid, f"c{c}", seq, na))
            uid += 1
        pool[f"c{c}"] = items
    return pool


def check_invariants(ep, pool, n_support, n_query):
    label_of = {inst.uid: c for c, items in pool.items() for inst in items}
    assert ep.positive_class not in ep.negative_classes
    assert label_of[ep.reference.uid] == ep.positive_class
    ids = [inst.uid for inst, _ in ep.support + ep.query]
    assert ep.reference.uid not in ids
    assert len(set(ids)) == len(ids)
    assert (len(ep.support), len(ep.query)) == (n_support, n_query)
    for inst, y in ep.support + ep.query:
        if y == 1:
            assert label_of[inst.uid] == ep.positive_class
        else:
            assert y == 0 and label_of[inst.uid] in ep.negative_classes


def test_default_sizes():
    pool = make_pool()
    ep = sample_episode(pool, "c0", ["c1", "c2"], n=10, rng_seed=3)
    assert (1, len(ep.support), len(ep.query)) == (1, 10, 10)
    labels = [y for _, y in ep.support + ep.query]
    assert labels.count(1) == 10 and labels.count(0) == 10
    assert sum(y for _, y in ep.support) == 5
    check_invariants(ep, pool, 10, 10)


def test_minimal_episode():
    pool = make_pool()
    for seed in range(20):
        ep = sample_episode(pool, "c0", ["c1"], n=1, rng_seed=seed)
        assert len(ep.support) == len(ep.query) == 1
        assert sorted([ep.support[0][1], ep.query[0][1]]) == [0, 1]


def test_same_seed_same_episode():
    pool = make_pool()
    a = sample_episode(pool, "c0", ["c1", "c2"], rng_seed=9)
    b = sample_episode(pool, "c0", ["c1", "c2"], rng_seed=9)
    assert json.dumps(a.to_record()) == json.dumps(b.to_record())


def test_unstratified_counts_still_balanced():
    pool = make_pool()
    for seed in range(10):
        ep = sample_episode(pool, "c0", ["c1"], n=10, rng_seed=seed, stratify=False)
        assert sum(y for _, y in ep.support + ep.query) == 10
        check_invariants(ep, pool, 10, 10)


def test_episode_errors():
    pool = make_pool(per_class=5)
    with pytest.raises(EpisodeError, match="usable"):
        sample_episode(pool, "c0", ["c1", "c2"], n=10)
    with pytest.raises(EpisodeError):
        sample_episode(pool, "c0", ["c0"], n=1)
    with pytest.raises(EpisodeError):
        sample_episode(make_pool(per_class=5), "c0", ["c1"], n=2, reference_mode="bogus")
    small = {"c0": make_pool()["c0"], "c1": make_pool(per_class=3)["c1"]}
    with pytest.raises(EpisodeError, match="negative pool"):
        sample_episode(small, "c0", ["c1"], n=10)


def test_aspect_reference_modes():
    pool = make_pool(per_class=60, aspects=True)
    for seed in range(10):
        single = sample_episode(pool, "c0", ["c1"], n=4, reference_mode="single_aspect", rng_seed=seed)
        multi = sample_episode(pool, "c0", ["c1"], n=4, reference_mode="multi_aspect", rng_seed=seed)
        assert single.reference.num_aspects == 1 and multi.reference.num_aspects == 2
        for ep in (single, multi):
            assert all(inst.num_aspects == 2 for inst, _ in ep.support + ep.query)
    no_multi = {c: [EncodedInstance(i.uid, i.label, i.seq, 1) for i in items] for c, items in pool.items()}
    with pytest.raises(EpisodeError, match="multi_aspect"):
        sample_episode(no_multi, "c0", ["c1"], n=2, reference_mode="multi_aspect")


def test_support_size_override():
    pool = make_pool()
    ep = sample_episode(pool, "c0", ["c1"], n_support=3, n_query=10, rng_seed=1)
    assert (len(ep.support), len(ep.query)) == (3, 10)
    assert sum(y for _, y in ep.query) == 5


def test_batch_structure():
    pool = make_pool(n_classes=12)
    b = sample_batch(pool, list(pool), batch_size=5, n=10, rng_seed=4)
    assert len(b) == 5
    pos = [ep.positive_class for ep in b]
    assert len(set(pos)) == 5
    negs = b.episodes[0].negative_classes
    assert all(ep.negative_classes == negs for ep in b)
    assert not negs & set(pos) and len(negs) == 5


def test_twelve_batches_give_600_queries():
    pool = make_pool(n_classes=10)
    stream = list(episode_stream(pool, list(pool), 12, master_seed=0, batch_size=5, n=10))
    assert sum(len(ep.query) for b in stream for ep in b) == 5 * 10 * 12 == 600


def test_batch_needs_a_negative_class():
    pool = make_pool(n_classes=5)
    with pytest.raises(EpisodeError):
        sample_batch(pool, list(pool), batch_size=5)
    sample_batch(pool, list(pool), batch_size=4, n=2)


def test_negative_class_count():
    pool = make_pool(n_classes=12)
    b = sample_batch(pool, list(pool), batch_size=3, n=2, n_negative_classes=2, rng_seed=0)
    assert len(b.episodes[0].negative_classes) == 2
    b = sample_batch(pool, list(pool), batch_size=3, n=2, n_negative_classes=50, rng_seed=0)
    assert len(b.episodes[0].negative_classes) == 9


def test_stream_determinism():
    pool = make_pool(n_classes=10)
    rec = lambda s: [ep.to_record() for b in s for ep in b]
    a = list(episode_stream(pool, list(pool), 300, master_seed=5, batch_size=5, n=2))
    b = list(episode_stream(pool, list(pool), 300, master_seed=5, batch_size=5, n=2))
    assert len(a) == 300 and rec(a) == rec(b)
    c = list(episode_stream(pool, list(pool), 3, master_seed=5, epoch=1, batch_size=5, n=2))
    assert rec(c) != rec(a[:3])
    assert list(episode_stream(pool, list(pool), 0)) == []


def test_batch_seed_is_pure():
    assert batch_seed(1, 2, 3) == batch_seed(1, 2, 3)
    assert len({batch_seed(1, 2, i) for i in range(100)}) == 100


def test_dump_episodes(tmp_path):
    pool = make_pool(n_classes=6)
    stream = list(episode_stream(pool, list(pool), 2, batch_size=2, n=2))
    dump_episodes(stream, tmp_path / "e.jsonl")
    recs = [json.loads(x) for x in (tmp_path / "e.jsonl").read_text().splitlines()]
    assert len(recs) == 4 and recs[3]["batch"] == 1 and recs[3]["episode"] == 1


@settings(max_examples=60, deadline=None)
@given(n_support=st.integers(0, 7), n_query=st.integers(0, 7), seed=st.integers(0, 2**32 - 1),
       stratify=st.booleans(), n_classes=st.integers(2, 6))
def test_invariants_property(n_support, n_query, seed, stratify, n_classes):
    if n_support + n_query == 0:
        return
    pool = make_pool(n_classes=n_classes, per_class=16)
    negs = [f"c{i}" for i in range(1, n_classes)]
    ep = sample_episode(pool, "c0", negs, n_support=n_support, n_query=n_query, rng_seed=seed, stratify=stratify)
    check_invariants(ep, pool, n_support, n_query)
    n_pos = sum(y for _, y in ep.support + ep.query)
    assert n_pos in ((n_support + n_query) // 2, (n_support + n_query + 1) // 2)
    if stratify:
        assert abs(2 * sum(y for _, y in ep.support) - n_support) <= 1
        assert abs(2 * sum(y for _, y in ep.query) - n_query) <= 1
