"""Meta-task construction: one reference, a support set and a query set.

Every sampler takes an explicit integer seed and builds its own
``numpy.random.Generator``; nothing reads global random state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from .corpus import EncodedInstance

REFERENCE_MODES = ("any", "single_aspect", "multi_aspect")

Pool = Mapping[str, Sequence[EncodedInstance]]


class EpisodeError(ValueError):
    pass


@dataclass(frozen=True)
class Episode:
    reference: EncodedInstance
    support: tuple[tuple[EncodedInstance, int], ...]
    query: tuple[tuple[EncodedInstance, int], ...]
    positive_class: str
    negative_classes: frozenset[str]
    seed: int

    def to_record(self) -> dict:
        return {
            "positive_class": self.positive_class,
            "negative_classes": sorted(self.negative_classes),
            "reference": self.reference.uid,
            "support": [[inst.uid, y] for inst, y in self.support],
            "query": [[inst.uid, y] for inst, y in self.query],
            "seed": self.seed,
        }


@dataclass(frozen=True)
class EpisodeBatch:
    episodes: tuple[Episode, ...]
    seed: int

    def __len__(self):
        return len(self.episodes)

    def __iter__(self):
        return iter(self.episodes)


def _annotated(instances: Sequence[EncodedInstance]) -> bool:
    return any(inst.num_aspects is not None for inst in instances)


def _candidates(instances, reference_mode):
    # ACD protocol: support/query come from multi-aspect sentences only
    if reference_mode == "any" or not _annotated(instances):
        return list(instances)
    return [inst for inst in instances if (inst.num_aspects or 1) >= 2]


def _split_sizes(rng, n_support, n_query, stratify):
    """Positive counts ``(total, in_support)`` under the balance policy.

    Unstratified, half of all non-reference instances are positive (a coin
    flip settles an odd total). Stratified, each set gets half of its own
    size; an odd set takes the extra positive on a coin flip, and when both
    sets are odd the flips are complementary, so |S| = |Q| = N always yields
    exactly N positives and N negatives.
    """
    total = n_support + n_query
    if not stratify:
        return total // 2 + (int(rng.integers(2)) if total % 2 else 0), None
    coin = int(rng.integers(2)) if (n_support % 2 or n_query % 2) else 0
    pos_s = n_support // 2 + (coin if n_support % 2 else 0)
    pos_q = n_query // 2 + ((1 - coin if n_support % 2 else coin) if n_query % 2 else 0)
    return pos_s + pos_q, pos_s


def sample_episode(
    pool: Pool,
    positive_class: str,
    negative_classes: Sequence[str],
    n: int = 10,
    reference_mode: str = "any",
    rng_seed: int = 0,
    n_support: int | None = None,
    n_query: int | None = None,
    stratify: bool = True,
) -> Episode:
    """Draw one meta-task.

    With the defaults, N+1 positives (one becomes the reference) and N
    negatives are drawn without replacement and split into support and query
    sets of N each. ``n_support``/``n_query`` override the two set sizes
    independently (support-size sweeps); the number of positives and
    negatives then follows the balance policy for each set.

    With ``stratify`` each set gets half positives and half negatives (the
    odd one out is decided by a coin flip); without it the pooled candidates
    are shuffled and cut.
    """
    if reference_mode not in REFERENCE_MODES:
        raise EpisodeError(f"reference_mode must be one of {REFERENCE_MODES}")
    if positive_class in negative_classes:
        raise EpisodeError("positive class listed among the negatives")
    n_support = n if n_support is None else n_support
    n_query = n if n_query is None else n_query
    if n_support < 0 or n_query < 0 or n_support + n_query < 1:
        raise EpisodeError("support and query sizes must be non-negative, not both zero")
    rng = np.random.default_rng(rng_seed)

    positives = list(pool[positive_class])
    cand_pos = _candidates(positives, reference_mode)
    if reference_mode == "any" or not _annotated(positives):
        ref_pool = cand_pos
    elif reference_mode == "single_aspect":
        ref_pool = [p for p in positives if (p.num_aspects or 1) == 1]
    else:
        ref_pool = cand_pos
    if not ref_pool:
        raise EpisodeError(f"class {positive_class!r} has no {reference_mode} reference")

    neg_pool = [inst for c in sorted(negative_classes) for inst in _candidates(pool[c], reference_mode)]
    if not neg_pool:
        raise EpisodeError("empty negative pool")

    n_pos, pos_s = _split_sizes(rng, n_support, n_query, stratify)
    n_neg = n_support + n_query - n_pos

    reference = ref_pool[int(rng.integers(len(ref_pool)))]
    pos_rest = [p for p in cand_pos if p.uid != reference.uid]
    if len(pos_rest) < n_pos:
        raise EpisodeError(
            f"class {positive_class!r} has {len(pos_rest) + 1} usable instances, needs {n_pos + 1}"
        )
    if len(neg_pool) < n_neg:
        raise EpisodeError(f"negative pool has {len(neg_pool)} instances, needs {n_neg}")
    pos = [(pos_rest[i], 1) for i in rng.choice(len(pos_rest), n_pos, replace=False)]
    neg = [(neg_pool[i], 0) for i in rng.choice(len(neg_pool), n_neg, replace=False)]

    if pos_s is None:
        mixed = pos + neg
        order = rng.permutation(len(mixed))
        mixed = [mixed[i] for i in order]
        support, query = mixed[:n_support], mixed[n_support:]
    else:
        neg_s = n_support - pos_s
        support = pos[:pos_s] + neg[:neg_s]
        query = pos[pos_s:] + neg[neg_s:]
        support = [support[i] for i in rng.permutation(len(support))]
        query = [query[i] for i in rng.permutation(len(query))]

    return Episode(
        reference=reference,
        support=tuple(support),
        query=tuple(query),
        positive_class=positive_class,
        negative_classes=frozenset(negative_classes),
        seed=int(rng_seed),
    )


def sample_batch(
    pool: Pool,
    all_classes: Sequence[str],
    batch_size: int = 5,
    n: int = 10,
    reference_mode: str = "any",
    rng_seed: int = 0,
    n_negative_classes: int | None = None,
    n_support: int | None = None,
    n_query: int | None = None,
    stratify: bool = True,
) -> EpisodeBatch:
    """Sample |C_p| distinct positive classes plus a disjoint negative class set.

    ``n_negative_classes`` defaults to ``batch_size`` and is capped by the
    classes left over after the positives are chosen.
    """
    classes = sorted(all_classes)
    if batch_size < 1:
        raise EpisodeError("batch_size must be >= 1")
    if len(classes) < batch_size + 1:
        raise EpisodeError(
            f"{len(classes)} classes cannot host {batch_size} positive classes plus a negative one"
        )
    rng = np.random.default_rng(rng_seed)
    perm = rng.permutation(len(classes))
    positives = [classes[i] for i in perm[:batch_size]]
    rest = [classes[i] for i in perm[batch_size:]]
    k = min(batch_size if n_negative_classes is None else n_negative_classes, len(rest))
    if k < 1:
        raise EpisodeError("n_negative_classes must be >= 1")
    negatives = rest[:k]
    seeds = rng.integers(0, 2**63 - 1, size=batch_size)
    episodes = tuple(
        sample_episode(
            pool, c, negatives, n, reference_mode, int(s),
            n_support=n_support, n_query=n_query, stratify=stratify,
        )
        for c, s in zip(positives, seeds)
    )
    return EpisodeBatch(episodes, int(rng_seed))


def batch_seed(master_seed: int, epoch: int, index: int) -> int:
    ss = np.random.SeedSequence([int(master_seed), int(epoch), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def episode_stream(
    pool: Pool,
    classes: Sequence[str],
    batches_per_epoch: int,
    master_seed: int = 0,
    epoch: int = 0,
    **batch_kwargs,
) -> Iterator[EpisodeBatch]:
    """Yield ``batches_per_epoch`` batches, each seeded from (master_seed, epoch, i).

    Two calls with equal arguments yield identical streams, so every method
    evaluated with the same master seed sees the same test episodes.
    """
    if not classes:
        raise EpisodeError("empty class partition")
    for i in range(batches_per_epoch):
        yield sample_batch(pool, classes, rng_seed=batch_seed(master_seed, epoch, i), **batch_kwargs)


def dump_episodes(batches, path) -> None:
    """Write one JSON line per episode, tagged with its batch position."""
    with open(path, "w", encoding="utf-8") as fh:
        for b, batch in enumerate(batches):
            for e, ep in enumerate(batch.episodes):
                rec = {"batch": b, "episode": e, **ep.to_record()}
                fh.write(json.dumps(rec) + "\n")
