"""Sequence-match models for (reference, candidate) pairs.

A model is a :class:`Matcher` description plus a flat ``dict`` of named
tensors. Every forward function is pure in the parameters, which lets the
meta-learning code evaluate adapted parameter copies without touching the
originals.

The two logits are ordered by label: index 0 scores "different class",
index 1 scores "same class as the reference".
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..corpus import TokenSequence
from . import layers as L
from .transformer import TransformerConfig, encode, init_transformer, pack_pair

MATCHER_KINDS = ("bica", "ca", "sn", "owp", "transformer")

Params = dict  # name -> torch.Tensor, insertion ordered


class SeqBatch(NamedTuple):
    indices: torch.Tensor  # (B, L) long
    lengths: torch.Tensor  # (B,) long

    @property
    def mask(self) -> torch.Tensor:
        return torch.arange(self.indices.shape[1]).unsqueeze(0) < self.lengths.unsqueeze(1)

    @property
    def size(self) -> int:
        return self.indices.shape[0]

    @classmethod
    def from_sequences(cls, seqs: Sequence[TokenSequence]) -> "SeqBatch":
        """Stack sequences, dropping trailing columns that are padding in every row."""
        width = max(s.length for s in seqs)
        idx = np.stack([s.indices[:width] if len(s.indices) >= width
                        else np.pad(s.indices, (0, width - len(s.indices))) for s in seqs])
        return cls(torch.as_tensor(idx, dtype=torch.long),
                   torch.as_tensor([s.length for s in seqs], dtype=torch.long))

    def trimmed(self) -> "SeqBatch":
        width = int(self.lengths.max())
        return SeqBatch(self.indices[:, :width], self.lengths)


class MatchOutput(NamedTuple):
    logits: torch.Tensor  # (B, 2)
    features: torch.Tensor  # (B, D)


@dataclass(frozen=True)
class Matcher:
    kind: str
    vocab_size: int
    embed_dim: int = 50
    hidden_dim: int = 50
    channels: int = 50
    kernel_sizes: tuple[int, ...] = (1, 2, 3, 4, 5)
    dropout: float = 0.1
    transformer: TransformerConfig | None = field(default=None)

    def __post_init__(self):
        if self.kind not in MATCHER_KINDS:
            raise ValueError(f"unknown matcher kind {self.kind!r}; choose from {', '.join(MATCHER_KINDS)}")
        if list(self.kernel_sizes) != sorted(set(self.kernel_sizes)):
            raise ValueError("kernel sizes must be strictly increasing")
        if self.kind == "transformer" and self.transformer is None:
            object.__setattr__(self, "transformer", TransformerConfig())

    @property
    def feature_dim(self) -> int:
        agg = self.channels * len(self.kernel_sizes)
        return {"bica": 2 * agg, "ca": agg, "sn": 2 * self.hidden_dim, "owp": self.hidden_dim,
                "transformer": self.transformer.d_model if self.transformer else 0}[self.kind]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel_sizes"] = list(self.kernel_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Matcher":
        d = dict(d)
        if d.get("transformer") is not None:
            d["transformer"] = TransformerConfig(**d["transformer"])
        d["kernel_sizes"] = tuple(d.get("kernel_sizes", (1, 2, 3, 4, 5)))
        return cls(**d)

    def init_params(self, seed: int = 0, embeddings=None, dtype=torch.float64) -> Params:
        """Fresh parameters. ``embeddings`` is the (V, d_e) vocabulary table, if any."""
        gen = torch.Generator().manual_seed(int(seed))
        if embeddings is None:
            emb = torch.rand(self.vocab_size, self.embed_dim, generator=gen, dtype=dtype) * 0.2 - 0.1
            emb[0] = 0.0
        else:
            emb = torch.as_tensor(np.asarray(embeddings), dtype=dtype).clone()
            if emb.shape != (self.vocab_size, self.embed_dim):
                raise ValueError(f"embedding table {tuple(emb.shape)} != ({self.vocab_size}, {self.embed_dim})")
        if self.kind == "transformer":
            return init_transformer(self.transformer, emb, gen, dtype)

        def uniform(fan_in, *shape):
            bound = 1.0 / math.sqrt(fan_in)
            return (torch.rand(*shape, generator=gen, dtype=dtype) * 2 - 1) * bound

        d_e, d_h = self.embed_dim, self.hidden_dim
        p = {"embedding": emb,
             "gate.W_i": uniform(d_e, d_h, d_e), "gate.b_i": uniform(d_e, d_h),
             "gate.W_u": uniform(d_e, d_h, d_e), "gate.b_u": uniform(d_e, d_h)}
        if self.kind in ("bica", "ca"):
            for k in self.kernel_sizes:
                p[f"conv{k}.weight"] = uniform(d_h * k, self.channels, d_h, k)
                p[f"conv{k}.bias"] = uniform(d_h * k, self.channels)
            n_in = self.feature_dim
            p["out.weight"] = uniform(n_in, 2, n_in)
            p["out.bias"] = uniform(n_in, 2)
        elif self.kind == "sn":
            p["sn.log_tau"] = torch.tensor(math.log(0.2), dtype=dtype)
        return p

    def forward(self, params: Params, reference: SeqBatch, candidate: SeqBatch, training: bool = False,
                generator: torch.Generator | None = None, positives: SeqBatch | None = None) -> MatchOutput:
        gen = generator if training else None
        if self.kind == "bica":
            return forward_bica(self, params, reference, candidate, gen)
        if self.kind == "ca":
            return forward_ca(self, params, reference, candidate, gen)
        if self.kind == "sn":
            return forward_sn(self, params, reference, candidate)
        if self.kind == "owp":
            return forward_owp(self, params, reference, positives, candidate)
        return forward_minitransformer(self, params, reference, candidate, gen)


def count_parameters(params: Params) -> int:
    return sum(t.numel() for t in params.values())


def _broadcast(reference: SeqBatch, candidate: SeqBatch) -> SeqBatch:
    if reference.size == candidate.size:
        return reference
    if reference.size != 1:
        raise ValueError(f"{reference.size} references for {candidate.size} candidates")
    return SeqBatch(reference.indices.expand(candidate.size, -1), reference.lengths.expand(candidate.size))


def _encode(params, batch: SeqBatch):
    batch = batch.trimmed()
    mask = batch.mask
    E = params["embedding"][batch.indices]
    H = L.gate_encode(E, mask, params["gate.W_i"], params["gate.b_i"], params["gate.W_u"], params["gate.b_u"])
    return H, mask


def _aggregate(m: Matcher, params, C, mask, gen):
    kernels = [params[f"conv{k}.weight"] for k in m.kernel_sizes]
    biases = [params[f"conv{k}.bias"] for k in m.kernel_sizes]
    return L.aggregate(C, mask, kernels, biases, m.dropout, gen)


def forward_bica(m: Matcher, params, reference, candidate, gen=None) -> MatchOutput:
    """Shared gate encoder, soft alignment, bidirectional comparison, CNN aggregation."""
    H_r, mask_r = _encode(params, _broadcast(reference, candidate))
    H, mask = _encode(params, candidate)
    Hbar_r, Hbar = L.align_attend(H_r, H, mask_r, mask)
    C_r, C = L.compare(Hbar_r, H, Hbar, H_r)
    f_r = _aggregate(m, params, C_r, mask, gen)
    f = _aggregate(m, params, C, mask_r, gen)
    feats = torch.cat([f_r, f], dim=-1)
    return MatchOutput(F.linear(feats, params["out.weight"], params["out.bias"]), feats)


def forward_ca(m: Matcher, params, reference, candidate, gen=None) -> MatchOutput:
    """Reference-to-candidate comparison only."""
    H_r, mask_r = _encode(params, _broadcast(reference, candidate))
    H, mask = _encode(params, candidate)
    Hbar_r, _ = L.align_attend(H_r, H, mask_r, mask)
    f_r = _aggregate(m, params, Hbar_r * H, mask, gen)
    return MatchOutput(F.linear(f_r, params["out.weight"], params["out.bias"]), f_r)


def _pooled(params, batch):
    H, mask = _encode(params, batch)
    return L.masked_max(H, mask)


def cosine(a, b):
    """Row-wise cosine similarity; zero where either vector has zero norm."""
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    ok = (na > 0) & (nb > 0)
    denom = torch.where(ok, na * nb, torch.ones_like(na))
    return torch.where(ok, (a * b).sum(-1) / denom, torch.zeros_like(na))


def forward_sn(m: Matcher, params, reference, candidate) -> MatchOutput:
    """Siamese encoder; logits are the cosine similarity scaled by a learned temperature."""
    v_r = _pooled(params, _broadcast(reference, candidate))
    v = _pooled(params, candidate)
    s = cosine(v_r, v) / torch.exp(params["sn.log_tau"])
    return MatchOutput(torch.stack([-s, s], dim=-1), torch.cat([v_r, v], dim=-1))


def forward_owp(m: Matcher, params, reference, positives, candidate) -> MatchOutput:
    """One-way prototypes: mean of the known positives vs. the zero vector.

    ``reference`` must hold the single reference sentence; ``positives``
    optionally adds labelled positives to the prototype.
    """
    if reference.size != 1:
        raise ValueError("one-way prototypes need exactly one reference sentence")
    enc = _pooled(params, reference)
    if positives is not None and positives.size:
        enc = torch.cat([enc, _pooled(params, positives)], dim=0)
    proto = enc.mean(dim=0)
    v = _pooled(params, candidate)
    d_pos = ((v - proto) ** 2).sum(-1)
    d_neg = (v ** 2).sum(-1)
    return MatchOutput(torch.stack([-d_neg, -d_pos], dim=-1), v)


def forward_minitransformer(m: Matcher, params, reference, candidate, gen=None, return_attention=False):
    cfg = m.transformer
    reference = _broadcast(reference, candidate).trimmed()
    candidate = candidate.trimmed()
    tokens, mask = pack_pair(reference.indices, reference.lengths, candidate.indices, candidate.lengths,
                             m.vocab_size, cfg.max_positions)
    x = encode(params, tokens, mask, cfg, gen, return_attention)
    x, maps = x if return_attention else (x, None)
    feats = x[:, 0]
    out = MatchOutput(F.linear(feats, params["out.weight"], params["out.bias"]), feats)
    return (out, maps) if return_attention else out


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of the labels under softmax(logits)."""
    return F.cross_entropy(logits, labels)


def episode_loss(m: Matcher, params, reference: SeqBatch, candidates: SeqBatch, labels: torch.Tensor,
                 training: bool = False, generator=None, positives: SeqBatch | None = None):
    """Cross-entropy over a labelled set matched against one reference."""
    if candidates.size == 0:
        raise ValueError("empty labelled set")
    out = m.forward(params, reference, candidates, training, generator, positives)
    return cross_entropy(out.logits, labels)


class EpisodeTensors(NamedTuple):
    reference: SeqBatch
    support: SeqBatch | None
    support_labels: torch.Tensor
    query: SeqBatch | None
    query_labels: torch.Tensor
    support_positives: SeqBatch | None


def _labelled(items):
    if not items:
        return None, torch.zeros(0, dtype=torch.long)
    return (SeqBatch.from_sequences([inst.seq for inst, _ in items]),
            torch.tensor([y for _, y in items], dtype=torch.long))


def episode_tensors(episode) -> EpisodeTensors:
    ref = SeqBatch.from_sequences([episode.reference.seq])
    s, ys = _labelled(episode.support)
    q, yq = _labelled(episode.query)
    pos = [inst.seq for inst, y in episode.support if y == 1]
    return EpisodeTensors(ref, s, ys, q, yq, SeqBatch.from_sequences(pos) if pos else None)


def concat_batches(a: SeqBatch, b: SeqBatch) -> SeqBatch:
    width = max(a.indices.shape[1], b.indices.shape[1])
    pad = lambda t: F.pad(t, (0, width - t.shape[1]))
    return SeqBatch(torch.cat([pad(a.indices), pad(b.indices)]), torch.cat([a.lengths, b.lengths]))
