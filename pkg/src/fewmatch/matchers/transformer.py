"""A small post-LN transformer encoder for pair classification.

The pair is packed as ``[CLS] reference [SEP] candidate`` with padding only
at the end; the final ``[CLS]`` state is the feature vector.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .layers import NEG_INF, dropout


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 2
    heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    dropout: float = 0.1
    max_positions: int = 160

    def __post_init__(self):
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        if self.heads < 1 or self.d_model % self.heads:
            raise ValueError(f"heads={self.heads} must divide d_model={self.d_model}")

    def to_dict(self):
        return asdict(self)


def init_transformer(cfg: TransformerConfig, vocab_vectors: torch.Tensor, gen: torch.Generator, dtype):
    """Parameters for a vocabulary of V words plus [CLS] and [SEP] at V and V+1."""
    V, d_e = vocab_vectors.shape
    d = cfg.d_model

    def normal(*shape):
        return torch.randn(*shape, generator=gen, dtype=dtype) * 0.02

    tok = normal(V + 2, d)
    k = min(d_e, d)
    tok[:V, :k] = vocab_vectors[:, :k].to(dtype)
    tok[0] = 0.0
    p = {"tok_embedding": tok, "pos_embedding": normal(cfg.max_positions, d),
         "emb_ln.weight": torch.ones(d, dtype=dtype), "emb_ln.bias": torch.zeros(d, dtype=dtype)}
    for i in range(cfg.layers):
        pre = f"layers.{i}."
        for name in ("q", "k", "v", "o"):
            p[pre + f"attn.{name}.weight"] = normal(d, d)
            p[pre + f"attn.{name}.bias"] = torch.zeros(d, dtype=dtype)
        p[pre + "ln1.weight"] = torch.ones(d, dtype=dtype)
        p[pre + "ln1.bias"] = torch.zeros(d, dtype=dtype)
        p[pre + "ffn.in.weight"] = normal(cfg.d_ff, d)
        p[pre + "ffn.in.bias"] = torch.zeros(cfg.d_ff, dtype=dtype)
        p[pre + "ffn.out.weight"] = normal(d, cfg.d_ff)
        p[pre + "ffn.out.bias"] = torch.zeros(d, dtype=dtype)
        p[pre + "ln2.weight"] = torch.ones(d, dtype=dtype)
        p[pre + "ln2.bias"] = torch.zeros(d, dtype=dtype)
    p["out.weight"] = normal(2, d)
    p["out.bias"] = torch.zeros(2, dtype=dtype)
    return p


def pack_pair(ref_idx, ref_len, cand_idx, cand_len, vocab_size, max_positions):
    """Build ``[CLS] r [SEP] c`` index rows, right-padded, with their masks."""
    cls, sep = vocab_size, vocab_size + 1
    B = cand_idx.shape[0]
    if ref_idx.shape[0] == 1 and B > 1:
        ref_idx, ref_len = ref_idx.expand(B, -1), ref_len.expand(B)
    total = ref_len + cand_len + 2
    T = int(total.max())
    if T > max_positions:
        raise ValueError(f"packed length {T} exceeds the position table ({max_positions})")
    out = torch.zeros(B, T, dtype=torch.long)
    for b in range(B):
        lr, lc = int(ref_len[b]), int(cand_len[b])
        out[b, 0] = cls
        out[b, 1:1 + lr] = ref_idx[b, :lr]
        out[b, 1 + lr] = sep
        out[b, 2 + lr:2 + lr + lc] = cand_idx[b, :lc]
    mask = torch.arange(T).unsqueeze(0) < total.unsqueeze(1)
    return out, mask


def self_attention(x, mask, p, pre, heads, p_drop=0.0, generator=None):
    """Multi-head scaled dot-product self-attention with padded keys masked out.

    Returns the projected output and the (B, heads, T, T) weights.
    """
    B, T, d = x.shape
    dk = d // heads

    def split(t):
        return t.view(B, T, heads, dk).transpose(1, 2)

    q = split(F.linear(x, p[pre + "q.weight"], p[pre + "q.bias"]))
    k = split(F.linear(x, p[pre + "k.weight"], p[pre + "k.bias"]))
    v = split(F.linear(x, p[pre + "v.weight"], p[pre + "v.bias"]))
    scores = q @ k.transpose(-1, -2) / math.sqrt(dk)
    scores = scores.masked_fill(~mask[:, None, None, :], NEG_INF)
    weights = torch.softmax(scores, dim=-1)
    ctx = dropout(weights, p_drop, generator) @ v
    ctx = ctx.transpose(1, 2).reshape(B, T, d)
    return F.linear(ctx, p[pre + "o.weight"], p[pre + "o.bias"]), weights


def encode(p, tokens, mask, cfg: TransformerConfig, generator=None, return_attention=False):
    d = cfg.d_model
    T = tokens.shape[1]
    x = p["tok_embedding"][tokens] + p["pos_embedding"][:T]
    x = F.layer_norm(x, (d,), p["emb_ln.weight"], p["emb_ln.bias"])
    x = dropout(x, cfg.dropout, generator)
    maps = []
    for i in range(cfg.layers):
        pre = f"layers.{i}."
        a, w = self_attention(x, mask, p, pre + "attn.", cfg.heads, cfg.dropout, generator)
        maps.append(w)
        x = F.layer_norm(x + dropout(a, cfg.dropout, generator), (d,), p[pre + "ln1.weight"], p[pre + "ln1.bias"])
        h = F.gelu(F.linear(x, p[pre + "ffn.in.weight"], p[pre + "ffn.in.bias"]))
        h = F.linear(h, p[pre + "ffn.out.weight"], p[pre + "ffn.out.bias"])
        x = F.layer_norm(x + dropout(h, cfg.dropout, generator), (d,), p[pre + "ln2.weight"], p[pre + "ln2.bias"])
    return (x, maps) if return_attention else x
