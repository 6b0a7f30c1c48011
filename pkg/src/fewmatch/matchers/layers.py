"""Stateless building blocks of the compare-aggregate matchers.

Sequences are batch-first: an embedded sentence of L words with d features
is a ``(B, L, d)`` tensor and its padding mask a ``(B, L)`` bool tensor.
Parameters are passed in explicitly so the same code runs on the base
parameters and on adapted copies during meta-learning.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

NEG_INF = -1e30


def dropout(x: torch.Tensor, p: float, generator: torch.Generator | None) -> torch.Tensor:
    """Inverted dropout driven by an explicit generator; identity when ``generator`` is None."""
    if generator is None or p <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def gate_encode(E, mask, W_i, b_i, W_u, b_u):
    """H = sigmoid(E W_i^T + b_i) * tanh(E W_u^T + b_u), zeroed at padded positions.

    ``W_i`` and ``W_u`` are (d_h, d_e) so that, column-wise, this is the
    usual ``sigmoid(W_i e + b_i)`` gate applied to every word vector ``e``.
    """
    if E.shape[-1] != W_i.shape[1] or E.shape[-1] != W_u.shape[1]:
        raise ValueError(f"embedding dim {E.shape[-1]} does not match gate input {W_i.shape[1]}")
    if mask.shape != E.shape[:-1]:
        raise ValueError(f"mask shape {tuple(mask.shape)} != sequence shape {tuple(E.shape[:-1])}")
    H = torch.sigmoid(F.linear(E, W_i, b_i)) * torch.tanh(F.linear(E, W_u, b_u))
    return H * mask.unsqueeze(-1).to(H.dtype)


def masked_softmax(scores, key_mask, dim):
    """Softmax along ``dim`` with masked keys pushed to zero weight."""
    return torch.softmax(scores.masked_fill(~key_mask, NEG_INF), dim=dim)


def align_attend(H_r, H, mask_r, mask):
    """Non-parametric soft alignment between reference and candidate.

    Returns ``(Hbar_r, Hbar)``: ``Hbar_r`` has one row per candidate position,
    each a convex combination of reference rows (weights normalized over the
    reference axis); ``Hbar`` is the mirror image with one row per reference
    position.
    """
    if H_r.shape[-1] != H.shape[-1]:
        raise ValueError("reference and candidate encodings differ in width")
    if not bool(mask_r.any(-1).all()) or not bool(mask.any(-1).all()):
        raise ValueError("a key sequence is fully masked")
    S = H_r @ H.transpose(-1, -2)  # (B, L_r, L)
    A_r = masked_softmax(S, mask_r.unsqueeze(-1), dim=-2)  # over reference positions
    A = masked_softmax(S, mask.unsqueeze(-2), dim=-1)  # over candidate positions
    Hbar_r = A_r.transpose(-1, -2) @ H_r  # (B, L, d)
    Hbar = A @ H  # (B, L_r, d)
    return Hbar_r, Hbar


def compare(Hbar_r, H, Hbar, H_r):
    """Word-level comparison by elementwise product in both directions."""
    if Hbar_r.shape != H.shape or Hbar.shape != H_r.shape:
        raise ValueError("aligned and original encodings differ in shape")
    return Hbar_r * H, Hbar * H_r


def masked_max(X, mask):
    """Max over the position axis of ``(B, L, c)`` restricted to unmasked positions."""
    if not bool(mask.any(-1).all()):
        raise ValueError("cannot pool a fully masked sequence")
    return X.masked_fill(~mask.unsqueeze(-1), NEG_INF).amax(dim=-2)


def aggregate(C, mask, kernels, biases, p_drop=0.0, generator=None):
    """Multi-width CNN over positions, ReLU, masked max-pool, concatenation.

    ``kernels[j]`` has shape (out_channels, d, k_j) and is applied with
    "same" padding so every width yields L outputs. Dropout (training only)
    is applied to the input comparison sequence and to the convolution
    outputs.
    """
    C = dropout(C, p_drop, generator)
    X = C.transpose(-1, -2)  # (B, d, L)
    pooled = []
    for W, b in zip(kernels, biases):
        k = W.shape[-1]
        Xp = F.pad(X, ((k - 1) // 2, k - 1 - (k - 1) // 2))
        Y = F.relu(F.conv1d(Xp, W, b)).transpose(-1, -2)
        Y = dropout(Y, p_drop, generator)
        pooled.append(masked_max(Y, mask))
    return torch.cat(pooled, dim=-1)


def match_score(f_r, f, W_o, b_o):
    """Single linear layer on the concatenated aggregates; no nonlinearity."""
    return F.linear(torch.cat([f_r, f], dim=-1), W_o, b_o)
