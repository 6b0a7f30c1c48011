"""Differentiable sequence matchers: BiCA, CA, SN, OWP and a mini-transformer."""

from .checkpoint import CheckpointError, load_params, save_params
from .layers import aggregate, align_attend, compare, gate_encode, match_score
from .models import (
    MATCHER_KINDS,
    EpisodeTensors,
    Matcher,
    MatchOutput,
    Params,
    SeqBatch,
    count_parameters,
    cross_entropy,
    episode_loss,
    episode_tensors,
    forward_bica,
    forward_ca,
    forward_minitransformer,
    forward_owp,
    forward_sn,
)
from .transformer import TransformerConfig

__all__ = [
    "MATCHER_KINDS", "CheckpointError", "EpisodeTensors", "Matcher", "MatchOutput", "Params", "SeqBatch",
    "TransformerConfig", "aggregate", "align_attend", "compare", "count_parameters", "cross_entropy",
    "episode_loss", "episode_tensors", "forward_bica", "forward_ca", "forward_minitransformer",
    "forward_owp", "forward_sn", "gate_encode", "load_params", "match_score", "save_params",
]
