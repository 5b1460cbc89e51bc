"""Single-query multi-head cross-attention over candidate region features."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .dynamics import ModelParams


@dataclass
class AttentionResult:
    weights: torch.Tensor  # (heads, n) rows on the simplex
    scores: torch.Tensor  # (n,) head average
    context: torch.Tensor  # (d_input,)
    values: torch.Tensor  # (heads, n, head_dim)


@dataclass
class AttentionTrace:
    entries: list[tuple[int, int, list[int], list[float]]] = field(default_factory=list)

    def append(self, tick: int, scale: int, candidates, scores) -> None:
        self.entries.append((int(tick), int(scale), [int(c) for c in candidates], [float(s) for s in scores]))

    def __len__(self) -> int:
        return len(self.entries)


def make_query(params: ModelParams, s_action: torch.Tensor) -> torch.Tensor:
    n = params.config.n_synch_action
    if s_action.shape != (n,):
        raise ValueError(f"make_query: expected shape ({n},), got {tuple(s_action.shape)}")
    return params.w_query(s_action)


def as_features(features, dtype=torch.float64) -> torch.Tensor:
    f = torch.as_tensor(np.asarray(features) if not isinstance(features, torch.Tensor) else features, dtype=dtype)
    if f.ndim != 2 or f.shape[0] == 0:
        raise ValueError("attention needs a non-empty (n, d_input) candidate matrix")
    if not torch.isfinite(f).all():
        raise ValueError("attention: non-finite candidate feature")
    return f


def project_candidates(params: ModelParams, features) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-head keys and values, each shaped ``(heads, n, head_dim)``."""
    c = params.config
    f = as_features(features, params.dtype)
    if f.shape[1] != c.d_input:
        raise ValueError(f"attention: features have dim {f.shape[1]}, expected {c.d_input}")
    n = f.shape[0]
    keys = params.attn_key(f).reshape(n, c.heads, c.head_dim).transpose(0, 1)
    values = params.attn_value(f).reshape(n, c.heads, c.head_dim).transpose(0, 1)
    return keys, values


def head_average(weights: torch.Tensor) -> torch.Tensor:
    return weights.mean(0)


def logit_scale(params: ModelParams, literal: bool = False) -> float:
    """Softmax temperature: ``1/sqrt(head_dim)``, or ``1/sqrt(d_model)`` when ``literal``."""
    return 1.0 / math.sqrt(params.config.d_model if literal else params.config.head_dim)


def cross_attention(params: ModelParams, q: torch.Tensor, features=None, *, kv=None, scale: float | None = None) -> AttentionResult:
    c = params.config
    if q.shape != (c.d_query,):
        raise ValueError(f"cross_attention: query shape {tuple(q.shape)} != ({c.d_query},)")
    keys, values = kv if kv is not None else project_candidates(params, features)
    if keys.shape[1] == 0:
        raise ValueError("cross_attention: empty candidate set")
    scale = logit_scale(params) if scale is None else scale
    qh = q.reshape(c.heads, c.head_dim)
    logits = torch.einsum("hd,hnd->hn", qh, keys) * scale
    weights = torch.softmax(logits, dim=-1)
    ctx = torch.einsum("hn,hnd->hd", weights, values).reshape(-1)
    return AttentionResult(weights=weights, scores=head_average(weights), context=params.attn_out(ctx), values=values)


def joint_recalibrate(params: ModelParams, q: torch.Tensor, fine_features, *, literal: bool = False) -> torch.Tensor:
    """Attention re-normalised over exactly the selected subset; head-averaged."""
    f = as_features(fine_features, params.dtype)
    return cross_attention(params, q, f, scale=logit_scale(params, literal)).scores
