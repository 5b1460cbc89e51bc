"""Recurrent latent core: synapse network, per-neuron history models, and
pairwise synchronisation.

All learnable tensors live on :class:`ModelParams`. :class:`LatentState` is a
plain mutable record owned by one rollout; the functions below rebind its
fields to new tensors so autograd sees a clean graph.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

CHECKPOINT_MAGIC = b"PSPM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    d_input: int = 32
    memory_length: int = 8
    memory_hidden: int = 16
    heads: int = 4
    head_dim: int = 8
    n_synch_out: int = 32
    n_synch_action: int = 32
    synapse_depth: int = 2
    num_classes: int = 3
    fusion_depth: int = 2
    fusion_hidden: int = 64
    dropout: float = 0.0
    seed: int = 0

    @property
    def d_query(self) -> int:
        return self.heads * self.head_dim

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("dropout", "seed"):
                continue
            if v < 1:
                raise ValueError(f"ModelConfig.{f.name}: must be >= 1 (got {v})")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"ModelConfig.dropout: must lie in [0, 1) (got {self.dropout})")
        max_pairs = self.d_model * (self.d_model - 1) // 2
        for name in ("n_synch_out", "n_synch_action"):
            if getattr(self, name) > max_pairs:
                raise ValueError(f"ModelConfig.{name}: more pairs than the {max_pairs} available")

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"ModelConfig: unknown keys {sorted(unknown)}")
        return cls(**d)


def sample_pairs(d_model: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` distinct unordered neuron pairs ``(i, j)``, ``i < j``."""
    total = d_model * (d_model - 1) // 2
    k = np.sort(rng.choice(total, size=n, replace=False)).astype(np.int64)
    # invert the row-major upper-triangle index k -> (i, j)
    i = d_model - 2 - np.floor(np.sqrt(-8 * k + 4 * d_model * (d_model - 1) - 7) / 2.0 - 0.5).astype(np.int64)
    j = k + i + 1 - total + (d_model - i) * (d_model - i - 1) // 2
    return np.stack([i, j], 1).astype(np.int64)


class ModelParams(nn.Module):
    """Every learnable tensor of the reasoning engine."""

    def __init__(self, config: ModelConfig, dtype=torch.float64):
        super().__init__()
        config.validate()
        self.config = config
        D, d_in, M, H = config.d_model, config.d_input, config.memory_length, config.memory_hidden
        gen = torch.Generator().manual_seed(int(config.seed))
        rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0xA115]))

        def uniform(*shape, bound):
            return nn.Parameter((torch.rand(*shape, generator=gen, dtype=dtype) * 2 - 1) * bound)

        self.start_e = uniform(D, bound=math.sqrt(1.0 / D))

        widths = [D + d_in] + [D] * config.synapse_depth
        self.synapse = nn.ModuleList(nn.Linear(a, b, dtype=dtype) for a, b in zip(widths[:-1], widths[1:]))
        self.synapse_norms = nn.ModuleList(nn.LayerNorm(D, dtype=dtype) for _ in range(config.synapse_depth - 1))

        self.nlm_w1 = uniform(D, M, H, bound=1.0 / math.sqrt(M))
        self.nlm_b1 = nn.Parameter(torch.zeros(D, H, dtype=dtype))
        self.nlm_w2 = uniform(D, H, bound=1.0 / math.sqrt(H))
        self.nlm_b2 = nn.Parameter(torch.zeros(D, dtype=dtype))

        self.register_buffer("pairs_out", torch.from_numpy(sample_pairs(D, config.n_synch_out, rng)))
        self.register_buffer("pairs_action", torch.from_numpy(sample_pairs(D, config.n_synch_action, rng)))
        self.decay_out_raw = nn.Parameter(torch.zeros(config.n_synch_out, dtype=dtype))
        self.decay_action_raw = nn.Parameter(torch.zeros(config.n_synch_action, dtype=dtype))

        self.w_out = nn.Linear(config.n_synch_out, config.num_classes, dtype=dtype)
        self.w_query = nn.Linear(config.n_synch_action, config.d_query, dtype=dtype)
        self.attn_key = nn.Linear(d_in, config.d_query, dtype=dtype)
        self.attn_value = nn.Linear(d_in, config.d_query, dtype=dtype)
        self.attn_out = nn.Linear(config.d_query, d_in, dtype=dtype)

        fw = [2 * config.n_synch_out] + [config.fusion_hidden] * (config.fusion_depth - 1) + [config.num_classes]
        self.fusion = nn.ModuleList(nn.Linear(a, b, dtype=dtype) for a, b in zip(fw[:-1], fw[1:]))

        # nn.Linear draws from the global RNG; redraw every such weight from our generator.
        with torch.no_grad():
            for mod in self.modules():
                if isinstance(mod, nn.Linear):
                    bound = 1.0 / math.sqrt(mod.in_features)
                    mod.weight.copy_((torch.rand(mod.weight.shape, generator=gen, dtype=dtype) * 2 - 1) * bound)
                    mod.bias.copy_((torch.rand(mod.bias.shape, generator=gen, dtype=dtype) * 2 - 1) * bound)

    @property
    def dtype(self):
        return self.start_e.dtype

    @property
    def decay_out(self) -> torch.Tensor:
        return F.softplus(self.decay_out_raw)

    @property
    def decay_action(self) -> torch.Tensor:
        return F.softplus(self.decay_action_raw)


@dataclass
class LatentState:
    e: torch.Tensor
    history: torch.Tensor
    alpha_out: torch.Tensor
    beta_out: torch.Tensor
    alpha_action: torch.Tensor
    beta_action: torch.Tensor
    s_action: torch.Tensor
    tick: int = 0
    scale: int = 0

    def snapshot(self) -> dict:
        return {
            k: (v.detach().clone() if isinstance(v, torch.Tensor) else v)
            for k, v in self.__dict__.items()
        }


@dataclass
class SyncRepresentation:
    s_out: torch.Tensor
    s_action: torch.Tensor


def _pair_products(e: torch.Tensor, pairs: torch.Tensor) -> torch.Tensor:
    return e[pairs[:, 0]] * e[pairs[:, 1]]


def init_state(params: ModelParams) -> LatentState:
    c = params.config
    z = dict(dtype=params.dtype)
    e = params.start_e
    return LatentState(
        e=e,
        history=torch.zeros(c.d_model, c.memory_length, **z),
        alpha_out=torch.zeros(c.n_synch_out, **z),
        beta_out=torch.zeros(c.n_synch_out, **z),
        alpha_action=torch.zeros(c.n_synch_action, **z),
        beta_action=torch.zeros(c.n_synch_action, **z),
        # the first query reads the instantaneous synchrony of the start state
        s_action=_pair_products(e, params.pairs_action),
    )


def _check(x: torch.Tensor, n: int, what: str) -> None:
    if x.shape != (n,):
        raise ValueError(f"{what}: expected shape ({n},), got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValueError(f"{what}: non-finite input")


def dropout(x: torch.Tensor, p: float, gen: torch.Generator | None) -> torch.Tensor:
    """Inverted dropout with an explicit generator; identity when ``gen`` is None."""
    if gen is None or p <= 0.0:
        return x
    keep = (torch.rand(x.shape, generator=gen, dtype=x.dtype) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


def synapse_step(params: ModelParams, e: torch.Tensor, b: torch.Tensor, gen: torch.Generator | None = None) -> torch.Tensor:
    """Synapse MLP on ``concat(e, b)``.

    Depth 1 is a single affine map. Deeper networks apply LayerNorm + GELU
    after every layer but the last, with a residual connection around each
    pair of hidden ``D -> D`` layers.
    """
    c = params.config
    _check(e, c.d_model, "synapse_step e")
    _check(b, c.d_input, "synapse_step b")
    layers, norms = params.synapse, params.synapse_norms
    x = torch.cat([e, b])
    if len(layers) == 1:
        return layers[0](x)
    x = dropout(F.gelu(norms[0](layers[0](x))), c.dropout, gen)
    hidden = list(range(1, len(layers) - 1))
    for k in range(0, len(hidden), 2):
        y = x
        for i in hidden[k:k + 2]:
            y = dropout(F.gelu(norms[i](layers[i](y))), c.dropout, gen)
        x = x + y
    return layers[-1](x)


def push_history(state: LatentState, h: torch.Tensor) -> None:
    if h.shape != (state.history.shape[0],):
        raise ValueError(f"push_history: expected shape ({state.history.shape[0]},), got {tuple(h.shape)}")
    state.history = torch.cat([state.history[:, 1:], h[:, None]], dim=1)


def neuron_update(params: ModelParams, state: LatentState) -> torch.Tensor:
    """Each neuron's private MLP applied to its own pre-activation history row."""
    hist = state.history
    if hist.shape != (params.config.d_model, params.config.memory_length):
        raise ValueError(f"neuron_update: history has shape {tuple(hist.shape)}")
    hidden = F.gelu(torch.einsum("dm,dmh->dh", hist, params.nlm_w1) + params.nlm_b1)
    return (hidden * params.nlm_w2).sum(-1) + params.nlm_b2


def decayed_sync(alpha, beta, prod, decay):
    """One step of the decayed pair-product recurrence; returns ``(alpha, beta, S)``."""
    r = torch.exp(-decay)
    alpha = alpha * r + prod
    beta = beta * r + 1.0
    return alpha, beta, alpha / torch.sqrt(beta)


def sync_update(params: ModelParams, state: LatentState, e: torch.Tensor) -> SyncRepresentation:
    state.alpha_out, state.beta_out, s_out = decayed_sync(
        state.alpha_out, state.beta_out, _pair_products(e, params.pairs_out), params.decay_out
    )
    state.alpha_action, state.beta_action, s_action = decayed_sync(
        state.alpha_action, state.beta_action, _pair_products(e, params.pairs_action), params.decay_action
    )
    state.s_action = s_action
    return SyncRepresentation(s_out, s_action)


def save_checkpoint(params: ModelParams, path) -> None:
    echo = json.dumps(asdict(params.config), sort_keys=True).encode("utf-8")
    chunks = [struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(echo)), echo]
    sd = params.state_dict()
    chunks.append(struct.pack("<I", len(sd)))
    for name, t in sd.items():
        raw = name.encode("utf-8")
        arr = t.detach().cpu().to(torch.float64).numpy()
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, dtype=torch.float64) -> ModelParams:
    raw = Path(path).read_bytes()
    try:
        magic, version, n_echo = struct.unpack_from("<4sII", raw, 0)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"checkpoint: bad magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint: unsupported version {version}")
        pos = 12
        config = ModelConfig.from_dict(json.loads(raw[pos:pos + n_echo].decode("utf-8")))
        pos += n_echo
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(dims)
            pos += 8 * n
            tensors[name] = torch.from_numpy(arr.copy())
    except struct.error as exc:
        raise ValueError(f"checkpoint: truncated file ({exc})") from exc
    params = ModelParams(config, dtype=dtype)
    sd = params.state_dict()
    if set(sd) != set(tensors):
        raise ValueError("checkpoint: tensor names do not match the model layout")
    params.load_state_dict({k: tensors[k].to(sd[k].dtype) for k in sd})
    return params
