"""Coarse-to-fine inference: tick loops, confidence stopping, Top-K pruning,
cross-scale fusion, and trajectory recording.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from scipy.special import entr

from .attention import AttentionResult, cross_attention, logit_scale, make_query, project_candidates
from .budget import BudgetReport, CostModel
from .dynamics import LatentState, ModelParams, init_state, neuron_update, push_history, sync_update, synapse_step
from .pyramid import EncoderStub, FeatureCache, PyramidInstance, children_of, encode_regions

log = logging.getLogger("pathseek")

THRESHOLD_MET = "threshold_met"
BUDGET_EXHAUSTED = "budget_exhausted"


@dataclass(frozen=True)
class ReasonerConfig:
    ticks_per_scale: int = 5
    num_scales: int = 3
    top_k: int = 10
    confidence_threshold: float = 0.9
    stopping_enabled: bool = True
    literal_recalibration: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.ticks_per_scale < 1:
            raise ValueError("ReasonerConfig.ticks_per_scale: must be >= 1")
        if self.num_scales < 1:
            raise ValueError("ReasonerConfig.num_scales: must be >= 1")
        if self.top_k < 1:
            raise ValueError("ReasonerConfig.top_k: must be >= 1")
        # thresholds above 1 are legal and simply never met
        if not self.confidence_threshold >= 0.0:
            raise ValueError("ReasonerConfig.confidence_threshold: must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> ReasonerConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"ReasonerConfig: unknown keys {sorted(unknown)}")
        return cls(**d)


def entropy(probs) -> float:
    """Shannon entropy in nats with ``0 log 0 = 0``."""
    return float(entr(np.asarray(probs, dtype=np.float64)).sum())


def _as_simplex(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or np.any(p < -1e-12) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("probabilities must lie on the simplex (tolerance 1e-6)")
    p = np.clip(p, 0.0, None)
    return p / p.sum()


def confidence(probs) -> float:
    """One minus the entropy normalised by ``log N``."""
    p = _as_simplex(probs)
    if p.size < 2:
        raise ValueError("confidence needs at least two classes")
    c = 1.0 - entropy(p) / math.log(p.size)
    return min(1.0, max(0.0, c))


def should_stop(c: float, delta: float) -> bool:
    return c >= delta


def topk_select(scores, k: int, ids=None) -> list[int]:
    """Positions of the ``k`` largest scores, descending; ties go to the lowest id."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("topk_select: empty score vector")
    if not np.all(np.isfinite(s)):
        raise ValueError("topk_select: non-finite score")
    ids = np.arange(s.size) if ids is None else np.asarray(ids)
    if k > s.size:
        log.warning("top_k=%d exceeds %d candidates; keeping all", k, s.size)
    order = np.lexsort((ids, -s))
    return [int(i) for i in order[:min(k, s.size)]]


def predict_head(params: ModelParams, s_out: torch.Tensor) -> torch.Tensor:
    n = params.config.n_synch_out
    if s_out.shape != (n,):
        raise ValueError(f"predict_head: expected shape ({n},), got {tuple(s_out.shape)}")
    return params.w_out(s_out)


def fuse_predict(params: ModelParams, s_out_fine: torch.Tensor, s_out_coarse_max: torch.Tensor | None) -> torch.Tensor:
    if s_out_coarse_max is None:
        raise ValueError("fuse_predict: a finer scale needs the previous scale's most-confident S_out")
    x = torch.cat([s_out_fine, s_out_coarse_max])
    layers = params.fusion
    for layer in layers[:-1]:
        x = torch.nn.functional.gelu(layer(x))
    return layers[-1](x)


@dataclass
class TickRecord:
    tick: int
    scale: int
    probs: list[float]
    confidence: float
    candidates: list[int]
    scores: list[float]
    s_out_index: int

    def to_json(self) -> dict:
        return {
            "tick": self.tick,
            "scale": self.scale,
            "probs": self.probs,
            "confidence": self.confidence,
            "candidates": self.candidates,
            "scores": self.scores,
        }


@dataclass
class ScaleRun:
    """Everything one scale's tick loop produced, with autograd graph intact."""

    scale: int
    candidates: list[int]
    ticks: list[int] = field(default_factory=list)
    logits: list[torch.Tensor] = field(default_factory=list)
    s_out: list[torch.Tensor] = field(default_factory=list)
    attention: list[AttentionResult] = field(default_factory=list)
    probs: list[np.ndarray] = field(default_factory=list)
    confidences: list[float] = field(default_factory=list)
    t_star: int = 0
    stopped: bool = False

    @property
    def s_out_star(self) -> torch.Tensor:
        return self.s_out[self.t_star]

    @property
    def scores_star(self) -> np.ndarray:
        return self.attention[self.t_star].scores.detach().cpu().numpy()


Head = Callable[[torch.Tensor, int], torch.Tensor]
# hook(scale_run, tick_index, state_before_tick, attention_result, head)
TickHook = Callable[[ScaleRun, int, dict, AttentionResult, Head], None]


def run_scale(
    params: ModelParams,
    state: LatentState,
    candidates: list[int],
    features,
    n: int,
    head: Head,
    *,
    scale: int | None = None,
    delta: float | None = None,
    attn_scale: float | None = None,
    t_star: int | None = None,
    gen: torch.Generator | None = None,
    hook: TickHook | None = None,
) -> ScaleRun:
    """Run up to ``n`` ticks over one candidate pool.

    One tick: query from action synchrony, cross-attention, synapse step,
    FIFO push, neuron update, synchrony update, prediction. When ``delta``
    is given the loop stops at the first tick with confidence >= delta.
    ``t_star`` pins the most-confident tick instead of recomputing it.
    """
    if len(candidates) == 0:
        raise ValueError("run_scale: zero candidates")
    if scale is not None:
        state.scale = scale
    run = ScaleRun(scale=state.scale, candidates=list(candidates))
    kv = project_candidates(params, features)
    for i in range(n):
        q = make_query(params, state.s_action)
        att = cross_attention(params, q, kv=kv, scale=attn_scale)
        if hook is not None:
            before = state.snapshot()
        b = att.context
        h = synapse_step(params, state.e, b, gen)
        push_history(state, h)
        state.e = neuron_update(params, state)
        sync = sync_update(params, state, state.e)
        logits = head(sync.s_out, i)
        state.tick += 1
        probs = torch.softmax(logits.detach(), -1).cpu().numpy().astype(np.float64)
        c = confidence(probs / probs.sum())
        run.ticks.append(state.tick)
        run.logits.append(logits)
        run.s_out.append(sync.s_out)
        run.attention.append(att)
        run.probs.append(probs)
        run.confidences.append(c)
        if hook is not None:
            hook(run, i, before, att, head)
        if delta is not None and should_stop(c, delta):
            run.stopped = True
            break
    run.t_star = int(np.argmax(run.confidences)) if t_star is None else int(t_star)
    return run


@dataclass
class Choices:
    """Discrete decisions of a rollout: parents kept per transition and t* per scale."""

    selections: list[list[int]] = field(default_factory=list)
    t_star: list[int] = field(default_factory=list)


@dataclass
class Rollout:
    runs: list[ScaleRun]
    choices: Choices
    stop: str
    requested: list[set[int]]
    state: LatentState

    @property
    def stop_run(self) -> ScaleRun:
        return self.runs[-1]


def _features(instance, scale, regions, cache, stub, requested, dtype):
    requested[scale].update(regions)
    return torch.as_tensor(encode_regions(instance, scale, regions, cache, stub), dtype=dtype)


def rollout(
    params: ModelParams,
    instance: PyramidInstance,
    config: ReasonerConfig,
    cache: FeatureCache,
    stub: EncoderStub,
    *,
    stopping: bool | None = None,
    frozen: Choices | None = None,
    gen: torch.Generator | None = None,
    hook: TickHook | None = None,
) -> Rollout:
    """Full coarse-to-fine pass; keeps the autograd graph (wrap in no_grad for inference)."""
    config.validate()
    z = config.num_scales
    if z > instance.num_scales:
        raise ValueError(f"ReasonerConfig.num_scales={z} exceeds the instance's {instance.num_scales} scales")
    stopping = config.stopping_enabled if stopping is None else stopping
    delta = config.confidence_threshold if stopping else None
    fine_scale = logit_scale(params, config.literal_recalibration)

    state = init_state(params)
    requested: list[set[int]] = [set() for _ in range(instance.num_scales)]
    choices = Choices()
    runs: list[ScaleRun] = []
    candidates = instance.region_ids(0)
    coarse_star = None
    stop = BUDGET_EXHAUSTED
    for s in range(z):
        feats = _features(instance, s, candidates, cache, stub, requested, params.dtype)
        if s == 0:
            head = lambda s_out, i: predict_head(params, s_out)  # noqa: E731
        else:
            head = lambda s_out, i, _c=coarse_star: fuse_predict(params, s_out, _c)  # noqa: E731
        run = run_scale(
            params, state, candidates, feats, config.ticks_per_scale, head,
            scale=s,
            delta=delta,
            attn_scale=None if s == 0 else fine_scale,
            t_star=frozen.t_star[s] if frozen is not None and s < len(frozen.t_star) else None,
            gen=gen,
            hook=hook,
        )
        runs.append(run)
        choices.t_star.append(run.t_star)
        if run.stopped:
            stop = THRESHOLD_MET
            break
        if s == z - 1:
            break
        if frozen is not None and s < len(frozen.selections):
            parents = list(frozen.selections[s])
        else:
            picked = topk_select(run.scores_star, config.top_k, ids=candidates)
            parents = [candidates[i] for i in picked]
        choices.selections.append(parents)
        coarse_star = run.s_out_star
        candidates = [c for p in parents for c in children_of(instance, p)]
    return Rollout(runs=runs, choices=choices, stop=stop, requested=requested, state=state)


@dataclass
class Trajectory:
    records: list[TickRecord]
    t_star: list[int]
    selections: list[list[int]]
    stop: str
    stop_tick: int | None
    stop_scale: int | None
    final_probs: list[float]
    final_label: int
    budget: BudgetReport
    s_out: list[list[float]] = field(default_factory=list)

    @property
    def stop_depth(self) -> int:
        """Scale index where inference ended; budget exhaustion counts as one past the last scale."""
        return self.stop_scale if self.stop == THRESHOLD_MET else max(r.scale for r in self.records) + 1

    def terminal(self) -> dict:
        return {
            "stop": self.stop,
            "stop_tick": self.stop_tick,
            "stop_scale": self.stop_scale,
            "t_star_per_scale": self.t_star,
            "selections": self.selections,
            "final_probs": self.final_probs,
            "final_label": self.final_label,
            "budget": self.budget.to_dict(),
        }

    def to_jsonl(self) -> str:
        lines = [json.dumps(r.to_json()) for r in self.records]
        lines.append(json.dumps(self.terminal()))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


def read_trace(path) -> Trajectory:
    lines = [json.loads(x) for x in Path(path).read_text(encoding="utf-8").splitlines() if x.strip()]
    if not lines or "stop" not in lines[-1]:
        raise ValueError(f"{path}: trace has no terminal object")
    term = lines[-1]
    records = [
        TickRecord(d["tick"], d["scale"], d["probs"], d["confidence"], d["candidates"], d["scores"], i)
        for i, d in enumerate(lines[:-1])
    ]
    return Trajectory(
        records=records,
        t_star=term["t_star_per_scale"],
        selections=term.get("selections", []),
        stop=term["stop"],
        stop_tick=term.get("stop_tick"),
        stop_scale=term.get("stop_scale"),
        final_probs=term["final_probs"],
        final_label=term["final_label"],
        budget=BudgetReport.from_dict(term["budget"]),
    )


def to_trajectory(ro: Rollout, costs: CostModel | None = None) -> Trajectory:
    records = []
    s_out = []
    for run in ro.runs:
        for i, tick in enumerate(run.ticks):
            s_out.append([float(x) for x in run.s_out[i].detach().cpu().numpy()])
            records.append(TickRecord(
                tick=tick,
                scale=run.scale,
                probs=[float(x) for x in run.probs[i]],
                confidence=float(run.confidences[i]),
                candidates=list(run.candidates),
                scores=[float(x) for x in run.attention[i].scores.detach().cpu().numpy()],
                s_out_index=len(s_out) - 1,
            ))
    if ro.stop == THRESHOLD_MET:
        final = records[-1]
        stop_tick, stop_scale = final.tick, final.scale
    else:
        final = records[int(np.argmax([r.confidence for r in records]))]
        stop_tick = stop_scale = None
    calls = [len(r) for r in ro.requested]
    budget = BudgetReport(encoder_calls=calls, ticks=len(records), regions_touched=sum(calls), costs=costs or CostModel())
    return Trajectory(
        records=records,
        t_star=[run.ticks[run.t_star] for run in ro.runs],
        selections=[list(map(int, s)) for s in ro.choices.selections],
        stop=ro.stop,
        stop_tick=stop_tick,
        stop_scale=stop_scale,
        final_probs=list(final.probs),
        final_label=int(np.argmax(final.probs)),
        budget=budget,
        s_out=s_out,
    )


def infer(
    instance: PyramidInstance,
    params: ModelParams,
    config: ReasonerConfig,
    cache: FeatureCache | None = None,
    stub: EncoderStub | None = None,
    costs: CostModel | None = None,
) -> Trajectory:
    cache = FeatureCache() if cache is None else cache
    stub = EncoderStub(instance.config) if stub is None else stub
    was_training = params.training
    params.eval()
    try:
        with torch.no_grad():
            ro = rollout(params, instance, config, cache, stub)
    finally:
        params.train(was_training)
    return to_trajectory(ro, costs)
