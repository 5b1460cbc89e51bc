"""Dual-checkpoint composite loss, optimisation loop and gradient verification."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dynamics import ModelParams
from .metrics import compute_auc
from .pyramid import EncoderStub, FeatureBank, FeatureCache, PyramidInstance
from .reasoner import Choices, ReasonerConfig, Rollout, infer, rollout

log = logging.getLogger("pathseek")

SCHEDULES = ("constant", "cosine", "multistep")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 1e-3
    warmup_steps: int = 200
    schedule: str = "cosine"
    weight_decay: float = 0.0
    batch_size: int = 1
    grad_clip: float = -1.0
    milestone_interval: int = 8000
    gamma: float = 0.1
    keep_best: bool = True
    seed: int = 0

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise ValueError("TrainConfig.learning_rate: must be non-negative")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"TrainConfig.schedule: {self.schedule!r} not in {SCHEDULES}")
        if self.epochs < 0 or self.batch_size < 1 or self.warmup_steps < 0:
            raise ValueError("TrainConfig.epochs/batch_size/warmup_steps: out of range")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"TrainConfig: unknown keys {sorted(unknown)}")
        return cls(**d)


def lr_at(step: int, config: TrainConfig, total_steps: int) -> float:
    """Learning rate for 0-based optimiser ``step``."""
    lr = config.learning_rate
    w = config.warmup_steps
    if step < w:
        return lr * step / w
    if config.schedule == "constant":
        return lr
    if config.schedule == "multistep":
        return lr * config.gamma ** ((step - w) // config.milestone_interval)
    span = max(1, total_steps - w)
    progress = min(1.0, (step - w) / span)
    return lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def per_tick_loss(logits, label: int) -> torch.Tensor:
    logits = torch.as_tensor(logits, dtype=torch.float64) if not isinstance(logits, torch.Tensor) else logits
    n = logits.shape[-1]
    if not 0 <= int(label) < n:
        raise ValueError(f"label {label} out of range for {n} classes")
    return F.cross_entropy(logits[None], torch.tensor([int(label)]))


def select_checkpoints(losses, confidences) -> tuple[int, int]:
    """1-based (min-loss tick, max-confidence tick); ties go to the earliest."""
    losses = [float(x) for x in losses]
    confidences = [float(x) for x in confidences]
    if not losses or len(losses) != len(confidences):
        raise ValueError("select_checkpoints: empty or mismatched scale records")
    return int(np.argmin(losses)) + 1, int(np.argmax(confidences)) + 1


@dataclass
class ScaleLossRecord:
    losses: list  # per-tick scalar tensors
    confidences: list[float]
    t1: int
    t2: int

    @property
    def contribution(self) -> torch.Tensor:
        return (self.losses[self.t1 - 1] + self.losses[self.t2 - 1]) / 2


def scale_records(ro: Rollout, label: int, frozen: list[tuple[int, int]] | None = None) -> list[ScaleLossRecord]:
    out = []
    for s, run in enumerate(ro.runs):
        losses = [per_tick_loss(lg, label) for lg in run.logits]
        if frozen is not None:
            t1, t2 = frozen[s]
        else:
            t1, t2 = select_checkpoints([x.item() for x in losses], run.confidences)
        out.append(ScaleLossRecord(losses, list(run.confidences), t1, t2))
    return out


def composite_loss(records: list[ScaleLossRecord], z: int) -> torch.Tensor:
    if len(records) != z:
        raise ValueError(f"composite_loss: got {len(records)} scale records, expected {z}")
    return sum(r.contribution for r in records) / z


def _dropout_generator(seed: int, epoch: int, step: int) -> torch.Generator:
    state = np.random.SeedSequence([int(seed), int(epoch), int(step)]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(state))


def instance_loss(params, instance, rconfig, cache, stub, gen=None) -> torch.Tensor:
    ro = rollout(params, instance, rconfig, cache, stub, stopping=False, gen=gen)
    return composite_loss(scale_records(ro, instance.label), rconfig.num_scales)


def evaluate(params, instances, rconfig, bank: FeatureBank | None = None, stub=None) -> tuple[np.ndarray, np.ndarray]:
    """Final probabilities and labels of ``infer`` over ``instances``."""
    bank = FeatureBank() if bank is None else bank
    probs, labels = [], []
    for inst in instances:
        t = infer(inst, params, rconfig, bank.for_instance(inst), stub)
        probs.append(t.final_probs)
        labels.append(inst.label)
    return np.asarray(probs), np.asarray(labels)


@dataclass
class TrainResult:
    params: ModelParams
    losses: list[float] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)
    best_epoch: int | None = None


def _unwrap(dataset) -> list[PyramidInstance]:
    return [x[1] if isinstance(x, tuple) else x for x in dataset]


def train(
    dataset,
    params: ModelParams,
    config: TrainConfig,
    rconfig: ReasonerConfig,
    *,
    val=None,
    bank: FeatureBank | None = None,
    stub: EncoderStub | None = None,
    metrics_path=None,
) -> TrainResult:
    """Full-depth rollouts (no early stopping), Adam, one instance per step."""
    config.validate()
    data = _unwrap(dataset)
    if not data:
        raise ValueError("train: empty dataset")
    val = _unwrap(val) if val else []
    bank = FeatureBank() if bank is None else bank
    stub = EncoderStub(data[0].config) if stub is None else stub
    opt = torch.optim.Adam(params.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8,
                           weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(len(data) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    result = TrainResult(params)
    best_auc, best_state = -math.inf, None
    step = 0
    params.train()
    for epoch in range(config.epochs):
        order = np.random.default_rng(np.random.SeedSequence([config.seed, epoch])).permutation(len(data))
        epoch_losses = []
        for b in range(steps_per_epoch):
            batch = sorted(order[b * config.batch_size:(b + 1) * config.batch_size])
            lr = lr_at(step, config, total_steps)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad()
            gen = _dropout_generator(config.seed, epoch, step)
            total = 0.0
            for i in batch:
                loss = instance_loss(params, data[i], rconfig, bank.for_instance(data[i]), stub, gen) / len(batch)
                if not torch.isfinite(loss):
                    raise FloatingPointError(f"non-finite loss at epoch {epoch} step {step} (instance {i}, lr {lr:.3g})")
                loss.backward()
                total += loss.item()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params.parameters(), config.grad_clip)
            opt.step()
            epoch_losses.append(total)
            result.losses.append(total)
            step += 1
        row = {"epoch": epoch, "step": step, "loss": float(np.mean(epoch_losses)), "val_auc": "", "lr": lr_at(step, config, total_steps)}
        if val:
            probs, labels = evaluate(params, val, rconfig, bank, stub)
            auc = compute_auc(probs, labels, params.config.num_classes)
            row["val_auc"] = auc
            if config.keep_best and auc > best_auc:
                best_auc, best_state = auc, copy.deepcopy(params.state_dict())
                result.best_epoch = epoch
            params.train()
        log.info("epoch %d loss %.4f val_auc %s", epoch, row["loss"], row["val_auc"])
        result.metrics.append(row)
    if best_state is not None:
        params.load_state_dict(best_state)
    if metrics_path is not None:
        write_metrics(result.metrics, metrics_path)
    return result


def write_metrics(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "step", "loss", "val_auc", "lr"])
        w.writeheader()
        w.writerows(rows)


@dataclass
class GradCheckResult:
    max_rel_error: float
    max_abs_error: float
    per_tensor: dict[str, float]
    analytic: dict[str, np.ndarray]
    numeric: dict[str, np.ndarray]


def frozen_loss_fn(params, instance, rconfig, cache, stub):
    """Loss closure with every discrete choice pinned to a base rollout."""
    with torch.no_grad():
        base = rollout(params, instance, rconfig, cache, stub, stopping=False)
        recs = scale_records(base, instance.label)
    choices = Choices([list(s) for s in base.choices.selections], list(base.choices.t_star))
    pins = [(r.t1, r.t2) for r in recs]

    def loss_fn() -> torch.Tensor:
        ro = rollout(params, instance, rconfig, cache, stub, stopping=False, frozen=choices)
        return composite_loss(scale_records(ro, instance.label, pins), rconfig.num_scales)

    return loss_fn


def relative_error(a, n, floor: float = 1e-6) -> np.ndarray:
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_gradient(loss_fn, params: ModelParams, epsilon: float) -> dict[str, np.ndarray]:
    out = {}
    with torch.no_grad():
        for name, p in params.named_parameters():
            g = np.zeros(p.shape)
            flat = p.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + epsilon
                hi = loss_fn().item()
                flat[k] = orig - epsilon
                lo = loss_fn().item()
                flat[k] = orig
                g.reshape(-1)[k] = (hi - lo) / (2 * epsilon)
            out[name] = g
    return out


def analytic_gradient(loss_fn, params: ModelParams) -> dict[str, np.ndarray]:
    params.zero_grad()
    loss_fn().backward()
    out = {}
    for name, p in params.named_parameters():
        g = np.zeros(p.shape) if p.grad is None else p.grad.detach().cpu().numpy().copy()
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite analytic gradient in {name}")
        out[name] = g
    params.zero_grad()
    return out


def gradient_check(params, instance, rconfig, epsilon: float = 1e-5, *, cache=None, stub=None, floor: float = 1e-6) -> GradCheckResult:
    """Compare backprop against central differences on every parameter element."""
    if params.dtype != torch.float64:
        raise ValueError("gradient_check requires float64 parameters")
    cache = FeatureCache() if cache is None else cache
    stub = EncoderStub(instance.config) if stub is None else stub
    loss_fn = frozen_loss_fn(params, instance, rconfig, cache, stub)
    ana = analytic_gradient(loss_fn, params)
    num = numeric_gradient(loss_fn, params, epsilon)
    per = {k: float(relative_error(ana[k], num[k], floor).max(initial=0.0)) for k in ana}
    abs_err = max(float(np.abs(ana[k] - num[k]).max(initial=0.0)) for k in ana)
    return GradCheckResult(max(per.values()), abs_err, per, ana, num)


def richardson_ratios(result_eps: GradCheckResult, result_2eps: GradCheckResult, min_error: float = 1e-10) -> np.ndarray:
    """Ratio of finite-difference errors at 2*eps and eps; near 4 where truncation dominates."""
    ratios = []
    for k, a in result_eps.analytic.items():
        e1 = np.abs(result_eps.numeric[k] - a).reshape(-1)
        e2 = np.abs(result_2eps.numeric[k] - a).reshape(-1)
        keep = e1 > min_error
        ratios.extend((e2[keep] / e1[keep]).tolist())
    return np.asarray(ratios)
