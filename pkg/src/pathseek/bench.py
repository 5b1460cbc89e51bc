"""Exhaustive MIL baseline, sweeps over K and delta, stopping histograms and reports."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .budget import BudgetReport, CostModel, total
from .dynamics import ModelParams
from .metrics import compute_auc
from .pyramid import EncoderStub, FeatureBank, PyramidInstance
from .reasoner import BUDGET_EXHAUSTED, THRESHOLD_MET, ReasonerConfig, Trajectory, infer

__all__ = [
    "BenchReport",
    "BudgetReport",
    "GatedAttentionMIL",
    "baseline_mil_predict",
    "baseline_mil_train",
    "compute_auc",
    "emit_report",
    "exhaustive_features",
    "run_inference",
    "scale_histogram",
    "sweep",
]

log = logging.getLogger("pathseek")


# ---------------------------------------------------------------- baseline


class GatedAttentionMIL(nn.Module):
    """Gated attention pooling over a bag of region features, then a linear classifier."""

    def __init__(self, d_in: int, num_classes: int, hidden: int = 32, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.V = nn.Linear(d_in, hidden)
        self.U = nn.Linear(d_in, hidden)
        self.w = nn.Linear(hidden, 1)
        self.classifier = nn.Linear(d_in, num_classes)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        a = self.w(torch.tanh(self.V(x)) * torch.sigmoid(self.U(x))).squeeze(-1)
        return torch.softmax(a, dim=0)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        a = self.attention(x)
        return self.classifier(a @ x), a


def exhaustive_features(instance: PyramidInstance, stub: EncoderStub) -> tuple[np.ndarray, BudgetReport]:
    """Every finest-scale region encoded, with the matching budget."""
    z = instance.num_scales
    ids = instance.region_ids(z - 1)
    feats = np.stack([stub(instance, z - 1, r) for r in ids]).astype(np.float32)
    calls = [0] * (z - 1) + [len(ids)]
    return feats, BudgetReport(encoder_calls=calls, ticks=0, regions_touched=len(ids))


def baseline_mil_train(
    bags: list[np.ndarray],
    labels,
    num_classes: int,
    *,
    epochs: int = 20,
    lr: float = 1e-3,
    hidden: int = 32,
    weight_decay: float = 1e-4,
    seed: int = 0,
    val: tuple[list[np.ndarray], list[int]] | None = None,
) -> GatedAttentionMIL:
    """Adam, one bag per step, seeded shuffle; keeps the best validation AUC when ``val`` is given."""
    model = GatedAttentionMIL(bags[0].shape[1], num_classes, hidden, seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=weight_decay)
    xs = [torch.from_numpy(b) for b in bags]
    ys = [torch.tensor([int(y)]) for y in labels]
    best, best_state = -math.inf, None
    for epoch in range(epochs):
        model.train()
        for i in np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(len(xs)):
            opt.zero_grad()
            logits, _ = model(xs[i])
            F.cross_entropy(logits[None], ys[i]).backward()
            opt.step()
        if val is not None:
            auc = compute_auc(baseline_mil_predict(model, val[0]), val[1], num_classes)
            if auc > best:
                best, best_state = auc, {k: v.clone() for k, v in model.state_dict().items()}
    if best_state is not None:
        model.load_state_dict(best_state)
    return model


def baseline_mil_predict(model: GatedAttentionMIL, bags: list[np.ndarray]) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        return np.stack([torch.softmax(model(torch.from_numpy(b))[0], -1).numpy() for b in bags]).astype(np.float64)


# ---------------------------------------------------------------- adaptive runs


_WORKER = {}


def _init_worker(params_state, model_config, stub_seed, pyramid_config):
    torch.set_num_threads(1)
    params = ModelParams(model_config)
    params.load_state_dict(params_state)
    _WORKER["params"] = params
    _WORKER["stub"] = EncoderStub(pyramid_config, stub_seed)


def _infer_one(args):
    instance, rconfig, costs = args
    return infer(instance, _WORKER["params"], rconfig, None, _WORKER["stub"], costs)


def run_inference(instances, params: ModelParams, rconfig: ReasonerConfig, stub: EncoderStub | None = None,
                  workers: int = 1, costs: CostModel | None = None, bank: FeatureBank | None = None) -> list[Trajectory]:
    """Per-instance inference; results come back in input order regardless of ``workers``."""
    instances = list(instances)
    if not instances:
        return []
    stub = EncoderStub(instances[0].config) if stub is None else stub
    if workers <= 1:
        bank = FeatureBank() if bank is None else bank
        return [infer(inst, params, rconfig, bank.for_instance(inst), stub, costs) for inst in instances]
    import multiprocessing as mp

    ctx = mp.get_context("fork" if os.name == "posix" else "spawn")
    init = (params.state_dict(), params.config, stub.seed, stub.config)
    with ctx.Pool(workers, initializer=_init_worker, initargs=init) as pool:
        return pool.map(_infer_one, [(inst, rconfig, costs) for inst in instances], chunksize=1)


def scale_histogram(trajectories, num_scales: int) -> dict[str, float]:
    """Fraction of trajectories that stopped on confidence at each scale, plus budget exhaustion."""
    keys = [f"scale_{s}" for s in range(num_scales)] + [BUDGET_EXHAUSTED]
    counts = dict.fromkeys(keys, 0)
    trajectories = list(trajectories)
    for t in trajectories:
        counts[f"scale_{t.stop_scale}" if t.stop == THRESHOLD_MET else BUDGET_EXHAUSTED] += 1
    n = max(1, len(trajectories))
    return {k: v / n for k, v in counts.items()}


def summarise(trajectories: list[Trajectory], labels) -> dict:
    probs = np.asarray([t.final_probs for t in trajectories])
    budget = total(t.budget for t in trajectories)
    n = len(trajectories)
    return {
        "auc": compute_auc(probs, labels, probs.shape[1]),
        "accuracy": float(np.mean(probs.argmax(1) == np.asarray(labels))),
        "mean_patches": budget.total_encoder_calls / n,
        "mean_time": budget.simulated_time / n,
        "mean_ticks": budget.ticks / n,
    }


@dataclass
class BenchReport:
    methods: dict[str, dict] = field(default_factory=dict)
    sweep: list[dict] = field(default_factory=list)
    histograms: dict[str, dict[str, float]] = field(default_factory=dict)
    curves: list[list[float]] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> BenchReport:
        return cls(**d)


def sweep(instances, params: ModelParams, rconfig: ReasonerConfig, k_grid, delta_grid, *,
          stub: EncoderStub | None = None, workers: int = 1, costs: CostModel | None = None,
          report: BenchReport | None = None, bank: FeatureBank | None = None) -> BenchReport:
    """One row per (K, delta): AUC, mean patches, mean simulated time and the stopping histogram."""
    instances = list(instances)
    labels = [inst.label for inst in instances]
    report = BenchReport() if report is None else report
    bank = FeatureBank() if bank is None and workers <= 1 else bank
    for k in k_grid:
        for d in delta_grid:
            cfg = replace(rconfig, top_k=int(k), confidence_threshold=float(d))
            trajs = run_inference(instances, params, cfg, stub, workers, costs, bank)
            row = {"top_k": int(k), "delta": float(d), **summarise(trajs, labels)}
            hist = scale_histogram(trajs, cfg.num_scales)
            row.update(hist)
            report.sweep.append(row)
            report.histograms[f"K={int(k)},delta={float(d):g}"] = hist
    return report


# ---------------------------------------------------------------- output


def _write_csv(rows: list[dict], path: Path) -> None:
    if not rows:
        path.write_text("", encoding="utf-8")
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "pathseek"
    return plt


def _save_svg(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})


def plot_sweep(rows: list[dict], path: Path, value: str = "mean_patches") -> None:
    plt = _plt()
    ks = sorted({r["top_k"] for r in rows})
    ds = sorted({r["delta"] for r in rows})
    grid = np.full((len(ks), len(ds)), np.nan)
    for r in rows:
        grid[ks.index(r["top_k"]), ds.index(r["delta"])] = r[value]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    im = ax.imshow(grid, aspect="auto", origin="lower")
    ax.set_xticks(range(len(ds)), [f"{d:g}" for d in ds])
    ax.set_yticks(range(len(ks)), [str(k) for k in ks])
    ax.set_xlabel("delta")
    ax.set_ylabel("K")
    ax.set_title(value)
    fig.colorbar(im, ax=ax)
    _save_svg(fig, path)
    plt.close(fig)


def plot_histograms(hists: dict[str, dict[str, float]], path: Path) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(7, 3.5))
    names = list(hists)
    bottoms = np.zeros(len(names))
    buckets = list(next(iter(hists.values()))) if hists else []
    for b in buckets:
        vals = np.array([hists[n][b] for n in names])
        ax.bar(range(len(names)), vals, bottom=bottoms, label=b)
        bottoms += vals
    ax.set_xticks(range(len(names)), names, rotation=60, ha="right", fontsize=6)
    ax.set_ylabel("fraction of instances")
    ax.legend(fontsize=6)
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def plot_curves(curves: list[list[float]], path: Path, ylabel: str = "confidence") -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for c in curves:
        ax.plot(range(1, len(c) + 1), c, lw=0.8)
    ax.set_xlabel("tick")
    ax.set_ylabel(ylabel)
    _save_svg(fig, path)
    plt.close(fig)


def plot_trace(traj: Trajectory, path) -> None:
    """Confidence and class-probability curves of one trajectory, with scale switches marked."""
    plt = _plt()
    ticks = [r.tick for r in traj.records]
    fig, (a1, a2) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    a1.plot(ticks, [r.confidence for r in traj.records], marker=".")
    a1.set_ylabel("confidence")
    probs = np.asarray([r.probs for r in traj.records])
    for k in range(probs.shape[1]):
        a2.plot(ticks, probs[:, k], label=f"class {k}")
    a2.set_ylabel("probability")
    a2.set_xlabel("tick")
    a2.legend(fontsize=7)
    for prev, cur in zip(traj.records, traj.records[1:]):
        if cur.scale != prev.scale:
            for ax in (a1, a2):
                ax.axvline(cur.tick - 0.5, color="grey", ls="--", lw=0.7)
    _save_svg(fig, Path(path))
    plt.close(fig)


def emit_report(report: BenchReport, out) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    methods = [{"method": k, **v} for k, v in sorted(report.methods.items())]
    _write_csv(methods, out / "methods.csv")
    _write_csv(report.sweep, out / "sweep.csv")
    hist_rows = [{"run": k, **v} for k, v in report.histograms.items()]
    _write_csv(hist_rows, out / "histograms.csv")
    (out / "summary.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True), encoding="utf-8")
    written += [out / "methods.csv", out / "sweep.csv", out / "histograms.csv", out / "summary.json"]
    if report.sweep:
        plot_sweep(report.sweep, out / "sweep_patches.svg")
        plot_sweep(report.sweep, out / "sweep_auc.svg", value="auc")
        written += [out / "sweep_patches.svg", out / "sweep_auc.svg"]
    if report.histograms:
        plot_histograms(report.histograms, out / "stopping_scales.svg")
        written.append(out / "stopping_scales.svg")
    if report.curves:
        plot_curves(report.curves, out / "confidence_curves.svg")
        written.append(out / "confidence_curves.svg")
    return written


def load_report(path) -> BenchReport:
    return BenchReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
