"""Command-line entry point: gen, train, infer, trace, bench, sweep, verify."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import theory
from .bench import (
    BenchReport,
    baseline_mil_predict,
    baseline_mil_train,
    emit_report,
    exhaustive_features,
    plot_trace,
    run_inference,
    scale_histogram,
    summarise,
    sweep,
)
from .budget import total
from .config import RunConfig, load_config
from .dynamics import ModelParams, load_checkpoint, save_checkpoint
from .metrics import compute_auc
from .pyramid import EncoderStub, FeatureBank, load_manifest, make_manifest, save_manifest
from .reasoner import read_trace
from .training import train

log = logging.getLogger("pathseek")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML file with [pyramid], [model], [reasoner], [training], [bench], [costs] sections")
    p.add_argument("--preset", choices=["desk", "paper"], help="default values to start from (default: desk, or the config file's preset)")
    p.add_argument("--seed", type=int, help="seed threaded through data, model, inference and training RNGs")
    p.add_argument("--out", type=Path, required=True, help="output directory")


def _with_model(p, required: bool) -> None:
    p.add_argument("--checkpoint", type=Path, required=required, help="model checkpoint written by `train`")
    p.add_argument("--manifest", type=Path, help="dataset manifest written by `gen` (default: generate from config)")
    p.add_argument("--split", default="test", choices=["train", "val", "test"], help="manifest split to evaluate (default: test)")
    p.add_argument("--workers", type=int, default=1, help="instance-level worker processes (default: 1)")
    p.add_argument("--delta", type=float, help="confidence threshold override")
    p.add_argument("--top-k", type=int, help="regions kept per scale transition")


def build_parser() -> Parser:
    parser = Parser(prog="pathseek", description="Coarse-to-fine adaptive reasoning over synthetic region pyramids.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("gen", help="generate a dataset manifest")
    _common(p)
    p.add_argument("--instances", type=int, help="number of instances (default: bench.num_instances)")

    p = sub.add_parser("train", help="train the reasoning engine")
    _common(p)
    p.add_argument("--manifest", type=Path, help="dataset manifest (default: generate from config)")
    p.add_argument("--epochs", type=int, help="override training.epochs")

    p = sub.add_parser("infer", help="run inference and write one trace per instance")
    _common(p)
    _with_model(p, required=True)
    p.add_argument("--limit", type=int, help="only the first N instances of the split")

    p = sub.add_parser("trace", help="render a trace file to SVG")
    p.add_argument("--trace", type=Path, required=True, help="JSON Lines trace written by `infer`")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("bench", help="adaptive engine vs exhaustive baseline")
    _common(p)
    _with_model(p, required=True)

    p = sub.add_parser("sweep", help="grid over K and delta")
    _common(p)
    _with_model(p, required=True)
    p.add_argument("--k-grid", help="comma-separated K values (default: bench.k_grid)")
    p.add_argument("--delta-grid", help="comma-separated delta values (default: bench.delta_grid)")

    p = sub.add_parser("verify", help="theory checks as JSON reports")
    _common(p)
    p.add_argument("--suite", choices=["fano", "influence", "all"], default="all", help="which checks to run")
    p.add_argument("--checkpoint", type=Path, help="model for the influence suite (default: seeded initialisation)")
    p.add_argument("--manifest", type=Path, help="dataset manifest for the influence suite")
    p.add_argument("--instances", type=int, default=3, help="instances probed by the influence suite")
    return parser


# ---------------------------------------------------------------- helpers


def run_config(args) -> RunConfig:
    cfg = load_config(args.config, args.preset)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    r = cfg.reasoner
    if getattr(args, "delta", None) is not None:
        r = replace(r, confidence_threshold=args.delta)
    if getattr(args, "top_k", None) is not None:
        r = replace(r, top_k=args.top_k)
    if getattr(args, "epochs", None) is not None:
        cfg = replace(cfg, training=replace(cfg.training, epochs=args.epochs))
    cfg = replace(cfg, reasoner=r)
    cfg.validate()
    if getattr(args, "workers", 1) < 1:
        raise ValueError("--workers: must be >= 1")
    return cfg


def _require(path: Path | None, flag: str) -> Path:
    if path is None:
        raise ValueError(f"{flag} is required")
    if not path.is_file():
        raise FileNotFoundError(f"{flag}: file not found: {path}")
    return path


def _manifest(args, cfg: RunConfig):
    if getattr(args, "manifest", None) is not None:
        return load_manifest(_require(args.manifest, "--manifest"))
    return make_manifest(cfg.pyramid, cfg.bench.num_instances, cfg.bench.fractions)


def _model(args, cfg: RunConfig, manifest) -> ModelParams:
    params = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    if params.config.d_input != manifest.config.feature_dim:
        raise ValueError(f"checkpoint d_input={params.config.d_input} does not match manifest feature_dim={manifest.config.feature_dim}")
    return params


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _split(manifest, name, limit=None):
    items = manifest.instances(name)
    return items[:limit] if limit else items


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> None:
    cfg = run_config(args)
    n = args.instances if args.instances is not None else cfg.bench.num_instances
    manifest = make_manifest(cfg.pyramid, n, cfg.bench.fractions)
    args.out.mkdir(parents=True, exist_ok=True)
    save_manifest(manifest, args.out / "manifest.json")
    print(f"wrote {n} instances to {args.out / 'manifest.json'} ({manifest.checksum()})")


def cmd_train(args) -> None:
    cfg = run_config(args)
    manifest = _manifest(args, cfg)
    model_cfg = replace(cfg.model, d_input=manifest.config.feature_dim, num_classes=manifest.config.num_classes)
    params = ModelParams(model_cfg)
    stub = EncoderStub(manifest.config)
    args.out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    result = train(
        [i for _, i in manifest.instances("train")], params, cfg.training, cfg.reasoner,
        val=[i for _, i in manifest.instances("val")], stub=stub, metrics_path=args.out / "metrics.csv",
    )
    save_checkpoint(params, args.out / "model.pspm")
    _write_json(args.out / "run_config.json", cfg.to_dict())
    print(f"trained {len(result.losses)} steps in {time.perf_counter() - t0:.1f}s; best epoch {result.best_epoch}")


def cmd_infer(args) -> None:
    cfg = run_config(args)
    manifest = _manifest(args, cfg)
    params = _model(args, cfg, manifest)
    items = _split(manifest, args.split, args.limit)
    trajs = run_inference([i for _, i in items], params, cfg.reasoner, EncoderStub(manifest.config), args.workers, cfg.costs)
    traces = args.out / "traces"
    traces.mkdir(parents=True, exist_ok=True)
    for (iid, _), t in zip(items, trajs):
        t.write(traces / f"instance_{iid:06d}.jsonl")
    summary = {
        "split": args.split,
        "instances": len(items),
        "budget": total(t.budget for t in trajs).to_dict(),
        "histogram": scale_histogram(trajs, cfg.reasoner.num_scales),
        "reasoner": asdict(cfg.reasoner),
    }
    labels = [i.label for _, i in items]
    if len(set(labels)) > 1:
        summary.update({k: v for k, v in summarise(trajs, labels).items() if k in ("auc", "accuracy")})
    _write_json(args.out / "summary.json", summary)
    print(f"wrote {len(items)} traces to {traces}")


def cmd_trace(args) -> None:
    traj = read_trace(_require(args.trace, "--trace"))
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / (args.trace.stem + ".svg")
    plot_trace(traj, path)
    print(f"wrote {path}")


def cmd_bench(args) -> None:
    cfg = run_config(args)
    manifest = _manifest(args, cfg)
    params = _model(args, cfg, manifest)
    stub = EncoderStub(manifest.config)
    split = lambda name: [i for _, i in manifest.instances(name)]  # noqa: E731
    train_set, val_set, test_set = split("train"), split("val"), split("test")
    bags = lambda xs: [exhaustive_features(i, stub) for i in xs]  # noqa: E731
    btr, bva, bte = bags(train_set), bags(val_set), bags(test_set)
    model = baseline_mil_train(
        [b for b, _ in btr], [i.label for i in train_set], manifest.config.num_classes,
        epochs=cfg.bench.baseline_epochs, lr=cfg.bench.baseline_lr, hidden=cfg.bench.baseline_hidden,
        seed=cfg.training.seed, val=([b for b, _ in bva], [i.label for i in val_set]),
    )
    labels = [i.label for i in test_set]
    base_budget = total(r for _, r in bte)
    n = len(test_set)
    report = BenchReport()
    report.methods["exhaustive_mil"] = {
        "auc": compute_auc(baseline_mil_predict(model, [b for b, _ in bte]), labels, manifest.config.num_classes),
        "mean_patches": base_budget.total_encoder_calls / n,
        "mean_time": replace(base_budget, costs=cfg.costs).simulated_time / n,
    }
    trajs = run_inference(test_set, params, cfg.reasoner, stub, args.workers, cfg.costs)
    report.methods["adaptive"] = summarise(trajs, labels)
    report.histograms[f"delta={cfg.reasoner.confidence_threshold:g}"] = scale_histogram(trajs, cfg.reasoner.num_scales)
    report.curves = [[r.confidence for r in t.records] for t in trajs[:20]]
    ratio = report.methods["adaptive"]["mean_patches"] / report.methods["exhaustive_mil"]["mean_patches"]
    report.notes.append(f"patch fraction adaptive/exhaustive = {ratio:.4f}")
    emit_report(report, args.out)
    for name, m in sorted(report.methods.items()):
        print(f"{name}: auc={m['auc']:.4f} patches={m['mean_patches']:.1f} time={m['mean_time']:.1f}")


def _grid(text, cast, default):
    if text is None:
        return list(default)
    try:
        return [cast(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ValueError(f"bad grid {text!r}: {exc}") from exc


def cmd_sweep(args) -> None:
    cfg = run_config(args)
    manifest = _manifest(args, cfg)
    params = _model(args, cfg, manifest)
    ks = _grid(args.k_grid, int, cfg.bench.k_grid)
    ds = _grid(args.delta_grid, float, cfg.bench.delta_grid)
    if not ks or min(ks) < 1:
        raise ValueError("--k-grid: values must be >= 1")
    items = [i for _, i in manifest.instances(args.split)]
    report = sweep(items, params, cfg.reasoner, ks, ds, stub=EncoderStub(manifest.config), workers=args.workers, costs=cfg.costs)
    emit_report(report, args.out)
    print(f"wrote {len(report.sweep)} sweep rows to {args.out}")


def cmd_verify(args) -> None:
    cfg = run_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    failed = []
    if args.suite in ("fano", "all"):
        rng = np.random.default_rng(cfg.reasoner.seed)
        cases = [
            {"h_bits": h, "num_classes": n, "bound": theory.fano_bound(h, n), "implicit_bound": theory.fano_implicit_bound(h, n)}
            for h, n in [(2.0, 4), (1.0, 8), (0.0, 5), (0.0, 2), (1.0, 2), (0.5, 2)]
        ]
        dpi = []
        for _ in range(500):
            joint = rng.dirichlet(np.ones(15)).reshape(3, 5)
            dpi.append(theory.dpi_check(joint, rng.integers(0, 3, size=5)))
        doc = {"cases": cases, "dpi_joints": len(dpi), "dpi_passed": int(sum(dpi))}
        if not all(dpi):
            failed.append("dpi")
        _write_json(args.out / "fano.json", doc)
    if args.suite in ("influence", "all"):
        manifest = _manifest(args, cfg) if args.manifest else make_manifest(cfg.pyramid, max(args.instances, 3))
        params = load_checkpoint(_require(args.checkpoint, "--checkpoint")) if args.checkpoint else ModelParams(
            replace(cfg.model, d_input=manifest.config.feature_dim, num_classes=manifest.config.num_classes))
        items = [i for _, i in sorted(manifest.instances("test") + manifest.instances("train"))][: args.instances]
        rep = theory.verify_influence(params, items, cfg.reasoner, FeatureBank(), EncoderStub(manifest.config))
        if not (rep.cauchy_schwarz_ok and rep.taylor_ok):
            failed.append("influence")
        _write_json(args.out / "influence.json", rep.to_dict())
    if failed:
        raise RuntimeError(f"verification failed: {', '.join(failed)}")
    print(f"verification passed; reports in {args.out}")


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "infer": cmd_infer,
    "trace": cmd_trace,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    level = os.environ.get("PATHSEEK_LOG", "error").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
