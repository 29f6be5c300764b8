"""Command-line driver: train, sparsify, prune, finetune, report, compare.

Each stage reads and writes fixed artifacts under the run directory::

    config.json             resolved configuration
    baseline/               normally trained reference model (train)
    sparse/                 sparsity-learned model, logs, saliency dump, overhead (sparsify)
    pruned/                 compact model plus prune report and manifest (prune)
    final/                  fine-tuned compact model (finetune)
    report.json, report.csv FLOPs / params / accuracy summary (report)
    compare_<mode>.csv/json comparison tables (compare)
    meta.json               wall-clock timestamps, kept out of every report
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import yaml

from .experiments import (
    CRITERION_ARMS, REGULARIZATION_ARMS, ConfigError, ExperimentConfig, init_model, k_sweep_rows, load_data,
    prune_cell, sparsify, sparsify_cell, summarize,
)
from .model import count_flops, count_params, load_checkpoint, save_checkpoint
from .pruner import run_pipeline
from .saliency import overhead_flops, saliency_rows, write_saliency_csv
from .trainer import evaluate, fine_tune, write_log_csv

log = logging.getLogger("sasl")

OVERHEAD_LIMIT = 0.01


class DependencyError(RuntimeError):
    """A stage was run before the stage that produces its input."""


# ---------------------------------------------------------------------------
# configuration


FLAG_PATHS = {
    "seed": None,  # applied to every seeded section
    "family": "model.family",
    "k": "sparsity.k",
    "base_lambda": "sparsity.base_lambda",
    "guider": "sparsity.guider",
    "scheme": "sparsity.scheme",
    "epochs": "sparsity.epochs",
    "mode": "prune.mode",
    "ratio": "prune.ratio",
    "flops_target": "prune.flops_target",
    "hard_fraction": "prune.hard_fraction",
    "criterion": "prune.criterion",
    "final_epochs": "prune.final_epochs",
    "final_lr": "prune.final_lr",
    "source": "data.source",
}


def _deep_update(base: dict, over: dict) -> dict:
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def _assign(d: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = d
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config section {p!r} in {dotted!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Defaults, then command-line flags, then the config file on top."""
    d = ExperimentConfig().to_dict()
    d["sparsity"]["base_lambda"] = None  # resolved from the final model family
    for name, path in FLAG_PATHS.items():
        value = getattr(args, name, None)
        if value is None:
            continue
        if name == "seed":
            for section in ("model", "sparsity", "prune"):
                d[section]["seed"] = value
            d["seeds"] = [value]
        else:
            _assign(d, path, value)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _assign(d, key.strip(), yaml.safe_load(raw))
    if args.out is not None:
        d["output_dir"] = args.out
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        text = path.read_text()
        over = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
        _deep_update(d, over or {})
    return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------------------
# artifact helpers


def _run_dir(cfg: ExperimentConfig) -> Path:
    d = Path(cfg.output_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _require(path: Path, stage: str) -> Path:
    if not (path / "structure.json").exists():
        raise DependencyError(f"{path} is missing; run `sasl {stage}` first")
    return path


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _touch_meta(run: Path, stage: str) -> None:
    meta_path = run / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    meta[stage] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    _write_json(meta_path, meta)


def _save_config(cfg: ExperimentConfig, run: Path) -> None:
    _write_json(run / "config.json", cfg.to_dict())


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: ExperimentConfig) -> int:
    """Normally trained reference model (no sparsity penalty)."""
    run = _run_dir(cfg)
    _save_config(cfg, run)
    data = load_data(cfg.data)
    model = init_model(cfg, data)
    result = sparsify(replace(cfg, sparsity=replace(cfg.sparsity, scheme="none")), model, data)
    save_checkpoint(model, run / "baseline")
    write_log_csv(run / "baseline" / "train_log.csv", result.logs)
    acc = evaluate(model, data.test)[0]
    _write_json(run / "baseline" / "metrics.json", {"accuracy": acc, "flops": count_flops(model),
                                                    "params": count_params(model)})
    _touch_meta(run, "train")
    print(f"baseline accuracy {100 * acc:.2f}%  FLOPs {count_flops(model)}")
    return 0


def cmd_sparsify(cfg: ExperimentConfig) -> int:
    run = _run_dir(cfg)
    _save_config(cfg, run)
    data = load_data(cfg.data)
    model = init_model(cfg, data)
    result = sparsify(cfg, model, data)
    out = run / "sparse"
    save_checkpoint(model, out)
    write_log_csv(out / "train_log.csv", result.logs)
    rows = [row for epoch, records, ranked in result.saliency for row in saliency_rows(epoch, records, ranked)]
    write_saliency_csv(out / "saliency.csv", rows)
    batches = -(-len(data.train) // cfg.sparsity.batch_size)
    extra = overhead_flops(model, batches)
    epoch_forward = count_flops(model) * len(data.train)
    ratio = extra["total"] / epoch_forward
    _write_json(out / "overhead.json", {**extra, "epoch_forward_flops": epoch_forward, "ratio": ratio,
                                        "limit": OVERHEAD_LIMIT, "within_limit": ratio < OVERHEAD_LIMIT})
    _touch_meta(run, "sparsify")
    frac = result.logs[-1].sparsified / len(model.filters()) if result.logs else 0.0
    print(f"sparsified {100 * frac:.1f}% of filters; saliency overhead {100 * ratio:.4f}% of epoch forward FLOPs")
    if ratio >= OVERHEAD_LIMIT:
        print(f"error: saliency overhead {ratio:.4%} exceeds {OVERHEAD_LIMIT:.0%}", file=sys.stderr)
        return 3
    return 0


def cmd_prune(cfg: ExperimentConfig) -> int:
    """Iterative pruning with intra-loop recovery; the final fine-tune is its own stage."""
    run = _run_dir(cfg)
    src = _require(run / "sparse", "sparsify")
    data = load_data(cfg.data)
    model = load_checkpoint(src)
    pruned, report = run_pipeline(model, data, replace(cfg.prune, final_epochs=0), cfg.sparsity.train_config())
    save_checkpoint(pruned, run / "pruned")
    report.write(run / "pruned")
    _touch_meta(run, "prune")
    print(f"pruned {len(report.removed())} filters; FLOPs down {report.flops_reduction:.2f}%")
    return 0


def cmd_finetune(cfg: ExperimentConfig) -> int:
    run = _run_dir(cfg)
    src = _require(run / "pruned", "prune")
    data = load_data(cfg.data)
    model = load_checkpoint(src)
    result = fine_tune(model, data.train, cfg.prune.final_epochs, cfg.prune.final_lr,
                       replace(cfg.sparsity.train_config(), seed=cfg.prune.seed))
    save_checkpoint(model, run / "final")
    write_log_csv(run / "final" / "finetune_log.csv", result.logs)
    _touch_meta(run, "finetune")
    print(f"fine-tuned accuracy {100 * evaluate(model, data.test)[0]:.2f}%")
    return 0


REPORT_STAGES = ("final", "pruned", "sparse", "baseline")


def cmd_report(cfg: ExperimentConfig) -> int:
    """Compare the most advanced stage against the baseline model."""
    run = _run_dir(cfg)
    base_dir = _require(run / "baseline", "train")
    stage = next(s for s in REPORT_STAGES if (run / s / "structure.json").exists())
    data = load_data(cfg.data)
    base = load_checkpoint(base_dir)
    model = load_checkpoint(run / stage)
    b_acc, m_acc = evaluate(base, data.test)[0], evaluate(model, data.test)[0]
    b_fl, m_fl = count_flops(base), count_flops(model)
    b_pa, m_pa = count_params(base), count_params(model)
    report = {
        "stage": stage,
        "baseline_accuracy_pct": 100 * b_acc,
        "accuracy_pct": 100 * m_acc,
        "accuracy_drop_pct": 100 * (b_acc - m_acc),
        "baseline_flops": b_fl,
        "flops": m_fl,
        "flops_reduction_pct": 100 * (1 - m_fl / b_fl),
        "baseline_params": b_pa,
        "params": m_pa,
        "params_reduction_pct": 100 * (1 - m_pa / b_pa),
        "filters": len(model.filters()),
        "eliminated_blocks": [b.index for b in model.blocks() if b.eliminated],
    }
    _write_json(run / "report.json", report)
    with open(run / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in report.items():
            w.writerow([k, v if not isinstance(v, float) else repr(v)])
    _touch_meta(run, "report")
    print(f"{stage}: FLOPs down {report['flops_reduction_pct']:.2f}%  ACC down {report['accuracy_drop_pct']:.2f}%")
    return 0


COMPARE_MODES = ("regularization", "criterion", "k-sweep", "hard-fraction")


def compare(cfg: ExperimentConfig, mode: str, ks: Sequence[int] = (1, 2, 3, 4, 5, 6, 7, 8),
            fractions: Sequence[float] = (0.3, 1.0), with_reference: bool = True,
            cache: Optional[dict] = None) -> dict:
    """Matched cells at equal seeds; returns the summary rows and every cell.

    ``cache`` may be shared between calls so that modes needing the same
    sparsified model or the same pruning cell compute it once.
    """
    if mode not in COMPARE_MODES:
        raise ConfigError(f"compare mode must be one of {COMPARE_MODES}")
    cache = {} if cache is None else cache
    data = load_data(cfg.data)

    def sparse_key(c: ExperimentConfig, seed: int, over: dict) -> tuple:
        return ("sparse", seed, tuple(sorted(replace(c.sparsity, **over).__dict__.items())))

    def sparse_model(c: ExperimentConfig, seed: int, over: dict):
        key = sparse_key(c, seed, over)
        if key not in cache:
            cache[key] = sparsify_cell(c, data, over)
        return cache[key]

    def cell(c: ExperimentConfig, seed: int, over: dict, arm: str, prune_over: Optional[dict] = None):
        pc = replace(c.prune, **(prune_over or {}))
        key = ("prune", sparse_key(c, seed, over), tuple(sorted(pc.__dict__.items())))
        if key not in cache:
            cache[key] = prune_cell(c, sparse_model(c, seed, over), data, arm, prune_over)[0]
        return replace(cache[key], arm=arm)

    cells, reference = [], {}
    for seed in cfg.seeds:
        c = cfg.with_seed(seed)
        if with_reference:
            reference[seed] = evaluate(sparse_model(c, seed, {"scheme": "none"}), data.test)[0]
        if mode == "regularization":
            for arm, over in REGULARIZATION_ARMS.items():
                cells.append(cell(c, seed, over, arm))
        elif mode == "criterion":
            for arm, criterion in CRITERION_ARMS.items():
                cells.append(cell(c, seed, {}, arm, {"criterion": criterion}))
        elif mode == "k-sweep":
            for k in ks:
                cells.append(cell(c, seed, {"scheme": "adaptive", "k": k}, f"k={k}"))
        else:
            for f in fractions:
                cells.append(cell(c, seed, {}, f"hard={f:g}", {"hard_fraction": f}))
    rows = summarize(cells, reference if with_reference else None)
    if mode == "k-sweep":
        mass = {r["k"]: r for r in k_sweep_rows(cfg.sparsity.lam, ks)}
        for row in rows:
            k = int(row["arm"].split("=")[1])
            row.update({key: mass[k][key] for key in ("r_k", "multipliers", "expected_mass", "mass_matches")})
    return {"mode": mode, "rows": rows, "cells": [c.__dict__ for c in cells], "reference_accuracy": reference}


def write_comparison(run: Path, result: dict) -> None:
    mode, rows = result["mode"], result["rows"]
    _write_json(run / f"compare_{mode}.json", result)
    arms = [r["arm"] for r in rows]
    with open(run / f"compare_{mode}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + arms)
        for label, key in (("FLOPs↓ (%)", "flops_reduction_pct"), ("FLOPs↓ std", "flops_reduction_std"),
                           ("ACC↓ (%)", "accuracy_drop_pct"), ("ACC↓ std", "accuracy_drop_std"),
                           ("ACC (%)", "accuracy_pct"), ("ACC std", "accuracy_std")):
            w.writerow([label] + [f"{r[key]:.4f}" for r in rows])
        if mode == "k-sweep":
            w.writerow(["r_k"] + [repr(r["r_k"]) for r in rows])
            w.writerow(["mass matches"] + [str(r["mass_matches"]) for r in rows])


def cmd_compare(cfg: ExperimentConfig, mode: str) -> int:
    run = _run_dir(cfg)
    _save_config(cfg, run)
    result = compare(cfg, mode)
    write_comparison(run, result)
    _touch_meta(run, f"compare_{mode}")
    for r in result["rows"]:
        print(f"{r['arm']:>12}  FLOPs down {r['flops_reduction_pct']:6.2f}%  ACC down {r['accuracy_drop_pct']:6.2f}"
              f" ± {r['accuracy_drop_std']:.2f}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sasl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train", "sparsify", "prune", "finetune", "report", "compare"):
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML or JSON config; its keys override flags")
        s.add_argument("--out", help="run directory (config output_dir)")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any dotted config key")
        s.add_argument("--seed", type=int)
        s.add_argument("--family", choices=["plain", "residual"])
        s.add_argument("--source", choices=["synthetic", "image-dir", "idx"])
        s.add_argument("--k", type=int)
        s.add_argument("--base-lambda", dest="base_lambda", type=float)
        s.add_argument("--guider", choices=["saliency", "importance", "resource"])
        s.add_argument("--scheme", choices=["adaptive", "indiscriminate", "none"])
        s.add_argument("--epochs", type=int)
        s.add_argument("--mode", choices=["standard", "fast"])
        s.add_argument("--ratio", type=float)
        s.add_argument("--flops-target", dest="flops_target", type=float)
        s.add_argument("--hard-fraction", dest="hard_fraction", type=float)
        s.add_argument("--criterion", choices=["saliency", "importance", "resource", "energy"])
        s.add_argument("--final-epochs", dest="final_epochs", type=int)
        s.add_argument("--final-lr", dest="final_lr", type=float)
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "compare":
            s.add_argument("--compare", dest="compare_mode", choices=COMPARE_MODES, default="regularization")
    return p


COMMANDS = {"train": cmd_train, "sparsify": cmd_sparsify, "prune": cmd_prune, "finetune": cmd_finetune,
            "report": cmd_report}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "compare":
            return cmd_compare(cfg, args.compare_mode)
        return COMMANDS[args.command](cfg)
    except (DependencyError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
