"""Iterative prune / fine-tune pipeline driven by filter saliency."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import InputError, softmax_cross_entropy
from .data import Dataset, DataSplit
from .model import DisconnectionError, FilterId, Model, count_flops, count_params, flops_without, rebuild
from .saliency import FilterSaliencyRecord, SaliencyTracker, criterion_score
from .trainer import TrainConfig, evaluate, fine_tune, per_sample_losses


class ScheduleError(ValueError):
    pass


SCHEDULE_FRACTIONS = {
    "standard": (0.05,) * 20,
    "fast": (0.2,) * 3 + (0.05,) * 8,
}


def largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    """Integer split of ``total`` proportional to ``fractions``; sums to ``total`` exactly.

    Leftover units go to the largest fractional parts, earliest first on ties.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    raw = total * fr / fr.sum()
    counts = np.floor(raw).astype(int)
    rest = total - int(counts.sum())
    order = sorted(range(len(fr)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:rest]:
        counts[i] += 1
    return counts.tolist()


@dataclass(frozen=True)
class PruneSchedule:
    total: int
    mode: str = "standard"

    def __post_init__(self):
        if self.mode not in SCHEDULE_FRACTIONS:
            raise ScheduleError(f"mode must be one of {sorted(SCHEDULE_FRACTIONS)}, got {self.mode!r}")
        if self.total < 0:
            raise ScheduleError("total must be non-negative")

    @property
    def iteration_fractions(self) -> tuple[float, ...]:
        return SCHEDULE_FRACTIONS[self.mode]

    @property
    def counts(self) -> list[int]:
        return largest_remainder(self.total, self.iteration_fractions)

    def cumulative_fractions(self) -> list[float]:
        return np.cumsum(self.iteration_fractions).tolist()


@dataclass
class HardSampleSet:
    indices: np.ndarray
    fraction: float


def select_hard_samples(model: Model, data: Dataset, fraction: float = 0.3) -> HardSampleSet:
    """Top ``round(fraction * n)`` samples by loss under ``model``; ties go to the lower index."""
    if len(data) == 0:
        raise InputError("dataset is empty")
    if not 0.0 < fraction <= 1.0:
        raise InputError(f"fraction must be in (0, 1], got {fraction}")
    n_keep = max(1, int(round(fraction * len(data))))
    losses = per_sample_losses(model, data)
    order = np.lexsort((np.arange(len(data)), -losses))
    return HardSampleSet(np.sort(order[:n_keep]), fraction)


def estimate_saliency(model: Model, data: Dataset, batch_size: int = 64) -> tuple[list[FilterSaliencyRecord], int]:
    """Pruning-phase saliency: frozen-weight forward/backward over ``data``.

    Inference-mode BN keeps the estimate independent of batch composition and
    leaves running statistics untouched. Returns the records and the number
    of samples processed.
    """
    tracker = SaliencyTracker(model)
    for _, xb, yb in data.batches(batch_size):
        model.zero_grad()
        softmax_cross_entropy(model.forward(xb, training=False), yb).backward()
        tracker.record_batch(model, len(yb))
    model.zero_grad()
    records = tracker.records(model, phase="pruning")
    for r in records:
        r.flagged = r.resource <= 0
        r.saliency = 0.0 if r.flagged else r.importance / r.resource
    return records, tracker.samples_seen


def removal_order(records: Sequence[FilterSaliencyRecord], criterion: str = "saliency") -> list[FilterId]:
    """Ascending by criterion score; ties removed lower FilterId first."""
    return [r.filter for r in sorted(records, key=lambda r: (criterion_score(r, criterion), r.filter))]


def _choose(model: Model, order: Sequence[FilterId], count: Optional[int], skip_disconnecting: bool,
            flops_goal: Optional[int] = None) -> list[FilterId]:
    chosen: list[FilterId] = []
    remaining = {u.layer_index: len(u.out_ids) for u in model.unit_list()}
    for fid in order:
        if count is not None and len(chosen) >= count:
            break
        now = flops_without(model, chosen) if flops_goal is not None else None
        if now is not None and now <= flops_goal:
            break
        if skip_disconnecting and remaining[fid.layer_index] == 1 and not model.is_connected(chosen + [fid]):
            continue
        if now is not None:
            after = flops_without(model, chosen + [fid])
            if after < flops_goal and flops_goal - after > now - flops_goal:
                break  # stopping short lands nearer the goal than overshooting
        chosen.append(fid)
        remaining[fid.layer_index] -= 1
    return chosen


def prune_iteration(model: Model, hard_set: Dataset, count: int, criterion: str = "saliency",
                    batch_size: int = 64, skip_disconnecting: bool = False,
                    flops_goal: Optional[int] = None) -> tuple[Model, list[FilterId], dict]:
    """Estimate saliency on ``hard_set`` and physically remove the ``count`` weakest filters.

    With ``flops_goal`` filters are removed in the same order until the rebuilt
    model's FLOPs reach the goal, stopping one filter short when that lands
    nearer to it; ``count`` then acts as an upper bound.
    Returns the rebuilt model, removed ids and estimation details.
    """
    n = len(model.filters())
    if count < 0 or count > n:
        raise ScheduleError(f"cannot remove {count} of {n} remaining filters")
    if count == 0 and flops_goal is None:
        return model, [], {"samples": 0, "scores": {}}
    records, samples = estimate_saliency(model, hard_set, batch_size)
    order = removal_order(records, criterion)
    removed = _choose(model, order, count, skip_disconnecting, flops_goal)
    if not skip_disconnecting and not model.is_connected(removed):
        raise DisconnectionError(f"removing {len(removed)} filters would disconnect the network")
    scores = {r.filter: criterion_score(r, criterion) for r in records}
    return rebuild(model, removed), removed, {"samples": samples, "scores": scores}


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class PruneConfig:
    mode: str = "standard"
    ratio: float = 0.5  # fraction of filters to remove
    flops_target: Optional[float] = None  # fractional FLOPs reduction; overrides ratio
    hard_fraction: float = 0.3
    refresh_hard: bool = True
    criterion: str = "saliency"
    intra_epochs: int = 1
    intra_lr: float = 1e-4
    final_epochs: int = 5
    final_lr: float = 1e-4
    batch_size: int = 64
    seed: int = 0


@dataclass
class IterationRecord:
    iteration: int
    removed: list[FilterId]
    flops_before: int
    flops_after: int
    params_after: int
    accuracy: float
    estimation_samples: int


@dataclass
class PruneReport:
    base_flops: int
    base_params: int
    base_accuracy: float
    iterations: list[IterationRecord] = field(default_factory=list)
    final_flops: int = 0
    final_params: int = 0
    final_accuracy: float = 0.0
    eliminated_blocks: list[int] = field(default_factory=list)

    @property
    def flops_reduction(self) -> float:
        return 100.0 * (1.0 - self.final_flops / self.base_flops)

    @property
    def params_reduction(self) -> float:
        return 100.0 * (1.0 - self.final_params / self.base_params)

    @property
    def accuracy_drop(self) -> float:
        return 100.0 * (self.base_accuracy - self.final_accuracy)

    def removed(self) -> list[FilterId]:
        return [f for it in self.iterations for f in it.removed]

    def to_dict(self) -> dict:
        return {
            "base_flops": self.base_flops,
            "base_params": self.base_params,
            "base_accuracy": self.base_accuracy,
            "final_flops": self.final_flops,
            "final_params": self.final_params,
            "final_accuracy": self.final_accuracy,
            "flops_reduction_pct": self.flops_reduction,
            "params_reduction_pct": self.params_reduction,
            "accuracy_drop_pct": self.accuracy_drop,
            "eliminated_blocks": list(self.eliminated_blocks),
            "iterations": [
                {**{k: v for k, v in asdict(it).items() if k != "removed"}, "removed_count": len(it.removed)}
                for it in self.iterations
            ],
        }

    @classmethod
    def from_dict(cls, d: dict, removed: Optional[dict[int, list[FilterId]]] = None) -> "PruneReport":
        its = [IterationRecord(r["iteration"], (removed or {}).get(r["iteration"], []), r["flops_before"],
                               r["flops_after"], r["params_after"], r["accuracy"], r["estimation_samples"])
               for r in d["iterations"]]
        return cls(d["base_flops"], d["base_params"], d["base_accuracy"], its, d["final_flops"],
                   d["final_params"], d["final_accuracy"], list(d["eliminated_blocks"]))

    def write(self, directory) -> None:
        """``prune_report.json``, ``prune_iterations.csv`` and ``removed_filters.csv``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "prune_report.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        cols = ["iteration", "removed_count", "flops_before", "flops_after", "params_after", "accuracy",
                "estimation_samples"]
        with open(d / "prune_iterations.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for it in self.iterations:
                w.writerow([it.iteration, len(it.removed), it.flops_before, it.flops_after, it.params_after,
                            repr(it.accuracy), it.estimation_samples])
        with open(d / "removed_filters.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "layer_index", "channel_index"])
            for it in self.iterations:
                for f in it.removed:
                    w.writerow([it.iteration, f.layer_index, f.channel_index])


def run_pipeline(model: Model, data: DataSplit, cfg: PruneConfig,
                 train_cfg: Optional[TrainConfig] = None) -> tuple[Model, PruneReport]:
    """Hard-sample selection, pruning and intra-loop fine-tuning per schedule, then a final fine-tune."""
    tcfg = train_cfg or TrainConfig(batch_size=cfg.batch_size, seed=cfg.seed)
    base_flops = count_flops(model)
    acc0 = evaluate(model, data.test)[0]
    report = PruneReport(base_flops, count_params(model), acc0)
    n_filters = len(model.filters())
    schedule = PruneSchedule(int(round(cfg.ratio * n_filters)) if cfg.flops_target is None else n_filters,
                             cfg.mode)
    counts = schedule.counts
    cum = schedule.cumulative_fractions()
    hard = None
    for it, count in enumerate(counts):
        if hard is None or cfg.refresh_hard:
            hard = select_hard_samples(model, data.train, cfg.hard_fraction)
        before = count_flops(model)
        goal = None
        if cfg.flops_target is not None:
            goal = int(np.floor(base_flops * (1.0 - cfg.flops_target * cum[it])))
            count = len(model.filters())
        model, removed, info = prune_iteration(model, data.train.subset(hard.indices), count, cfg.criterion,
                                               cfg.batch_size, skip_disconnecting=True, flops_goal=goal)
        if cfg.intra_epochs:
            fine_tune(model, data.train, cfg.intra_epochs, cfg.intra_lr,
                      _seeded(tcfg, cfg.seed * 1000 + it + 1))
        report.iterations.append(IterationRecord(it, removed, before, count_flops(model), count_params(model),
                                                 evaluate(model, data.test)[0], info["samples"]))
    if cfg.final_epochs:
        fine_tune(model, data.train, cfg.final_epochs, cfg.final_lr, _seeded(tcfg, cfg.seed * 1000))
    report.final_flops = count_flops(model)
    report.final_params = count_params(model)
    report.final_accuracy = evaluate(model, data.test)[0]
    report.eliminated_blocks = [b.index for b in model.blocks() if b.eliminated]
    return model, report


def _seeded(cfg: TrainConfig, seed: int) -> TrainConfig:
    return TrainConfig(**{**asdict(cfg), "seed": seed})
