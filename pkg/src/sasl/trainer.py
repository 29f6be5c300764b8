"""Sparsity learning: indiscriminate L1 on BN scales and the variant whose
per-filter penalty follows a saliency ranking.

Per epoch the adaptive trainer distributes per-filter penalties from the
current ranking, then per batch runs forward, backward, records filter
gradients and takes an optimizer step with the penalties added; at the end of
the epoch it computes saliency and re-ranks.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import InputError, NumericError, StateError, no_grad, sgd_step, softmax_cross_entropy
from .data import Dataset, augment
from .model import SPARSITY_THRESHOLD, FilterId, Model
from .saliency import FilterSaliencyRecord, SaliencyTracker, compute_saliency_epoch

log = logging.getLogger(__name__)

DEFAULT_CLASS_COUNT = 5
# Expected multiplier mass of the default five-class staircase {0,1,2,3,4}/5.
REFERENCE_MASS = sum(i / DEFAULT_CLASS_COUNT for i in range(DEFAULT_CLASS_COUNT))


class DivergenceError(NumericError):
    pass


@dataclass(frozen=True)
class HierarchyScheme:
    """Staircase penalty multipliers for ``class_count`` saliency classes.

    Class i (0 = most salient) is penalized with ``i * r_k * base_lambda``;
    ``r_k`` keeps the expected multiplier mass equal to the five-class scheme.
    A single class is the indiscriminate case.
    """

    class_count: int
    base_lambda: float
    multipliers: tuple[float, ...]
    r_k: float

    def __post_init__(self):
        if self.class_count < 1 or len(self.multipliers) != self.class_count:
            raise InputError("need one multiplier per class and at least one class")
        if self.base_lambda < 0 or any(m < 0 for m in self.multipliers):
            raise InputError("penalties must be non-negative")

    @classmethod
    def staircase(cls, class_count: int = DEFAULT_CLASS_COUNT, base_lambda: float = 1e-4) -> "HierarchyScheme":
        if class_count < 1:
            raise InputError("class_count must be >= 1")
        if class_count == 1:
            return cls(1, base_lambda, (1.0,), 1.0)
        r_k = REFERENCE_MASS * class_count / sum(range(class_count))
        return cls(class_count, base_lambda, tuple(i * r_k for i in range(class_count)), r_k)

    @classmethod
    def mass_matched(cls, class_count: int, base_lambda: float = 1e-4) -> "HierarchyScheme":
        """Like :meth:`staircase`, but a single class carries the reference mass too.

        Used for class-count sweeps and adaptive-versus-indiscriminate pairs,
        where every arm must impose the same total penalty.
        """
        if class_count == 1:
            return cls(1, base_lambda, (REFERENCE_MASS,), REFERENCE_MASS)
        return cls.staircase(class_count, base_lambda)

    @classmethod
    def indiscriminate(cls, lam: float) -> "HierarchyScheme":
        return cls(1, lam, (1.0,), 1.0)

    def expected_mass(self) -> float:
        """Mean multiplier under uniform class fractions."""
        return sum(m / self.class_count for m in self.multipliers)


@dataclass
class HierarchyAssignment:
    epoch: int
    class_of: dict[FilterId, int]
    lambdas: dict[FilterId, float]

    def class_sizes(self, k: int) -> list[int]:
        sizes = [0] * k
        for c in self.class_of.values():
            sizes[c] += 1
        return sizes

    def lambda_arrays(self, model: Model) -> dict[int, np.ndarray]:
        out = {}
        for u in model.unit_list():
            try:
                out[u.layer_index] = np.array([self.lambdas[f] for f in u.filter_ids()], dtype=np.float64)
            except KeyError as exc:
                raise StateError(f"assignment has no penalty for filter {exc.args[0]}") from exc
        return out


def assign_regularization(ranking: Sequence, scheme: HierarchyScheme, epoch: int = 0) -> HierarchyAssignment:
    """Split a descending ranking into uniform quantile classes.

    ``ranking`` holds FilterIds or (FilterId, score) pairs, best first. Class
    sizes differ by at most one; earlier classes take the remainder.
    """
    if len(ranking) == 0:
        raise InputError("ranking is empty")
    fids = [r[0] if isinstance(r, tuple) else r for r in ranking]
    n, k = len(fids), scheme.class_count
    bounds = np.cumsum([n // k + (1 if i < n % k else 0) for i in range(k)])
    class_of, lambdas = {}, {}
    c = 0
    for pos, fid in enumerate(fids):
        while pos >= bounds[c]:
            c += 1
        class_of[fid] = c
        lambdas[fid] = scheme.base_lambda * scheme.multipliers[c]
    return HierarchyAssignment(epoch, class_of, lambdas)


def apply_sparsity_gradient(model: Model, assignment, constant: Optional[float] = None) -> None:
    """Add the L1 subgradient ``lambda_i * sign(gamma)`` to every BN scale gradient.

    ``assignment`` is a :class:`HierarchyAssignment` (or precomputed per-layer
    arrays); ``constant`` applies one shared penalty instead.
    """
    arrays = None
    if constant is None:
        arrays = assignment if isinstance(assignment, dict) else assignment.lambda_arrays(model)
    for u in model.unit_list():
        g = u.bn.gamma
        if g.grad is None:
            continue
        lam = constant if constant is not None else arrays[u.layer_index]
        g.tensor.grad = g.grad + lam * np.sign(g.data)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    lr_milestones: tuple[float, ...] = (0.5, 0.75)
    lr_decay: float = 0.1
    augment: bool = False
    seed: int = 0

    def lr_at(self, epoch: int) -> float:
        """Step decay at the given fractions of the schedule (0-based epochs)."""
        drops = sum(epoch >= max(1, int(m * self.epochs)) for m in self.lr_milestones)
        return self.lr * self.lr_decay ** drops


@dataclass
class EpochLog:
    epoch: int
    task_loss: float
    reg_mass: float
    train_accuracy: float
    test_accuracy: float
    sparsified: int
    lr: float


@dataclass
class TrainResult:
    model: Model
    logs: list[EpochLog] = field(default_factory=list)
    saliency: list[tuple[int, list[FilterSaliencyRecord], list]] = field(default_factory=list)
    trace: list[tuple] = field(default_factory=list)
    assignments: list[HierarchyAssignment] = field(default_factory=list)


def run_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent generators for batch order, augmentation and rank initialization."""
    return tuple(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))


def sparsified_count(model: Model, threshold: float = SPARSITY_THRESHOLD) -> int:
    return int(sum((np.abs(u.bn.gamma.data) < threshold).sum() for u in model.unit_list()))


def sparsified_fraction(model: Model, threshold: float = SPARSITY_THRESHOLD) -> float:
    return sparsified_count(model, threshold) / max(len(model.filters()), 1)


def evaluate(model: Model, data: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """(accuracy, mean loss) in inference mode."""
    correct, total = 0, 0.0
    with no_grad():
        for _, xb, yb in data.batches(batch_size):
            logits = model.forward(xb, training=False)
            total += float(softmax_cross_entropy(logits, yb).per_sample.sum())
            correct += int((logits.data.argmax(axis=1) == yb).sum())
    return correct / len(data), total / len(data)


def per_sample_losses(model: Model, data: Dataset, batch_size: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for _, xb, yb in data.batches(batch_size):
            out.append(softmax_cross_entropy(model.forward(xb, training=False), yb).per_sample)
    return np.concatenate(out)


def _train(model: Model, data: Dataset, cfg: TrainConfig, *,
           penalty: Callable[[int], object] = lambda epoch: None,
           constant_penalty: Optional[float] = None,
           tracker: Optional[SaliencyTracker] = None,
           on_epoch_end: Callable[[int], None] = lambda epoch: None,
           trace: Optional[list] = None,
           eval_data: Optional[Dataset] = None,
           fixed_lr: Optional[float] = None) -> list[EpochLog]:
    order_rng, aug_rng, _ = run_streams(cfg.seed)
    logs = []
    for epoch in range(cfg.epochs):
        lambdas = penalty(epoch)
        lr = fixed_lr if fixed_lr is not None else cfg.lr_at(epoch)
        params = model.parameters()
        loss_sum, correct, seen = 0.0, 0, 0
        for b, (_, xb, yb) in enumerate(data.batches(cfg.batch_size, order_rng)):
            if len(yb) < 2:
                continue  # batch statistics need two samples
            if cfg.augment:
                xb = augment(xb, aug_rng)
            model.zero_grad()
            try:
                logits = model.forward(xb, training=True)
                loss = softmax_cross_entropy(logits, yb)
                if not np.isfinite(loss.data):
                    raise NumericError("non-finite loss")
                loss.backward()
            except NumericError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch} batch {b}: {exc}") from exc
            if tracker is not None:
                tracker.record_batch(model, len(yb))
                if trace is not None:
                    trace.append(("record", epoch, b))
            if lambdas is not None:
                apply_sparsity_gradient(model, lambdas)
            elif constant_penalty is not None:
                apply_sparsity_gradient(model, None, constant=constant_penalty)
            sgd_step(params, lr, cfg.momentum, cfg.weight_decay, cfg.nesterov)
            loss_sum += float(loss.data) * len(yb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            seen += len(yb)
        on_epoch_end(epoch)
        reg = 0.0
        if lambdas is not None:
            reg = float(sum((lambdas[u.layer_index] * np.abs(u.bn.gamma.data)).sum() for u in model.unit_list()))
        elif constant_penalty is not None:
            reg = float(constant_penalty * sum(np.abs(u.bn.gamma.data).sum() for u in model.unit_list()))
        test_acc = evaluate(model, eval_data)[0] if eval_data is not None else float("nan")
        logs.append(EpochLog(epoch, loss_sum / max(seen, 1), reg, correct / max(seen, 1), test_acc,
                             sparsified_count(model), lr))
        log.debug("epoch %d loss %.4f acc %.3f sparsified %d", epoch, logs[-1].task_loss,
                  logs[-1].train_accuracy, logs[-1].sparsified)
    return logs


def train_normal(model: Model, data: Dataset, cfg: TrainConfig, eval_data: Optional[Dataset] = None) -> TrainResult:
    """Plain training without any sparsity penalty."""
    return TrainResult(model, _train(model, data, cfg, eval_data=eval_data))


def train_baseline(model: Model, data: Dataset, lam: float, cfg: TrainConfig,
                   eval_data: Optional[Dataset] = None) -> TrainResult:
    """Indiscriminate sparsity learning: one shared L1 penalty on every BN scale."""
    if len(data) == 0:
        raise InputError("dataset is empty")
    return TrainResult(model, _train(model, data, cfg, constant_penalty=lam, eval_data=eval_data))


def train_sasl(model: Model, data: Dataset, scheme: HierarchyScheme, cfg: TrainConfig,
               guider: str = "saliency", eval_data: Optional[Dataset] = None,
               on_epoch: Optional[Callable[[int, list, list], None]] = None) -> TrainResult:
    """Sparsity learning with penalties assigned by the previous epoch's saliency ranking.

    The first epoch uses a uniformly random ranking drawn from the run seed;
    afterwards each epoch's penalties come from the previous epoch's ranking.
    """
    if len(data) == 0:
        raise InputError("dataset is empty")
    result = TrainResult(model)
    _, _, rank_rng = run_streams(cfg.seed)
    filters = model.filters()
    ranking: list = [filters[i] for i in rank_rng.permutation(len(filters))]
    tracker = SaliencyTracker(model)
    state = {"lambdas": None}

    def penalty(epoch: int):
        assignment = assign_regularization(ranking, scheme, epoch)
        result.assignments.append(assignment)
        result.trace.append(("distribute", epoch))
        tracker.reset(model)
        state["lambdas"] = assignment.lambda_arrays(model)
        return state["lambdas"]

    def epoch_end(epoch: int):
        nonlocal ranking
        records = tracker.records(model, phase="sparsity")
        ranked = compute_saliency_epoch(records, guider)
        ranking = [fid for fid, _ in ranked]
        result.trace.append(("rank", epoch))
        result.saliency.append((epoch, records, ranked))
        if on_epoch is not None:
            on_epoch(epoch, records, ranked)

    result.logs = _train(model, data, cfg, penalty=penalty, tracker=tracker, on_epoch_end=epoch_end,
                         trace=result.trace, eval_data=eval_data)
    return result


def fine_tune(model: Model, data: Dataset, epochs: int, lr: float = 1e-4, cfg: Optional[TrainConfig] = None,
              eval_data: Optional[Dataset] = None) -> TrainResult:
    """Fixed learning-rate training with no sparsity penalty."""
    base = cfg or TrainConfig()
    run = TrainConfig(epochs=epochs, batch_size=base.batch_size, lr=lr, momentum=base.momentum,
                      nesterov=base.nesterov, weight_decay=base.weight_decay, lr_milestones=(),
                      augment=base.augment, seed=base.seed)
    return TrainResult(model, _train(model, data, run, eval_data=eval_data, fixed_lr=lr))


LOG_COLUMNS = ["epoch", "task_loss", "reg_mass", "train_accuracy", "test_accuracy", "sparsified", "lr"]


def write_log_csv(path, logs: Sequence[EpochLog]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for e in logs:
            w.writerow([e.epoch, repr(e.task_loss), repr(e.reg_mass), repr(e.train_accuracy),
                        repr(e.test_accuracy), e.sparsified, repr(e.lr)])
