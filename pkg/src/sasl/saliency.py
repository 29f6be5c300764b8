"""Per-filter importance, compute resource and saliency.

Importance of filter m is the squared first-order change in task loss when
the filter is removed, ``(g_m . w_m)^2``, where the dot product runs over the
filter's kernel weights and its BN scale. Resource is the compute a filter
consumes: output map size x active input maps x kernel area. Saliency is
importance per unit resource.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import stats

from .autodiff import StateError, no_grad, softmax_cross_entropy
from .model import SPARSITY_THRESHOLD, FilterId, Model, Unit

PHASES = ("sparsity", "pruning")
GUIDERS = ("saliency", "importance", "resource")
CRITERIA = ("saliency", "importance", "resource", "energy")


@dataclass
class FilterSaliencyRecord:
    filter: FilterId
    importance_accum: float = 0.0
    batches_seen: int = 0
    resource: float = 0.0
    saliency: float = 0.0
    energy: float = 0.0  # |gamma|
    flagged: bool = False  # resource was zero; saliency forced to 0

    @property
    def importance(self) -> float:
        return self.importance_accum / self.batches_seen if self.batches_seen else 0.0


@dataclass(frozen=True)
class ResourceModel:
    s_fm: float  # output positions the filter is applied at
    n_fm: int  # active input feature maps (or features, for FC nodes)
    s_f: float  # kernel area

    @property
    def value(self) -> float:
        return self.s_fm * self.n_fm * self.s_f


def filter_gradient_products(model: Model) -> dict[int, np.ndarray]:
    """``g_m . w_m`` for every filter, keyed by layer index.

    Reads the gradients left by the last backward pass; the caller must make
    sure that pass covered the task loss only.
    """
    out = {}
    for u in model.unit_list():
        if len(u.out_ids) == 0:
            out[u.layer_index] = np.zeros(0)
            continue
        gw, gg = u.weight.grad, u.bn.gamma.grad
        if gg is None:
            raise StateError(f"unit {u.layer_index} has no gradient; run backward first")
        dot = gg * u.bn.gamma.data
        if gw is not None and u.weight.data.size:
            dot = dot + (gw * u.weight.data).reshape(len(u.out_ids), -1).sum(axis=1)
        out[u.layer_index] = dot
    return out


def _resource_keep(model: Model, phase: str, pruned: Iterable[FilterId] = ()):
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}, got {phase!r}")
    gone: dict[int, list[int]] = {}
    for f in pruned:
        gone.setdefault(f.layer_index, []).append(f.channel_index)

    def keep(u: Unit) -> np.ndarray:
        if phase == "sparsity":
            return np.abs(u.bn.gamma.data) >= SPARSITY_THRESHOLD
        return ~np.isin(u.out_ids, gone.get(u.layer_index, []))

    return keep


def resource_models(model: Model, phase: str = "sparsity",
                    pruned: Iterable[FilterId] = ()) -> dict[FilterId, ResourceModel]:
    """Resource terms of every filter under the phase's notion of an active input."""
    f = model.flow(_resource_keep(model, phase, pruned))
    out = {}
    for u in model.unit_list():
        n_in = len(f.unit_in[u.layer_index])
        if u.info.kind == "conv":
            ho, wo = u.info.out_hw
            rm = ResourceModel(float(ho * wo), n_in, float(u.info.kernel ** 2))
        else:
            rm = ResourceModel(1.0, n_in * u.info.group, 1.0)
        for fid in u.filter_ids():
            out[fid] = rm
    return out


def compute_resource(model: Model, filter: FilterId, phase: str = "sparsity",
                     pruned: Iterable[FilterId] = ()) -> float:
    rms = resource_models(model, phase, pruned)
    if filter not in rms:
        raise KeyError(f"unknown filter {filter}")
    return rms[filter].value


class SaliencyTracker:
    """Accumulates per-filter importance over the batches of one epoch."""

    def __init__(self, model: Model):
        self.reset(model)

    def reset(self, model: Model) -> None:
        self._accum = {u.layer_index: np.zeros(len(u.out_ids)) for u in model.unit_list()}
        self._ids = {u.layer_index: u.out_ids.copy() for u in model.unit_list()}
        self.batches_seen = 0
        self.samples_seen = 0

    def record_batch(self, model: Model, batch_size: int = 0) -> None:
        """Add ``(g_m . w_m)^2`` of the last backward pass to every filter."""
        dots = filter_gradient_products(model)
        for layer, d in dots.items():
            if not np.array_equal(self._ids[layer], model.units[layer].out_ids):
                raise StateError("model structure changed since the tracker was reset")
            self._accum[layer] += d * d
        self.batches_seen += 1
        self.samples_seen += batch_size

    def records(self, model: Model, phase: str = "sparsity",
                pruned: Iterable[FilterId] = ()) -> list[FilterSaliencyRecord]:
        if self.batches_seen == 0:
            raise StateError("no batches recorded")
        rms = resource_models(model, phase, pruned)
        out = []
        for u in model.unit_list():
            acc = self._accum[u.layer_index]
            for pos, fid in enumerate(u.filter_ids()):
                out.append(FilterSaliencyRecord(
                    fid, float(acc[pos]), self.batches_seen, rms[fid].value,
                    energy=float(abs(u.bn.gamma.data[pos]))))
        return out


def record_batch(tracker: SaliencyTracker, model: Model, batch_size: int = 0) -> None:
    tracker.record_batch(model, batch_size)


def guider_score(record: FilterSaliencyRecord, guider: str = "saliency") -> float:
    """Score that orders filters for regularization; higher means less penalty."""
    if guider == "importance":
        return record.importance
    if guider not in ("saliency", "resource"):
        raise ValueError(f"guider must be one of {GUIDERS}, got {guider!r}")
    if record.resource <= 0:
        return 0.0
    if guider == "saliency":
        return record.importance / record.resource
    return 1.0 / record.resource  # cheaper filters are penalized less


def criterion_score(record: FilterSaliencyRecord, criterion: str = "saliency") -> float:
    """Score that orders filters for removal; lowest goes first."""
    if criterion == "energy":
        return record.energy
    if criterion == "importance":
        return record.importance
    if criterion not in ("saliency", "resource"):
        raise ValueError(f"criterion must be one of {CRITERIA}, got {criterion!r}")
    if record.resource <= 0:
        return 0.0
    numerator = record.importance if criterion == "saliency" else record.energy
    return numerator / record.resource


def _ranked(records, key) -> list[tuple[FilterId, float]]:
    scored = [(r.filter, key(r)) for r in records]
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored


def compute_saliency_epoch(records: Sequence[FilterSaliencyRecord],
                           guider: str = "saliency") -> list[tuple[FilterId, float]]:
    """Fill saliency on each record and return the descending ranking.

    Ties are broken by FilterId so rankings are reproducible. ``guider``
    swaps the ranking key for the importance-only or resource-only variants.
    """
    for r in records:
        if r.batches_seen <= 0:
            raise StateError(f"filter {r.filter} has no recorded batches")
        r.flagged = r.resource <= 0
        r.saliency = 0.0 if r.flagged else r.importance / r.resource
    return _ranked(records, lambda r: guider_score(r, guider))


def rank_for_pruning(records: Sequence[FilterSaliencyRecord],
                     criterion: str = "saliency") -> list[tuple[FilterId, float]]:
    compute_saliency_epoch(records)
    return _ranked(records, lambda r: criterion_score(r, criterion))


# ---------------------------------------------------------------------------
# brute-force oracle


def dataset_loss(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    total = 0.0
    with no_grad():
        for s in range(0, len(x), batch_size):
            loss = softmax_cross_entropy(model.forward(x[s:s + batch_size], training=False), y[s:s + batch_size])
            total += float(loss.per_sample.sum())
    return total / len(x)


def true_importance_oracle(model: Model, x: np.ndarray, y: np.ndarray, filter: FilterId,
                           base_loss: Optional[float] = None) -> float:
    """Squared change in mean evaluation loss when the filter's BN scale is zeroed."""
    if base_loss is None:
        base_loss = dataset_loss(model, x, y)
    u = model.units[filter.layer_index]
    pos = int(np.searchsorted(u.out_ids, filter.channel_index))
    if pos >= len(u.out_ids) or u.out_ids[pos] != filter.channel_index:
        raise KeyError(f"unknown filter {filter}")
    saved = u.bn.gamma.data[pos]
    u.bn.gamma.data[pos] = 0.0
    try:
        removed = dataset_loss(model, x, y)
    finally:
        u.bn.gamma.data[pos] = saved
    return (base_loss - removed) ** 2


def oracle_importances(model: Model, x: np.ndarray, y: np.ndarray) -> dict[FilterId, float]:
    base = dataset_loss(model, x, y)
    return {fid: true_importance_oracle(model, x, y, fid, base) for fid in model.filters()}


def spearman(a, b) -> float:
    """Spearman rank correlation with average ranks for ties (0 when either side is constant)."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    return float(stats.spearmanr(a, b).statistic)


# ---------------------------------------------------------------------------
# reporting


def overhead_flops(model: Model, batches_per_epoch: int) -> dict[str, float]:
    """Extra floating-point work per epoch spent on saliency bookkeeping.

    Estimation: per batch, one multiply-add per kernel weight and BN scale,
    plus squaring and accumulation per filter. Aggregation and ranking: one
    division per filter plus ``n log2 n`` comparisons. Distribution: one
    assignment per filter.
    """
    n = len(model.filters())
    per_batch = 0
    for u in model.unit_list():
        per_filter = u.weight.data[0].size + 1 if len(u.out_ids) else 0
        per_batch += len(u.out_ids) * (2 * per_filter + 2)
    estimation = float(per_batch * batches_per_epoch)
    ranking = float(2 * n + (n * math.log2(n) if n > 1 else 0.0))
    distribution = float(n)
    return {
        "saliency_estimation": estimation,
        "aggregation_and_ranking": ranking,
        "regularization_distribution": distribution,
        "total": estimation + ranking + distribution,
    }


SALIENCY_CSV_COLUMNS = ["epoch", "layer_index", "channel_index", "importance", "resource", "saliency", "rank"]


def saliency_rows(epoch: int, records: Sequence[FilterSaliencyRecord],
                  ranking: Sequence[tuple[FilterId, float]]) -> list[dict]:
    rank_of = {fid: i for i, (fid, _) in enumerate(ranking)}
    return [
        {
            "epoch": epoch,
            "layer_index": r.filter.layer_index,
            "channel_index": r.filter.channel_index,
            "importance": repr(r.importance),
            "resource": repr(r.resource),
            "saliency": repr(r.saliency),
            "rank": rank_of[r.filter],
        }
        for r in records
    ]


def write_saliency_csv(path, rows: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SALIENCY_CSV_COLUMNS)
        w.writeheader()
        w.writerows(rows)
