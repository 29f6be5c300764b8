"""Acceptance criteria 1-11, each reported as one PASS/FAIL line.

Criteria 7-9 share one set of desk-scale runs (three seeds) driven through
the command-line comparison entry point; the profile lives in
``configs/acceptance.yaml``.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest

from sasl.autodiff import Tensor, relu
from sasl.cli import compare, main, write_comparison
from sasl.data import SyntheticTask, generate_synthetic, normalize_split
from sasl.experiments import ExperimentConfig
from sasl.gradcheck import check_gradients, op_cases
from sasl.model import (
    Model, _block_forward, build_plain_cnn, build_residual_cnn, count_flops, mask_filters, rebuild,
)
from sasl.pruner import PruneSchedule, estimate_saliency
from sasl.saliency import oracle_importances, spearman
from sasl.trainer import HierarchyScheme, TrainConfig, train_baseline, train_normal, train_sasl

PROFILE = Path(__file__).resolve().parents[1] / "configs" / "acceptance.yaml"

REPORT: list[str] = []


def report(criterion: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
    REPORT.append(line)
    print(line)


def params_of(model):
    return [p.data.copy() for p in model.parameters()]


# ---------------------------------------------------------------------------
# 1. gradient correctness


def test_criterion_01_gradient_checks():
    start = time.perf_counter()
    worst, checked = {}, 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        for name, build, inputs in op_cases(rng):
            for r in check_gradients(build, inputs, rng, step=1e-5, name=name):
                worst[name] = max(worst.get(name, 0.0), r.relative_error)
                checked += 1
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    report("1", ok, f"{len(worst)} ops x 20 seeds ({checked} checks), worst rel. error "
                    f"{max(worst.values()):.2e} ({max(worst, key=worst.get)}), {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. first-order importance versus brute-force removal


def test_criterion_02_importance_tracks_oracle():
    start = time.perf_counter()
    split = normalize_split(generate_synthetic(SyntheticTask(class_count=4, image_size=12, samples_per_class=60,
                                                             test_per_class=20, noise=1.0, seed=11)))
    rhos, top_pct = [], []
    for seed in range(5):
        model = Model.init(build_plain_cnn([8, (8, True), 16], split.train.input_shape, 4), seed=seed)
        assert len(model.filters()) <= 32
        train_normal(model, split.train, TrainConfig(epochs=4, batch_size=32, lr=0.05, seed=seed))
        oracle = oracle_importances(model, split.train.x, split.train.y)
        records, _ = estimate_saliency(model, split.train, batch_size=32)
        fids = [r.filter for r in records]
        first = np.array([r.importance for r in records])
        brute = np.array([oracle[f] for f in fids])
        rhos.append(spearman(first, brute))
        top_pct.append(float((brute < brute[int(np.argmax(first))]).mean()))
    elapsed = time.perf_counter() - start
    ok = min(rhos) >= 0.5 and min(top_pct) >= 0.1 and elapsed < 120
    report("2", ok, f"Spearman per seed {[round(r, 3) for r in rhos]}, top filter's oracle percentile "
                    f"{[round(p, 2) for p in top_pct]} (bottom decile < 0.10), {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 3. regularization mass across class counts


def test_criterion_03_mass_conservation():
    ref = HierarchyScheme.staircase(5, 1e-4).expected_mass()
    errors = {k: abs(HierarchyScheme.mass_matched(k, 1e-4).expected_mass() - ref) for k in range(1, 9)}
    two = HierarchyScheme.staircase(2, 1e-4).multipliers
    ok = max(errors.values()) <= 1e-12 and two == (0.0, 4.0)
    report("3", ok, f"max |mass - reference| over k=1..8 = {max(errors.values()):.1e}, k=2 multipliers {two}")
    assert ok


# ---------------------------------------------------------------------------
# 4. loop conformance


def test_criterion_04_loop_conformance():
    split = normalize_split(generate_synthetic(SyntheticTask(class_count=4, image_size=8, samples_per_class=24,
                                                             test_per_class=8, noise=0.5, seed=3)))
    base = Model.init(build_plain_cnn([4, (6, True), 5], split.train.input_shape, 4), seed=0)
    cfg = TrainConfig(epochs=3, batch_size=16, lr=0.05, seed=9)
    res = train_sasl(base.copy(), split.train, HierarchyScheme.staircase(5, 1e-3), cfg)
    batches = -(-len(split.train) // cfg.batch_size)
    per_epoch = [[e for e in res.trace if e[1] == epoch] for epoch in range(cfg.epochs)]
    structure_ok = all(
        ev[0] == ("distribute", epoch) and ev[-1] == ("rank", epoch)
        and [e for e in ev if e[0] == "record"] == [("record", epoch, b) for b in range(batches)]
        and len(ev) == batches + 2
        for epoch, ev in enumerate(per_epoch)
    )
    a, b = base.copy(), base.copy()
    train_sasl(a, split.train, HierarchyScheme.staircase(1, 1e-3), cfg)
    train_baseline(b, split.train, 1e-3, cfg)
    identical = all(np.array_equal(x, y) for x, y in zip(params_of(a), params_of(b)))
    ok = structure_ok and identical
    report("4", ok, f"one distribution + {batches} recordings + one ranking per epoch: {structure_ok}; "
                    f"k=1 bit-identical to indiscriminate: {identical}")
    assert ok


# ---------------------------------------------------------------------------
# 5. prune equivalence


def random_model(seed: int) -> Model:
    rng = np.random.default_rng(seed)
    kind = seed % 3
    if kind == 0:
        spec = build_plain_cnn([int(rng.integers(2, 6)), (int(rng.integers(2, 6)), True), int(rng.integers(2, 6))],
                               (int(rng.integers(1, 3)), 6, 6), 3)
    elif kind == 1:
        spec = build_residual_cnn([(int(rng.integers(2, 5)), int(rng.integers(1, 3))),
                                   (int(rng.integers(3, 6)), 1, 2, True)], (1, 6, 6), 3)
    else:
        spec = build_plain_cnn([(3, True), 4], (1, 6, 6), 3, hidden=[int(rng.integers(2, 6))])
    m = Model.init(spec, seed=seed)
    for u in m.unit_list():
        u.bn.gamma.data[:] = rng.uniform(0.3, 1.5, len(u.out_ids))
        u.bn.beta.data[:] = rng.standard_normal(len(u.out_ids))
        u.bn.running_mean = rng.standard_normal(len(u.out_ids))
        u.bn.running_var = rng.uniform(0.5, 2.0, len(u.out_ids))
    return m


def random_connected_removal(m: Model, rng) -> list:
    filters = m.filters()
    while True:
        chosen = [filters[i] for i in rng.choice(len(filters), int(rng.integers(0, len(filters))), replace=False)]
        if m.is_connected(chosen):
            return chosen


def test_criterion_05_prune_equivalence():
    cases, exact = 60, 0
    for seed in range(cases):
        m = random_model(seed)
        rng = np.random.default_rng(1000 + seed)
        removed = random_connected_removal(m, rng)
        x = rng.standard_normal((3,) + m.spec.input_shape)
        masked, compact = mask_filters(m, removed), rebuild(m, removed)
        exact += (np.array_equal(masked.predict_logits(x), compact.predict_logits(x))
                  and count_flops(compact) == count_flops(masked, active_only=True))
    ok = exact == cases
    report("5", ok, f"{exact}/{cases} random models and filter sets give bit-equal logits and matching FLOPs")
    assert ok


# ---------------------------------------------------------------------------
# 6. schedule exactness


def test_criterion_06_schedule_exactness():
    standard, fast = PruneSchedule(100, "standard").counts, PruneSchedule(100, "fast").counts
    sums_ok = all(sum(PruneSchedule(n, mode).counts) == n for n in range(0, 2001) for mode in ("standard", "fast"))
    ok = (standard == [5] * 20 and fast == [20, 20, 20] + [5] * 8 and len(standard) == 20 and len(fast) == 11
          and sums_ok)
    report("6", ok, f"standard {len(standard)} iterations of 5, fast {len(fast)} iterations {fast}, "
                    f"sum = N for N in 0..2000: {sums_ok}")
    assert ok


# ---------------------------------------------------------------------------
# 7-9. desk-scale ablations


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    cfg = ExperimentConfig.load(PROFILE)
    out = tmp_path_factory.mktemp("desk")
    cfg.output_dir = str(out)
    cache, results, times = {}, {}, {}
    for mode in ("regularization", "criterion", "hard-fraction"):
        start = time.perf_counter()
        results[mode] = compare(cfg, mode, with_reference=(mode == "regularization"), cache=cache)
        times[mode] = time.perf_counter() - start
        write_comparison(out, results[mode])
    return cfg, results, times


def rows_by_arm(result):
    return {r["arm"]: r for r in result["rows"]}


def test_criterion_07_regularization_ablation(desk):
    cfg, results, times = desk
    rows = rows_by_arm(results["regularization"])
    matched = all(abs(r["flops_reduction_pct"] - rows["Saliency"]["flops_reduction_pct"]) <= 2.0
                  for r in rows.values())
    sal = rows["Saliency"]["accuracy_pct"]
    others = {a: rows[a]["accuracy_pct"] for a in ("Tradition", "Importance", "Resource")}
    ok = matched and all(sal >= v for v in others.values()) and sal - others["Tradition"] > 0 and \
        times["regularization"] < 40 * 60
    detail = ", ".join(f"{a} {r['accuracy_pct']:.2f}±{r['accuracy_std']:.2f}% (FLOPs↓ {r['flops_reduction_pct']:.1f})"
                       for a, r in rows.items())
    report("7", ok, f"mean final accuracy over {len(cfg.seeds)} seeds: {detail}; {times['regularization'] / 60:.1f} min")
    assert ok


def test_criterion_08_criterion_ablation(desk):
    cfg, results, _ = desk
    rows = rows_by_arm(results["criterion"])
    matched = abs(rows["Saliency"]["flops_reduction_pct"] - rows["Energy"]["flops_reduction_pct"]) <= 2.0
    ok = matched and rows["Saliency"]["accuracy_pct"] >= rows["Energy"]["accuracy_pct"]
    detail = ", ".join(f"{a} {r['accuracy_pct']:.2f}±{r['accuracy_std']:.2f}% (FLOPs↓ {r['flops_reduction_pct']:.1f})"
                       for a, r in rows.items())
    report("8", ok, f"mean final accuracy over {len(cfg.seeds)} seeds: {detail}")
    assert ok


def test_criterion_09_hard_sample_mining(desk):
    cfg, results, _ = desk
    cells = results["hard-fraction"]["cells"]
    hard = [c for c in cells if c["arm"] == "hard=0.3"]
    full = [c for c in cells if c["arm"] == "hard=1"]
    n_train = cfg.data.class_count * cfg.data.samples_per_class
    cut = all(h_s == round(0.3 * n_train) and f_s == n_train
              for h, f in zip(hard, full) for h_s, f_s in zip(h["estimation_samples"], f["estimation_samples"]))
    gap = 100 * (np.mean([c["final_accuracy"] for c in hard]) - np.mean([c["final_accuracy"] for c in full]))
    ok = cut and abs(gap) <= 0.5
    report("9", ok, f"estimation samples {round(0.3 * n_train)} vs {n_train} per iteration (70% fewer): {cut}; "
                    f"mean accuracy gap {gap:+.2f} points (per seed 0.3: "
                    f"{[round(100 * c['final_accuracy'], 2) for c in hard]}, 1.0: "
                    f"{[round(100 * c['final_accuracy'], 2) for c in full]})")
    assert ok


def test_adaptive_sparsifies_more_than_indiscriminate(desk):
    cfg, results, _ = desk
    cells = results["regularization"]["cells"]
    by = {(c["arm"], c["seed"]): c["sparsified_fraction"] for c in cells}
    pairs = [(by[("Saliency", s)], by[("Tradition", s)]) for s in cfg.seeds]
    ok = all(a > b for a, b in pairs)
    print(f"sparsified fraction (adaptive, indiscriminate) per seed: {pairs}")
    assert ok


# ---------------------------------------------------------------------------
# 10. overhead bound


def test_criterion_10_overhead(tmp_path):
    cfg = ExperimentConfig.load(PROFILE)
    cfg.sparsity.epochs = 1
    cfg.seeds = [0]
    path = tmp_path / "cfg.json"
    cfg.output_dir = str(tmp_path / "run")
    cfg.save(path)
    code = main(["sparsify", "--config", str(path)])
    overhead = json.loads((tmp_path / "run" / "sparse" / "overhead.json").read_text())
    ok = code == 0 and overhead["ratio"] < 0.01
    report("10", ok, f"saliency overhead {overhead['total']:.0f} FLOPs per epoch = {100 * overhead['ratio']:.4f}% "
                     f"of one epoch's forward FLOPs")
    assert ok


# ---------------------------------------------------------------------------
# 11. residual branch removal


def test_criterion_11_residual_branch_removal():
    trials, ok_count = 24, 0
    for seed in range(trials):
        rng = np.random.default_rng(seed)
        spec = build_residual_cnn([(int(rng.integers(2, 6)), int(rng.integers(1, 3))),
                                   (int(rng.integers(3, 7)), 1, 2, True)], (1, 6, 6), 3)
        m = random_model_like(spec, seed)
        blocks = m.blocks()
        block = blocks[int(rng.integers(0, len(blocks)))]
        branch = block.branch2.filter_ids()
        fraction = 1.0 if seed % 2 == 0 else rng.uniform(0.2, 1.0)
        removed = [branch[i] for i in np.sort(rng.choice(len(branch), max(1, int(round(fraction * len(branch)))),
                                                         replace=False))]
        compact = rebuild(m, removed)
        x = rng.standard_normal((2,) + spec.input_shape)
        finite = np.isfinite(compact.predict_logits(x)).all()
        identity = True
        if len(removed) == len(branch):
            cb = next(b for b in compact.blocks() if b.index == block.index)
            cin = cb.branch1.weight.data.shape[1]
            h = Tensor(rng.standard_normal((2, cin, 6, 6)))
            out, _ = _block_forward(cb, h, np.arange(cin), False)
            path = cb.shortcut.forward(h, False) if cb.shortcut is not None else h
            identity = cb.eliminated and np.array_equal(out.data, relu(path).data)
        ok_count += bool(finite and identity)
    ok = ok_count == trials
    report("11", ok, f"{ok_count}/{trials} randomized branch removals (half of them 100%) run finite; "
                     f"full removals reduce the block to its identity path")
    assert ok


def random_model_like(spec, seed):
    rng = np.random.default_rng(seed)
    m = Model.init(spec, seed=seed)
    for u in m.unit_list():
        u.bn.beta.data[:] = rng.standard_normal(len(u.out_ids))
    return m
