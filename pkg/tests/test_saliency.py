import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sasl.autodiff import StateError, softmax_cross_entropy
from sasl.model import FilterId, Model, build_plain_cnn, build_residual_cnn
from sasl.saliency import (
    FilterSaliencyRecord, SaliencyTracker, compute_resource, compute_saliency_epoch, criterion_score,
    dataset_loss, filter_gradient_products, guider_score, oracle_importances, overhead_flops, rank_for_pruning,
    resource_models, saliency_rows, spearman, true_importance_oracle, write_saliency_csv,
)


def backward_on(model, x, y, scale=1.0):
    model.zero_grad()
    loss = softmax_cross_entropy(model.forward(x, training=True), y)
    loss.backward(np.array(scale))
    return loss


# ---------------------------------------------------------------------------
# first-order importance


def test_dot_product_example():
    spec = build_plain_cnn([1], (1, 1, 1), 2, hidden=[1])
    m = Model.init(spec)
    fc = m.units[1]
    fc.weight.data[:] = [[3.0]]
    fc.bn.gamma.data[:] = [-1.0]
    fc.weight.tensor.grad = np.array([[1.0]])
    fc.bn.gamma.tensor.grad = np.array([2.0])
    m.units[0].weight.tensor.grad = np.zeros_like(m.units[0].weight.data)
    m.units[0].bn.gamma.tensor.grad = np.zeros(1)
    dots = filter_gradient_products(m)
    assert dots[1][0] ** 2 == 1.0
    assert dots[0][0] == 0.0


def test_zero_gradients_leave_accumulator_unchanged(tiny_plain, tiny_split):
    tr = SaliencyTracker(tiny_plain)
    for u in tiny_plain.unit_list():
        u.weight.tensor.grad = np.zeros_like(u.weight.data)
        u.bn.gamma.tensor.grad = np.zeros_like(u.bn.gamma.data)
    tr.record_batch(tiny_plain, 4)
    assert all(r.importance_accum == 0.0 for r in tr.records(tiny_plain))


def test_missing_gradients_raise(tiny_plain):
    with pytest.raises(StateError):
        SaliencyTracker(tiny_plain).record_batch(tiny_plain)


@pytest.mark.parametrize("c", [0.5, 3.0])
def test_loss_scaling_scales_contribution_quadratically(tiny_plain, tiny_split, c):
    x, y = tiny_split.train.x[:8], tiny_split.train.y[:8]
    a, b = tiny_plain.copy(), tiny_plain.copy()
    backward_on(a, x, y)
    backward_on(b, x, y, scale=c)
    ta, tb = SaliencyTracker(a), SaliencyTracker(b)
    ta.record_batch(a)
    tb.record_batch(b)
    ia = np.array([r.importance for r in ta.records(a)])
    ib = np.array([r.importance for r in tb.records(b)])
    np.testing.assert_allclose(ib, c * c * ia, rtol=1e-10, atol=1e-300)


@pytest.mark.parametrize("seed", range(12))
def test_dot_product_is_directional_derivative_of_filter_scaling(tiny_split, seed):
    """g.w equals d/dt L(w_m * (1 + t)) at t = 0, where w_m spans kernel and gamma."""
    spec = build_residual_cnn([(3, 1), (4, 1, 2, True)], tiny_split.train.input_shape, 4)
    m = Model.init(spec, seed=seed)
    x, y = tiny_split.train.x[:6], tiny_split.train.y[:6]

    def loss_at(model):
        return float(softmax_cross_entropy(model.forward(x, training=False), y).data)

    m.zero_grad()
    softmax_cross_entropy(m.forward(x, training=False), y).backward()
    dots = filter_gradient_products(m)
    rng = np.random.default_rng(seed)
    for fid in [m.filters()[i] for i in rng.choice(len(m.filters()), 5, replace=False)]:
        u_pos = int(np.searchsorted(m.units[fid.layer_index].out_ids, fid.channel_index))
        vals = []
        for t in (1e-7, -1e-7):
            p = m.copy()
            u = p.units[fid.layer_index]
            u.weight.data[u_pos] *= 1 + t
            u.bn.gamma.data[u_pos] *= 1 + t
            vals.append(loss_at(p))
        fd = (vals[0] - vals[1]) / 2e-7
        assert dots[fid.layer_index][u_pos] == pytest.approx(fd, rel=1e-3, abs=1e-7)


# ---------------------------------------------------------------------------
# resource


def test_resource_examples():
    spec = build_plain_cnn([16, 32], (1, 32, 32), 2)
    m = Model.init(spec)
    f = FilterId(1, 0)
    assert compute_resource(m, f) == 1024 * 16 * 9 == 147456
    m.units[0].bn.gamma.data[:4] = 5e-3
    assert compute_resource(m, f) == 1024 * 12 * 9 == 110592
    assert compute_resource(m, f, phase="pruning") == 147456  # only removal counts while pruning
    assert compute_resource(m, f, phase="pruning", pruned=[FilterId(0, 1)]) == 1024 * 15 * 9


def test_hidden_fc_resource_counts_active_inputs():
    spec = build_plain_cnn([(4, True)], (1, 2, 2), 2, hidden=[100, 3])
    m = Model.init(spec)
    assert compute_resource(m, FilterId(2, 0)) == 100
    rm = resource_models(m)[FilterId(1, 0)]
    assert (rm.s_fm, rm.n_fm, rm.s_f) == (1.0, 4, 1.0)  # four channels of one flattened position


def test_unknown_filter_raises(tiny_plain):
    with pytest.raises(KeyError):
        compute_resource(tiny_plain, FilterId(0, 99))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_resource_never_increases_as_inputs_sparsify(seed):
    rng = np.random.default_rng(seed)
    spec = build_residual_cnn([(4, 1), (5, 1, 2, True)], (1, 6, 6), 3)
    m = Model.init(spec, seed=seed)
    before = {f: r.value for f, r in resource_models(m).items()}
    u = m.unit_list()[int(rng.integers(0, len(m.unit_list())))]
    u.bn.gamma.data[rng.random(len(u.out_ids)) < 0.5] = 0.0
    after = {f: r.value for f, r in resource_models(m).items()}
    assert all(after[f] <= before[f] for f in before)


# ---------------------------------------------------------------------------
# saliency and ranking


def rec(layer, ch, importance, resource, energy=1.0):
    return FilterSaliencyRecord(FilterId(layer, ch), importance, 1, resource, energy=energy)


def test_saliency_examples():
    records = [rec(0, 0, 10.0, 5.0), rec(0, 1, 0.0, 3.0), rec(1, 0, 1.0, 100.0), rec(1, 1, 1.0, 10.0)]
    ranked = compute_saliency_epoch(records)
    assert records[0].saliency == 2.0
    assert ranked[-1][0] == FilterId(0, 1)
    order = [f for f, _ in ranked]
    assert order.index(FilterId(1, 1)) < order.index(FilterId(1, 0))


def test_zero_resource_is_flagged_not_divided():
    r = rec(0, 0, 4.0, 0.0)
    compute_saliency_epoch([r])
    assert r.flagged and r.saliency == 0.0


def test_ties_break_by_filter_id():
    records = [rec(1, 0, 1.0, 1.0), rec(0, 3, 1.0, 1.0), rec(0, 1, 1.0, 1.0)]
    assert [f for f, _ in compute_saliency_epoch(records)] == [FilterId(0, 1), FilterId(0, 3), FilterId(1, 0)]


def test_unrecorded_filter_raises():
    with pytest.raises(StateError):
        compute_saliency_epoch([FilterSaliencyRecord(FilterId(0, 0))])


def test_guider_and_criterion_variants():
    r = rec(0, 0, 6.0, 3.0, energy=0.5)
    assert guider_score(r, "importance") == 6.0
    assert guider_score(r, "resource") == pytest.approx(1 / 3)
    assert criterion_score(r, "energy") == 0.5
    assert criterion_score(r, "resource") == pytest.approx(0.5 / 3)
    assert criterion_score(r, "saliency") == 2.0
    with pytest.raises(ValueError):
        guider_score(r, "bogus")
    ranked = rank_for_pruning([rec(0, 0, 1.0, 1.0, 0.1), rec(0, 1, 0.5, 1.0, 0.9)], "energy")
    assert ranked[0][0] == FilterId(0, 1)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1e3), st.floats(0, 1e3)), min_size=1, max_size=30))
def test_saliency_nonnegative_and_ranking_deterministic(pairs):
    records = [rec(0, i, imp, res) for i, (imp, res) in enumerate(pairs)]
    again = [rec(0, i, imp, res) for i, (imp, res) in enumerate(pairs)]
    ranked = compute_saliency_epoch(records)
    assert all(r.saliency >= 0 for r in records)
    assert ranked == compute_saliency_epoch(again)
    scores = [s for _, s in ranked]
    assert scores == sorted(scores, reverse=True)


def test_tracker_mean_over_batches(tiny_plain, tiny_split):
    tr = SaliencyTracker(tiny_plain)
    sq = []
    for s in (0, 8):
        backward_on(tiny_plain, tiny_split.train.x[s:s + 8], tiny_split.train.y[s:s + 8])
        sq.append(filter_gradient_products(tiny_plain)[0] ** 2)
        tr.record_batch(tiny_plain, 8)
    assert tr.samples_seen == 16
    got = [r.importance for r in tr.records(tiny_plain) if r.filter.layer_index == 0]
    np.testing.assert_allclose(got, (sq[0] + sq[1]) / 2)


# ---------------------------------------------------------------------------
# brute-force oracle


def test_oracle_zero_for_dead_filter(tiny_plain, tiny_split):
    tiny_plain.units[1].bn.gamma.data[2] = 0.0
    x, y = tiny_split.train.x, tiny_split.train.y
    assert true_importance_oracle(tiny_plain, x, y, FilterId(1, 2)) == 0.0


def test_oracle_symmetric_for_duplicate_channels(tiny_split):
    spec = build_plain_cnn([2], tiny_split.train.input_shape, 4)
    m = Model.init(spec, seed=0)
    u = m.units[0]
    u.weight.data[1] = u.weight.data[0]
    spec_gap = type(spec)(spec.family, spec.input_shape, spec.class_count, spec.layers, "gap")
    g = Model.init(spec_gap, seed=0)
    g.units[0] = u
    g.classifier.weight.data[:, 1] = g.classifier.weight.data[:, 0]
    x, y = tiny_split.train.x, tiny_split.train.y
    o = oracle_importances(g, x, y)
    assert o[FilterId(0, 0)] == pytest.approx(o[FilterId(0, 1)], rel=1e-12)
    assert dataset_loss(g, x, y) > 0


def test_spearman_basics():
    assert spearman([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
    assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert spearman([1, 1, 2], [5, 5, 9]) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# overhead and dumps


def test_overhead_is_tiny_fraction_of_forward(tiny_plain, tiny_split):
    from sasl.model import count_flops
    n = len(tiny_split.train)
    extra = overhead_flops(tiny_plain, -(-n // 8))
    assert extra["total"] == sum(v for k, v in extra.items() if k != "total")
    assert extra["total"] < 0.01 * count_flops(tiny_plain) * n


def test_saliency_csv_columns(tmp_path):
    records = [rec(0, 0, 2.0, 1.0), rec(0, 1, 1.0, 1.0)]
    ranked = compute_saliency_epoch(records)
    write_saliency_csv(tmp_path / "s.csv", saliency_rows(3, records, ranked))
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert list(rows[0]) == ["epoch", "layer_index", "channel_index", "importance", "resource", "saliency", "rank"]
    assert [r["rank"] for r in rows] == ["0", "1"]
