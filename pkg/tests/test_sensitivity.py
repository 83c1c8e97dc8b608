import itertools
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dtq.pipeline import STATIC_DYNAMIC_W4A8, calibrate, runtime
from dtq.sensitivity import (
    POOLED,
    BudgetError,
    LayerGroup,
    MetricHeatmap,
    MixedPrecisionPlan,
    SensitivityContext,
    SensitivityRecord,
    allocate_from_analysis,
    allocate_plan,
    build_heatmap,
    group_budgets,
    layer_group,
    mse_sensitivity,
    partition_timesteps,
    proxy_metrics,
)
from dtq.toydit import run_denoise

from conftest import STEPS


def spans(steps):
    return [(r.start, r.stop) for r in partition_timesteps(steps)]


def test_partitions():
    assert spans(100) == [(0, 25), (25, 50), (50, 75), (75, 100)]
    assert spans(4) == [(0, 1), (1, 2), (2, 3), (3, 4)]
    assert spans(20) == [(0, 5), (5, 10), (10, 15), (15, 20)]
    assert 7 in partition_timesteps(20)[1] and len(partition_timesteps(20)[3]) == 5
    with pytest.raises(ValueError):
        partition_timesteps(10)


def test_layer_groups(model):
    assert layer_group("blocks.0.cross_attn.kv") is LayerGroup.ALIGNMENT
    assert layer_group("TemporalAttnProj") is LayerGroup.TEMPORAL
    assert layer_group("blocks.1.ffn.fc2") is LayerGroup.QUALITY
    assert {layer_group(n) for n in model.layer_names()} == set(LayerGroup)
    with pytest.raises(ValueError):
        layer_group("Conv")


# ---------------------------------------------------------------------------
# budgets


def cells(n):
    return {g: [1] * n for g in ("quality", "alignment", "temporal")}


def test_budgets_equal_mse():
    assert group_budgets({"quality": 1, "alignment": 1, "temporal": 1}, 6.0, cells(4)) == \
        {"quality": 2, "alignment": 2, "temporal": 2}


def test_budgets_zero_mse_group_stays_at_floor():
    b = group_budgets({"quality": 1, "alignment": 1, "temporal": 0}, 6.0, cells(4))
    assert b["temporal"] == 0 and sum(b.values()) == 6


def test_budgets_largest_remainder_oracle():
    # 30 cells, budget 5 -> 30 extra bits -> 7 quanta of 4 bits.
    # shares 6.3 / 0.35 / 0.35 -> floors 6/0/0, one quantum left; the 0.35
    # remainders tie and the earlier group wins
    b = group_budgets({"quality": 0.9, "alignment": 0.05, "temporal": 0.05}, 5.0, cells(10))
    assert b == {"quality": 6, "alignment": 1, "temporal": 0}


def test_budgets_capacity_overflow_redistributes():
    # 9 quanta, capacity 4 per group: the first group is capped and its
    # excess (4.82) is split evenly -> 2.5 / 2.5 -> tie to the earlier group
    b = group_budgets({"quality": 0.98, "alignment": 0.01, "temporal": 0.01}, 7.0, cells(4))
    assert b == {"quality": 4, "alignment": 3, "temporal": 2}


def test_budgets_all_zero_mse_is_uniform():
    assert group_budgets({"a": 0, "b": 0}, 6.0, {"a": [1] * 4, "b": [1] * 4}) == {"a": 2, "b": 2}


@pytest.mark.parametrize("budget", [3.9, 8.5])
def test_budgets_reject_infeasible(budget):
    with pytest.raises(BudgetError):
        group_budgets({"a": 1}, budget, {"a": [1]})


# ---------------------------------------------------------------------------
# plans


def records_3x4(deltas, group="quality"):
    layers = ["l0", "l1", "l2"]
    return [SensitivityRecord(l, r, group, deltas[i * 4 + r]) for i, l in enumerate(layers) for r in range(4)]


def test_allocate_brute_force_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        deltas = rng.permutation(12).astype(float) + rng.random(12)
        recs = records_3x4(deltas)
        weights = {"l0": 1, "l1": 1, "l2": 1}
        plan = allocate_plan(recs, {"quality": 5}, weights, 4 + 20 / 12, mode="layer")
        # every size-5 promotion set, best total delta
        best = max(itertools.combinations(range(12), 5), key=lambda c: sum(deltas[i] for i in c))
        expect = {recs[i].cell for i in best}
        assert {c for c, b in plan.bits.items() if b == 8} == expect


def test_allocate_floor_and_ceiling():
    recs = records_3x4(np.arange(12.0))
    w = {"l0": 10, "l1": 20, "l2": 40}
    floor = allocate_plan(recs, {"quality": 0}, w, 4.0)
    assert set(floor.bits.values()) == {4}
    cap = group_budgets({"quality": 1.0}, 8.0, {"quality": [10] * 4 + [20] * 4 + [40] * 4})
    ceil = allocate_plan(recs, cap, w, 8.0)
    assert set(ceil.bits.values()) == {8} and ceil.average_bits() == 8.0
    with pytest.raises(BudgetError):
        allocate_plan(recs, {"quality": 0}, w, 3.5)


def test_allocate_rejects_duplicates_and_empty():
    r = SensitivityRecord("l0", 0, "quality", 1.0)
    with pytest.raises(ValueError):
        allocate_plan([r, r], {"quality": 1}, {"l0": 1}, 5.0, mode="layer")
    with pytest.raises(BudgetError):
        allocate_plan([], {}, {}, 5.0)


def test_record_validation():
    with pytest.raises(ValueError):
        SensitivityRecord("l", 4, "quality", 1.0)
    with pytest.raises(ValueError):
        SensitivityRecord("l", 0, "quality", float("nan"))


def test_pooled_baseline_uses_one_group():
    recs = [SensitivityRecord(r.layer, r.range, POOLED, r.metric_delta) for r in records_3x4(np.arange(12.0))]
    plan, budgets = allocate_from_analysis(recs, {POOLED: 1.0}, {"l0": 1, "l1": 1, "l2": 1}, 6.0, mode="layer")
    assert budgets == {POOLED: 6}
    assert plan.fraction_high() == 0.5
    assert {c for c, b in plan.bits.items() if b == 8} == {("l2", r) for r in range(4)} | {("l1", 2), ("l1", 3)}


def test_plan_average_arithmetic():
    bits = {(f"l{i}", r): (8 if i == 0 else 4) for i in range(3) for r in range(4)}
    plan = MixedPrecisionPlan(bits, 16 / 3, {"l0": 1, "l1": 1, "l2": 1}, mode="layer")
    assert plan.average_bits() == pytest.approx(16 / 3, abs=1e-12)
    assert plan.fraction_high() == pytest.approx(1 / 3)
    half = MixedPrecisionPlan({("a", 0): 2, ("b", 0): 8}, 5.0, {"a": 1, "b": 1}, low=2, mode="layer")
    assert half.average_bits() == 5.0
    # parameter weighting: 8 bits on the big layer
    p = MixedPrecisionPlan({("a", 0): 4, ("b", 0): 8}, 8.0, {"a": 1, "b": 3})
    assert p.average_bits() == 7.0 and p.average_bits("layer") == 6.0


def test_plan_validation_and_round_trip():
    with pytest.raises(ValueError):
        MixedPrecisionPlan({("a", 0): 6}, 5.0, {"a": 1})
    with pytest.raises(ValueError):
        MixedPrecisionPlan({("a", 0): 4}, 5.0, {"a": 1}, mode="bytes")
    plan = MixedPrecisionPlan({("a", 0): 4, ("a", 1): 8}, 6.0, {"a": 5}, mode="param")
    assert MixedPrecisionPlan.from_dict(plan.to_dict()) == plan
    with pytest.raises(ValueError):
        plan.check(["a"])
    over = MixedPrecisionPlan({("a", 0): 8}, 5.0, {"a": 1})
    with pytest.raises(BudgetError):
        over.check()


@given(
    deltas=st.lists(st.floats(0, 10), min_size=12, max_size=12),
    weights=st.tuples(*[st.integers(1, 5)] * 3),
    quanta=st.integers(0, 12),
    cell=st.integers(0, 11),
    bump=st.floats(0, 10),
)
def test_prop_monotone_protection(deltas, weights, quanta, cell, bump):
    w = dict(zip(["l0", "l1", "l2"], weights))
    budget = 8.0
    before = allocate_plan(records_3x4(deltas), {"quality": quanta}, w, budget)
    raised = list(deltas)
    raised[cell] += bump
    after = allocate_plan(records_3x4(raised), {"quality": quanta}, w, budget)
    c = records_3x4(deltas)[cell].cell
    if before.bits[c] == 8:
        assert after.bits[c] == 8
    # determinism
    assert allocate_plan(records_3x4(deltas), {"quality": quanta}, w, budget).bits == before.bits


@given(
    mse=st.lists(st.floats(0, 1), min_size=3, max_size=3),
    sizes=st.tuples(*[st.integers(1, 6)] * 3),
    budget=st.floats(4, 8),
)
def test_prop_budgets_feasible(mse, sizes, budget):
    cw = {g: [1] * n for g, n in zip(("quality", "alignment", "temporal"), sizes)}
    b = group_budgets(dict(zip(cw, mse)), budget, cw)
    total = sum(sizes)
    assert all(0 <= b[g] <= len(cw[g]) for g in cw)
    assert 4 + 4 * sum(b.values()) / total <= budget + 1e-9
    # nothing left that could still be spent
    assert sum(b.values()) == min(total, int((budget - 4) * total / 4 + 1e-9))


# ---------------------------------------------------------------------------
# heatmap


def test_heatmap_uniform_rows():
    h = build_heatmap({"quality": (1.0, 1.0, 1.0), "alignment": (1.0, 1.0, 1.0)})
    assert np.allclose(h.values, 1 / 3)


def test_heatmap_excludes_undefined_cells():
    with pytest.warns(UserWarning):
        h = build_heatmap({"quality": (float("nan"), 1.0, 2.0), "alignment": (1.0, 3.0, 0.0)})
    assert h.values[0, 0] == 0.0
    assert np.allclose(h.values.sum(axis=1), 1.0)
    assert MetricHeatmap.from_dict(h.to_dict()).to_dict() == h.to_dict()


@given(st.lists(st.tuples(*[st.floats(0, 1e3)] * 3), min_size=1, max_size=5), st.sampled_from(["column", "global"]))
def test_prop_heatmap_rows_are_distributions(rows, mode):
    h = build_heatmap({f"g{i}": r for i, r in enumerate(rows)}, mode)
    assert np.all(h.values >= 0)
    assert np.allclose(h.values.sum(axis=1), 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# proxies on the toy model


def test_proxy_zero_law(fp_run):
    assert proxy_metrics(fp_run, fp_run).as_tuple() == (0.0, 0.0, 0.0)


def test_frame_permutation_moves_only_temporal(fp_run):
    frames = fp_run.output.shape[0]
    order = np.r_[1, 0, 2:frames]
    rows = fp_run.temporal_outputs.shape[2] // frames
    tmp = fp_run.temporal_outputs.reshape(*fp_run.temporal_outputs.shape[:2], frames, rows, -1)
    shuffled = replace(fp_run, temporal_outputs=tmp[:, :, order].reshape(fp_run.temporal_outputs.shape))
    m = proxy_metrics(shuffled, fp_run)
    assert m.temporal > 0
    assert m.alignment == 0.0 and m.quality == 0.0


def test_proxy_rejects_mismatched_runs(model, fp_run):
    other = run_denoise(model, STEPS, cfg=False)
    with pytest.raises(ValueError):
        proxy_metrics(other, fp_run)


def test_w4a8_proxies_positive(fp_run, w4a8_run):
    assert all(v > 0 for v in proxy_metrics(w4a8_run, fp_run).as_tuple())


def test_mse_sensitivity_identity_and_monotone(model, fp_run):
    name = "blocks.0.ffn.fc1"
    states = calibrate(model, fp_run.traces, {name: STATIC_DYNAMIC_W4A8}, extra_bits={name: {8}})
    ctx = SensitivityContext(model, states, fp_run)
    assert mse_sensitivity(ctx, name, 0, 16) == 0.0
    assert mse_sensitivity(ctx, name, 0, 4) >= mse_sensitivity(ctx, name, 0, 8) > 0
