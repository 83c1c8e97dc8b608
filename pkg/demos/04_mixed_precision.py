"""Spend a 4.5-bit weight budget by layer group instead of by output MSE alone.

Run: python demos/04_mixed_precision.py   (about half a minute; set DTQ_THREADS to parallelise)
"""

import numpy as np

from dtq.pipeline import STATIC_DYNAMIC_W4A8, calibrate
from dtq.sensitivity import (
    SensitivityContext,
    metric_decoupled_plan,
    mse_based_plan,
    partition_timesteps,
    proxy_metrics,
    run_plan,
)
from dtq.toydit import build_toy_model, run_denoise

STEPS, BUDGET = 20, 4.5

print("== 1. four timestep ranges, every layer at 4 or 8 bits ===")
model = build_toy_model()
fp = run_denoise(model, STEPS, record_traces=True)
states = calibrate(model, fp.traces, STATIC_DYNAMIC_W4A8, extra_bits={n: {8} for n in model.layer_names()})
ctx = SensitivityContext(model, states, fp)
print("   ranges:", [(r.start, r.stop) for r in partition_timesteps(STEPS)])
print(f"   cells: {len(model.layer_names())} layers x 4 ranges")

print("== 2. which metric does each layer group hurt? ==========")
dec = metric_decoupled_plan(ctx, BUDGET)
h = dec.heatmap
print("   " + " " * 10 + "".join(f"{m:>11}" for m in h.metrics))
for g, row in zip(h.groups, h.values):
    print(f"   {g:>10}" + "".join(f"{v:>11.3f}" for v in row))
print("   group mse:", {g: f"{v:.2e}" for g, v in dec.group_mse.items()})
print("   promotion quanta per group (one quantum = 4 extra bits on the smallest layer):", dec.budgets)

print("== 3. compare with ranking every cell by output mse =====")
mse = mse_based_plan(ctx, BUDGET)
for name, plan in (("decoupled", dec.plan), ("mse-ranked", mse)):
    m = proxy_metrics(run_plan(ctx, plan), fp)
    hi = sum(b == 8 for b in plan.bits.values())
    print(f"   {name:>10}: avg bits {plan.average_bits():.3f}, {hi} cells at 8 bits,"
          f" quality {m.quality:.2e} alignment {m.alignment:.2e} temporal {m.temporal:.2e}")
print("   lower is better for all three proxies")
