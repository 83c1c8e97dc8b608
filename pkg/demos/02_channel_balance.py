"""Scaling, rotation and their static-dynamic combination on a modulated layer.

Run: python demos/02_channel_balance.py
"""

import numpy as np

from dataclasses import replace

from dtq.pipeline import DYNAMIC_W4A8, calibrate, group_traces
from dtq.quant_core import row_incoherence
from dtq.toydit import build_toy_model, run_denoise

print("== 1. record a float run ================================")
model = build_toy_model()
fp = run_denoise(model, 20, record_traces=True)
name = "blocks.1.ffn.fc1"  # its input comes straight out of a feature modulation
traces = group_traces(fp.traces)[name]
w = model.weight(name)
print(f"   {len(fp.traces)} traces; layer {name} sees {len(traces)} of them, weight {w.shape}")

print("== 2. the outlier channels move with the timestep =======")
amax = np.stack([np.abs(t.X).max(axis=0) for t in traces if t.condition == 1])
top = np.argsort(amax.mean(axis=0))[-3:]
for c in top:
    print(f"   channel {c:>3}: absmax at steps 0/10/19 = {amax[0, c]:.2f} / {amax[10, c]:.2f} / {amax[19, c]:.2f}")

print("== 3. balance each way, check mu and the output =========")
x = np.concatenate([t.X for t in traces]).astype(np.float64)
y = x @ w.T
print(f"   {'none':>15}: mean mu {row_incoherence(x).mean():.2f}")
for kind in ("scaling", "rotation", "static_dynamic"):
    st = calibrate(model, fp.traces, {name: replace(DYNAMIC_W4A8, balance=kind)})[name]
    t = st.transform
    xt, wt = t.apply(x, w)
    drift = np.abs(xt @ wt.T - y).max() / np.abs(y).max()
    err = np.mean((st.forward(x) - y) ** 2) / np.mean(y**2)
    alpha = "" if st.alpha is None else f" alpha {st.alpha}"
    print(f"   {kind:>15}: mean mu {row_incoherence(xt).mean():.2f}, float drift {drift:.1e},"
          f" W4A8 relative error {err:.2e}{alpha}")
