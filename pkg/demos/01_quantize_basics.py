"""Min-max quantization of an activation matrix with one outlier channel.

Run: python demos/01_quantize_basics.py
"""

import numpy as np

from dtq.quant_core import (
    PER_TENSOR,
    PER_TOKEN,
    STATIC,
    compute_params,
    dequantize,
    error_report,
    quantize,
    row_incoherence,
)

print("== 1. an activation matrix ==============================")
rng = np.random.default_rng(0)
x = rng.standard_normal((16, 64)) * rng.lognormal(0, 1, size=(16, 1))  # tokens differ in scale
x[:, 7] *= 30  # one outlier channel
print("   shape:", x.shape, " absmax per token (first 4):", np.abs(x).max(axis=1)[:4].round(2))
print("   incoherence per token (first 4):", row_incoherence(x)[:4].round(2), " max possible:", np.sqrt(64))

print("== 2. 8-bit codes, two groupings ========================")
static = compute_params(x, PER_TENSOR, 8)  # frozen once, as a calibrated layer would
for name, q in [("per-tensor static", quantize(x, PER_TENSOR, 8, STATIC, static)),
                ("per-token dynamic", quantize(x, PER_TOKEN, 8))]:
    r = error_report(x, q)
    print(f"   {name:>18}: scales {q.group_params.scales[:3].round(4)}...  mse {r.total_mse:.3e}")

print("== 3. what a 4-bit grid does to one token ===============")
q = quantize(x[:1], PER_TOKEN, 4)
print("   codes   :", q.ints[0, :10])
print("   original:", x[0, :10].round(2))
print("   restored:", dequantize(q)[0, :10].round(2))
print("   step size:", q.group_params.scales[0].round(3), "(error stays below half a step)")
