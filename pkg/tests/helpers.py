"""Random trace archives and checkpoints for round-trip tests."""

import numpy as np

from dtq.trace_io import CheckpointLayer, QuantCheckpoint, StoredWeights, TraceArchive
from dtq.toydit import ActivationTrace


def random_archive(rng: np.random.Generator, max_traces: int = 6) -> TraceArchive:
    layers = [f"blocks.{i}.ffn.fc{j}" for i in range(2) for j in (1, 2)] + ["blocks.0.self_attn.qkv:static"]
    traces = []
    for _ in range(int(rng.integers(0, max_traces + 1))):
        rows, cols = (int(v) for v in rng.integers(1, 9, size=2))
        x = (rng.standard_normal((rows, cols)) * 10 ** rng.uniform(-3, 3)).astype(np.float32)
        traces.append(ActivationTrace(str(rng.choice(layers)), int(rng.integers(0, 100)), int(rng.integers(0, 2)), x))
    return TraceArchive(traces, model_id=rng.bytes(8).hex(), steps=int(rng.integers(4, 101)))


def random_layer(rng: np.random.Generator) -> CheckpointLayer:
    c_out, c_in = int(rng.integers(1, 8)), 1 << int(rng.integers(1, 4))
    if rng.random() < 0.5:
        c_out |= 1  # odd code counts exercise the packing tail
    widths = sorted(set(int(b) for b in rng.choice([2, 4, 6, 8], size=int(rng.integers(1, 3)))))
    symmetric = bool(rng.random() < 0.5)
    weights = {}
    for b in widths:
        zp = None if symmetric else rng.integers(0, 1 << b, size=c_out).astype(np.float32)
        weights[b] = StoredWeights(rng.integers(0, 1 << b, size=(c_out, c_in)),
                                   rng.uniform(1e-4, 1.0, size=c_out), zp)
    top = max(widths)
    derived = tuple(sorted(int(b) for b in rng.choice([2, 4, 6], size=int(rng.integers(0, 2))) if b < top))
    static = bool(rng.random() < 0.3)
    has_mask = bool(rng.random() < 0.5)
    has_rot = bool(rng.random() < 0.5)
    return CheckpointLayer(
        shape=(c_out, c_in), weights=weights, w_bits=top, a_bits=8,
        act_mode="static" if static else "dynamic", act_scheme="per_tensor" if static else "per_token",
        balance={(0, 0): "none", (1, 0): "scaling", (0, 1): "rotation", (1, 1): "static_dynamic"}[has_mask, has_rot],
        alpha=float(rng.choice([0.1, 0.5, 0.9])) if has_mask else None,
        mask=rng.uniform(1e-3, 10, size=c_in).astype(np.float32) if has_mask else None,
        rotation_seed=int(rng.integers(0, 1000)) if has_rot else None,
        rotation_signs=rng.choice(np.array([-1, 1], dtype=np.int8), size=c_in) if has_rot else None,
        act_scales=rng.uniform(1e-3, 1, size=1).astype(np.float32) if static else None,
        act_zero_points=rng.integers(0, 256, size=1).astype(np.float32) if static else None,
        derived_bits=derived,
    )


def random_checkpoint(rng: np.random.Generator, max_layers: int = 4) -> QuantCheckpoint:
    layers = {f"blocks.0.layer{i}": random_layer(rng) for i in range(int(rng.integers(0, max_layers + 1)))}
    return QuantCheckpoint(layers, {"bits": "W4A8", "seed": int(rng.integers(0, 100))})
