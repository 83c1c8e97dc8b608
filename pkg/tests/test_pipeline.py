from dataclasses import replace

import numpy as np
import pytest

from dtq.pipeline import (
    DYNAMIC_W4A8,
    NAIVE_W4A8,
    STATIC_DYNAMIC_W4A8,
    LayerSetting,
    QuantRuntime,
    calibrate,
    derive_widths,
    group_traces,
    make_state,
    output_mse,
    runtime,
    timestep_range,
)
from dtq.quant_core import (
    DYNAMIC,
    PER_OUTPUT_CHANNEL,
    PER_TOKEN,
    dequantize,
    fake_quantize,
    quantize,
    row_incoherence,
)
from dtq.toydit import MODULATED, build_toy_model, run_denoise

from conftest import STEPS

BALANCE_SEEDS = (0, 1, 2)


def test_setting_validation():
    with pytest.raises(ValueError):
        LayerSetting(balance="smooth")
    with pytest.raises(ValueError):
        LayerSetting(act_mode="frozen")
    assert LayerSetting(w_bits=16).passthrough


def test_timestep_ranges():
    assert [timestep_range(s, 20) for s in range(20)] == [i // 5 for i in range(20)]


def test_derive_widths_requantizes_widest():
    w = np.random.default_rng(0).normal(size=(8, 16))
    w8 = quantize(w, PER_OUTPUT_CHANNEL, 8, DYNAMIC, symmetric=True)
    out = derive_widths(w8, [4, 2])
    assert list(out) == [2, 4, 8]
    assert out[8] is w8
    expect = quantize(dequantize(w8), PER_OUTPUT_CHANNEL, 4, DYNAMIC, symmetric=True)
    assert np.array_equal(out[4].ints, expect.ints)
    with pytest.raises(ValueError):
        derive_widths(w8, [8])


def test_make_state_widths():
    w = np.random.default_rng(1).normal(size=(4, 8))
    st = make_state("l", DYNAMIC_W4A8, None, w, {4, 8, 16})
    assert sorted(st.weights) == [4, 8]
    assert st.shape == (4, 8)
    with pytest.raises(ValueError):
        make_state("l", DYNAMIC_W4A8, None, w, {16})


def test_calibrate_requires_traces(model, fp_run):
    traces = [t for t in fp_run.traces if not t.layer_name.startswith("blocks.1.")]
    with pytest.raises(ValueError):
        calibrate(model, traces, DYNAMIC_W4A8)


def test_static_params_per_tensor_only(model, fp_run):
    with pytest.raises(ValueError):
        calibrate(model, fp_run.traces, replace(NAIVE_W4A8, act_scheme=PER_TOKEN))
    states = calibrate(model, fp_run.traces, NAIVE_W4A8)
    assert all(len(s.act_params) == 1 for s in states.values())


def test_per_layer_settings_leave_rest_float(model, fp_run):
    name = model.layer_names()[0]
    states = calibrate(model, fp_run.traces, {name: STATIC_DYNAMIC_W4A8})
    assert list(states) == [name]


def test_runtime_validates_plan(model, w4a8_states):
    name = next(iter(w4a8_states))
    with pytest.raises(ValueError):
        runtime(model, w4a8_states, STEPS, plan={("nope", 0): 4})
    with pytest.raises(ValueError):
        runtime(model, w4a8_states, STEPS, plan={(name, 4): 4})
    with pytest.raises(ValueError):
        runtime(model, w4a8_states, STEPS, plan={(name, 0): 8})


def test_integer_path_matches_fake_quant(model, fp_run, w4a8_states):
    fake = run_denoise(model, STEPS, True, runtime(model, w4a8_states, STEPS))
    exact = run_denoise(model, STEPS, True, runtime(model, w4a8_states, STEPS, integer=True))
    assert np.max(np.abs(fake.output - exact.output)) <= 1e-9
    assert output_mse(fake, fp_run) > 0


def test_cells_restrict_quantization(model, fp_run, w4a8_states):
    rt = QuantRuntime(w4a8_states, STEPS, cells=set())
    assert np.array_equal(run_denoise(model, STEPS, True, rt).output, fp_run.output)


def test_balanced_forward_matches_reference_in_float(model, fp_run, w4a8_states):
    # with quantization switched off, the transform is exact
    name = "blocks.0.ffn.fc1"
    st = w4a8_states[name]
    x = next(t.X for t in fp_run.traces if t.layer_name == name).astype(np.float64)
    w = model.weight(name)
    t = st.transform
    y = t.transform_activation(x) @ t.transform_weight(w).T
    assert np.max(np.abs(y - x @ w.T)) <= 1e-5 * (1 + np.abs(x @ w.T).max())


# ---------------------------------------------------------------------------
# balance benefit on modulated toy-model traces


@pytest.fixture(scope="module")
def balance_runs():
    out = []
    for seed in BALANCE_SEEDS:
        m = build_toy_model(seed=seed)
        fp = run_denoise(m, STEPS, record_traces=True)
        states = {k: calibrate(m, fp.traces, replace(DYNAMIC_W4A8, balance=k))
                  for k in ("scaling", "rotation", "static_dynamic")}
        out.append((m, group_traces(fp.traces), states))
    return out


def _modulated(m):
    return [n for n in m.layer_names() if n.split(".", 2)[2] in MODULATED]


def _worst_mu(balance_runs):
    wins = {"scaling": 0, "rotation": 0}
    n = 0
    for m, by, states in balance_runs:
        for name in _modulated(m):
            for step in range(STEPS):
                x = np.concatenate([t.X for t in by[name] if t.timestep == step]).astype(np.float64)
                mu = {k: row_incoherence(s[name].transform.transform_activation(x)).max() for k, s in states.items()}
                n += 1
                for k in wins:
                    wins[k] += mu["static_dynamic"] <= mu[k]
    return wins, n


def test_worst_group_incoherence_vs_scaling(balance_runs):
    wins, n = _worst_mu(balance_runs)
    assert wins["scaling"] == n


def test_worst_group_incoherence_vs_rotation(balance_runs):
    # known to fail: rotating a spike-dominated row already reaches mu ~ 1,
    # so the extra scaling cannot improve it and wins about a third of steps
    wins, n = _worst_mu(balance_runs)
    assert wins["rotation"] == n, f"{wins['rotation']}/{n} steps"


def _chunk_errors(balance_runs, activation_only):
    wins = trials = 0
    for m, by, states in balance_runs:
        for name in _modulated(m):
            w = m.weight(name)
            err = {k: [] for k in states}
            for t in by[name]:
                x = t.X.astype(np.float64)
                y = x @ w.T
                for k, s in states.items():
                    st = s[name]
                    if activation_only:
                        xt = st.transform.transform_activation(x)
                        dx = fake_quantize(xt, PER_TOKEN, 8, DYNAMIC) - xt
                        e = (dx @ st.transform.transform_weight(w).T) ** 2
                    else:
                        e = (st.forward(x) - y) ** 2
                    err[k].append(e.mean() / np.mean(y**2))
            mean = {k: np.mean(v) for k, v in err.items()}
            trials += 1
            wins += mean["static_dynamic"] <= min(mean["scaling"], mean["rotation"])
    return wins, trials


def test_static_dynamic_w4a8_error_benefit(balance_runs):
    # known to fail: at W4 the weight-rounding error dominates and none of
    # the balance variants has a systematic edge on it
    wins, trials = _chunk_errors(balance_runs, activation_only=False)
    assert wins >= 0.9 * trials, f"{wins}/{trials} trials"


def test_static_dynamic_activation_error_benefit(balance_runs):
    # the part of the error the balance is designed to reduce
    wins, trials = _chunk_errors(balance_runs, activation_only=True)
    assert wins >= 0.9 * trials, f"{wins}/{trials} trials"
