"""Calibration and quantized execution of the toy model's linear layers.

``calibrate`` turns float traces into one :class:`QuantLayerState` per layer
(balance transform, quantized weights, frozen activation params).
:class:`QuantRuntime` plugs those states into :func:`dtq.toydit.run_denoise`,
optionally following a mixed-precision plan or restricting quantization to a
subset of (layer, timestep-range) cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .balance import (
    DEFAULT_ALPHA_GRID,
    BalanceTransform,
    ScalingMask,
    compute_scaling_mask,
    hadamard_matrix,
    search_alpha,
)
from .qgemm import QuantLinear, qlinear_forward
from .quant_core import (
    DYNAMIC,
    PER_OUTPUT_CHANNEL,
    PER_TENSOR,
    PER_TOKEN,
    STATIC,
    GroupingScheme,
    GroupParams,
    QuantizedTensor,
    compute_params,
    dequantize,
    fake_quantize,
    quantize,
)
from .toydit import ActivationTrace, DenoiseRun, ToyDiT

PASSTHROUGH_BITS = 16
BALANCE_KINDS = ("none", "scaling", "rotation", "static_dynamic")


@dataclass(frozen=True)
class LayerSetting:
    """How one linear layer is quantized. ``w_bits=16`` leaves it in float."""

    w_bits: int = 8
    a_bits: int = 8
    act_mode: str = DYNAMIC
    act_scheme: GroupingScheme = PER_TOKEN
    balance: str = "none"
    alpha: float | None = None  # None: grid search
    rotation_seed: int = 0
    alpha_grid: tuple[float, ...] | None = None  # None: DEFAULT_ALPHA_GRID

    def __post_init__(self):
        if self.balance not in BALANCE_KINDS:
            raise ValueError(f"unknown balance kind {self.balance!r}")
        if self.act_mode not in (STATIC, DYNAMIC):
            raise ValueError(f"unknown activation mode {self.act_mode!r}")

    @property
    def passthrough(self) -> bool:
        return self.w_bits == PASSTHROUGH_BITS


# presets used throughout the ablation
NAIVE_W4A8 = LayerSetting(4, 8, STATIC, PER_TENSOR, "none")
DYNAMIC_W4A8 = LayerSetting(4, 8, DYNAMIC, PER_TOKEN, "none")
SCALING_W4A8 = replace(DYNAMIC_W4A8, balance="scaling")
ROTATION_W4A8 = replace(DYNAMIC_W4A8, balance="rotation")
STATIC_DYNAMIC_W4A8 = replace(DYNAMIC_W4A8, balance="static_dynamic")
STATIC_DYNAMIC_W8A8 = replace(STATIC_DYNAMIC_W4A8, w_bits=8)


@dataclass
class QuantLayerState:
    name: str
    setting: LayerSetting
    transform: BalanceTransform | None
    weights: dict[int, QuantizedTensor]
    act_params: GroupParams | None = None
    alpha: float | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return next(iter(self.weights.values())).shape

    def forward(self, x: np.ndarray, w_bits: int | None = None, integer: bool = False) -> np.ndarray:
        s = self.setting
        w_bits = s.w_bits if w_bits is None else w_bits
        if self.transform is not None:
            x = self.transform.transform_activation(x)
        wq = self.weights[w_bits]
        if integer and s.act_mode == DYNAMIC and s.act_scheme == PER_TOKEN:
            return qlinear_forward(x, QuantLinear(wq, act_bits=s.a_bits))
        xq = fake_quantize(x, s.act_scheme, s.a_bits, s.act_mode, self.act_params)
        return xq @ dequantize(wq).T


def _stack(traces: list[ActivationTrace]) -> np.ndarray:
    return np.concatenate([t.X.astype(np.float64) for t in traces], axis=0)


def _trace_labels(traces: list[ActivationTrace]) -> np.ndarray:
    """Row labels identifying the (timestep, condition) chunk of every stacked row."""
    return np.concatenate([np.full(t.X.shape[0], 2 * t.timestep + t.condition) for t in traces])


def _subsample(x: np.ndarray, labels: np.ndarray, limit: int, seed: int = 0):
    if x.shape[0] <= limit:
        return x, labels
    idx = np.sort(np.random.default_rng(seed).choice(x.shape[0], size=limit, replace=False))
    return x[idx], labels[idx]


def build_transform(
    setting: LayerSetting,
    w: np.ndarray,
    calib: np.ndarray,
    static_base: np.ndarray | None,
    labels: np.ndarray | None = None,
    search_rows: int = 2048,
) -> tuple[BalanceTransform | None, float | None]:
    """Balance transform for one layer; ``labels`` mark calibration chunks for the alpha search."""
    kind = setting.balance
    if kind == "none":
        return None, None
    c_in = w.shape[1]
    rot = hadamard_matrix(c_in, seed=setting.rotation_seed) if kind in ("rotation", "static_dynamic") else None
    if kind == "rotation":
        return BalanceTransform(None, rot), None
    base = calib if (kind == "scaling" or static_base is None) else static_base
    act_absmax = np.abs(base).max(axis=0)
    if setting.alpha is not None:
        mask = compute_scaling_mask(act_absmax, np.abs(w).max(axis=0), setting.alpha)
        return BalanceTransform(mask, rot), setting.alpha
    if labels is None:
        labels = np.zeros(calib.shape[0], dtype=np.int64)
    sample, sample_labels = _subsample(calib, labels, search_rows)
    grid = setting.alpha_grid or DEFAULT_ALPHA_GRID
    alpha, t = search_alpha(sample, w, act_absmax, rot, grid, w_bits=min(setting.w_bits, 8),
                            a_bits=setting.a_bits, row_groups=sample_labels)
    return t, alpha


def group_traces(traces: list[ActivationTrace]) -> dict[str, list[ActivationTrace]]:
    out: dict[str, list[ActivationTrace]] = {}
    for t in traces:
        out.setdefault(t.layer_name, []).append(t)
    return out


def derive_widths(widest: QuantizedTensor, narrower) -> dict[int, QuantizedTensor]:
    """``{bits: codes}`` for ``widest`` plus every narrower width re-quantized from it."""
    out = {widest.bits: widest}
    for b in narrower:
        if b >= widest.bits:
            raise ValueError(f"derived width {b} is not narrower than {widest.bits}")
        out[b] = quantize(dequantize(widest), PER_OUTPUT_CHANNEL, b, DYNAMIC, symmetric=True)
    return dict(sorted(out.items()))


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def make_state(
    name: str,
    setting: LayerSetting,
    transform: BalanceTransform | None,
    w: np.ndarray,
    bits,
    act_params: GroupParams | None = None,
    alpha: float | None = None,
) -> QuantLayerState:
    """Quantize the (balanced) weight of one layer at every width in ``bits``.

    Only the widest width is quantized from the float weight; narrower widths
    are re-quantized from its dequantized values, so a checkpoint can store
    the widest codes alone and rebuild the rest. Scales and the scaling mask
    are rounded to float32 here, which is how checkpoints store them, so a
    reloaded checkpoint runs bit-identically.
    """
    if transform is not None and transform.mask is not None:
        transform = replace(transform, mask=ScalingMask(_f32(transform.mask.s), transform.mask.alpha))
    if act_params is not None:
        act_params = GroupParams(_f32(act_params.scales), act_params.zero_points, act_params.bits)
    wt = w if transform is None else transform.transform_weight(w)
    widths = sorted({b for b in bits if b != PASSTHROUGH_BITS}, reverse=True)
    if not widths:
        raise ValueError(f"{name}: no quantized weight width requested")
    q = quantize(wt, PER_OUTPUT_CHANNEL, widths[0], DYNAMIC, symmetric=True)
    gp = q.group_params
    q = replace(q, group_params=GroupParams(_f32(gp.scales), gp.zero_points, gp.bits))
    weights = derive_widths(q, widths[1:])
    return QuantLayerState(name, setting, transform, weights, act_params, alpha)


def calibrate(
    model: ToyDiT,
    traces: list[ActivationTrace],
    settings: LayerSetting | dict[str, LayerSetting],
    extra_bits: dict[str, set[int]] | None = None,
) -> dict[str, QuantLayerState]:
    """Fit balance transforms and frozen params for every non-passthrough layer.

    Args:
        model: the toy model whose weights are quantized.
        traces: float-run activation traces (``record_traces=True``),
            including the ``":static"`` traces of modulated layers.
        settings: one setting for every layer, or a per-layer mapping
            (missing layers stay in float).
        extra_bits: additional weight bit-widths to prepare per layer, as a
            mixed-precision plan needs.
    """
    by_layer = group_traces(traces)
    states = {}
    for name in model.layer_names():
        s = settings.get(name) if isinstance(settings, dict) else settings
        if s is None or s.passthrough:
            continue
        if name not in by_layer:
            raise ValueError(f"no calibration traces for layer {name}")
        w = model.weight(name)
        calib = _stack(by_layer[name])
        static = by_layer.get(name + ":static")
        transform, alpha = build_transform(s, w, calib, _stack(static) if static else None,
                                           _trace_labels(by_layer[name]))
        act_params = None
        if s.act_mode == STATIC:
            xt = calib if transform is None else transform.transform_activation(calib)
            if s.act_scheme != PER_TENSOR:
                raise ValueError("static activation params are only supported per tensor")
            act_params = compute_params(xt, s.act_scheme, s.a_bits)
        bits = {s.w_bits} | set((extra_bits or {}).get(name, ()))
        states[name] = make_state(name, s, transform, w, bits, act_params, alpha)
    return states


def timestep_range(step: int, steps: int) -> int:
    return min(4 * step // steps, 3)


@dataclass
class QuantRuntime:
    """Linear hook for :func:`run_denoise`.

    ``plan`` maps ``(layer, range)`` to a weight bit-width (16 = float);
    ``cells`` restricts quantization to the listed ``(layer, range)`` pairs.
    """

    states: dict[str, QuantLayerState]
    steps: int
    plan: dict[tuple[str, int], int] | None = None
    cells: set[tuple[str, int]] | None = None
    integer: bool = False
    model_layers: list[str] | None = field(default=None, repr=False)

    def __post_init__(self):
        known = set(self.model_layers) if self.model_layers is not None else None
        for key in list(self.plan or {}) + list(self.cells or ()):
            layer, rng = key
            if known is not None and layer not in known:
                raise ValueError(f"plan references unknown layer {layer!r}")
            if not 0 <= rng < 4:
                raise ValueError(f"timestep range {rng} out of [0, 4)")
        for (layer, rng), b in (self.plan or {}).items():
            if b != PASSTHROUGH_BITS and (layer not in self.states or b not in self.states[layer].weights):
                raise ValueError(f"plan asks {layer!r} for {b}-bit weights that were not prepared")

    def apply(self, name: str, step: int, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        state = self.states.get(name)
        if state is None:
            return x @ w.T
        r = timestep_range(step, self.steps)
        if self.cells is not None and (name, r) not in self.cells:
            return x @ w.T
        bits = state.setting.w_bits if self.plan is None else self.plan.get((name, r), state.setting.w_bits)
        if bits == PASSTHROUGH_BITS:
            return x @ w.T
        return state.forward(x, bits, self.integer)


def runtime(model: ToyDiT, states, steps: int, **kw) -> QuantRuntime:
    return QuantRuntime(states, steps, model_layers=model.layer_names(), **kw)


def output_mse(run: DenoiseRun, ref: DenoiseRun) -> float:
    return float(np.mean((run.output - ref.output) ** 2))
