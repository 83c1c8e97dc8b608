"""Metric-decoupled mixed-precision allocation.

Layers are split into three groups by the aspect of the output they mostly
affect, the denoising trajectory into four equal timestep ranges, and a
``(layer, range)`` cell is the unit that gets a weight bit-width. Each group
receives a share of the global bit budget proportional to the output MSE it
causes on its own; within a group, cells are promoted greedily by the
degradation of that group's own proxy metric.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

import numpy as np

from .pipeline import PASSTHROUGH_BITS, QuantLayerState, output_mse, runtime
from .toydit import DenoiseRun, ToyDiT, layer_type, run_denoise

LOW_BITS = 4
HIGH_BITS = 8
POOLED = "pooled"  # single pseudo-group of the MSE-based baseline
BUDGET_SLACK = 0.1


class LayerGroup(str, Enum):
    QUALITY = "quality"
    ALIGNMENT = "alignment"
    TEMPORAL = "temporal"


GROUPS = tuple(LayerGroup)
METRICS = ("quality", "alignment", "temporal")


class BudgetError(ValueError):
    """Budget below the low-bit floor or above the high-bit ceiling."""


def layer_group(name: str) -> LayerGroup:
    """Map a layer name (``blocks.i.ffn.fc1``) or type (``FFN1``) to its group."""
    kind = layer_type(name) if name.startswith("blocks.") else name
    if kind.startswith("CrossAttn"):
        return LayerGroup.ALIGNMENT
    if kind.startswith("TemporalAttn"):
        return LayerGroup.TEMPORAL
    if kind.startswith(("SelfAttn", "FFN")):
        return LayerGroup.QUALITY
    raise ValueError(f"layer {name!r} has no metric group")


@dataclass(frozen=True)
class TimestepRange:
    index: int
    start: int
    stop: int  # exclusive

    def __contains__(self, step: int) -> bool:
        return self.start <= step < self.stop

    def __len__(self) -> int:
        return self.stop - self.start


def partition_timesteps(steps: int) -> list[TimestepRange]:
    if steps < 4 or steps % 4:
        raise ValueError(f"step count must be a positive multiple of 4, got {steps}")
    q = steps // 4
    return [TimestepRange(i, i * q, (i + 1) * q) for i in range(4)]


# ---------------------------------------------------------------------------
# proxy metrics


@dataclass(frozen=True)
class ProxyMetrics:
    """Deviation of a run from the float reference; 0 means indistinguishable."""

    quality: float
    alignment: float
    temporal: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.quality, self.alignment, self.temporal)

    def __getitem__(self, metric: str) -> float:
        if metric not in METRICS:
            raise KeyError(metric)
        return getattr(self, metric)


def _hf_energy(frames: np.ndarray) -> float:
    # token-axis first differences stand in for spatial high frequencies
    return float(np.sum(np.diff(frames, axis=1) ** 2))


def _motion(outputs: np.ndarray, frames: int) -> np.ndarray:
    """Mean inter-frame difference magnitude per (step, block, frame pair, token)."""
    s, d, rows, c = outputs.shape
    x = outputs.reshape(s, d, frames, rows // frames, c)
    return np.mean(np.abs(np.diff(x, axis=2)), axis=-1)


def _cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    cos = np.where(denom > 0, np.sum(a * b, axis=-1) / np.where(denom > 0, denom, 1.0), 1.0)
    cos = np.where(np.all(a == b, axis=-1), 1.0, cos)  # exact zero for identical rows
    return float(np.mean(np.clip(1.0 - cos, 0.0, 2.0)))


def proxy_metrics(run_q: DenoiseRun, run_fp: DenoiseRun) -> ProxyMetrics:
    """Quality, alignment and temporal proxies of ``run_q`` against ``run_fp``.

    * quality: high-frequency (token-difference) energy of the final-frame
      deviation, relative to the reference's high-frequency energy.
    * alignment: mean cosine distance between the conditional-branch
      cross-attention outputs of the two runs.
    * temporal: relative L1 change of the mean inter-frame difference
      magnitude of the conditional-branch temporal-attention outputs, taken
      per step, block, frame pair and token.

    Raises:
        ValueError: if the runs differ in shape, step count, seed or CFG use.
    """
    if (run_q.steps, run_q.cfg, run_q.seed) != (run_fp.steps, run_fp.cfg, run_fp.seed):
        raise ValueError("runs differ in steps, cfg or seed")
    if (run_q.output.shape != run_fp.output.shape
            or run_q.cross_outputs.shape != run_fp.cross_outputs.shape
            or run_q.temporal_outputs.shape != run_fp.temporal_outputs.shape):
        raise ValueError("runs have different shapes")
    hf_ref = _hf_energy(run_fp.output)
    if hf_ref == 0:
        warnings.warn("reference high-frequency energy is zero; proxy undefined", stacklevel=2)
        quality = math.nan
    else:
        quality = _hf_energy(run_q.output - run_fp.output) / hf_ref
    alignment = _cosine_distance(run_q.cross_outputs, run_fp.cross_outputs)
    frames = run_fp.output.shape[0]
    m_q, m_fp = _motion(run_q.temporal_outputs, frames), _motion(run_fp.temporal_outputs, frames)
    ref = float(m_fp.sum())
    if ref == 0:
        warnings.warn("reference inter-frame motion is zero; proxy undefined", stacklevel=2)
        temporal = math.nan
    else:
        temporal = float(np.abs(m_q - m_fp).sum()) / ref
    return ProxyMetrics(quality, alignment, temporal)


# ---------------------------------------------------------------------------
# heatmap


@dataclass(frozen=True)
class MetricHeatmap:
    """Group x metric attribution matrix; every row is a probability vector."""

    groups: tuple[str, ...]
    metrics: tuple[str, ...]
    values: np.ndarray
    raw: np.ndarray  # relative deltas before standardisation (NaN = excluded)

    def row(self, group) -> np.ndarray:
        return self.values[self.groups.index(str(getattr(group, "value", group)))]

    def argmax(self, group) -> str:
        return self.metrics[int(np.argmax(self.row(group)))]

    def to_dict(self) -> dict:
        return {
            "groups": list(self.groups),
            "metrics": list(self.metrics),
            "values": self.values.tolist(),
            "raw": [[None if math.isnan(v) else v for v in r] for r in self.raw.tolist()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricHeatmap":
        raw = np.array([[math.nan if v is None else v for v in r] for r in d["raw"]], dtype=np.float64)
        return cls(tuple(d["groups"]), tuple(d["metrics"]), np.asarray(d["values"], dtype=np.float64), raw)


def _softmax_rows(z: np.ndarray, keep: np.ndarray) -> np.ndarray:
    out = np.zeros_like(z)
    for i in range(z.shape[0]):
        m = keep[i]
        if not m.any():
            out[i] = 1.0 / z.shape[1]
            continue
        e = np.exp(z[i, m] - z[i, m].max())
        out[i, m] = e / e.sum()
    return out


def build_heatmap(deltas: dict, zscore: str = "column") -> MetricHeatmap:
    """Z-score then row-softmax the per-group relative metric deltas.

    Args:
        deltas: group -> :class:`ProxyMetrics` (or a length-3 sequence) from
            runs where only that group is quantized. Our proxies already are
            relative deviations from the float run, so they are used as the
            ``|M_FP - M_Q| / |M_FP|`` deltas directly.
        zscore: ``"column"`` standardises each metric across groups (the
            metrics live on different scales); ``"global"`` uses one mean and
            deviation for the whole matrix.

    Non-finite cells are excluded (with a warning) and get weight 0.
    """
    if zscore not in ("column", "global"):
        raise ValueError(f"unknown zscore mode {zscore!r}")
    groups = tuple(str(getattr(g, "value", g)) for g in deltas)
    raw = np.array([list(getattr(v, "as_tuple", lambda v=v: v)()) for v in deltas.values()], dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != len(METRICS):
        raise ValueError("each group needs exactly three metric deltas")
    keep = np.isfinite(raw)
    if not keep.all():
        warnings.warn(f"{int((~keep).sum())} heatmap cell(s) excluded (undefined delta)", stacklevel=2)
    z = np.zeros_like(raw)
    if zscore == "global":
        vals = raw[keep]
        sd = vals.std() if vals.size else 0.0
        z[keep] = (raw[keep] - vals.mean()) / sd if sd > 0 else 0.0
    else:
        for j in range(raw.shape[1]):
            m = keep[:, j]
            col = raw[m, j]
            sd = col.std() if col.size else 0.0
            z[m, j] = (col - col.mean()) / sd if sd > 0 else 0.0
    return MetricHeatmap(groups, METRICS, _softmax_rows(z, keep), raw)


# ---------------------------------------------------------------------------
# plans and budgets


@dataclass(frozen=True)
class SensitivityRecord:
    layer: str
    range: int
    group: str
    metric_delta: float

    def __post_init__(self):
        if not math.isfinite(self.metric_delta):
            raise ValueError(f"non-finite sensitivity for {self.layer} range {self.range}")
        if not 0 <= self.range < 4:
            raise ValueError(f"range index {self.range} out of [0, 4)")

    @property
    def cell(self) -> tuple[str, int]:
        return (self.layer, self.range)


@dataclass
class MixedPrecisionPlan:
    """Weight bit-width for every ``(layer, range)`` cell.

    ``weights`` gives each layer's parameter count, used for the
    parameter-weighted average; the layer-counted average ignores it.
    """

    bits: dict[tuple[str, int], int]
    budget: float
    weights: dict[str, int] = field(default_factory=dict)
    low: int = LOW_BITS
    high: int = HIGH_BITS
    mode: str = "param"

    def __post_init__(self):
        if self.mode not in ("param", "layer"):
            raise ValueError(f"unknown budget mode {self.mode!r}")
        bad = {b for b in self.bits.values() if b not in (self.low, self.high)}
        if bad:
            raise ValueError(f"plan bits {sorted(bad)} outside {{{self.low}, {self.high}}}")

    @property
    def layers(self) -> list[str]:
        seen: dict[str, None] = {}
        for layer, _ in self.bits:
            seen.setdefault(layer)
        return list(seen)

    def average_bits(self, mode: str | None = None) -> float:
        mode = mode or self.mode
        if not self.bits:
            raise ValueError("empty plan")
        if mode == "layer":
            return float(np.mean(list(self.bits.values())))
        w = np.array([self.weights[layer] for layer, _ in self.bits], dtype=np.float64)
        b = np.array(list(self.bits.values()), dtype=np.float64)
        return float(w @ b / w.sum())

    def fraction_high(self) -> float:
        return sum(b == self.high for b in self.bits.values()) / len(self.bits)

    def check(self, layers: Iterable[str] | None = None) -> None:
        """Raise if a cell is missing or the budget invariant is broken."""
        if layers is not None:
            missing = [(l, r) for l in layers for r in range(4) if (l, r) not in self.bits]
            if missing:
                raise ValueError(f"plan misses {len(missing)} cell(s), e.g. {missing[0]}")
        avg = self.average_bits()
        if avg > self.budget + BUDGET_SLACK or avg < self.low - 1e-9:
            raise BudgetError(f"plan average {avg:.3f} violates budget {self.budget}")

    def to_dict(self) -> dict:
        return {
            "budget": self.budget,
            "mode": self.mode,
            "low": self.low,
            "high": self.high,
            "weights": dict(self.weights),
            "cells": [{"layer": l, "range": r, "bits": b} for (l, r), b in self.bits.items()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixedPrecisionPlan":
        bits = {(c["layer"], int(c["range"])): int(c["bits"]) for c in d["cells"]}
        return cls(bits, float(d["budget"]), {k: int(v) for k, v in d["weights"].items()},
                   int(d["low"]), int(d["high"]), d["mode"])


def _cell_weight(layer: str, weights: dict[str, int], mode: str) -> int:
    return 1 if mode == "layer" else int(weights[layer])


def group_budgets(
    group_mse: dict,
    budget: float,
    cell_weights: dict,
    low: int = LOW_BITS,
    high: int = HIGH_BITS,
) -> dict[str, int]:
    """Split the bits above the floor across groups in proportion to their MSE.

    Budgets are counted in promotion quanta of ``(high - low) * q`` bit units,
    ``q`` being the smallest cell weight. The total is ``floor(extra / quantum)``;
    each group's real-valued share is capped at its capacity (excess goes to
    the remaining groups, again by MSE), then rounded by largest remainder
    with ties going to the earlier group.

    Args:
        group_mse: group -> output MSE when only that group is low-bit.
        budget: target average bits over all cells.
        cell_weights: group -> list of cell weights (1 per cell for layer
            counting, parameter counts otherwise).

    Returns:
        group -> number of quanta the group may spend on promotions.
    """
    keys = [str(getattr(g, "value", g)) for g in group_mse]
    mse = np.array([max(float(v), 0.0) for v in group_mse.values()])
    w_lists = [list(cell_weights[g]) for g in group_mse]
    all_w = [w for ws in w_lists for w in ws]
    if not all_w:
        raise BudgetError("no cells to allocate")
    if not low <= budget <= high + 1e-12:
        raise BudgetError(f"budget {budget} outside [{low}, {high}]")
    quantum = (high - low) * min(all_w)
    total = int(math.floor((budget - low) * sum(all_w) / quantum + 1e-9))
    caps = np.array([int(math.floor((high - low) * sum(ws) / quantum + 1e-9)) for ws in w_lists], dtype=np.float64)
    total = min(total, int(caps.sum()))
    if mse.sum() <= 0:
        mse = np.ones_like(mse)  # no signal: uniform split
    share = np.zeros_like(mse)
    open_ = np.ones(len(mse), dtype=bool)
    left = float(total)
    while left > 1e-9 and open_.any():
        weights = np.where(open_, mse, 0.0)
        if weights.sum() <= 0:
            weights = open_.astype(np.float64)
        add = left * weights / weights.sum()
        share += add
        over = share > caps
        left = float((share - caps)[over].sum())
        share[over] = caps[over]
        open_ &= ~over
        open_ &= share < caps
        if not over.any():
            break
    base = np.floor(share + 1e-9).astype(int)
    rem = share - base
    short = total - int(base.sum())
    order = sorted(range(len(mse)), key=lambda i: (-round(rem[i], 12), i))
    for i in order:
        if short <= 0:
            break
        if base[i] < caps[i]:
            base[i] += 1
            short -= 1
    return dict(zip(keys, (int(b) for b in base)))


def allocate_plan(
    records: Iterable[SensitivityRecord],
    budgets: dict[str, int],
    weights: dict[str, int],
    budget: float,
    low: int = LOW_BITS,
    high: int = HIGH_BITS,
    mode: str = "param",
    layer_order: list[str] | None = None,
) -> MixedPrecisionPlan:
    """Greedy promotion within each group.

    Cells start at ``low``; each group walks its cells by descending
    ``metric_delta`` (ties: earlier range, then layer order) and promotes
    every cell whose cost still fits the group's remaining quanta.
    """
    records = list(records)
    if not records:
        raise BudgetError("no sensitivity records")
    if not low <= budget <= high + 1e-12:
        raise BudgetError(f"budget {budget} outside [{low}, {high}]")
    order = layer_order or list(dict.fromkeys(r.layer for r in records))
    rank = {name: i for i, name in enumerate(order)}
    cells = [r.cell for r in records]
    if len(set(cells)) != len(cells):
        raise ValueError("duplicate (layer, range) record")
    quantum = (high - low) * min(_cell_weight(r.layer, weights, mode) for r in records)
    bits = {c: low for c in cells}
    for group, n_quanta in budgets.items():
        left = n_quanta * quantum
        mine = [r for r in records if r.group == group]
        mine.sort(key=lambda r: (-r.metric_delta, r.range, rank[r.layer]))
        for r in mine:
            cost = (high - low) * _cell_weight(r.layer, weights, mode)
            if cost <= left:
                bits[r.cell] = high
                left -= cost
    plan = MixedPrecisionPlan(bits, budget, dict(weights), low, high, mode)
    plan.check()
    return plan


# ---------------------------------------------------------------------------
# measurement on the toy model


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("DTQ_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn: Callable, items: list, threads: int | None) -> list:
    """Ordered map, fanned out over at most ``threads`` workers."""
    n = _threads() if threads is None else max(1, threads)
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as ex:
        return list(ex.map(fn, items))


@dataclass
class SensitivityContext:
    """Everything a one-cell (or one-group) low-bit run needs."""

    model: ToyDiT
    states: dict[str, QuantLayerState]
    reference: DenoiseRun
    low: int = LOW_BITS

    @property
    def steps(self) -> int:
        return self.reference.steps

    def run_cells(self, cells: set[tuple[str, int]], bits: int | None = None) -> DenoiseRun:
        """Quantize only ``cells`` (at ``bits``, default the low bit); everything else float."""
        b = self.low if bits is None else bits
        plan = {c: b for c in cells}
        rt = runtime(self.model, self.states, self.steps, plan=plan, cells=set(cells))
        return run_denoise(self.model, self.steps, self.reference.cfg, rt, self.reference.seed)


def layer_weights(model: ToyDiT) -> dict[str, int]:
    return {n: int(np.prod(s)) for n, s in model.layer_shapes().items()}


def mse_sensitivity(ctx: SensitivityContext, layer: str, rng: int, bits: int | None = None) -> float:
    """Final-output MSE vs float when only ``(layer, rng)`` is quantized."""
    if bits == PASSTHROUGH_BITS:
        return 0.0
    return output_mse(ctx.run_cells({(layer, rng)}, bits), ctx.reference)


def group_runs(ctx: SensitivityContext, threads: int | None = None) -> dict[str, DenoiseRun]:
    """One run per group with every cell of that group at the low bit."""
    layers = ctx.model.layer_names()

    def one(g):
        return ctx.run_cells({(l, r) for l in layers if layer_group(l) == g for r in range(4)})

    return dict(zip((g.value for g in GROUPS), _map(one, list(GROUPS), threads)))


def metric_records(ctx: SensitivityContext, threads: int | None = None) -> list[SensitivityRecord]:
    """Each cell's degradation of its own group's proxy metric."""
    cells = [(l, r) for r in range(4) for l in ctx.model.layer_names()]

    def one(cell):
        g = layer_group(cell[0])
        m = proxy_metrics(ctx.run_cells({cell}), ctx.reference)
        delta = m[g.value]
        return SensitivityRecord(cell[0], cell[1], g.value, 0.0 if math.isnan(delta) else delta)

    return _map(one, cells, threads)


def mse_records(ctx: SensitivityContext, threads: int | None = None) -> list[SensitivityRecord]:
    """Each cell's final-output MSE, all cells in one pooled group."""
    cells = [(l, r) for r in range(4) for l in ctx.model.layer_names()]
    vals = _map(lambda c: mse_sensitivity(ctx, *c), cells, threads)
    return [SensitivityRecord(l, r, POOLED, v) for (l, r), v in zip(cells, vals)]


@dataclass
class DecoupledResult:
    plan: MixedPrecisionPlan
    records: list[SensitivityRecord]
    heatmap: MetricHeatmap
    group_mse: dict[str, float]
    budgets: dict[str, int]


def allocate_from_analysis(
    records: list[SensitivityRecord],
    group_mse: dict[str, float],
    weights: dict[str, int],
    budget: float,
    low: int = LOW_BITS,
    high: int = HIGH_BITS,
    mode: str = "param",
    layer_order: list[str] | None = None,
) -> tuple[MixedPrecisionPlan, dict[str, int]]:
    """Group budgets from ``group_mse`` then greedy promotion; returns ``(plan, budgets)``.

    Each record's ``group`` decides where its cell's weight is counted, so
    pooled records with ``group_mse={POOLED: 1.0}`` give the MSE baseline.
    """
    cell_w: dict[str, list[int]] = {g: [] for g in group_mse}
    for r in records:
        if r.group not in cell_w:
            raise ValueError(f"record group {r.group!r} has no group MSE")
        cell_w[r.group].append(_cell_weight(r.layer, weights, mode))
    budgets = group_budgets(group_mse, budget, cell_w, low, high)
    plan = allocate_plan(records, budgets, weights, budget, low, high, mode, layer_order)
    return plan, budgets


def metric_decoupled_plan(
    ctx: SensitivityContext,
    budget: float,
    high: int = HIGH_BITS,
    mode: str = "param",
    threads: int | None = None,
    records: list[SensitivityRecord] | None = None,
    zscore: str = "column",
) -> DecoupledResult:
    """Group budgets from single-group MSE, then per-group greedy promotion."""
    layers = ctx.model.layer_names()
    runs = group_runs(ctx, threads)
    group_mse = {g: output_mse(run, ctx.reference) for g, run in runs.items()}
    heatmap = build_heatmap({g: proxy_metrics(run, ctx.reference) for g, run in runs.items()}, zscore)
    records = metric_records(ctx, threads) if records is None else records
    plan, budgets = allocate_from_analysis(records, group_mse, layer_weights(ctx.model), budget,
                                           ctx.low, high, mode, layers)
    return DecoupledResult(plan, records, heatmap, group_mse, budgets)


def mse_based_plan(
    ctx: SensitivityContext,
    budget: float,
    high: int = HIGH_BITS,
    mode: str = "param",
    threads: int | None = None,
    records: list[SensitivityRecord] | None = None,
) -> MixedPrecisionPlan:
    """Baseline: rank all cells together by their own output MSE."""
    records = mse_records(ctx, threads) if records is None else records
    plan, _ = allocate_from_analysis(records, {POOLED: 1.0}, layer_weights(ctx.model), budget,
                                     ctx.low, high, mode, ctx.model.layer_names())
    return plan


def run_plan(ctx: SensitivityContext, plan: MixedPrecisionPlan) -> DenoiseRun:
    rt = runtime(ctx.model, ctx.states, ctx.steps, plan=dict(plan.bits))
    return run_denoise(ctx.model, ctx.steps, ctx.reference.cfg, rt, ctx.reference.seed)
