"""Command-line pipeline: trace, calibrate, quantize, sensitivity, allocate, eval, report.

Every command reads a JSON run config (``--config``) whose values can be
overridden by ``--seed``, ``--bits``, ``--budget`` and ``--out``. Outputs are
written under the output directory with fixed names, so reruns with the same
inputs overwrite byte-identical files. Failures print one JSON line on
stderr (``{"error": <category>, ...}``) and exit with the category's code.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import trace_io
from .balance import DEFAULT_ALPHA_GRID
from .pipeline import (
    PASSTHROUGH_BITS,
    LayerSetting,
    QuantLayerState,
    calibrate,
    group_traces,
    make_state,
    output_mse,
    runtime,
)
from .qgemm import fp16_bytes
from .quant_core import DYNAMIC, PER_TENSOR, STATIC, SUPPORTED_BITS, GroupingScheme, row_incoherence
from .sensitivity import (
    GROUPS,
    POOLED,
    BudgetError,
    MetricHeatmap,
    MixedPrecisionPlan,
    SensitivityContext,
    SensitivityRecord,
    allocate_from_analysis,
    build_heatmap,
    group_runs,
    layer_group,
    layer_weights,
    metric_records,
    mse_records,
    proxy_metrics,
)
from .toydit import DenoiseRun, ToyConfig, ToyDiT, build_toy_model, run_denoise, variation_stats

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_BUDGET = 5
EXIT_INVALID_INPUT = 6

TRACE_DIR = "trace"
VARIATION_FILE = "variation.json"
CALIBRATION_FILE = "calibration.json"
CHECKPOINT_FILE = "checkpoint.dtq"
QUANTIZE_FILE = "quantize.json"
SENSITIVITY_FILE = "sensitivity.json"
EVAL_FILE = "eval.json"
ABLATION_FILE = "ablation.json"

ABLATION_ROWS = (
    ("naive", dict(act_mode=STATIC, act_scheme="per_tensor", balance="none")),
    ("dynamic", dict(act_mode=DYNAMIC, act_scheme="per_token", balance="none")),
    ("scaling", dict(act_mode=DYNAMIC, act_scheme="per_token", balance="scaling")),
    ("static_dynamic", dict(act_mode=DYNAMIC, act_scheme="per_token", balance="static_dynamic")),
)


class CliError(Exception):
    category = "internal"
    code = EXIT_INTERNAL


class ConfigError(CliError):
    category = "config_invalid"
    code = EXIT_CONFIG


class MissingInputError(CliError):
    category = "input_missing"
    code = EXIT_MISSING


class InfeasibleBudgetError(CliError):
    category = "budget_infeasible"
    code = EXIT_BUDGET


class InvalidInputError(CliError):
    category = "input_invalid"
    code = EXIT_INVALID_INPUT


# ---------------------------------------------------------------------------
# run config


_MODEL_KEYS = {f.name for f in fields(ToyConfig)} - {"width", "tokens", "frames", "seed"}


@dataclass
class RunConfig:
    """Everything a command needs; JSON keys map one-to-one onto fields."""

    width: int = 64
    tokens: int = 16
    frames: int = 4
    seed: int = 0
    steps: int = 20
    cfg: bool = True
    w_bits: int = 4
    a_bits: int = 8
    high_bits: int = 8
    act_mode: str = DYNAMIC
    act_scheme: str = "per_token"
    balance: str = "static_dynamic"
    alpha: float | None = None
    alpha_grid: list[float] | None = None
    rotation_seed: int = 0
    budget: float = 4.5
    budget_mode: str = "param"
    method: str = "metric"
    zscore: str = "column"
    plan: str | None = None
    out: str = "dtq_out"
    model: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        def is_int(v):
            return isinstance(v, int) and not isinstance(v, bool)

        def is_num(v):
            return isinstance(v, (int, float)) and not isinstance(v, bool)

        for name in ("width", "tokens", "frames", "seed", "steps", "w_bits", "a_bits", "high_bits", "rotation_seed"):
            need(is_int(getattr(self, name)), f"{name} must be an integer")
        need(0 <= self.seed < 2**64, "seed must be an unsigned 64-bit integer")
        need(0 <= self.rotation_seed < 2**64, "rotation_seed must be an unsigned 64-bit integer")
        need(isinstance(self.cfg, bool), "cfg must be true or false")
        need(self.steps >= 4 and self.steps % 4 == 0, "steps must be a positive multiple of 4")
        bits_ok = set(SUPPORTED_BITS) | {PASSTHROUGH_BITS}
        need(self.w_bits in bits_ok, f"w_bits must be one of {sorted(bits_ok)}")
        need(self.a_bits in bits_ok, f"a_bits must be one of {sorted(bits_ok)}")
        need(self.high_bits in SUPPORTED_BITS, f"high_bits must be one of {list(SUPPORTED_BITS)}")
        need((self.w_bits == PASSTHROUGH_BITS) == (self.a_bits == PASSTHROUGH_BITS),
             "16-bit passthrough needs w_bits = a_bits = 16")
        need(self.act_mode in (STATIC, DYNAMIC), "act_mode must be 'static' or 'dynamic'")
        try:
            scheme = GroupingScheme.parse(self.act_scheme) if isinstance(self.act_scheme, str) else None
        except ValueError as e:
            raise ConfigError(str(e)) from e
        need(scheme is not None, "act_scheme must be a string")
        need(self.act_mode == DYNAMIC or scheme == PER_TENSOR, "static activations are calibrated per tensor only")
        need(self.balance in ("none", "scaling", "rotation", "static_dynamic"), f"unknown balance {self.balance!r}")
        need(self.alpha is None or (is_num(self.alpha) and 0 <= self.alpha <= 1), "alpha must be null or in [0, 1]")
        if self.alpha_grid is not None:
            need(isinstance(self.alpha_grid, list) and self.alpha_grid, "alpha_grid must be a non-empty list")
            need(all(is_num(a) and 0 <= a <= 1 for a in self.alpha_grid), "alpha_grid values must lie in [0, 1]")
        need(is_num(self.budget), "budget must be a number")
        need(self.budget_mode in ("param", "layer"), "budget_mode must be 'param' or 'layer'")
        need(self.method in ("metric", "mse"), "method must be 'metric' or 'mse'")
        need(self.zscore in ("column", "global"), "zscore must be 'column' or 'global'")
        need(self.plan is None or isinstance(self.plan, str), "plan must be null or a path")
        need(isinstance(self.out, str) and self.out, "out must be a non-empty path")
        need(isinstance(self.model, dict), "model must be an object of toy-model overrides")
        unknown = sorted(set(self.model) - _MODEL_KEYS)
        need(not unknown, f"unknown model key(s): {', '.join(unknown)}")
        try:
            ToyConfig(width=self.width, tokens=self.tokens, frames=self.frames, seed=self.seed,
                      **self.model).validate()
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid model: {e}") from e

    @property
    def passthrough(self) -> bool:
        return self.w_bits == PASSTHROUGH_BITS

    def setting(self) -> LayerSetting:
        return LayerSetting(
            self.w_bits, self.a_bits, self.act_mode, GroupingScheme.parse(self.act_scheme), self.balance,
            None if self.alpha is None else float(self.alpha), self.rotation_seed,
            None if self.alpha_grid is None else tuple(float(a) for a in self.alpha_grid),
        )

    def bits_spec(self) -> str:
        return format_bits(self.w_bits, self.a_bits)


_BITS_RE = re.compile(r"^[Ww](\d+)(?:/(\d+))?[Aa](\d+)$")


def parse_bits(spec: str) -> tuple[int, int | None, int]:
    """``"W4A8"`` -> ``(4, None, 8)``; ``"W4/8A8"`` -> ``(4, 8, 8)`` (low/high weight bits)."""
    m = _BITS_RE.match(spec.strip())
    if not m:
        raise ConfigError(f"bad bit spec {spec!r}; expected e.g. W4A8 or W4/8A8")
    high = None if m.group(2) is None else int(m.group(2))
    return int(m.group(1)), high, int(m.group(3))


def format_bits(w_bits: int, a_bits: int) -> str:
    return f"W{w_bits}A{a_bits}"


def load_config(args) -> RunConfig:
    d = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise MissingInputError(f"config file {path} does not exist")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
    cfg = RunConfig.from_dict(d)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.bits is not None:
        w, high, a = parse_bits(args.bits)
        over.update(w_bits=w, a_bits=a)
        if high is not None:
            over["high_bits"] = high
    if args.budget is not None:
        over["budget"] = args.budget
    if args.out is not None:
        over["out"] = args.out
    cfg = replace(cfg, **over)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# shared helpers


def build_model(cfg: RunConfig) -> ToyDiT:
    return build_toy_model(cfg.width, cfg.tokens, cfg.frames, cfg.seed, **cfg.model)


def reference_run(cfg: RunConfig, model: ToyDiT, record_traces: bool = True) -> DenoiseRun:
    return run_denoise(model, cfg.steps, cfg.cfg, None, cfg.seed, record_traces=record_traces)


def _meta(cfg: RunConfig, model: ToyDiT) -> dict:
    return {"model_id": model.digest(), "seed": cfg.seed, "steps": cfg.steps, "cfg": cfg.cfg}


def _out(cfg: RunConfig) -> Path:
    return trace_io.ensure_dir(cfg.out)


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingInputError(f"{what} {path} does not exist")
    return path


def _read_json(path: Path, what: str, kind: str | None = None) -> dict:
    _need(path, what)
    try:
        d = trace_io.read_json(path)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise InvalidInputError(f"{what} {path} is not valid JSON: {e}") from e
    if kind is not None and (not isinstance(d, dict) or d.get("kind") != kind):
        raise InvalidInputError(f"{what} {path} is not a {kind} document")
    return d


def _check_model(meta: dict, model: ToyDiT, what: str) -> None:
    if meta.get("model_id") != model.digest():
        raise InvalidInputError(f"{what} was produced for a different model (model_id mismatch)")


def _load_plan(path: str | Path, model: ToyDiT) -> MixedPrecisionPlan:
    d = _read_json(Path(path), "plan", "plan")
    try:
        plan = MixedPrecisionPlan.from_dict(d["plan"])
    except (KeyError, TypeError, ValueError) as e:
        raise InvalidInputError(f"malformed plan {path}: {e}") from e
    _check_model(d.get("meta", {}), model, f"plan {path}")
    try:
        plan.check(model.layer_names())
    except ValueError as e:
        raise InvalidInputError(f"plan {path}: {e}") from e
    return plan


def _plan_widths(plan: MixedPrecisionPlan | None, layers: list[str], default: int) -> dict[str, set[int]]:
    if plan is None:
        return {n: {default} for n in layers}
    out = {n: set() for n in layers}
    for (layer, _), b in plan.bits.items():
        out[layer].add(b)
    return out


def _states_for(cfg: RunConfig, model: ToyDiT, fp: DenoiseRun, plan: MixedPrecisionPlan | None):
    if cfg.passthrough and plan is None:
        return {}
    setting = cfg.setting()
    if plan is not None:
        setting = replace(setting, w_bits=plan.low)
    widths = _plan_widths(plan, model.layer_names(), setting.w_bits)
    return calibrate(model, fp.traces, setting, extra_bits=widths)


def _emit(path: Path, doc: dict) -> None:
    trace_io.write_json(path, doc)
    print(f"wrote {path}")


# ---------------------------------------------------------------------------
# commands


def cmd_trace(cfg: RunConfig, args) -> None:
    """Float run; writes the trace archive and its variation statistics."""
    model = build_model(cfg)
    fp = reference_run(cfg, model)
    out = _out(cfg)
    archive = trace_io.TraceArchive(fp.traces, model.digest(), cfg.steps)
    trace_io.write_trace(out / TRACE_DIR, archive)
    print(f"wrote {out / TRACE_DIR} ({len(fp.traces)} traces, {len(archive.layers)} layers)")
    stats = variation_stats(fp.traces)
    _emit(out / VARIATION_FILE, {"kind": "variation", "meta": _meta(cfg, model), "cv": asdict(stats)})


def cmd_calibrate(cfg: RunConfig, args) -> None:
    """Fit balance transforms and static params from a trace archive."""
    model = build_model(cfg)
    path = Path(args.trace) if args.trace else Path(cfg.out) / TRACE_DIR
    _need(path, "trace archive")
    try:
        archive = trace_io.read_trace(path)
    except trace_io.FormatError as e:
        raise InvalidInputError(f"trace archive {path}: {e}") from e
    if archive.model_id != model.digest():
        raise InvalidInputError(f"trace archive {path} was recorded from a different model")
    if cfg.passthrough:
        raise ConfigError("calibration needs quantized bits; W16A16 is float passthrough")
    try:
        states = calibrate(model, archive.traces, cfg.setting())
    except ValueError as e:
        raise InvalidInputError(str(e)) from e
    doc = trace_io.calibration_to_dict(states, _meta(cfg, model))
    doc["kind"] = "calibration"
    _emit(_out(cfg) / CALIBRATION_FILE, doc)


def _calibrated_states(path: Path, model: ToyDiT, widths: dict[str, set[int]], w_bits: int):
    doc = _read_json(path, "calibration file", "calibration")
    try:
        meta, layers = trace_io.calibration_from_dict(doc)
    except trace_io.FormatError as e:
        raise InvalidInputError(f"calibration file {path}: {e}") from e
    _check_model(meta, model, f"calibration file {path}")
    states = {}
    for name, c in layers.items():
        setting = replace(c.setting, w_bits=w_bits)
        states[name] = make_state(name, setting, c.transform, model.weight(name), widths[name], c.act_params, c.alpha)
    return states


def cmd_quantize(cfg: RunConfig, args) -> None:
    """Quantize weights with a calibration file; writes the checkpoint and size ratios."""
    model = build_model(cfg)
    if cfg.passthrough:
        raise ConfigError("quantize needs quantized bits; W16A16 is float passthrough")
    plan_path = args.plan or cfg.plan
    plan = _load_plan(plan_path, model) if plan_path else None
    w_bits = cfg.w_bits if plan is None else plan.low
    widths = _plan_widths(plan, model.layer_names(), w_bits)
    path = Path(args.calibration) if args.calibration else Path(cfg.out) / CALIBRATION_FILE
    states = _calibrated_states(path, model, widths, w_bits)
    meta = _meta(cfg, model) | {"bits": format_bits(w_bits, cfg.a_bits), "plan": plan is not None}
    ck = trace_io.checkpoint_from_states(states, meta)
    out = _out(cfg)
    payload = trace_io.write_checkpoint(out / CHECKPOINT_FILE, ck)
    base = fp16_bytes(model.layer_shapes())
    print(f"wrote {out / CHECKPOINT_FILE}")
    print(f"payload {payload} bytes, 16-bit baseline {base} bytes, ratio {payload / base:.4f} "
          f"({base / payload:.2f}x smaller)")
    _emit(out / QUANTIZE_FILE, {
        "kind": "quantize", "meta": meta, "payload_bytes": payload, "fp16_bytes": base,
        "ratio": payload / base, "weight_code_ratio": ck.weight_code_bytes() / base,
        "sha256": trace_io.file_sha256(out / CHECKPOINT_FILE),
    })


def _record_list(records: list[SensitivityRecord]) -> list[dict]:
    return [{"layer": r.layer, "range": r.range, "group": r.group, "delta": r.metric_delta} for r in records]


def _records_from(items: list[dict]) -> list[SensitivityRecord]:
    return [SensitivityRecord(e["layer"], int(e["range"]), e["group"], float(e["delta"])) for e in items]


def cmd_sensitivity(cfg: RunConfig, args) -> None:
    """Per-cell metric and MSE sensitivities, per-group MSE and the metric heatmap."""
    if cfg.passthrough:
        raise ConfigError("sensitivity needs quantized bits; W16A16 is float passthrough")
    if cfg.high_bits <= cfg.w_bits:
        raise ConfigError(f"high_bits ({cfg.high_bits}) must exceed w_bits ({cfg.w_bits})")
    model = build_model(cfg)
    fp = reference_run(cfg, model)
    layers = model.layer_names()
    states = calibrate(model, fp.traces, cfg.setting(), extra_bits={n: {cfg.high_bits} for n in layers})
    ctx = SensitivityContext(model, states, fp, cfg.w_bits)
    runs = group_runs(ctx)
    group_mse = {g: output_mse(r, fp) for g, r in runs.items()}
    heatmap = build_heatmap({g: proxy_metrics(r, fp) for g, r in runs.items()}, cfg.zscore)
    doc = {
        "kind": "sensitivity",
        "meta": _meta(cfg, model) | {"bits": cfg.bits_spec()},
        "low": cfg.w_bits,
        "high": cfg.high_bits,
        "layers": layers,
        "weights": layer_weights(model),
        "group_mse": group_mse,
        "heatmap": heatmap.to_dict(),
        "records": {"metric": _record_list(metric_records(ctx)), "mse": _record_list(mse_records(ctx))},
    }
    _emit(_out(cfg) / SENSITIVITY_FILE, doc)
    for g in GROUPS:
        print(f"{g.value:>9}: row {np.round(heatmap.row(g), 3).tolist()} argmax {heatmap.argmax(g)}")


def cmd_allocate(cfg: RunConfig, args) -> None:
    """Turn sensitivity records into a mixed-precision plan at the configured budget."""
    path = Path(args.records) if args.records else Path(cfg.out) / SENSITIVITY_FILE
    doc = _read_json(path, "sensitivity records", "sensitivity")
    method = args.method or cfg.method
    try:
        recs = _records_from(doc["records"][method])
        group_mse = doc["group_mse"] if method == "metric" else {POOLED: 1.0}
        weights = {k: int(v) for k, v in doc["weights"].items()}
        low, high, layers = int(doc["low"]), int(doc["high"]), list(doc["layers"])
    except (KeyError, TypeError, ValueError) as e:
        raise InvalidInputError(f"malformed sensitivity file {path}: {e}") from e
    try:
        plan, budgets = allocate_from_analysis(recs, group_mse, weights, float(cfg.budget), low, high,
                                               cfg.budget_mode, layers)
    except BudgetError as e:
        raise InfeasibleBudgetError(str(e)) from e
    out = _out(cfg) / f"plan_{method}.json"
    _emit(out, {"kind": "plan", "meta": doc.get("meta", {}), "method": method, "group_budgets": budgets,
                "average_bits": plan.average_bits(), "layer_average_bits": plan.average_bits("layer"),
                "plan": plan.to_dict()})
    print(f"{method} plan: average {plan.average_bits():.3f} bits ({cfg.budget_mode}), "
          f"{100 * plan.fraction_high():.1f}% of cells at {high} bits")


def _layer_report(states: dict[str, QuantLayerState], fp: DenoiseRun, model: ToyDiT) -> list[dict]:
    by_layer = group_traces(fp.traces)
    rows = []
    for name in model.layer_names():
        x = np.concatenate([t.X.astype(np.float64) for t in by_layer[name]])
        row = {"layer": name, "group": layer_group(name).value, "incoherence_before": float(row_incoherence(x).mean())}
        st = states.get(name)
        if st is None:
            row.update(w_bits=PASSTHROUGH_BITS, rel_error=0.0, incoherence_after=row["incoherence_before"])
        else:
            y = x @ model.weight(name).T
            err = st.forward(x) - y
            xt = x if st.transform is None else st.transform.transform_activation(x)
            row.update(w_bits=st.setting.w_bits, rel_error=float(np.mean(err**2) / np.mean(y**2)),
                       incoherence_after=float(row_incoherence(xt).mean()))
        rows.append(row)
    return rows


def _evaluate(cfg: RunConfig, model: ToyDiT, fp: DenoiseRun, states, plan: MixedPrecisionPlan | None) -> dict:
    rt = runtime(model, states, cfg.steps, plan=None if plan is None else dict(plan.bits))
    run = run_denoise(model, cfg.steps, cfg.cfg, rt, cfg.seed)
    layers = _layer_report(states, fp, model)
    return {
        "output_mse": output_mse(run, fp),
        "proxy": dict(zip(("quality", "alignment", "temporal"), proxy_metrics(run, fp).as_tuple())),
        "average_bits": None if plan is None else plan.average_bits(),
        "layers": layers,
        "incoherence": {
            "mean_before": float(np.mean([r["incoherence_before"] for r in layers])),
            "mean_after": float(np.mean([r["incoherence_after"] for r in layers])),
        },
    }


def cmd_eval(cfg: RunConfig, args) -> None:
    """Quantized denoise vs float: output MSE, proxies, per-layer errors and incoherence."""
    model = build_model(cfg)
    fp = reference_run(cfg, model)
    plan_path = args.plan or cfg.plan
    plan = _load_plan(plan_path, model) if plan_path else None
    if args.checkpoint:
        path = _need(Path(args.checkpoint), "checkpoint")
        try:
            ck = trace_io.read_checkpoint(path)
        except trace_io.FormatError as e:
            raise InvalidInputError(f"checkpoint {path}: {e}") from e
        _check_model(ck.meta, model, f"checkpoint {path}")
        states = trace_io.states_from_checkpoint(ck)
        bits = ck.meta.get("bits", "")
    else:
        states = _states_for(cfg, model, fp, plan)
        bits = cfg.bits_spec() if plan is None else format_bits(plan.low, cfg.a_bits)
    try:
        report = _evaluate(cfg, model, fp, states, plan)
    except ValueError as e:
        raise InvalidInputError(str(e)) from e
    doc = {"kind": "eval", "meta": _meta(cfg, model), "bits": bits, "plan": plan_path,
           "checkpoint": args.checkpoint} | report
    _emit(_out(cfg) / EVAL_FILE, doc)
    print(f"{bits}: output MSE {report['output_mse']:.6g}, proxies "
          + ", ".join(f"{k} {v:.4g}" for k, v in report["proxy"].items()))


def cmd_ablation(cfg: RunConfig, args) -> None:
    """Output MSE of the four cumulative techniques at the configured bits."""
    if cfg.passthrough:
        raise ConfigError("the ablation needs quantized bits")
    model = build_model(cfg)
    fp = reference_run(cfg, model)
    rows = []
    for name, over in ABLATION_ROWS:
        c = replace(cfg, **over)
        states = calibrate(model, fp.traces, c.setting())
        run = run_denoise(model, cfg.steps, cfg.cfg, runtime(model, states, cfg.steps), cfg.seed)
        rows.append({"name": name, "output_mse": output_mse(run, fp)})
        print(f"{name:>15}: output MSE {rows[-1]['output_mse']:.6g}")
    mse = [r["output_mse"] for r in rows]
    ordered = all(a > b for a, b in zip(mse, mse[1:]))
    print("strictly decreasing:", ordered)
    _emit(_out(cfg) / ABLATION_FILE, {"kind": "ablation", "meta": _meta(cfg, model), "bits": cfg.bits_spec(),
                                      "rows": rows, "strictly_decreasing": ordered})


def cmd_report(cfg: RunConfig, args) -> None:
    """Consolidate JSON outputs into report.txt, report.json and static plots."""
    from . import report

    docs = []
    for p in args.inputs:
        d = _read_json(Path(p), "report input")
        if not isinstance(d, dict) or d.get("kind") not in report.KINDS:
            raise InvalidInputError(f"{p} is not a recognised output document")
        docs.append((str(p), d))
    written = report.write_report(docs, _out(cfg))
    for path in written:
        print(f"wrote {path}")


COMMANDS = {
    "trace": cmd_trace,
    "calibrate": cmd_calibrate,
    "quantize": cmd_quantize,
    "sensitivity": cmd_sensitivity,
    "allocate": cmd_allocate,
    "eval": cmd_eval,
    "ablation": cmd_ablation,
    "report": cmd_report,
}


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=_seed, help="model and sampling seed")
    common.add_argument("--bits", help="bit spec such as W4A8, W8A8, W16A16 or W4/8A8")
    common.add_argument("--budget", type=float, help="average weight bits for allocate")
    common.add_argument("--out", help="output directory")
    parser = argparse.ArgumentParser(prog="dtq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("trace", parents=[common], help=cmd_trace.__doc__)
    p = sub.add_parser("calibrate", parents=[common], help=cmd_calibrate.__doc__)
    p.add_argument("--trace", help=f"trace archive (default <out>/{TRACE_DIR})")
    p = sub.add_parser("quantize", parents=[common], help=cmd_quantize.__doc__)
    p.add_argument("--calibration", help=f"calibration file (default <out>/{CALIBRATION_FILE})")
    p.add_argument("--plan", help="mixed-precision plan; stores the widths it uses")
    sub.add_parser("sensitivity", parents=[common], help=cmd_sensitivity.__doc__)
    p = sub.add_parser("allocate", parents=[common], help=cmd_allocate.__doc__)
    p.add_argument("--records", help=f"sensitivity file (default <out>/{SENSITIVITY_FILE})")
    p.add_argument("--method", choices=("metric", "mse"), help="grouped metric analysis or pooled MSE")
    p = sub.add_parser("eval", parents=[common], help=cmd_eval.__doc__)
    p.add_argument("--checkpoint", help="quantized checkpoint (default: calibrate in process)")
    p.add_argument("--plan", help="mixed-precision plan to follow")
    sub.add_parser("ablation", parents=[common], help=cmd_ablation.__doc__)
    p = sub.add_parser("report", parents=[common], help=cmd_report.__doc__)
    p.add_argument("inputs", nargs="+", help="JSON outputs of other commands")
    return parser


def _fail(err: CliError) -> int:
    print(json.dumps({"error": err.category, "exit_code": err.code, "message": str(err)}), file=sys.stderr)
    return err.code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        COMMANDS[args.command](cfg, args)
    except CliError as e:
        return _fail(e)
    except OSError as e:
        return _fail(InvalidInputError(f"I/O error: {e}"))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
