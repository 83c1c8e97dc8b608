"""Text tables and static plots from the JSON outputs of the command-line tools."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .trace_io import write_json

KINDS = ("eval", "variation", "sensitivity", "ablation", "quantize", "plan")


def _bits_of(doc: dict) -> float | None:
    if doc.get("average_bits") is not None:
        return float(doc["average_bits"])
    bits = doc.get("bits") or ""
    if bits.upper().startswith("W") and "A" in bits.upper():
        return float(bits.upper()[1:].split("A")[0].split("/")[0])
    return None


def _table(header: list[str], rows: list[list]) -> list[str]:
    cells = [header] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    line = lambda r: "  ".join(c.rjust(w) for c, w in zip(r, widths))
    return [line(cells[0]), "  ".join("-" * w for w in widths)] + [line(r) for r in cells[1:]]


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def summarize(docs: list[tuple[str, dict]]) -> tuple[list[str], dict]:
    """Report lines plus the consolidated data behind every table and plot."""
    lines: list[str] = []
    data: dict = {"eval": [], "variation": [], "heatmap": [], "ablation": [], "quantize": [], "plan": []}
    for src, d in docs:
        kind = d["kind"]
        if kind == "eval":
            data["eval"].append({"source": src, "bits": d.get("bits"), "x_bits": _bits_of(d),
                                 "output_mse": d["output_mse"], **d["proxy"]})
        elif kind == "variation":
            data["variation"].append({"source": src, **d["cv"]})
        elif kind == "sensitivity":
            data["heatmap"].append({"source": src, **d["heatmap"]})
        elif kind == "ablation":
            data["ablation"].append({"source": src, "bits": d["bits"], "rows": d["rows"],
                                     "strictly_decreasing": d["strictly_decreasing"]})
        elif kind == "quantize":
            data["quantize"].append({"source": src, "bits": d["meta"].get("bits"), "payload_bytes": d["payload_bytes"],
                                     "fp16_bytes": d["fp16_bytes"], "ratio": d["ratio"]})
        elif kind == "plan":
            data["plan"].append({"source": src, "method": d["method"], "average_bits": d["average_bits"],
                                 "layer_average_bits": d["layer_average_bits"], "group_budgets": d["group_budgets"]})
    if data["eval"]:
        lines += ["Evaluation", ""] + _table(
            ["source", "bits", "output_mse", "quality", "alignment", "temporal"],
            [[e["source"], e["bits"], e["output_mse"], e["quality"], e["alignment"], e["temporal"]]
             for e in data["eval"]]) + [""]
    for a in data["ablation"]:
        lines += [f"Ablation ({a['bits']}, strictly decreasing: {a['strictly_decreasing']})", ""]
        lines += _table(["technique", "output_mse"], [[r["name"], r["output_mse"]] for r in a["rows"]]) + [""]
    if data["quantize"]:
        lines += ["Checkpoint size", ""] + _table(
            ["source", "bits", "payload_bytes", "fp16_bytes", "ratio"],
            [[q["source"], q["bits"], q["payload_bytes"], q["fp16_bytes"], q["ratio"]] for q in data["quantize"]]) + [""]
    if data["plan"]:
        lines += ["Mixed-precision plans", ""] + _table(
            ["source", "method", "avg_bits", "layer_avg_bits"],
            [[p["source"], p["method"], p["average_bits"], p["layer_average_bits"]] for p in data["plan"]]) + [""]
    for v in data["variation"]:
        lines += ["Activation variation (coefficient of variation)", ""] + _table(
            ["dimension", "cv"], [[k, v[k]] for k in ("token", "condition", "timestep", "channel")]) + [""]
    for h in data["heatmap"]:
        lines += [f"Metric heatmap ({h['source']})", ""] + _table(
            ["group"] + list(h["metrics"]),
            [[g] + list(row) for g, row in zip(h["groups"], h["values"])]) + [""]
    return lines, data


def _plots(data: dict, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    pts = sorted((e["x_bits"], e["output_mse"]) for e in data["eval"] if e["x_bits"] is not None)
    if pts:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot([p[0] for p in pts], [max(p[1], 1e-16) for p in pts], "o-")
        ax.set_yscale("log")
        ax.set_xlabel("weight bits (average)")
        ax.set_ylabel("final-output MSE")
        ax.set_title("Error vs bits")
        fig.tight_layout()
        written.append(out / "error_vs_bits.png")
        fig.savefig(written[-1], dpi=100)
        plt.close(fig)
    if data["variation"]:
        v = data["variation"][-1]
        dims = [k for k in ("token", "condition", "timestep", "channel") if v.get(k) is not None]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.bar(dims, [v[k] for k in dims])
        ax.set_ylabel("coefficient of variation")
        ax.set_title("Activation variation")
        fig.tight_layout()
        written.append(out / "variation_cv.png")
        fig.savefig(written[-1], dpi=100)
        plt.close(fig)
    if data["heatmap"]:
        h = data["heatmap"][-1]
        vals = np.array(h["values"], dtype=np.float64)
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        im = ax.imshow(vals, cmap="viridis", vmin=0.0, vmax=1.0)
        ax.set_xticks(range(len(h["metrics"])), h["metrics"])
        ax.set_yticks(range(len(h["groups"])), h["groups"])
        for i in range(vals.shape[0]):
            for j in range(vals.shape[1]):
                ax.text(j, i, f"{vals[i, j]:.2f}", ha="center", va="center", color="w")
        fig.colorbar(im, ax=ax)
        ax.set_title("Metric share per layer group")
        fig.tight_layout()
        written.append(out / "heatmap.png")
        fig.savefig(written[-1], dpi=100)
        plt.close(fig)
    return written


def write_report(docs: list[tuple[str, dict]], out) -> list[Path]:
    """Write ``report.txt``, ``report.json`` and the plots; returns the written paths."""
    out = Path(out)
    lines, data = summarize(docs)
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    write_json(out / "report.json", data)
    return [out / "report.txt", out / "report.json"] + _plots(data, out)
