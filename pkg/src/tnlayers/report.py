"""Comparison tables and scaling benches, as CSV, aligned text, and figures.

Report rows aggregate finished training runs (config.json + metrics.csv)
by head kind: parameter counts from the rebuilt model, compression ratios
against the dense single-hidden-layer baseline of the same dimensions,
and accuracy statistics over seeds.  Bench rows sweep the analytic
multiply counts and measured forward times of each layer kind.  Both
paths render a PNG next to the delimited output.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .init import Rng
from .layers import LayerSpec, build_layer, forward, init_graph, multiply_count
from .model import ModelConfig, build_model


@dataclass
class RunRecord:
    """One finished training run, as found on disk."""

    path: str
    dataset: str
    seed: int
    model: ModelConfig
    best_val: float
    best_test: float
    iterations: int


def read_run(path: str) -> RunRecord:
    """Load a run directory; raises FileNotFoundError or ValueError."""
    with open(os.path.join(path, "config.json")) as fh:
        cfg = json.load(fh)
    model = ModelConfig.from_dict(cfg["model"])
    rows = []
    with open(os.path.join(path, "metrics.csv")) as fh:
        for rec in csv.DictReader(fh):
            rows.append((int(rec["iteration"]), float(rec["train_loss"]),
                         float(rec["val_acc"]), float(rec["test_acc"])))
    if not rows:
        raise ValueError("metrics.csv has no rows")
    best = max(rows, key=lambda r: r[2])  # earliest best wins ties via max
    for r in rows:
        if r[2] == best[2]:
            best = r
            break
    return RunRecord(path=path, dataset=cfg.get("dataset", "?"),
                     seed=int(cfg.get("seed", -1)), model=model,
                     best_val=best[2], best_test=best[3],
                     iterations=rows[-1][0])


def collect_runs(paths) -> tuple[list[RunRecord], list[str]]:
    records, missing = [], []
    for p in paths:
        try:
            records.append(read_run(p))
        except (OSError, ValueError, KeyError) as exc:
            missing.append(f"{p}: {exc}")
    return records, missing


def report_rows(records: list[RunRecord]) -> list[dict]:
    """One row per (dataset, head), aggregated over seeds.

    Compression ratios divide the dense fc1 twin of the same dimensions
    by the row's own counts, so the fc1 row reads 1, 1 by definition.
    """
    groups: dict[tuple, list[RunRecord]] = {}
    for rec in records:
        groups.setdefault((rec.dataset, rec.model.head), []).append(rec)
    rows = []
    for (dataset, head), recs in sorted(groups.items()):
        rep = build_model(recs[0].model).param_report()
        twin = ModelConfig.from_dict({**recs[0].model.to_dict(),
                                      "head": "fc1"})
        base = build_model(twin).param_report()
        accs = np.array([r.best_test for r in recs], dtype=np.float64)
        rows.append({
            "dataset": dataset,
            "head": head,
            "runs": len(recs),
            "fc_layer_params": rep["fc_layer"],
            "total_params": rep["total"],
            "compression_fc": base["fc_layer"] / rep["fc_layer"],
            "compression_total": base["total"] / rep["total"],
            "test_acc_mean": float(accs.mean()),
            "test_acc_std": float(accs.std()),
        })
    return rows


REPORT_COLS = ("dataset", "head", "runs", "fc_layer_params", "total_params",
               "compression_fc", "compression_total", "test_acc_mean",
               "test_acc_std")


def _fmt(row: dict, col: str) -> str:
    v = row[col]
    if col.startswith("compression"):
        return f"{v:.3g}"
    if col.startswith("test_acc"):
        return f"{v:.4f}"
    return str(v)


def aligned_text(rows: list[dict], cols) -> str:
    """Space-padded table with a header rule, ready for a terminal."""
    cells = [[_fmt(r, c) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c)
              for i, c in enumerate(cols)]
    def line(parts):
        return "  ".join(p.rjust(w) for p, w in zip(parts, widths))
    out = [line(cols), line(["-" * w for w in widths])]
    out += [line(row) for row in cells]
    return "\n".join(out)


def write_csv(path, rows: list[dict], cols) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r, c) for c in cols])


def render_report_figure(rows: list[dict], path) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    labels = [f"{r['head']}\n{r['dataset']}" for r in rows]
    ax1.bar(labels, [r["fc_layer_params"] for r in rows], color="#4878d0")
    ax1.set_yscale("log")
    ax1.set_ylabel("classifier-section parameters")
    ax1.set_title("parameters by head")
    ax2.errorbar(labels, [r["test_acc_mean"] for r in rows],
                 yerr=[r["test_acc_std"] for r in rows],
                 fmt="o", capsize=4, color="#d65f5f")
    ax2.set_ylabel("test accuracy")
    ax2.set_ylim(0.0, 1.0)
    ax2.set_title("accuracy by head (mean over seeds)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_report(paths, out_dir) -> tuple[str, list[str], int]:
    """Build the comparison table; returns (text, missing, row count)."""
    records, missing = collect_runs(paths)
    rows = report_rows(records)
    os.makedirs(out_dir, exist_ok=True)
    write_csv(os.path.join(out_dir, "report.csv"), rows, REPORT_COLS)
    text = aligned_text(rows, REPORT_COLS)
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(text + "\n")
    if rows:
        render_report_figure(rows, os.path.join(out_dir, "report.png"))
    if missing:
        text += "\n\nskipped (missing or unreadable artifacts):\n"
        text += "\n".join(f"  {m}" for m in missing)
    return text, missing, len(rows)


# -- bench -------------------------------------------------------------------------

BENCH_FAMILIES = (
    ("mera", {"mode_dim": 2, "bond_dim": 2}, range(4, 13, 2), 1.0),
    ("tt", {"mode_dim": 2, "bond_dim": 3}, range(4, 13), 1.0),
    ("dense", {"mode_dim": 2}, range(4, 13), 2.0),
)

BENCH_COLS = ("kind", "d", "D", "n", "width", "multiplies", "seconds")


def _time_forward(g, x, reps: int = 3) -> float:
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        forward(g, x)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_rows(seed: int = 0, batch: int = 32) -> list[dict]:
    """Multiply counts and forward wall times over the standard sweep."""
    rng = np.random.default_rng(seed)
    rows = []
    for kind, kw, ns, _ in BENCH_FAMILIES:
        for n in ns:
            spec = LayerSpec(kind, n, **kw)
            g = init_graph(build_layer(spec), Rng(seed).split(f"{kind}{n}"),
                           scheme="gaussian")
            x = rng.standard_normal((batch, spec.in_width))
            rows.append({"kind": kind, "d": spec.mode_dim, "D": spec.bond_dim,
                         "n": n, "width": spec.in_width,
                         "multiplies": multiply_count(g),
                         "seconds": _time_forward(g, x)})
    return rows


def fit_slopes(rows: list[dict]) -> dict[str, float]:
    """Least-squares log-log slope of multiply count vs. input width."""
    out = {}
    for kind, _, _, _ in BENCH_FAMILIES:
        pts = [(r["n"], np.log2(r["multiplies"])) for r in rows
               if r["kind"] == kind]
        ns, logs = zip(*pts)
        out[kind] = float(np.polyfit(ns, logs, 1)[0])
    return out


def _bench_fmt(row: dict, col: str) -> str:
    if col == "seconds":
        return f"{row[col]:.2e}"
    return str(row[col])


def render_bench_figure(rows: list[dict], slopes: dict, path) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for kind, _, _, target in BENCH_FAMILIES:
        sub = [r for r in rows if r["kind"] == kind]
        widths = [r["width"] for r in sub]
        ax1.loglog(widths, [r["multiplies"] for r in sub], "o-", base=2,
                   label=f"{kind} (slope {slopes[kind]:.2f}, "
                         f"target {target:.1f})")
        ax2.loglog(widths, [r["seconds"] for r in sub], "o-", base=2,
                   label=kind)
    ax1.set_xlabel("input width N")
    ax1.set_ylabel("multiplies")
    ax1.set_title("analytic cost")
    ax1.legend(fontsize=8)
    ax2.set_xlabel("input width N")
    ax2.set_ylabel("forward seconds (best of 3)")
    ax2.set_title("measured cost")
    ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_bench(out_dir, seed: int = 0) -> str:
    """Run the sweep, write bench.csv and bench.png, return the text table."""
    rows = bench_rows(seed=seed)
    slopes = fit_slopes(rows)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "bench.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_COLS)
        for r in rows:
            w.writerow([_bench_fmt(r, c) for c in BENCH_COLS])
    render_bench_figure(rows, slopes, os.path.join(out_dir, "bench.png"))
    cells = [[_bench_fmt(r, c) for c in BENCH_COLS] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells))
              for i, c in enumerate(BENCH_COLS)]
    def line(parts):
        return "  ".join(p.rjust(w) for p, w in zip(parts, widths))
    lines = [line(BENCH_COLS), line(["-" * w for w in widths])]
    lines += [line(row) for row in cells]
    lines.append("")
    for kind, _, _, target in BENCH_FAMILIES:
        lines.append(f"{kind}: fitted count slope {slopes[kind]:.3f} "
                     f"(target {target:.1f})")
    return "\n".join(lines)
