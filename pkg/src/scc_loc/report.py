"""Report emission: canonical JSON, per-query JSONL records, CSV dump,
a human-readable table, and rendered figures.

The canonical files (report.json, records.jsonl, records.csv) are
deterministic for a fixed config and seed.  Wall-clock timings go to a
separate timing.txt, and figures are renderings on top of the canonical
data, so neither participates in byte-identity checks.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import STAGE_VERSIONS
from .config import PipelineConfig, config_hash, config_to_dict
from .pipeline import EvalReport

_CSV_FIELDS = [
    "query_id", "failed", "failure_reason", "selected_x", "selected_y", "error",
    "rank", "is_decoy", "a_ret", "n_in", "e_err", "u_unc", "r_base", "c_geo",
    "r_total", "valid", "gate_reason",
]


def write_report(
    report: EvalReport,
    out_dir: str | Path,
    cfg: PipelineConfig,
    emit_csv: bool = False,
    figures: bool = True,
) -> Path:
    """Write all report artifacts into ``out_dir`` and return its path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    canonical = json.dumps(report.to_dict(), sort_keys=True, indent=1)
    (out / "report.json").write_text(canonical)

    with open(out / "records.jsonl", "w") as fh:
        for rec in report.records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True))
            fh.write("\n")

    (out / "report.txt").write_text(format_table(report))

    manifest = {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "stage_versions": STAGE_VERSIONS,
        "config": config_to_dict(cfg),
        "choices": {
            "db_descriptors": "pooled from stored tile features, not re-cropped",
            "failure_errors": (
                "penalized via search-area center distance"
                if report.penalize_failures else "excluded from mean/std"
            ),
        },
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))

    if report.wall_times:
        lines = [f"{i}\t{t:.4f}" for i, t in enumerate(report.wall_times)]
        total = sum(report.wall_times)
        lines.append(f"# total\t{total:.4f}\tper-query\t{total / len(report.wall_times):.4f}")
        (out / "timing.txt").write_text("\n".join(lines) + "\n")

    if emit_csv:
        write_csv(report, out / "records.csv")
    if figures:
        render_figures(report, out)
    return out


def write_csv(report: EvalReport, path: str | Path) -> None:
    """One row per (query, candidate); query-level fields repeat."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_CSV_FIELDS)
        writer.writeheader()
        for rec in report.records:
            base = {
                "query_id": rec.query_id,
                "failed": rec.failed,
                "failure_reason": rec.failure_reason,
                "selected_x": rec.selected[0] if rec.selected else "",
                "selected_y": rec.selected[1] if rec.selected else "",
                "error": rec.error if rec.error is not None else "",
            }
            if not rec.candidates:
                writer.writerow(base)
            for cand in rec.candidates:
                row = dict(base)
                for key in _CSV_FIELDS[6:]:
                    row[key] = cand.get(key, "")
                writer.writerow(row)


def format_table(report: EvalReport) -> str:
    lines = []
    lines.append(f"queries: {report.n_queries}   failures: {report.n_failures}")
    if report.recall_at_n:
        rec = "   ".join(f"R@{n}: {v:.2f}%" for n, v in sorted(report.recall_at_n.items()))
        lines.append(f"retrieval    {rec}")
    acc = "   ".join(f"Acc@{r:g}: {v:.2f}%" for r, v in sorted(report.acc_at_r.items()))
    lines.append(f"localization {acc}")
    lines.append(f"error        ME {report.mean_error:.3f} m   SD {report.std_error:.3f} m")
    lines.append("")
    header = f"{'query':>6} {'error[m]':>10} {'cands':>6} {'valid':>6}  note"
    lines.append(header)
    lines.append("-" * len(header))
    for rec in report.records:
        err = f"{rec.error:.3f}" if rec.error is not None else "-"
        n_valid = sum(1 for c in rec.candidates if c["valid"])
        note = rec.failure_reason if rec.failed else ""
        lines.append(
            f"{rec.query_id:>6} {err:>10} {len(rec.candidates):>6} {n_valid:>6}  {note}"
        )
    return "\n".join(lines) + "\n"


def render_figures(report: EvalReport, out_dir: str | Path) -> list[Path]:
    """Render summary figures as PNG files next to the delimited output."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    paths = []
    errors = np.array([r.error for r in report.records if r.error is not None])

    fig, ax = plt.subplots(figsize=(6, 4))
    if len(errors):
        ax.hist(errors, bins=min(40, max(5, len(errors) // 4)), color="#4878a8",
                edgecolor="white")
    for radius in sorted(report.acc_at_r):
        ax.axvline(radius, color="#c44e52", linestyle="--", linewidth=1)
        ax.text(radius, ax.get_ylim()[1] * 0.95, f"{radius:g} m",
                rotation=90, va="top", ha="right", fontsize=8, color="#c44e52")
    ax.set_xlabel("localization error [m]")
    ax.set_ylabel("queries")
    ax.set_title("Error distribution")
    fig.tight_layout()
    p = out / "fig_error_hist.png"
    fig.savefig(p, dpi=130)
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(6, 4))
    if len(errors):
        xs = np.sort(errors)
        ys = np.arange(1, len(xs) + 1) / len(report.records) * 100.0
        ax.step(xs, ys, where="post", color="#4878a8")
    ax.set_xlabel("error threshold [m]")
    ax.set_ylabel("queries within threshold [%]")
    ax.set_ylim(0, 100)
    ax.set_title("Cumulative accuracy")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    p = out / "fig_error_cdf.png"
    fig.savefig(p, dpi=130)
    plt.close(fig)
    paths.append(p)

    stages = ["raw", "equalized", "textured", "topo", "final"]
    per_stage = {s: [] for s in stages}
    for rec in report.records:
        for cand in rec.candidates:
            counts = cand.get("stage_counts") or {}
            for s in stages:
                if s in counts:
                    per_stage[s].append(counts[s])
    means = [float(np.mean(per_stage[s])) if per_stage[s] else 0.0 for s in stages]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(stages, means, color="#6aa84f")
    ax.set_ylabel("mean surviving matches per candidate")
    ax.set_title("Filter cascade attrition")
    fig.tight_layout()
    p = out / "fig_cascade.png"
    fig.savefig(p, dpi=130)
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(6, 4))
    rb, rt, dec = [], [], []
    for rec in report.records:
        for cand in rec.candidates:
            if cand["valid"]:
                rb.append(cand["r_base"])
                rt.append(cand["r_total"])
                dec.append(cand.get("is_decoy", False))
    rb, rt, dec = np.array(rb), np.array(rt), np.array(dec, dtype=bool)
    if len(rb):
        ax.scatter(rb[~dec], rt[~dec], s=14, alpha=0.6, label="candidate", color="#4878a8")
        if dec.any():
            ax.scatter(rb[dec], rt[dec], s=18, alpha=0.8, label="decoy", color="#c44e52")
        lim = max(1.0, float(rt.max()) * 1.05)
        ax.plot([0, lim], [0, lim], color="gray", linewidth=0.8, linestyle=":")
        ax.legend(loc="lower right", fontsize=8)
    ax.set_xlabel("base reliability")
    ax.set_ylabel("total reliability (after consensus)")
    ax.set_title("Consensus reward")
    fig.tight_layout()
    p = out / "fig_reliability.png"
    fig.savefig(p, dpi=130)
    plt.close(fig)
    paths.append(p)
    return paths
