"""Merged metric tables and figures over finished runs."""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dumps import load_detections  # noqa: E402

log = logging.getLogger(__name__)

MONITOR_PANELS = (
    ("L_ta_conf", "aiding term (confidence)"),
    ("L_tq_conf", "quelling term (confidence)"),
    ("mse_alpha_beta", "MSE between heads"),
)


@dataclass
class ReportArtifacts:
    table: Path
    rows: list[dict]
    plots: dict[str, Path] = field(default_factory=dict)
    skipped: list[Path] = field(default_factory=list)
    # config id -> (fractions, seed-averaged AP50), one line each in retention.png
    curves: dict = field(default_factory=dict)


def roc_points(in_scores, ood_scores) -> tuple[np.ndarray, np.ndarray]:
    """FPR/TPR pairs sweeping a threshold over every distinct score (OOD = positive)."""
    u = np.concatenate([in_scores, ood_scores]).astype(np.float64)
    thresholds = np.unique(u)[::-1]
    in_scores, ood_scores = np.asarray(in_scores), np.asarray(ood_scores)
    fpr = [0.0] + [float(np.mean(in_scores >= t)) for t in thresholds]
    tpr = [0.0] + [float(np.mean(ood_scores >= t)) for t in thresholds]
    return np.array(fpr), np.array(tpr)


def read_history(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]} if rows else {}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def _retention_axes(ax, curves: dict[str, tuple[list, list]]):
    for label, (fr, ap) in curves.items():
        ax.plot(fr, ap, marker="o", ms=3, label=label)
    ax.set_xlabel("fraction of detections retained")
    ax.set_ylabel("AP50")
    ax.set_xlim(0, 1)
    ax.legend(fontsize=7)


def _roc_axes(axes, run_dirs_by_label: dict[str, list[Path]]):
    for ax, split in zip(axes, ("near", "far")):
        for label, dirs in run_dirs_by_label.items():
            d = dirs[0]
            u_in = [p.u_ood for p in load_detections(d / "dets_test.jsonl")]
            u_ood = [p.u_ood for p in load_detections(d / f"dets_{split}.jsonl")]
            fpr, tpr = roc_points(u_in, u_ood)
            ax.plot(fpr, tpr, label=label)
        ax.plot([0, 1], [0, 1], ls=":", c="grey")
        ax.set_title(f"{split}-OOD")
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.legend(fontsize=7)


def _monitor_axes(axes, histories: dict[str, dict]):
    for ax, (col, title) in zip(axes, MONITOR_PANELS):
        for label, h in histories.items():
            if col in h and not np.all(np.isnan(h[col])):
                ax.plot(h["epoch"], h[col], label=label)
        ax.set_title(title)
        ax.set_xlabel("epoch")
        ax.legend(fontsize=7)


def plot_run(path) -> list[Path]:
    """Retention, ROC and loss-monitor figures for a single run directory."""
    path = Path(path)
    summary = json.loads((path / "summary.json").read_text())
    label = f"{summary['metrics']['config_id']} s{summary['metrics']['seed']}"
    out = []

    fig, ax = plt.subplots(figsize=(5, 4))
    _retention_axes(ax, {label: (summary["retention"]["fractions"], summary["retention"]["ap50"])})
    out.append(_save(fig, path / "retention.png"))

    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    _roc_axes(axes, {label: [path]})
    out.append(_save(fig, path / "roc.png"))

    if (path / "history.csv").exists():
        fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
        _monitor_axes(axes, {label: read_history(path / "history.csv")})
        out.append(_save(fig, path / "monitor.png"))
    return out


def _mean_history(histories: list[dict]) -> dict:
    n = min(len(h["epoch"]) for h in histories)
    keys = set.intersection(*(set(h) for h in histories))
    return {k: np.mean([h[k][:n] for h in histories], axis=0) for k in keys}


def emit_report(run_dirs, out_dir) -> ReportArtifacts:
    """Merge per-run metrics into one CSV and draw comparison figures.

    Runs sharing a config id are averaged into one curve per figure. Run
    directories without a metrics file are skipped with a warning.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, skipped = [], []
    by_config: dict[str, list[Path]] = {}
    for d in map(Path, run_dirs):
        metrics = d / "metrics.csv"
        if not metrics.exists():
            warnings.warn(f"skipping {d}: no metrics.csv", stacklevel=2)
            skipped.append(d)
            continue
        with open(metrics, newline="") as fh:
            run_rows = list(csv.DictReader(fh))
        rows.extend(run_rows)
        by_config.setdefault(run_rows[0]["config_id"], []).append(d)
    if not rows:
        raise FileNotFoundError("no completed runs among the given directories")

    rows.sort(key=lambda r: (r["config_id"], int(r["seed"])))
    table = out_dir / "report.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)

    plots = {}
    curves = {}
    histories = {}
    for cid, dirs in by_config.items():
        summaries = [json.loads((d / "summary.json").read_text()) for d in dirs]
        fr = summaries[0]["retention"]["fractions"]
        curves[cid] = (fr, np.mean([s["retention"]["ap50"] for s in summaries], axis=0).tolist())
        hs = [read_history(d / "history.csv") for d in dirs if (d / "history.csv").exists()]
        if hs:
            histories[cid] = _mean_history(hs)

    fig, ax = plt.subplots(figsize=(6, 4.5))
    _retention_axes(ax, curves)
    plots["retention"] = _save(fig, out_dir / "retention.png")

    fig, axes = plt.subplots(1, 2, figsize=(10, 4.5))
    _roc_axes(axes, by_config)
    plots["roc"] = _save(fig, out_dir / "roc.png")

    if histories:
        fig, axes = plt.subplots(1, 3, figsize=(13, 4))
        _monitor_axes(axes, histories)
        plots["monitor"] = _save(fig, out_dir / "monitor.png")
    log.info("report over %d runs written to %s", len(rows), out_dir)
    return ReportArtifacts(table, rows, plots, skipped, curves)
