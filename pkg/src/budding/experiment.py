"""Train, predict, evaluate and ablate: one run per (config, seed).

Run directory layout, a pure function of ``(output_dir, config_id, seed)``::

    <output_dir>/<config_id>/seed_<seed>/
        config.yaml            exact config of the run
        checkpoint.bud         weights + model config (see train.save_checkpoint)
        history.csv            per-epoch loss monitor
        gt_test.jsonl          test ground truth
        dets_test.jsonl        detections + u_ood, in-distribution test split
        dets_near.jsonl        same for the near-OOD split
        dets_far.jsonl         same for the far-OOD split
        metrics.csv            this run's metrics row
        summary.json           retention curve, alpha-only AP50, extras
        retention.png, roc.png, monitor.png

The run's row is also upserted into ``<output_dir>/metrics.csv``.
"""
from __future__ import annotations

import csv
import fcntl
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .config import EvalConfig, ExperimentConfig, dump_config, load_config
from .data import SceneSpec, generate_dataset, stack_images
from .dumps import dump_detections, dump_ground_truth, load_detections, load_ground_truth
from .inference import ImagePrediction, predict
from .metrics import (
    OodScore, evaluate_detections, group_by_image, mean_ap, retention_curve, roc_auc, uncertainty_error,
)
from .model import build_model
from .train import save_checkpoint, train, write_history

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "config_id", "seed", "mAP_raw", "AP50_raw", "AP50_upred", "UE", "delta_opt", "retention_auc",
    "auroc_near", "auroc_far",
)

# (ta, tq) switch settings of the ablation grid, keyed by config-id suffix
ABLATION_GRID = (
    ("no_tandem", False, False),
    ("ta_only", True, False),
    ("tq_only", False, True),
    ("ta_tq", True, True),
)

SPLITS = ("train", "test", "near", "far")


@dataclass
class RunArtifacts:
    run_dir: Path
    checkpoint: Path
    dumps: dict[str, Path]
    history: Path
    metrics: dict
    summary: dict
    plots: list[Path] = field(default_factory=list)


def run_dir(output_dir, config_id: str, seed: int) -> Path:
    return Path(output_dir) / config_id / f"seed_{int(seed)}"


def split_seed(seed: int, split: str) -> int:
    # depends on the seed only, so every config of an ablation sees the same images
    return int(seed) * 10 + SPLITS.index(split) + 1


def make_splits(cfg: ExperimentConfig, seed: int) -> dict:
    base = cfg.scene.to_dict()
    base.pop("ood_mode")
    return {
        "train": generate_dataset(SceneSpec(**base), cfg.data.n_train, split_seed(seed, "train")),
        "test": generate_dataset(SceneSpec(**base), cfg.data.n_test, split_seed(seed, "test")),
        "near": generate_dataset(SceneSpec(**base, ood_mode="near"), cfg.n_ood, split_seed(seed, "near")),
        "far": generate_dataset(SceneSpec(**base, ood_mode="far"), cfg.n_ood, split_seed(seed, "far")),
    }


def check_writable(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise PermissionError(f"output directory {path} is not writable: {exc}") from exc


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def compute_metrics(test: list[ImagePrediction], gts: dict, near: list[ImagePrediction],
                    far: list[ImagePrediction], ev: EvalConfig) -> tuple[dict, dict]:
    """Metrics row plus extras (retention curve, UE operating point) from predictions."""
    dets = {p.image_id: p.detections for p in test}
    evaluated = evaluate_detections(dets, gts, ev.iou_thresh)
    ap = mean_ap(dets, gts)
    try:
        ue = uncertainty_error(evaluated)
    except ValueError:
        # no correct or no incorrect detections: UE undefined, nothing is rejected
        ue = {"ue": float("nan"), "delta_opt": float("nan"), "tprj": float("nan"), "fprt": float("nan")}
    if math.isnan(ue["delta_opt"]):
        ap50_upred = ap["AP50"]
    else:
        kept = [e for e in evaluated if e.u_pred <= ue["delta_opt"]]
        ap50_upred = mean_ap(group_by_image(kept, gts), gts, thresholds=(0.5,))["AP50"]
    curve = retention_curve(evaluated, gts, ev.retention_fractions)
    in_scores = [OodScore(p.image_id, p.u_ood, "in_dist") for p in test]
    auroc = {}
    for name, preds in (("near", near), ("far", far)):
        scores = in_scores + [OodScore(f"{name}:{p.image_id}", p.u_ood, "ood") for p in preds]
        auroc[name] = roc_auc(scores)
    row = {
        "mAP_raw": ap["mAP"], "AP50_raw": ap["AP50"], "AP50_upred": ap50_upred,
        "UE": ue["ue"], "delta_opt": ue["delta_opt"], "retention_auc": curve.auc,
        "auroc_near": auroc["near"], "auroc_far": auroc["far"],
    }
    extras = {
        "retention": {"fractions": curve.fractions, "ap50": curve.ap50_values, "auc": curve.auc},
        "ue": ue,
        "n_detections": len(evaluated),
        "n_correct": int(sum(e.matched for e in evaluated)),
    }
    return row, extras


def write_metrics_row(path: Path, row: dict) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        writer.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])


def read_metrics(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def upsert_metrics(path: Path, row: dict) -> None:
    """Insert or replace the row for ``(config_id, seed)``; safe across processes."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path.parent / f".{path.name}.lock", "w") as lock:
        fcntl.flock(lock, fcntl.LOCK_EX)
        rows = read_metrics(path) if path.exists() else []
        key = (row["config_id"], str(row["seed"]))
        new = {c: _fmt(row[c]) for c in METRIC_COLUMNS}
        rows = [r for r in rows if (r["config_id"], r["seed"]) != key] + [new]
        rows.sort(key=lambda r: (r["config_id"], int(r["seed"])))
        tmp = path.parent / f".{path.name}.tmp"
        with open(tmp, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
        os.replace(tmp, path)


def _ap50(preds: list[ImagePrediction], gts: dict) -> float:
    return mean_ap({p.image_id: p.detections for p in preds}, gts, thresholds=(0.5,))["AP50"]


def run_experiment(cfg: ExperimentConfig, seed: int | None = None) -> RunArtifacts:
    """Full pipeline for one seed (default: the first of ``cfg.seeds``)."""
    seed = cfg.seeds[0] if seed is None else int(seed)
    out = run_dir(cfg.output_dir, cfg.config_id, seed)
    check_writable(out)
    cfg = cfg.with_changes(**{"train.seed": seed})
    dump_config(cfg, out / "config.yaml")

    splits = make_splits(cfg, seed)
    model = build_model(cfg.model, seed)
    model, history = train(model, splits["train"], cfg.train, dump_dir=out)
    write_history(out / "history.csv", history)
    save_checkpoint(out / "checkpoint.bud", model, {"config_id": cfg.config_id, "seed": seed})

    ev = cfg.eval
    dumps = {}
    preds = {}
    for name in ("test", "near", "far"):
        data = splits[name]
        preds[name] = predict(model, stack_images(data), [str(i) for i in range(len(data))],
                              ev.conf_floor, ev.nms_thresh)
        dumps[name] = out / f"dets_{name}.jsonl"
        dump_detections(dumps[name], preds[name])
    gts = {str(i): gt for i, (_, gt) in enumerate(splits["test"])}
    dump_ground_truth(out / "gt_test.jsonl", gts)

    extra = {}
    if cfg.model.bea:
        alpha = predict(model, stack_images(splits["test"]), list(gts), ev.conf_floor, ev.nms_thresh, head=0)
        extra["AP50_alpha"] = _ap50(alpha, gts)
    artifacts = evaluate_run_dir(out, extra=extra)
    log.info("%s seed %d: %s", cfg.config_id, seed, artifacts.metrics)
    return artifacts


def evaluate_run_dir(path, extra: dict | None = None, plots: bool = True) -> RunArtifacts:
    """Recompute every metric of a run from its dumps and rewrite its outputs."""
    path = Path(path)
    cfg = load_config(path / "config.yaml")
    seed = int(path.name.removeprefix("seed_"))
    dumps = {name: path / f"dets_{name}.jsonl" for name in ("test", "near", "far")}
    for p in dumps.values():
        if not p.exists():
            raise FileNotFoundError(f"missing detection dump {p}")
    gts = load_ground_truth(path / "gt_test.jsonl")
    loaded = {name: load_detections(p) for name, p in dumps.items()}
    row, extras = compute_metrics(loaded["test"], gts, loaded["near"], loaded["far"], cfg.eval)
    row = {"config_id": cfg.config_id, "seed": seed, **row}

    summary_path = path / "summary.json"
    summary = json.loads(summary_path.read_text()) if summary_path.exists() else {}
    summary.update(extras)
    summary.update(extra or {})
    summary["metrics"] = row
    summary["config"] = cfg.to_dict()
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True, allow_nan=True) + "\n")

    write_metrics_row(path / "metrics.csv", row)
    upsert_metrics(Path(cfg.output_dir) / "metrics.csv", row)

    plot_paths = []
    if plots:
        from .report import plot_run
        plot_paths = plot_run(path)
    return RunArtifacts(path, path / "checkpoint.bud", dumps, path / "history.csv", row, summary, plot_paths)


def ablation_configs(cfg: ExperimentConfig) -> list[ExperimentConfig]:
    """The four tandem-switch variants of a budding-ensemble config."""
    return [
        cfg.with_changes(**{
            "config_id": f"{cfg.config_id}-{suffix}",
            "model.bea": True,
            "train.weights.enable_ta": ta,
            "train.weights.enable_tq": tq,
        })
        for suffix, ta, tq in ABLATION_GRID
    ]


def ablate(cfg: ExperimentConfig, seeds=None) -> list[RunArtifacts]:
    seeds = cfg.seeds if seeds is None else tuple(seeds)
    variants = ablation_configs(cfg)
    for v in variants:
        check_writable(Path(v.output_dir))
    return [run_experiment(v, s) for v in variants for s in seeds]


def configure_torch() -> None:
    # reruns on the same machine must be bit-identical
    torch.use_deterministic_algorithms(True)
