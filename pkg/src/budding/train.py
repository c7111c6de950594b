"""Training loop, per-epoch loss monitoring and checkpoint files."""
from __future__ import annotations

import io
import json
import csv
import logging
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .diversity import KINDS, diversity_loss, flatten_features
from .geometry import GridSpec
from .model import BuddingDetector, ModelConfig, build_targets, conventional_loss
from .tandem import LossWeights, TandemOutput, bea_loss, tandem_loss, tandem_monitor

log = logging.getLogger(__name__)

HISTORY_COLUMNS = (
    "epoch", "L_ta_conf", "L_tq_conf", "mse_alpha_beta", "L_conv", "L_tandem", "L_div", "L_total", "dropped_gt",
)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_at: float = 0.8
    grad_clip: float | None = 10.0
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    diversity_kind: str | None = None
    monitor: bool = True

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.diversity_kind is not None and self.diversity_kind not in KINDS:
            raise ValueError(f"diversity_kind must be one of {KINDS} or None")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, dump_path: Path):
        super().__init__(f"{message}; offending batch written to {dump_path}")
        self.dump_path = dump_path


def _dump_batch(images: torch.Tensor, batch_idx: np.ndarray, dump_dir: Path | None, parts: dict) -> Path:
    dump_dir = Path(dump_dir) if dump_dir else Path(tempfile.mkdtemp(prefix="budding-diverged-"))
    dump_dir.mkdir(parents=True, exist_ok=True)
    path = dump_dir / "diverged_batch.npz"
    np.savez(path, images=images.detach().cpu().numpy(), indices=batch_idx,
             **{k: np.asarray(float(v.detach() if isinstance(v, torch.Tensor) else v)) for k, v in parts.items()})
    return path


def batch_losses(model: BuddingDetector, images: torch.Tensor, targets, cfg: TrainConfig) -> dict:
    """Every loss term for one batch; ``total`` is the only one carrying gradients
    from terms that are switched off."""
    w = cfg.weights
    grid = model.grid
    out = model(images)
    decoded = out["decoded"]
    conv = sum(conventional_loss(d, targets, grid, logits=r) for d, r in zip(decoded, out["raw"]))
    res = {"L_conv": conv}
    tandem = conv.new_zeros(())
    div = conv.new_zeros(())
    if len(decoded) == 2:
        pair = TandemOutput(decoded[0], decoded[1])
        if w.enable_ta or w.enable_tq:
            tandem, parts = tandem_loss(pair, targets, w)
            res["L_tandem"] = tandem
        elif cfg.monitor:
            with torch.no_grad():
                _, parts = tandem_loss(pair, targets, w)
                res["L_tandem"] = parts["L_ta"] + parts["L_tq"]
        if cfg.monitor:
            res.update(tandem_monitor(pair, targets, w.eps_tq))
        if cfg.diversity_kind and w.w_diversity > 0:
            h_a, h_b = (flatten_features(h) for h in out["hidden"])
            div = diversity_loss(h_a, h_b, cfg.diversity_kind)
            res["L_div"] = div
    res["total"] = bea_loss(conv, tandem, div, w)
    return res


def train(model: BuddingDetector, dataset, cfg: TrainConfig, dump_dir: Path | None = None):
    """Minimise the combined loss with momentum SGD; returns ``(model, history)``.

    ``history`` is a list of per-epoch dicts keyed by :data:`HISTORY_COLUMNS`.
    A non-finite loss aborts training and dumps the offending batch.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    torch.manual_seed(cfg.seed)
    grid: GridSpec = model.grid
    images = torch.from_numpy(np.stack([img for img, _ in dataset]))
    targets = build_targets([gt for _, gt in dataset], grid)
    n = len(dataset)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    milestone = max(1, int(round(cfg.lr_decay_at * cfg.epochs)))
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=[milestone], gamma=0.1)
    gen = torch.Generator().manual_seed(cfg.seed)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = torch.randperm(n, generator=gen)
        sums: dict[str, float] = {}
        counts: dict[str, int] = {}
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            bt = targets.select(idx)
            res = batch_losses(model, images[idx], bt, cfg)
            total = res["total"]
            if not torch.isfinite(total):
                path = _dump_batch(images[idx], idx.numpy(), dump_dir, res)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", path)
            opt.zero_grad()
            total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            for k, v in res.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach() if isinstance(v, torch.Tensor) else v)
                counts[k] = counts.get(k, 0) + 1
        sched.step()
        row = {"epoch": epoch}
        for col in HISTORY_COLUMNS[1:-1]:
            key = "total" if col == "L_total" else col
            row[col] = sums[key] / counts[key] if key in sums else float("nan")
        row["dropped_gt"] = targets.dropped
        history.append(row)
        log.info("epoch %d: total %.4f conv %.4f tandem %.4f", epoch, row["L_total"], row["L_conv"], row["L_tandem"])
    model.eval()
    return model, history


def write_history(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# Checkpoint layout (little endian):
#   8 bytes  magic b"BUDCKPT\0"
#   u32      format version
#   u32      header length N
#   N bytes  UTF-8 JSON header: {"model": ModelConfig as dict, "meta": {...}}
#   rest     numpy .npz archive of the state dict (one array per parameter/buffer)
CHECKPOINT_MAGIC = b"BUDCKPT\0"
CHECKPOINT_VERSION = 1


def model_config_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["grid"]["anchor_sizes"] = [list(a) for a in cfg.grid.anchor_sizes]
    d["backbone_channels"] = list(cfg.backbone_channels)
    return d


def save_checkpoint(path: Path, model: BuddingDetector, meta: dict | None = None) -> None:
    header = json.dumps({"model": model_config_dict(model.cfg), "meta": meta or {}}, sort_keys=True).encode()
    buf = io.BytesIO()
    np.savez(buf, **{k: v.detach().cpu().numpy() for k, v in model.state_dict().items()})
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(buf.getvalue())


def load_checkpoint(path: Path) -> tuple[BuddingDetector, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version, n = struct.unpack("<II", blob[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + n])
    model = BuddingDetector(ModelConfig(**header["model"]))
    arrays = np.load(io.BytesIO(blob[16 + n:]))
    model.load_state_dict({k: torch.from_numpy(arrays[k]) for k in arrays.files})
    model.eval()
    return model, header["meta"]
