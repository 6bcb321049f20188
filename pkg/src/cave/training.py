"""Artery-vein loss and the training loop (RMSprop, plateau LR halving, early stopping)."""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .data import AvMask, DsaSeries, PreprocessConfig, augment, load_mask, load_series, min_intensity_projection, preprocess, resize_mask
from .model import CaveNet, save_checkpoint

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
MONITORS = ("val_loss", "val_mdice")


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-5
    plateau_patience: int = 10
    decay_factor: float = 0.5
    early_stop_patience: int = 50
    max_epochs: int = 1000
    min_improvement: float = 1e-6
    rmsprop_alpha: float = 0.99  # squared-gradient moving-average decay
    aug_enabled: bool = True
    seed: int = 0
    dice_epsilon: float = 1.0
    monitor: str = "val_loss"  # or "val_mdice" (monitored as 1 - hard M-Dice at 0.5)

    def __post_init__(self):
        if self.monitor not in MONITORS:
            raise ConfigError(f"monitor must be one of {MONITORS}, got {self.monitor!r}")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patiences must be >= 1")
        if not 0.0 < self.decay_factor < 1.0:
            raise ConfigError("decay_factor must lie in (0, 1)")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    ce: torch.Tensor
    mdice_loss: torch.Tensor
    total: torch.Tensor

    def item(self) -> Dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("ce", "mdice_loss", "total")}


def _as_target(gt, like: torch.Tensor) -> torch.Tensor:
    if isinstance(gt, AvMask):
        gt = gt.stack()
    return torch.as_tensor(gt, dtype=like.dtype, device=like.device)


def soft_mdice(pred: torch.Tensor, gt, epsilon: float = 1.0) -> torch.Tensor:
    """Soft multi-class Dice pooled over the artery and vein channels.

    ``pred`` and ``gt`` are ``[2, H, W]``; TP, FP and FN are relaxed to
    sums of products and pooled across both channels before the ratio.
    """
    gt = _as_target(gt, pred)
    if pred.shape != gt.shape:
        raise ValueError(f"pred {tuple(pred.shape)} and gt {tuple(gt.shape)} differ")
    tp = (pred * gt).sum()
    fp = (pred * (1 - gt)).sum()
    fn = ((1 - pred) * gt).sum()
    return (2 * tp + epsilon) / (2 * tp + fp + fn + epsilon)


def av_loss(pred: torch.Tensor, gt, epsilon: float = 1.0) -> LossBreakdown:
    """Per-channel binary cross-entropy plus (1 - soft M-Dice), equally weighted."""
    gt = _as_target(gt, pred)
    p = pred.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    ce = -(gt * torch.log(p) + (1 - gt) * torch.log(1 - p)).mean()
    mdice_loss = 1 - soft_mdice(pred, gt, epsilon)
    return LossBreakdown(ce=ce, mdice_loss=mdice_loss, total=ce + mdice_loss)


# --------------------------------------------------------------------------
# scheduling
# --------------------------------------------------------------------------


class PlateauController:
    """Halves the LR after ``plateau_patience`` non-improving epochs; stops after ``early_stop_patience``.

    The first epoch always sets the reference value. The LR counter resets at
    every reduction; the early-stopping counter only resets on improvement.
    """

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.lr = cfg.lr
        self.best = math.inf
        self.best_epoch = 0
        self.since_improvement = 0
        self.since_reduction = 0

    def step(self, epoch: int, value: float) -> Tuple[bool, bool]:
        """Record one epoch's monitored value; returns ``(improved, should_stop)``."""
        improved = value < self.best - self.cfg.min_improvement
        if improved:
            self.best = value
            self.best_epoch = epoch
            self.since_improvement = 0
            self.since_reduction = 0
        else:
            self.since_improvement += 1
            self.since_reduction += 1
            if self.since_reduction >= self.cfg.plateau_patience:
                self.lr *= self.cfg.decay_factor
                self.since_reduction = 0
        stop = self.since_improvement >= self.cfg.early_stop_patience
        return improved, stop


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------


@dataclass
class Sample:
    series: DsaSeries
    mask: AvMask


def load_split(manifest_path, split: str, pre: Optional[PreprocessConfig] = None) -> List[Sample]:
    manifest_path = Path(manifest_path)
    with open(manifest_path) as f:
        manifest = json.load(f)
    if split not in manifest:
        raise ConfigError(f"manifest has no '{split}' split")
    samples = []
    for rel in manifest[split]:
        d = manifest_path.parent / rel
        series = load_series(d)
        mask = load_mask(d / "mask.png")
        if pre is not None:
            series = preprocess(series, pre)
            mask = resize_mask(mask, pre.target_size)
        samples.append(Sample(series, mask))
    return samples


def model_input(model: CaveNet, series: DsaSeries) -> torch.Tensor:
    """Network input ``[T, 1, H, W]``: contrast ``1 - I/255``; the MinIP alone for the U-Net."""
    frames = np.asarray(series.frames, dtype=np.float64)
    if not model.cfg.is_temporal:
        frames = min_intensity_projection(series)[None]
    x = torch.as_tensor(1.0 - frames / 255.0, dtype=torch.get_default_dtype())
    return x[:, None]


def set_seed(seed: int, deterministic: bool = False) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    log: List[dict]
    best_epoch: int
    best_val: float
    best_state: dict = field(repr=False)


def evaluate_loss(model: CaveNet, samples: Sequence[Sample], epsilon: float) -> float:
    return evaluate_validation(model, samples, epsilon)["val_loss"]


def evaluate_validation(model: CaveNet, samples: Sequence[Sample], epsilon: float) -> Dict[str, float]:
    """Mean total loss and mean hard M-Dice (threshold 0.5) over ``samples``."""
    model.eval()
    losses, mdice = [], []
    with torch.no_grad():
        for s in samples:
            pred = model.predict_proba(model_input(model, s.series))
            gt = _as_target(s.mask, pred)
            losses.append(float(av_loss(pred, gt, epsilon).total))
            hard = (pred >= 0.5).to(pred.dtype)
            denom = float(hard.sum() + gt.sum())
            mdice.append(1.0 if denom == 0 else float(2 * (hard * gt).sum()) / denom)
    return {"val_loss": float(np.mean(losses)), "val_mdice": float(np.mean(mdice))}


def fit(
    model: CaveNet,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    cfg: TrainConfig,
    val_loss_fn: Optional[Callable[[CaveNet, int], float]] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Train with batch size 1 (one series per step) and restore the best-validation weights.

    ``val_loss_fn(model, epoch)`` overrides the monitored validation value
    (lower is better).
    """
    if not train_samples or not val_samples:
        raise ConfigError("train and val splits must be non-empty")
    set_seed(cfg.seed)
    opt = torch.optim.RMSprop(model.parameters(), lr=cfg.lr, alpha=cfg.rmsprop_alpha)
    ctl = PlateauController(cfg)
    rng = np.random.default_rng(cfg.seed)
    history = []
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    for epoch in range(1, cfg.max_epochs + 1):
        lr_used = ctl.lr
        for group in opt.param_groups:
            group["lr"] = lr_used
        model.train()
        losses = []
        for idx in rng.permutation(len(train_samples)):
            sample = train_samples[idx]
            series, mask = sample.series, sample.mask
            if cfg.aug_enabled:
                series, mask = augment(series, mask, seed=(cfg.seed, epoch, int(idx)))
            pred = model.predict_proba(model_input(model, series))
            loss = av_loss(pred, mask, cfg.dice_epsilon)
            if not torch.isfinite(loss.total):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, series {series.series_id!r}: {loss.item()}"
                )
            opt.zero_grad()
            loss.total.backward()
            opt.step()
            losses.append(float(loss.total.detach()))

        extra = {}
        if val_loss_fn is not None:
            val = float(val_loss_fn(model, epoch))
            monitored = val
        else:
            metrics = evaluate_validation(model, val_samples, cfg.dice_epsilon)
            val = metrics["val_loss"]
            extra["val_mdice"] = metrics["val_mdice"]
            monitored = val if cfg.monitor == "val_loss" else 1.0 - metrics["val_mdice"]
        if not math.isfinite(monitored):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")

        improved, stop = ctl.step(epoch, monitored)
        if improved:
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_loss": val,
            **extra,
            "lr": lr_used,
            "next_lr": ctl.lr,
        }
        history.append(record)
        log.info("epoch %d train %.4f val %.4f lr %.2e", epoch, record["train_loss"], val, lr_used)
        if on_epoch is not None:
            on_epoch(record)
        if stop:
            break

    model.load_state_dict(best_state)
    return TrainResult(log=history, best_epoch=ctl.best_epoch, best_val=ctl.best, best_state=best_state)


def train(
    model: CaveNet,
    manifest_path,
    cfg: TrainConfig,
    out_dir=None,
    pre: Optional[PreprocessConfig] = None,
) -> TrainResult:
    """Train on a manifest's train split, validate on its val split, write ``checkpoint.best`` and ``log.jsonl``."""
    train_samples = load_split(manifest_path, "train", pre)
    val_samples = load_split(manifest_path, "val", pre)
    if not train_samples or not val_samples:
        raise ConfigError("manifest needs non-empty train and val splits")

    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "log.jsonl", "w")

    def write(record):
        if log_file is not None:
            log_file.write(json.dumps({k: record[k] for k in ("epoch", "train_loss", "val_loss", "lr")}) + "\n")
            log_file.flush()

    try:
        result = fit(model, train_samples, val_samples, cfg, on_epoch=write)
    finally:
        if log_file is not None:
            log_file.close()
    if out_dir is not None:
        save_checkpoint(
            out_dir / "checkpoint.best",
            model,
            extra={"train_config": cfg.to_dict(), "best_epoch": result.best_epoch, "best_val": result.best_val},
        )
    return result
