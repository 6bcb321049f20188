"""Synthetic ordering benchmark: Frangi+K-means vs U-Net (MinIP) vs U-Net+K-means vs CAVE.

Renders a seeded synthetic dataset, trains the U-Net and a CAVE variant on
the train split, tunes the Frangi threshold on the validation split, scores
everything on the test split and runs paired Wilcoxon tests.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

from .classical import FrangiParams, KmeansParams, cascade_kmeans, frangi_kmeans_pipeline, tune_frangi_threshold
from .data import min_intensity_projection
from .evaluation import SegReport, binarize, evaluate_methods
from .model import CaveConfig, CaveNet, save_checkpoint
from .synth import SynthConfig, generate_dataset
from .training import TrainConfig, fit, load_split, model_input, set_seed

log = logging.getLogger(__name__)


@dataclass
class BenchmarkConfig:
    n_series: int = 150
    split_ratios: tuple = (100 / 150, 20 / 150, 30 / 150)
    size: int = 128
    n_frames: int = 10
    artifact_level: float = 0.5
    seed: int = 0
    cave: dict = field(default_factory=lambda: {"base_channels": 8, "temporal_module": "conv_gru"})
    unet: dict = field(default_factory=lambda: {"base_channels": 16, "temporal_module": "none"})
    cave_train: dict = field(
        default_factory=lambda: {"lr": 1e-3, "plateau_patience": 3, "early_stop_patience": 6, "max_epochs": 12}
    )
    unet_train: dict = field(
        default_factory=lambda: {"lr": 1e-3, "plateau_patience": 3, "early_stop_patience": 8, "max_epochs": 40}
    )
    frangi: dict = field(default_factory=dict)
    kmeans: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d


@dataclass
class BenchmarkResult:
    report: SegReport
    timings: Dict[str, float]
    frangi_threshold: float
    logs: Dict[str, list]

    def mean(self, method: str, metric: str = "m_dice") -> float:
        return self.report.summary[method][metric][0]

    def p(self, a: str, b: str, metric: str = "m_dice") -> Optional[float]:
        key = f"{a} vs {b}" if f"{a} vs {b}" in self.report.wilcoxon else f"{b} vs {a}"
        return self.report.wilcoxon[key][metric]["p"]


def _train(name, model_cfg: dict, train_cfg: dict, train, val, seed, out_dir, timings, logs):
    set_seed(seed)
    model = CaveNet(CaveConfig.from_dict(model_cfg))
    t0 = time.time()
    result = fit(model, train, val, TrainConfig(seed=seed, **train_cfg))
    timings[name] = time.time() - t0
    logs[name] = result.log
    model.eval()
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / f"{name}.ckpt", model, extra={"train_config": train_cfg})
    log.info("%s trained in %.0f s, best epoch %d", name, timings[name], result.best_epoch)
    return model


def run_benchmark(cfg: Optional[BenchmarkConfig] = None, work_dir=None, out_dir=None) -> BenchmarkResult:
    cfg = cfg or BenchmarkConfig()
    work_dir = Path(work_dir)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    template = SynthConfig(size=(cfg.size, cfg.size), n_frames=cfg.n_frames, artifact_level=cfg.artifact_level)
    timings: Dict[str, float] = {}
    logs: Dict[str, list] = {}

    t0 = time.time()
    generate_dataset(template, cfg.n_series, cfg.split_ratios, seed=cfg.seed, out_dir=work_dir)
    manifest = work_dir / "manifest.json"
    train = load_split(manifest, "train")
    val = load_split(manifest, "val")
    timings["synth"] = time.time() - t0

    fp = FrangiParams(**cfg.frangi)
    fp.threshold = tune_frangi_threshold([s.series for s in val], [s.mask.vessel for s in val], fp)
    kp = KmeansParams(**cfg.kmeans)

    unet = _train("unet", cfg.unet, cfg.unet_train, train, val, cfg.seed, out_dir, timings, logs)
    cave = _train("cave", cfg.cave, cfg.cave_train, train, val, cfg.seed, out_dir, timings, logs)

    def run_net(model):
        def run(series):
            with torch.no_grad():
                return binarize(model.predict_proba(model_input(model, series)).numpy())
        return run

    def run_unet_kmeans(series):
        return cascade_kmeans(run_net(unet)(series).vessel, series, kp).mask

    runners = {
        "frangi-kmeans": lambda s: frangi_kmeans_pipeline(s, fp, kp).mask,
        "unet": run_net(unet),
        "unet-kmeans": run_unet_kmeans,
        "cave": run_net(cave),
    }
    t0 = time.time()
    report = evaluate_methods(manifest, runners, out_dir=out_dir, error_maps=False)
    timings["eval"] = time.time() - t0
    result = BenchmarkResult(report=report, timings=timings, frangi_threshold=fp.threshold, logs=logs)
    if out_dir is not None:
        with open(Path(out_dir) / "benchmark.json", "w") as f:
            json.dump(
                {"config": cfg.to_dict(), "timings": timings, "frangi_threshold": fp.threshold, "logs": logs},
                f,
                indent=2,
            )
    return result
