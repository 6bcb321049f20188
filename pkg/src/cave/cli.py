"""Command-line entry point: ``cave <subcommand> ...``.

Exit codes: 0 success, 1 validation or usage error, 2 runtime failure.
Every run writes ``run_meta.json`` (config snapshot, seed, library versions)
next to its outputs. ``CAVE_DETERMINISTIC=1`` switches torch to
deterministic algorithms.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import PIL
import scipy
import torch

from . import __version__
from .classical import FrangiParams, KmeansParams, cascade_kmeans, frangi_kmeans_pipeline, tune_frangi_threshold
from .data import PreprocessConfig, load_mask, load_series, preprocess, resize_mask, save_mask, save_series
from .evaluation import binarize, evaluate_methods
from .model import CaveConfig, CaveNet, load_checkpoint
from .synth import SynthConfig, generate_dataset
from .training import TrainConfig, load_split, model_input, set_seed, train

log = logging.getLogger("cave")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class ValidationError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; route it through our exit-code policy instead
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def deterministic_requested(flag: bool = False) -> bool:
    return flag or os.environ.get("CAVE_DETERMINISTIC", "") == "1"


def read_json(path) -> dict:
    try:
        with open(path) as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        raise ValidationError(f"{path}: invalid JSON ({err})")
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: expected a JSON object")
    return data


def require_seed(cfg: dict, path) -> int:
    seed = cfg.get("seed")
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ValidationError(f"{path}: an integer 'seed' is required")
    return seed


def versions() -> Dict[str, str]:
    return {
        "cave": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
        "Pillow": PIL.__version__,
    }


def write_run_meta(out_dir, command: str, config: dict, seed: Optional[int], deterministic: bool) -> Path:
    """No timestamps or host data, so identical runs give byte-identical files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "command": command,
        "config": config,
        "seed": seed,
        "deterministic": deterministic,
        "versions": versions(),
    }
    path = out_dir / "run_meta.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_preprocess(path) -> Optional[PreprocessConfig]:
    if path is None:
        return None
    d = read_json(path)
    try:
        return PreprocessConfig(**d)
    except TypeError as err:
        raise ValidationError(f"{path}: {err}")


def load_baseline_params(path):
    d = read_json(path)
    seed = require_seed(d, path)
    try:
        fp = FrangiParams(**d.get("frangi", {}))
        kp = KmeansParams(**{**d.get("kmeans", {}), "seed": seed})
    except TypeError as err:
        raise ValidationError(f"{path}: {err}")
    return fp, kp, d


def _net_runner(model: CaveNet, threshold: float = 0.5) -> Callable:
    def run(series):
        with torch.no_grad():
            return binarize(model.predict_proba(model_input(model, series)).numpy(), threshold)

    return run


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = read_json(args.config)
    seed = require_seed(cfg, args.config)
    try:
        template = SynthConfig.from_dict({**cfg.get("template", {}), "seed": seed})
    except TypeError as err:
        raise ValidationError(f"{args.config}: {err}")
    n_series = int(cfg.get("n_series", 10))
    ratios = tuple(cfg.get("split_ratios", (0.5, 0.2, 0.3)))
    if n_series < 1:
        raise ValidationError("n_series must be >= 1")
    generate_dataset(template, n_series, ratios, seed=seed, out_dir=args.out)
    write_run_meta(args.out, "synth", cfg, seed, args.deterministic)
    log.info("wrote %d series to %s", n_series, args.out)
    return EXIT_OK


def cmd_preprocess(args) -> int:
    pre = load_preprocess(args.config) or PreprocessConfig()
    series = preprocess(load_series(args.inp), pre)
    save_series(series, args.out)
    if args.mask:
        save_mask(resize_mask(load_mask(args.mask), pre.target_size), Path(args.out) / "mask.png")
    config = {"target_size": list(pre.target_size), "target_fps": pre.target_fps, "intensity_range": list(pre.intensity_range)}
    write_run_meta(args.out, "preprocess", config, None, args.deterministic)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = read_json(args.config)
    seed = require_seed(cfg, args.config)
    try:
        model_cfg = CaveConfig.from_dict(cfg.get("model", {}))
        train_cfg = TrainConfig.from_dict({**cfg.get("train", {}), "seed": seed})
    except TypeError as err:
        raise ValidationError(f"{args.config}: {err}")
    pre = PreprocessConfig(**cfg["preprocess"]) if "preprocess" in cfg else None
    set_seed(seed, args.deterministic)
    model = CaveNet(model_cfg)
    write_run_meta(args.out, "train", cfg, seed, args.deterministic)
    result = train(model, args.manifest, train_cfg, out_dir=args.out, pre=pre)
    log.info("best epoch %d, best validation %.4f", result.best_epoch, result.best_val)
    return EXIT_OK


def cmd_segment(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    series = load_series(args.inp)
    pre = load_preprocess(args.preprocess)
    if pre is not None:
        series = preprocess(series, pre)
    mask = _net_runner(model, args.threshold)(series)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_mask(mask, args.out)
    config = {"ckpt": str(args.ckpt), "model": model.cfg.to_dict(), "threshold": args.threshold, "input": str(args.inp)}
    write_run_meta(Path(args.out).parent, "segment", config, None, args.deterministic)
    return EXIT_OK


def cmd_baseline(args) -> int:
    fp, kp, raw = load_baseline_params(args.params)
    series = load_series(args.inp)
    pre = load_preprocess(args.preprocess)
    if pre is not None:
        series = preprocess(series, pre)
    if args.method == "frangi-kmeans":
        result = frangi_kmeans_pipeline(series, fp, kp)
    else:
        if not args.ckpt:
            raise ValidationError("unet-kmeans needs --ckpt")
        unet, _ = load_checkpoint(args.ckpt)
        result = cascade_kmeans(_net_runner(unet)(series).vessel, series, kp)
    for w in result.warnings:
        log.warning("%s: %s", series.series_id, w)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_mask(result.mask, args.out)
    write_run_meta(Path(args.out).parent, f"baseline {args.method}", raw, kp.seed, args.deterministic)
    return EXIT_OK


def cmd_tune(args) -> int:
    fp, kp, raw = load_baseline_params(args.params)
    samples = load_split(args.manifest, args.split, load_preprocess(args.preprocess))
    if not samples:
        raise ValidationError(f"split '{args.split}' is empty")
    fp.threshold = tune_frangi_threshold([s.series for s in samples], [s.mask.vessel for s in samples], fp)
    out = {**raw, "frangi": fp.to_dict(), "kmeans": {k: v for k, v in vars(kp).items() if k != "seed"}}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    write_run_meta(Path(args.out).parent, "baseline tune", out, kp.seed, args.deterministic)
    log.info("tuned Frangi threshold %.2f", fp.threshold)
    return EXIT_OK


def _mask_dir_runner(directory: Path) -> Callable:
    def run(series):
        return load_mask(directory / f"{series.series_id}.png")

    return run


def parse_methods(spec: str) -> Dict[str, Callable]:
    """``kind:path[,kind:path...]`` with kind in cave, unet, unet-kmeans, frangi-kmeans, masks."""
    runners: Dict[str, Callable] = {}
    for item in filter(None, (s.strip() for s in spec.split(","))):
        kind, sep, path = item.partition(":")
        if not sep or not path:
            raise ValidationError(f"method {item!r} must look like kind:path")
        name = kind
        k = 2
        while name in runners:
            name = f"{kind}#{k}"
            k += 1
        if kind in ("cave", "unet"):
            model, _ = load_checkpoint(path)
            if (kind == "unet") == model.cfg.is_temporal:
                raise ValidationError(f"{path}: checkpoint does not hold a {kind} model")
            runners[name] = _net_runner(model)
        elif kind == "unet-kmeans":
            model, _ = load_checkpoint(path)
            net = _net_runner(model)
            runners[name] = lambda s, net=net: cascade_kmeans(net(s).vessel, s).mask
        elif kind == "frangi-kmeans":
            fp, kp, _ = load_baseline_params(path)
            runners[name] = lambda s, fp=fp, kp=kp: frangi_kmeans_pipeline(s, fp, kp).mask
        elif kind == "masks":
            d = Path(path)
            if not d.is_dir():
                raise ValidationError(f"{path}: not a directory")
            runners[name] = _mask_dir_runner(d)
        else:
            raise ValidationError(f"unknown method kind {kind!r}")
    if not runners:
        raise ValidationError("no methods given")
    return runners


def cmd_eval(args) -> int:
    runners = parse_methods(args.methods)
    pre = load_preprocess(args.preprocess)
    config = {"manifest": str(args.manifest), "methods": args.methods, "split": args.split}
    write_run_meta(args.out, "eval", config, None, args.deterministic)
    report = evaluate_methods(args.manifest, runners, pre=pre, out_dir=args.out, split=args.split, error_maps=not args.no_errmaps)
    print(report.table())
    return EXIT_OK


def cmd_benchmark(args) -> int:
    from .benchmark import BenchmarkConfig, run_benchmark

    cfg = read_json(args.config) if args.config else {"seed": 0}
    seed = require_seed(cfg, args.config or "benchmark config")
    try:
        bcfg = BenchmarkConfig.from_dict(cfg)
    except TypeError as err:
        raise ValidationError(str(err))
    set_seed(seed, args.deterministic)
    write_run_meta(args.out, "benchmark", bcfg.to_dict(), seed, args.deterministic)
    result = run_benchmark(bcfg, work_dir=args.work, out_dir=args.out)
    print(result.report.table())
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cave", description="Spatio-temporal artery/vein segmentation of DSA series.")
    p.add_argument("--version", action="version", version=f"cave {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("-q", "--quiet", action="store_true")
    p.add_argument("--deterministic", action="store_true", help="same as CAVE_DETERMINISTIC=1")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render a synthetic dataset with manifest")
    s.add_argument("--config", required=True, help="JSON: seed, n_series, split_ratios, template")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="resize, resample to the target fps and normalize one series")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON PreprocessConfig")
    s.add_argument("--mask", help="mask to resize alongside (written as <out>/mask.png)")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train a CAVE or U-Net model")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config", required=True, help="JSON: seed, model, train, optional preprocess")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("segment", help="segment one series with a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True, help="output RGB mask PNG")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--preprocess", help="JSON PreprocessConfig applied before inference")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("baseline", help="classical baselines")
    bsub = s.add_subparsers(dest="method", required=True, parser_class=_Parser)
    for name in ("frangi-kmeans", "unet-kmeans"):
        b = bsub.add_parser(name)
        b.add_argument("--in", dest="inp", required=True)
        b.add_argument("--out", required=True)
        b.add_argument("--params", required=True, help="JSON: seed, frangi, kmeans")
        b.add_argument("--preprocess")
        if name == "unet-kmeans":
            b.add_argument("--ckpt", required=True)
        b.set_defaults(func=cmd_baseline)
    b = bsub.add_parser("tune", help="choose the Frangi threshold on a manifest split")
    b.add_argument("--manifest", required=True)
    b.add_argument("--params", required=True)
    b.add_argument("--out", required=True, help="tuned params JSON")
    b.add_argument("--split", default="val")
    b.add_argument("--preprocess")
    b.set_defaults(func=cmd_tune)

    s = sub.add_parser("eval", help="score methods on a manifest split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--methods", required=True, help="kind:path,... kinds: cave unet unet-kmeans frangi-kmeans masks")
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--preprocess")
    s.add_argument("--no-errmaps", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("benchmark", help="synthetic ordering benchmark")
    s.add_argument("--config", help="JSON BenchmarkConfig (seed required)")
    s.add_argument("--work", required=True, help="dataset directory")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_benchmark)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(err, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    args.deterministic = deterministic_requested(args.deterministic)
    if args.deterministic:
        torch.use_deterministic_algorithms(True)

    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as err:
        # ValueError covers format/validation errors from every module (and TrainConfig's ConfigError)
        print(f"cave {args.command}: invalid input: {err}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as err:
        log.debug("runtime failure", exc_info=True)
        print(f"cave {args.command}: failed: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
