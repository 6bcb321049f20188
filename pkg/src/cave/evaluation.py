"""Segmentation metrics, the paired Wilcoxon signed-rank test, error maps and method reports."""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from scipy.stats import norm

from .data import AvMask, DsaSeries, PreprocessConfig, load_mask, load_series, preprocess, resize_mask

log = logging.getLogger(__name__)

METRICS = ("acc", "sens", "spec", "vessel_dice", "v_acc", "v_sens", "v_spec", "a_dice", "v_dice", "m_dice")
# Table layout: vessel block then artery-vein block
TABLE_COLUMNS = (
    ("Vessel", "Acc", "v_acc"),
    ("Vessel", "Sens", "v_sens"),
    ("Vessel", "Spec", "v_spec"),
    ("Vessel", "Dice", "vessel_dice"),
    ("Artery-vein", "Acc", "acc"),
    ("Artery-vein", "Sens", "sens"),
    ("Artery-vein", "Spec", "spec"),
    ("Artery-vein", "A-Dice", "a_dice"),
    ("Artery-vein", "V-Dice", "v_dice"),
    ("Artery-vein", "M-Dice", "m_dice"),
)

ORANGE = (255, 165, 0)
LIGHT_BLUE = (173, 216, 230)
WHITE = (255, 255, 255)
BLACK = (0, 0, 0)


def binarize(pred, threshold: float = 0.5) -> AvMask:
    """Per-channel ``p >= threshold``; ``pred`` is ``[2, H, W]`` (artery, vein)."""
    pred = np.asarray(pred)
    return AvMask(pred[0] >= threshold, pred[1] >= threshold)


class Confusion(NamedTuple):
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other):
        return Confusion(*(a + b for a, b in zip(self, other)))


def confusion(pred_ch, gt_ch) -> Confusion:
    p = np.asarray(pred_ch, bool)
    g = np.asarray(gt_ch, bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return Confusion(tp, fp, fn, p.size - tp - fp - fn)


def dice_from_counts(tp, fp, fn) -> float:
    """``2TP / (2TP + FP + FN)``; 1.0 when prediction and reference are both empty."""
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2.0 * tp / denom


def _ratio(num, den, empty=1.0):
    return empty if den == 0 else num / den


@dataclass
class SegScores:
    acc: float
    sens: float
    spec: float
    a_dice: float
    v_dice: float
    m_dice: float
    vessel_dice: float
    v_acc: float
    v_sens: float
    v_spec: float
    series_id: str = ""
    flags: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def av_scores(pred: AvMask, gt: AvMask, series_id: str = "") -> SegScores:
    """Dice family plus accuracy / sensitivity / specificity.

    Artery-vein acc/sens/spec pool both channels' confusion counts (micro
    average). The ``v_*`` metrics and ``vessel_dice`` score the channel union.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and reference {gt.shape} differ")
    ca = confusion(pred.artery, gt.artery)
    cv = confusion(pred.vein, gt.vein)
    cu = confusion(pred.vessel, gt.vessel)
    pooled = ca + cv
    flags = []
    if ca.tp + ca.fp + ca.fn == 0:
        flags.append("artery_empty_empty")
    if cv.tp + cv.fp + cv.fn == 0:
        flags.append("vein_empty_empty")
    total = pooled.tp + pooled.fp + pooled.fn + pooled.tn
    return SegScores(
        acc=(pooled.tp + pooled.tn) / total,
        sens=_ratio(pooled.tp, pooled.tp + pooled.fn),
        spec=_ratio(pooled.tn, pooled.tn + pooled.fp),
        a_dice=dice_from_counts(ca.tp, ca.fp, ca.fn),
        v_dice=dice_from_counts(cv.tp, cv.fp, cv.fn),
        m_dice=dice_from_counts(ca.tp + cv.tp, ca.fp + cv.fp, ca.fn + cv.fn),
        vessel_dice=dice_from_counts(cu.tp, cu.fp, cu.fn),
        v_acc=(cu.tp + cu.tn) / sum(cu),
        v_sens=_ratio(cu.tp, cu.tp + cu.fn),
        v_spec=_ratio(cu.tn, cu.tn + cu.fp),
        series_id=series_id,
        flags=flags,
    )


# --------------------------------------------------------------------------
# Wilcoxon signed-rank
# --------------------------------------------------------------------------


class WilcoxonResult(NamedTuple):
    statistic: float  # W+, sum of ranks of positive differences
    pvalue: float
    n: int  # non-zero differences used
    method: str  # "exact", "normal" or "degenerate"


EXACT_MAX_N = 25
MIN_N = 5


def _signed_rank_null(doubled_ranks: np.ndarray) -> np.ndarray:
    """Counts of each attainable doubled W+ over all 2^n sign patterns (subset-sum DP)."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks.astype(int):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_paired(x: Sequence[float], y: Sequence[float]) -> WilcoxonResult:
    """Two-sided paired Wilcoxon signed-rank test.

    Zero differences are dropped; ties get average ranks. The null
    distribution is exact (conditional on the tie pattern) for n <= 25 and a
    tie-corrected normal approximation above.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1D sequences of equal length")
    d = x - y
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "degenerate")
    if n < MIN_N:
        raise ValueError(f"need at least {MIN_N} non-zero differences, got {n}")

    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())

    if n <= EXACT_MAX_N:
        doubled = np.rint(2 * ranks).astype(int)
        counts = _signed_rank_null(doubled)
        probs = counts / counts.sum()
        w2 = int(round(2 * w_plus))
        lower = probs[: w2 + 1].sum()
        upper = probs[w2:].sum()
        p = min(1.0, 2.0 * min(lower, upper))
        return WilcoxonResult(w_plus, float(p), n, "exact")

    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts**3 - tie_counts).sum() / 48.0
    z = (w_plus - mean) / math.sqrt(var)
    p = min(1.0, 2.0 * norm.sf(abs(z)))
    return WilcoxonResult(w_plus, float(p), n, "normal")


def _average_ranks(a: np.ndarray) -> np.ndarray:
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(len(a), dtype=np.float64)
    sorted_a = a[order]
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and sorted_a[j + 1] == sorted_a[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


# --------------------------------------------------------------------------
# error maps
# --------------------------------------------------------------------------


def error_map(pred, gt, channel: str = "vessel") -> np.ndarray:
    """RGB error image: TP white, FP orange, FN light blue, TN black.

    ``pred``/``gt`` are AvMasks (``channel`` in vessel/artery/vein) or binary arrays.
    """
    p, g = _select(pred, channel), _select(gt, channel)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    rgb = np.zeros(p.shape + (3,), np.uint8)
    rgb[p & g] = WHITE
    rgb[p & ~g] = ORANGE
    rgb[~p & g] = LIGHT_BLUE
    return rgb


def _select(m, channel):
    if isinstance(m, AvMask):
        if channel == "vessel":
            return m.vessel
        if channel in ("artery", "vein"):
            return getattr(m, channel)
        raise ValueError(f"unknown channel {channel!r}")
    return np.asarray(m, bool)


def save_error_map(path, pred, gt, channel: str = "vessel") -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(error_map(pred, gt, channel), mode="RGB").save(path)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

Runner = Callable[[DsaSeries], AvMask]


@dataclass
class SegReport:
    per_series: Dict[str, List[SegScores]]
    summary: Dict[str, Dict[str, Tuple[float, float]]]  # method -> metric -> (mean, std)
    wilcoxon: Dict[str, Dict[str, dict]]  # "a vs b" -> metric -> result
    missing: Dict[str, List[str]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_series": {m: [s.to_dict() for s in v] for m, v in self.per_series.items()},
            "summary": {m: {k: {"mean": a, "std": b} for k, (a, b) in v.items()} for m, v in self.summary.items()},
            "wilcoxon": self.wilcoxon,
            "missing": self.missing,
        }

    def table(self) -> str:
        return format_table(self.summary)


def summarize(scores: Sequence[SegScores]) -> Dict[str, Tuple[float, float]]:
    out = {}
    for k in METRICS:
        vals = np.array([getattr(s, k) for s in scores], dtype=np.float64)
        std = float(vals.std(ddof=1)) if len(vals) >= 2 else float("nan")
        out[k] = (float(vals.mean()), std)
    return out


def format_table(summary: Mapping[str, Mapping[str, Tuple[float, float]]]) -> str:
    name_w = max([len("Method")] + [len(m) for m in summary])
    head1 = f"{'':{name_w}} | {'Vessel segmentation':^55} | {'Artery-vein segmentation':^83}"
    head2 = f"{'Method':{name_w}} | " + " ".join(f"{label:^13}" for _, label, _ in TABLE_COLUMNS[:4])
    head2 += " | " + " ".join(f"{label:^13}" for _, label, _ in TABLE_COLUMNS[4:])
    lines = [head1, head2, "-" * len(head2)]
    for method, stats in summary.items():
        cells = [f"{stats[key][0]:.3f}±{stats[key][1]:.3f}" for _, _, key in TABLE_COLUMNS]
        lines.append(f"{method:{name_w}} | " + " ".join(f"{c:^13}" for c in cells[:4]) + " | " + " ".join(f"{c:^13}" for c in cells[4:]))
    return "\n".join(lines)


def compare_methods(
    per_series: Mapping[str, Sequence[SegScores]], metrics=("m_dice", "vessel_dice")
) -> Dict[str, Dict[str, dict]]:
    out = {}
    for a, b in itertools.combinations(per_series, 2):
        sa = {s.series_id: s for s in per_series[a]}
        sb = {s.series_id: s for s in per_series[b]}
        common = sorted(set(sa) & set(sb))
        if len(common) < len(sa) or len(common) < len(sb):
            log.warning("%s vs %s: comparing %d shared series only", a, b, len(common))
        res = {}
        for m in metrics:
            x = [getattr(sa[i], m) for i in common]
            y = [getattr(sb[i], m) for i in common]
            try:
                r = wilcoxon_paired(x, y)
                res[m] = {"statistic": r.statistic, "p": r.pvalue, "n": r.n, "method": r.method}
            except ValueError as err:
                res[m] = {"statistic": None, "p": None, "n": len(common), "method": f"skipped: {err}"}
        out[f"{a} vs {b}"] = res
    return out


def evaluate_methods(
    manifest_path,
    runners: Mapping[str, Runner],
    pre: Optional[PreprocessConfig] = None,
    out_dir=None,
    split: str = "test",
    error_maps: bool = True,
) -> SegReport:
    """Score every runner on every test series and compare methods pairwise.

    Each runner receives the (optionally preprocessed) series and returns an
    AvMask at that resolution. Failing runs are logged and recorded as
    missing.
    """
    manifest_path = Path(manifest_path)
    with open(manifest_path) as f:
        manifest = json.load(f)
    entries = manifest.get(split) or []
    if not entries:
        raise ValueError(f"manifest split '{split}' is empty")

    per_series: Dict[str, List[SegScores]] = {name: [] for name in runners}
    missing: Dict[str, List[str]] = {name: [] for name in runners}
    for rel in entries:
        d = manifest_path.parent / rel
        series = load_series(d)
        gt = load_mask(d / "mask.png")
        if pre is not None:
            series = preprocess(series, pre)
            gt = resize_mask(gt, pre.target_size)
        for name, run in runners.items():
            try:
                pred = run(series)
            except Exception as err:  # a failing method must not sink the whole report
                log.warning("%s failed on %s: %s", name, series.series_id, err)
                missing[name].append(series.series_id)
                continue
            per_series[name].append(av_scores(pred, gt, series_id=series.series_id))
            if out_dir is not None and error_maps:
                base = Path(out_dir) / "errmaps" / f"{series.series_id}_{name}"
                save_error_map(f"{base}_vessel.png", pred, gt, "vessel")
                save_error_map(f"{base}_artery.png", pred, gt, "artery")
                save_error_map(f"{base}_vein.png", pred, gt, "vein")

    report = SegReport(
        per_series=per_series,
        summary={m: summarize(s) for m, s in per_series.items() if s},
        wilcoxon=compare_methods(per_series),
        missing=missing,
    )
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_report(report: SegReport, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    (out_dir / "table.txt").write_text(report.table() + "\n")
