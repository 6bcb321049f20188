"""Frangi vesselness + K-means TIC clustering baselines."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .data import AvMask, DsaSeries, Tic, extract_tics, min_intensity_projection

log = logging.getLogger(__name__)

ARTERY_LABEL, VEIN_LABEL = 0, 1
GAUSSIAN_TRUNCATE = 4.0


@dataclass
class FrangiParams:
    scales: Tuple[float, ...] = (1.0, 2.0, 4.0, 8.0)
    alpha: float = 0.5  # plate sensitivity; only meaningful in 3D, kept for parameter parity
    beta: float = 0.5  # blobness sensitivity
    c: Optional[float] = None  # structureness sensitivity; None = half the image's max structureness
    threshold: float = 0.15
    dark_ridges: bool = True

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError("scales must be a non-empty list of positive sigmas")
        if list(self.scales) != sorted(self.scales):
            raise ValueError("scales must be ascending")
        if self.alpha <= 0 or self.beta <= 0 or (self.c is not None and self.c <= 0):
            raise ValueError("alpha, beta and c must be positive")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        return d


@dataclass
class KmeansParams:
    k: int = 2
    max_iter: int = 100
    tol: float = 1e-6
    n_restarts: int = 5
    seed: int = 0
    normalize: bool = False  # scale each TIC to unit peak before clustering
    # single-phase guard: centroids closer than this in time-to-peak (frames), or a later
    # centroid whose contrast range is below min_contrast_ratio of the earlier one, mean
    # only one vascular phase opacified; everything is labelled artery
    min_ttp_gap: float = 2.0
    min_contrast_ratio: float = 0.1

    def __post_init__(self):
        if self.k != 2:
            raise ValueError("artery/vein clustering requires k = 2")
        if self.max_iter < 1 or self.n_restarts < 1:
            raise ValueError("max_iter and n_restarts must be >= 1")
        if self.min_ttp_gap < 0 or self.min_contrast_ratio < 0:
            raise ValueError("min_ttp_gap and min_contrast_ratio must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# Frangi
# --------------------------------------------------------------------------


def hessian_eigenvalues(image: np.ndarray, sigma: float):
    """Scale-normalized Hessian eigenvalues ``(l1, l2)`` with ``|l1| <= |l2|``."""
    kw = dict(sigma=sigma, mode="nearest", truncate=GAUSSIAN_TRUNCATE)
    hrr = ndimage.gaussian_filter(image, order=(2, 0), **kw) * sigma**2
    hcc = ndimage.gaussian_filter(image, order=(0, 2), **kw) * sigma**2
    hrc = ndimage.gaussian_filter(image, order=(1, 1), **kw) * sigma**2
    half_trace = 0.5 * (hrr + hcc)
    disc = np.sqrt(0.25 * (hrr - hcc) ** 2 + hrc**2)
    ea, eb = half_trace + disc, half_trace - disc
    swap = np.abs(ea) < np.abs(eb)
    l1 = np.where(swap, ea, eb)
    l2 = np.where(swap, eb, ea)
    return l1, l2


def frangi_vesselness(image: np.ndarray, params: Optional[FrangiParams] = None) -> np.ndarray:
    """Multiscale 2D Frangi response in [0, 1]; maximum over scales.

    Dark ridges (DSA vessels) require the large eigenvalue to be positive.
    """
    params = params or FrangiParams()
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a single-channel 2D image, got shape {image.shape}")
    support = 2 * int(math.ceil(GAUSSIAN_TRUNCATE * params.scales[-1])) + 1
    if min(image.shape) < support:
        raise ValueError(
            f"image {image.shape} smaller than the largest kernel support ({support} px)"
        )

    # truncated derivative kernels do not sum exactly to zero; centring keeps offsets out
    image = image - image.mean()
    eig = [hessian_eigenvalues(image, s) for s in params.scales]
    c = params.c
    if c is None:
        s_max = max(float(np.sqrt(l1**2 + l2**2).max()) for l1, l2 in eig)
        if s_max == 0.0:
            return np.zeros_like(image)
        c = 0.5 * s_max

    out = np.zeros_like(image)
    b2, c2 = 2 * params.beta**2, 2 * c**2
    for l1, l2 in eig:
        with np.errstate(divide="ignore", invalid="ignore"):
            rb = np.where(l2 != 0, l1 / l2, 0.0)
        s2 = l1**2 + l2**2
        v = np.exp(-(rb**2) / b2) * (1.0 - np.exp(-s2 / c2))
        wrong_sign = l2 <= 0 if params.dark_ridges else l2 >= 0
        v[wrong_sign] = 0.0
        np.maximum(out, v, out=out)
    return np.clip(out, 0.0, 1.0)


def threshold_vessels(vesselness: np.ndarray, threshold: float) -> np.ndarray:
    return np.asarray(vesselness) >= threshold


# --------------------------------------------------------------------------
# K-means on time-intensity curves
# --------------------------------------------------------------------------


@dataclass
class KmeansResult:
    labels: np.ndarray  # ARTERY_LABEL / VEIN_LABEL per TIC
    centroids: np.ndarray  # [2, T]; row 0 artery, row 1 vein
    inertia: float
    inertia_history: List[float] = field(default_factory=list)
    degenerate: bool = False
    single_phase: bool = False


def time_to_peak(curve: np.ndarray) -> float:
    """Index of the peak, ties broken by the curve's temporal centre of mass; inf for a flat curve."""
    curve = np.asarray(curve, dtype=np.float64)
    if np.ptp(curve) == 0:
        return math.inf
    peak = int(np.argmax(curve))
    mass = np.clip(curve, 0, None)
    com = float((mass * np.arange(len(curve))).sum() / mass.sum()) if mass.sum() > 0 else 0.0
    return peak + 1e-6 * com


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centres = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.array(centres)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total == 0:
            centres.append(x[rng.integers(len(x))])
        else:
            centres.append(x[rng.choice(len(x), p=d2 / total)])
    return np.array(centres)


def _sq_dist(x, centroids):
    return ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)


def lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int, tol: float):
    """Plain Lloyd iterations; returns (labels, centroids, inertia history)."""
    history = []
    for _ in range(max_iter):
        d = _sq_dist(x, centroids)
        labels = d.argmin(1)
        history.append(float(d[np.arange(len(x)), labels].sum()))
        new = centroids.copy()
        for j in range(len(centroids)):
            members = x[labels == j]
            if len(members):
                new[j] = members.mean(0)
        shift = float(np.abs(new - centroids).max())
        centroids = new
        if shift <= tol:
            break
    d = _sq_dist(x, centroids)
    labels = d.argmin(1)
    history.append(float(d[np.arange(len(x)), labels].sum()))
    return labels, centroids, history


def kmeans_tic(tics: Union[Sequence[Tic], np.ndarray], params: Optional[KmeansParams] = None) -> KmeansResult:
    """Two-cluster K-means on TIC vectors; the cluster whose centroid peaks first is artery."""
    params = params or KmeansParams()
    if isinstance(tics, np.ndarray):
        x = np.asarray(tics, dtype=np.float64)
    else:
        x = np.array([t.values for t in tics], dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("need at least 2 TICs of equal length")
    if params.normalize:
        peak = x.max(1, keepdims=True)
        x = np.where(peak > 0, x / np.where(peak > 0, peak, 1.0), x)

    if np.all(x == x[0]):
        log.warning("all TICs identical; labelling every pixel as artery")
        centroids = np.stack([x[0], x[0]])
        return KmeansResult(np.full(len(x), ARTERY_LABEL), centroids, 0.0, [0.0], degenerate=True)

    rng = np.random.default_rng(params.seed)
    best = None
    for _ in range(params.n_restarts):
        init = _kmeanspp(x, params.k, rng)
        labels, centroids, history = lloyd(x, init, params.max_iter, params.tol)
        if best is None or history[-1] < best[2][-1]:
            best = (labels, centroids, history)
    labels, centroids, history = best

    ttp = [time_to_peak(c) for c in centroids]
    artery_cluster = int(np.argmin(ttp))
    out_labels = np.where(labels == artery_cluster, ARTERY_LABEL, VEIN_LABEL)
    ordered = centroids[[artery_cluster, 1 - artery_cluster]]
    degenerate = len(np.unique(labels)) < 2
    if degenerate:
        log.warning("k-means collapsed to a single cluster")
    single_phase = (
        abs(ttp[1 - artery_cluster] - ttp[artery_cluster]) < params.min_ttp_gap
        or np.ptp(ordered[1]) < params.min_contrast_ratio * np.ptp(ordered[0])
    )
    if single_phase and not degenerate:
        log.warning("no separate venous phase found; labelling every pixel as artery")
        out_labels = np.full(len(x), ARTERY_LABEL)
    return KmeansResult(out_labels, ordered, history[-1], history, degenerate=degenerate, single_phase=single_phase)


# --------------------------------------------------------------------------
# pipelines
# --------------------------------------------------------------------------


@dataclass
class PipelineResult:
    mask: AvMask
    vessel_mask: np.ndarray
    vesselness: Optional[np.ndarray] = None
    kmeans: Optional[KmeansResult] = None
    warnings: List[str] = field(default_factory=list)


def cascade_kmeans(vessel_mask: np.ndarray, series: DsaSeries, kp: Optional[KmeansParams] = None) -> PipelineResult:
    """Split an externally supplied vessel mask into arteries and veins by TIC clustering."""
    vessel_mask = np.asarray(vessel_mask, bool)
    if vessel_mask.shape != series.shape:
        raise ValueError(f"vessel mask {vessel_mask.shape} not aligned with series {series.shape}")
    out = AvMask.empty(series.shape)
    n = int(vessel_mask.sum())
    if n == 0:
        log.warning("empty vessel mask; returning empty AvMask")
        return PipelineResult(out, vessel_mask, warnings=["empty_vessel_mask"])
    curves, coords = extract_tics(series, vessel_mask)
    if n == 1:
        out.artery[coords[0, 0], coords[0, 1]] = True
        return PipelineResult(out, vessel_mask, warnings=["single_vessel_pixel"])
    result = kmeans_tic(curves, kp)
    art = coords[result.labels == ARTERY_LABEL]
    vei = coords[result.labels == VEIN_LABEL]
    out.artery[art[:, 0], art[:, 1]] = True
    out.vein[vei[:, 0], vei[:, 1]] = True
    warnings = ["degenerate_clustering"] if result.degenerate else []
    if result.single_phase:
        warnings.append("single_phase")
    return PipelineResult(out, vessel_mask, kmeans=result, warnings=warnings)


def frangi_kmeans_pipeline(
    series: DsaSeries, fp: Optional[FrangiParams] = None, kp: Optional[KmeansParams] = None
) -> PipelineResult:
    """MinIP -> Frangi -> fixed threshold -> TIC K-means. Channels are disjoint by construction."""
    fp = fp or FrangiParams()
    minip = min_intensity_projection(series)
    vesselness = frangi_vesselness(minip, fp)
    vessel = threshold_vessels(vesselness, fp.threshold)
    result = cascade_kmeans(vessel, series, kp)
    result.vesselness = vesselness
    return result


def tune_frangi_threshold(
    series_list: Sequence[DsaSeries],
    vessel_masks: Sequence[np.ndarray],
    fp: Optional[FrangiParams] = None,
    candidates: Optional[Sequence[float]] = None,
) -> float:
    """Threshold maximizing mean vessel Dice over a validation set."""
    fp = fp or FrangiParams()
    if candidates is None:
        candidates = np.round(np.arange(0.01, 1.0, 0.01), 2)
    responses = [frangi_vesselness(min_intensity_projection(s), fp) for s in series_list]
    best_t, best_score = None, -1.0
    for t in candidates:
        scores = []
        for v, gt in zip(responses, vessel_masks):
            pred = v >= t
            gt = np.asarray(gt, bool)
            denom = pred.sum() + gt.sum()
            scores.append(1.0 if denom == 0 else 2.0 * (pred & gt).sum() / denom)
        score = float(np.mean(scores))
        if score > best_score:
            best_t, best_score = float(t), score
    return best_t
