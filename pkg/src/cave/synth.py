"""Synthetic DSA series with ground-truth artery/vein masks.

Arteries and veins are random binary branching trees drawn as tapered tubes.
Contrast at a vessel pixel follows a gamma-variate bolus whose arrival is
delayed by the pixel's path length from the tree root; veins get an extra
``vein_delay``. Static curved strokes mimic subtraction artifacts (skull edges,
instruments) and per-frame Gaussian noise is added on top.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .data import AvMask, DsaSeries, View, save_mask, save_series

GAMMA_SHAPE = 3.0
NOISE_SD = 20.0  # grey levels at artifact_level = 1
ARTERY, VEIN = "artery", "vein"


@dataclass
class SynthConfig:
    size: Tuple[int, int] = (128, 128)
    n_frames: int = 14
    fps: float = 1.0
    n_artery_branches: int = 9
    n_vein_branches: int = 7
    artery_arrival: float = 1.5  # s
    vein_delay: float = 4.0  # s, venous arrival offset
    bolus_width: float = 2.0  # s, arrival-to-peak time of the gamma variate
    artifact_level: float = 0.0
    overlap_fraction: float = 0.05
    flow_velocity: float = 0.6  # image heights per second along the centerline
    artery_radius: float = 2.6  # root radius at 128 px; scaled with image size
    vein_radius: float = 3.2
    peak_contrast: float = 150.0
    seed: int = 0

    def __post_init__(self):
        self.size = tuple(int(s) for s in self.size)
        if self.vein_delay <= 0:
            raise ValueError("vein_delay must be > 0")
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")
        if self.n_artery_branches < 1 or self.n_vein_branches < 1:
            raise ValueError("branch counts must be >= 1")
        if not 0.0 <= self.artifact_level <= 1.0:
            raise ValueError("artifact_level must lie in [0, 1]")
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise ValueError("overlap_fraction must lie in [0, 1]")
        if self.fps <= 0 or self.bolus_width <= 0 or self.flow_velocity <= 0:
            raise ValueError("fps, bolus_width and flow_velocity must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size"] = list(self.size)
        return d


@dataclass
class Segment:
    points: np.ndarray  # [N, 2] (row, col) samples, 0.5 px spacing
    radii: np.ndarray  # [N]
    arclength: np.ndarray  # [N] path length from the tree root
    parent: Optional[int]
    n_children: int = 0
    first_turn: float = 0.0  # sign of the first child's turn


@dataclass
class VesselTree:
    kind: str
    segments: List[Segment]
    mask: np.ndarray  # bool [H, W]
    radius: np.ndarray  # local vessel radius, 0 outside
    path_length: np.ndarray  # geodesic length from root along the centerline, inf outside
    chord: np.ndarray  # projected tube thickness through the pixel, 0 outside

    @property
    def root(self) -> Tuple[int, int]:
        r, c = self.segments[0].points[0]
        return int(round(r)), int(round(c))

    @property
    def centerlines(self) -> List[np.ndarray]:
        return [s.points for s in self.segments]


def _walk_segment(rng, start, angle, length, r0, r1, s0, shape, margin, avoid=None) -> Tuple[Segment, float]:
    """Curved polyline from ``start``; stops early at the image margin or on entering ``avoid``."""
    step = 0.5
    n = max(int(length / step), 2)
    pts, radii = [np.asarray(start, float)], [r0]
    curvature = rng.normal(0.0, 0.012)
    h, w = shape
    for i in range(1, n):
        curvature += rng.normal(0.0, 0.004)
        curvature = float(np.clip(curvature, -0.03, 0.03))
        angle += curvature
        p = pts[-1] + step * np.array([-math.cos(angle), math.sin(angle)])
        if not (margin <= p[0] <= h - 1 - margin and margin <= p[1] <= w - 1 - margin):
            break
        if avoid is not None and avoid[int(round(p[0])), int(round(p[1]))]:
            break
        pts.append(p)
        radii.append(r0 + (r1 - r0) * i / (n - 1))
    pts = np.array(pts)
    arclength = s0 + step * np.arange(len(pts))
    return Segment(points=pts, radii=np.array(radii), arclength=arclength, parent=None), angle


def _rasterize(segments: Sequence[Segment], shape):
    h, w = shape
    chord = np.zeros(shape)
    radius = np.zeros(shape)
    path = np.full(shape, np.inf)
    best_d = np.full(shape, np.inf)
    for seg in segments:
        for (pr, pc), r, s in zip(seg.points, seg.radii, seg.arclength):
            r0, r1 = max(int(math.floor(pr - r)), 0), min(int(math.ceil(pr + r)) + 1, h)
            c0, c1 = max(int(math.floor(pc - r)), 0), min(int(math.ceil(pc + r)) + 1, w)
            if r0 >= r1 or c0 >= c1:
                continue
            rr, cc = np.mgrid[r0:r1, c0:c1]
            d2 = (rr - pr) ** 2 + (cc - pc) ** 2
            inside = d2 <= r * r
            if not inside.any():
                continue
            ch = 2.0 * np.sqrt(np.maximum(r * r - d2, 0.0))
            win = (slice(r0, r1), slice(c0, c1))
            np.maximum(chord[win], np.where(inside, ch, 0.0), out=chord[win])
            closer = inside & (d2 < best_d[win])
            best_d[win] = np.where(closer, d2, best_d[win])
            path[win] = np.where(closer, s, path[win])
            radius[win] = np.where(closer, r, radius[win])
    mask = np.isfinite(path)
    return mask, radius, path, chord


def generate_tree(kind: str, cfg: SynthConfig, seed, avoid: Optional[np.ndarray] = None) -> VesselTree:
    """Random binary branching tree rasterized as tapered tubes.

    Arteries enter from the bottom edge and grow upward; veins drain into a
    root at the top edge and grow downward. Segments stop where they would
    enter ``avoid`` (used to keep veins from crossing the artery corridor).
    """
    if kind not in (ARTERY, VEIN):
        raise ValueError(f"kind must be 'artery' or 'vein', got {kind!r}")
    rng = np.random.default_rng(seed)
    h, w = cfg.size
    px = h / 128.0
    margin = 2.0 * px
    n_branches = cfg.n_artery_branches if kind == ARTERY else cfg.n_vein_branches
    r_root = (cfg.artery_radius if kind == ARTERY else cfg.vein_radius) * px
    r_min = 1.3 * px

    if kind == ARTERY:
        # roots sit on pixel centres so the root pixel has path length exactly 0
        start = (round(h - 1 - margin), round(rng.uniform(0.3, 0.7) * (w - 1)))
        angle = rng.normal(0.0, 0.15)  # pointing up
        root_len = rng.uniform(0.3, 0.45) * h
        seg, end_angle = _walk_segment(rng, start, angle, root_len, r_root, 0.85 * r_root, 0.0, (h, w), margin)
    else:
        # with an avoid region, keep the longest of several root attempts
        seg = None
        for _ in range(1 if avoid is None else 20):
            lo, hi = (0.15, 0.85) if avoid is not None else (0.3, 0.7)
            start = (round(margin), round(rng.uniform(lo, hi) * (w - 1)))
            angle = math.pi + rng.normal(0.0, 0.15)  # pointing down
            root_len = rng.uniform(0.3, 0.45) * h
            cand, cand_angle = _walk_segment(
                rng, start, angle, root_len, r_root, 0.85 * r_root, 0.0, (h, w), margin, avoid
            )
            if seg is None or len(cand.points) > len(seg.points):
                seg, end_angle = cand, cand_angle
    segments = [seg]
    end_angles = [end_angle]
    generation = [0]

    attempts = 0
    while len(segments) < n_branches and attempts < 50 * n_branches:
        attempts += 1
        # breadth-first preference: youngest generation with a free slot
        free = [i for i, s in enumerate(segments) if s.n_children < 2 and len(s.points) >= 4]
        if not free:
            break
        gmin = min(generation[i] for i in free)
        candidates = [i for i in free if generation[i] <= gmin + 1]
        pi = int(rng.choice(candidates))
        parent = segments[pi]
        # second child turns the other way
        sign = -parent.first_turn if parent.n_children == 1 else (-1.0 if rng.random() < 0.5 else 1.0)
        turn = sign * rng.uniform(math.radians(20), math.radians(50))
        r_start = max(parent.radii[-1] * 0.8, r_min)
        length = rng.uniform(0.18, 0.32) * h * (0.85 ** generation[pi])
        child, child_end = _walk_segment(
            rng, parent.points[-1], end_angles[pi] + turn, length,
            r_start, max(0.85 * r_start, r_min), parent.arclength[-1], (h, w), margin, avoid,
        )
        if len(child.points) < 4:
            continue
        if parent.n_children == 0:
            parent.first_turn = sign
        parent.n_children += 1
        child.parent = pi
        segments.append(child)
        end_angles.append(child_end)
        generation.append(generation[pi] + 1)

    mask, radius, path, chord = _rasterize(segments, (h, w))
    return VesselTree(kind=kind, segments=segments, mask=mask, radius=radius, path_length=path, chord=chord)


def gamma_variate(t, arrival, bolus_width, shape: float = GAMMA_SHAPE):
    """Gamma-variate bolus with unit peak at ``arrival + bolus_width``; zero before arrival."""
    x = (np.asarray(t, dtype=np.float64) - arrival) / bolus_width
    xp = np.maximum(x, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(x > 0, xp**shape * np.exp(shape * (1.0 - xp)), 0.0)
    return out


def _prefix(seg: Segment, n: int) -> Segment:
    return replace(seg, points=seg.points[:n], radii=seg.radii[:n], arclength=seg.arclength[:n])


def _companion_veins(rng, artery: VesselTree, vein: VesselTree, cfg: SynthConfig):
    """Vein segments co-projected onto artery segments until the overlap target is met."""
    if cfg.overlap_fraction <= 0:
        return vein
    px = cfg.size[0] / 128.0
    segments = list(vein.segments)
    order = rng.permutation(len(artery.segments))
    mask, radius, path, chord = vein.mask, vein.radius, vein.path_length, vein.chord
    for ai in order:
        overlap = (mask & artery.mask).sum() / max(mask.sum(), 1)
        if overlap >= cfg.overlap_fraction:
            break
        a = artery.segments[ai]
        n = len(a.points)
        take = max(int(n * rng.uniform(0.3, 0.7)), 4)
        lo = int(rng.integers(0, max(n - take, 1)))
        pts = a.points[lo : lo + take] + rng.normal(0, 0.3 * px, size=2)
        comp = Segment(
            points=pts,
            radii=np.full(len(pts), max(a.radii[lo], 0.9 * px)),
            # drains toward the sinus: later (longer path) further from the artery root
            arclength=a.arclength[lo : lo + take].copy(),
            parent=None,
        )
        # trim the companion so the overlap lands on the target instead of overshooting
        lo_n, hi_n = 2, len(pts)
        while lo_n < hi_n:
            mid = (lo_n + hi_n) // 2
            trial = _rasterize(segments + [_prefix(comp, mid)], cfg.size)[0]
            if (trial & artery.mask).sum() / max(trial.sum(), 1) >= cfg.overlap_fraction:
                hi_n = mid
            else:
                lo_n = mid + 1
        segments.append(_prefix(comp, lo_n))
        mask, radius, path, chord = _rasterize(segments, cfg.size)
    return replace(vein, segments=segments, mask=mask, radius=radius, path_length=path, chord=chord)


def _artifact_layer(rng, cfg: SynthConfig) -> np.ndarray:
    """Static darkening from curved vessel-like strokes."""
    h, w = cfg.size
    layer = np.zeros((h, w))
    n = int(round(cfg.artifact_level * 8))
    if n == 0:
        return layer
    px = h / 128.0
    rr, cc = np.mgrid[0:h, 0:w]
    for _ in range(n):
        R = rng.uniform(0.35, 0.9) * h
        theta0 = rng.uniform(0, 2 * math.pi)
        centre = np.array([h / 2, w / 2]) + R * np.array([math.sin(theta0), math.cos(theta0)]) * rng.uniform(0.6, 1.2)
        half_width = rng.uniform(1.2, 2.8) * px
        dist = np.abs(np.hypot(rr - centre[0], cc - centre[1]) - R)
        ang = np.arctan2(rr - centre[0], cc - centre[1])
        span = rng.uniform(0.25, 0.7)
        mid = math.atan2(h / 2 - centre[0], w / 2 - centre[1]) + rng.normal(0, 0.3)
        dang = np.angle(np.exp(1j * (ang - mid)))
        on = (dist <= half_width) & (np.abs(dang) <= span)
        depth = cfg.peak_contrast * rng.uniform(0.5, 0.9) * (0.4 + 0.6 * cfg.artifact_level)
        profile = 0.5 + 0.5 * np.sqrt(np.clip(1 - (dist / half_width) ** 2, 0, 1))
        layer = np.maximum(layer, np.where(on, depth * profile, 0.0))
    return layer


@dataclass
class RenderedSeries:
    series: DsaSeries
    mask: AvMask
    artery: VesselTree
    vein: VesselTree


def render(cfg: SynthConfig, series_id: str = "synth", patient_id: str = "synth") -> RenderedSeries:
    rng = np.random.default_rng(cfg.seed)
    tree_seeds = rng.integers(0, 2**63 - 1, size=3)
    artery = generate_tree(ARTERY, cfg, int(tree_seeds[0]))
    # veins grow around the artery corridor; overlap comes only from companion segments
    clearance = (cfg.vein_radius + 1.5) * cfg.size[0] / 128.0
    corridor = ndimage.distance_transform_edt(~artery.mask) <= clearance
    vein = generate_tree(VEIN, cfg, int(tree_seeds[1]), avoid=corridor)
    vein = _companion_veins(np.random.default_rng(int(tree_seeds[2])), artery, vein, cfg)

    h = cfg.size[0]
    velocity = cfg.flow_velocity * h  # px / s
    t = np.arange(cfg.n_frames) / cfg.fps
    concentration = np.zeros((cfg.n_frames,) + tuple(cfg.size))
    for tree, arrival0 in ((artery, cfg.artery_arrival), (vein, cfg.artery_arrival + cfg.vein_delay)):
        idx = np.nonzero(tree.mask)
        arrival = arrival0 + tree.path_length[idx] / velocity
        amp = cfg.peak_contrast * (0.5 + 0.5 * tree.chord[idx] / np.maximum(2 * tree.radius[idx], 1e-9))
        curves = gamma_variate(t[:, None], arrival[None, :], cfg.bolus_width)
        concentration[:, idx[0], idx[1]] += amp[None, :] * curves

    frames = 255.0 - concentration - _artifact_layer(rng, cfg)[None]
    if cfg.artifact_level > 0:
        frames = frames + rng.normal(0.0, NOISE_SD * cfg.artifact_level, size=frames.shape)
    frames = np.clip(frames, 0.0, 255.0)

    series = DsaSeries(
        frames=frames, fps=cfg.fps, view=View.UNKNOWN, series_id=series_id, patient_id=patient_id
    )
    return RenderedSeries(series=series, mask=AvMask(artery.mask, vein.mask), artery=artery, vein=vein)


def render_series(cfg: SynthConfig) -> Tuple[DsaSeries, AvMask]:
    out = render(cfg)
    return out.series, out.mask


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


def split_counts(n: int, ratios: Sequence[float]) -> List[int]:
    """Largest-remainder apportionment of ``n`` items to ``ratios``."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if np.any(ratios < 0) or not math.isclose(ratios.sum(), 1.0, abs_tol=1e-6):
        raise ValueError(f"split ratios must be non-negative and sum to 1, got {ratios.tolist()}")
    raw = n * ratios
    counts = np.floor(raw + 1e-9).astype(int)
    remainder = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:remainder]] += 1
    return counts.tolist()


def jitter_config(template: SynthConfig, rng: np.random.Generator) -> SynthConfig:
    return replace(
        template,
        artery_arrival=max(0.0, template.artery_arrival + rng.uniform(-0.5, 0.5)),
        vein_delay=template.vein_delay * rng.uniform(0.85, 1.15),
        bolus_width=template.bolus_width * rng.uniform(0.85, 1.15),
        n_artery_branches=max(1, template.n_artery_branches + int(rng.integers(-1, 2))),
        n_vein_branches=max(1, template.n_vein_branches + int(rng.integers(-1, 2))),
        seed=int(rng.integers(0, 2**31 - 1)),
    )


SPLITS = ("train", "val", "test")


def generate_dataset(
    template: SynthConfig,
    n_series: int,
    split_ratios: Sequence[float] = (0.5, 0.2, 0.3),
    seed: int = 0,
    out_dir=None,
) -> Dict:
    """Render ``n_series`` jittered series, one synthetic patient each, and split by patient.

    With ``out_dir`` set, every series is written as ``<out_dir>/<series_id>/``
    (frames, ``meta.json`` and ``mask.png``) and ``manifest.json`` lists the
    series directories relative to ``out_dir``.
    """
    counts = split_counts(n_series, split_ratios)
    rng = np.random.default_rng(seed)
    configs = [jitter_config(template, rng) for _ in range(n_series)]
    patients = [f"P{i:04d}" for i in range(n_series)]
    order = rng.permutation(n_series)

    manifest = {name: [] for name in SPLITS}
    start = 0
    assignment = {}
    for name, count in zip(SPLITS, counts):
        for i in order[start : start + count]:
            assignment[int(i)] = name
        start += count

    for i, cfg in enumerate(configs):
        sid = f"S{i:04d}"
        manifest[assignment[i]].append(sid)
        if out_dir is not None:
            out = render(cfg, series_id=sid, patient_id=patients[i])
            d = Path(out_dir) / sid
            save_series(out.series, d)
            save_mask(out.mask, d / "mask.png")
    for name in SPLITS:
        manifest[name].sort()
    manifest["patients"] = {f"S{i:04d}": patients[i] for i in range(n_series)}
    manifest["seed"] = seed
    manifest["template"] = template.to_dict()

    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(out_dir) / "manifest.json", "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def manifest_paths(manifest_path, split: str) -> List[Path]:
    manifest_path = Path(manifest_path)
    with open(manifest_path) as f:
        manifest = json.load(f)
    return [manifest_path.parent / p for p in manifest[split]]
