"""DSA series / artery-vein mask containers, preprocessing and augmentation.

A series lives on disk as a directory of 8-bit grayscale ``frame_%04d.png``
files plus a ``meta.json`` sidecar. A mask is one RGB PNG with arteries in the
red channel and veins in the blue channel (overlap renders purple).
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage


class DsaFormatError(ValueError):
    """On-disk container does not follow the expected layout."""


class DsaValidationError(ValueError):
    """Array contents violate a container invariant."""


class EmptySeriesError(DsaValidationError):
    pass


class View(str, Enum):
    AP = "AP"
    LATERAL = "LATERAL"
    UNKNOWN = "UNKNOWN"


FRAME_PATTERN = re.compile(r"^frame_(\d{4,})\.png$")


@dataclass
class DsaSeries:
    """A 2D+t grayscale frame stack ``[T, H, W]`` with temporal metadata."""

    frames: np.ndarray
    fps: float
    view: View = View.UNKNOWN
    series_id: str = ""
    patient_id: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 3:
            raise DsaValidationError(f"frames must be [T, H, W], got shape {frames.shape}")
        if frames.shape[0] == 0:
            raise EmptySeriesError("series has no frames")
        if not self.fps > 0:
            raise DsaValidationError(f"fps must be positive, got {self.fps}")
        self.frames = frames
        self.view = View(self.view)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_frames) / self.fps

    @property
    def duration(self) -> float:
        return (self.n_frames - 1) / self.fps


@dataclass
class AvMask:
    """Independent binary artery and vein channels; a pixel may carry both."""

    artery: np.ndarray
    vein: np.ndarray

    def __post_init__(self):
        self.artery = np.asarray(self.artery).astype(bool)
        self.vein = np.asarray(self.vein).astype(bool)
        if self.artery.ndim != 2 or self.artery.shape != self.vein.shape:
            raise DsaValidationError(
                f"artery/vein channels must be equal-shape 2D arrays, "
                f"got {self.artery.shape} and {self.vein.shape}"
            )

    @property
    def shape(self) -> Tuple[int, int]:
        return self.artery.shape

    @property
    def vessel(self) -> np.ndarray:
        return self.artery | self.vein

    def stack(self) -> np.ndarray:
        """``[2, H, W]`` float array, channel 0 artery, channel 1 vein."""
        return np.stack([self.artery, self.vein]).astype(np.float64)

    @classmethod
    def empty(cls, shape) -> "AvMask":
        return cls(np.zeros(shape, bool), np.zeros(shape, bool))


@dataclass
class Tic:
    """Time-intensity curve of one pixel, as inverted intensity (contrast proxy)."""

    values: np.ndarray
    location: Tuple[int, int]


@dataclass
class PreprocessConfig:
    target_size: Tuple[int, int] = (512, 512)
    target_fps: float = 1.0
    intensity_range: Tuple[float, float] = (0.0, 255.0)

    def __post_init__(self):
        self.target_size = tuple(int(s) for s in self.target_size)
        if len(self.target_size) != 2 or min(self.target_size) <= 0:
            raise ValueError(f"target_size must be two positive ints, got {self.target_size}")
        if not self.target_fps > 0:
            raise ValueError(f"target_fps must be positive, got {self.target_fps}")
        lo, hi = self.intensity_range
        if not hi > lo:
            raise ValueError("intensity_range must be increasing")


# --------------------------------------------------------------------------
# container I/O
# --------------------------------------------------------------------------


def load_series(path) -> DsaSeries:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.is_file():
        raise DsaFormatError(f"{path}: missing meta.json")
    with open(meta_path) as f:
        meta = json.load(f)
    if "fps" not in meta:
        raise DsaFormatError(f"{meta_path}: missing 'fps'")

    frame_files = sorted(
        (p for p in path.iterdir() if FRAME_PATTERN.match(p.name)),
        key=lambda p: int(FRAME_PATTERN.match(p.name).group(1)),
    )
    if not frame_files:
        raise EmptySeriesError(f"{path}: no frame_XXXX.png files")

    frames = []
    for p in frame_files:
        with Image.open(p) as im:
            if im.mode not in ("L", "I;16", "I", "P"):
                im = im.convert("L")
            arr = np.asarray(im)
        if frames and arr.shape != frames[0].shape:
            raise DsaValidationError(
                f"{p.name}: frame size {arr.shape} differs from {frames[0].shape}"
            )
        frames.append(arr)

    return DsaSeries(
        frames=np.stack(frames),
        fps=float(meta["fps"]),
        view=View(meta.get("view") or "UNKNOWN"),
        series_id=str(meta.get("series_id", path.name)),
        patient_id=str(meta.get("patient_id", "")),
    )


def to_uint8(frames: np.ndarray) -> np.ndarray:
    if frames.dtype == np.uint8:
        return frames
    return np.clip(np.rint(frames), 0, 255).astype(np.uint8)


def save_series(series: DsaSeries, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    frames = to_uint8(series.frames)
    for t, frame in enumerate(frames):
        Image.fromarray(frame, mode="L").save(path / f"frame_{t:04d}.png")
    meta = {
        "fps": float(series.fps),
        "view": series.view.value,
        "series_id": series.series_id,
        "patient_id": series.patient_id,
    }
    with open(path / "meta.json", "w") as f:
        json.dump(meta, f, indent=2)


def load_mask(path) -> AvMask:
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise DsaFormatError(f"{path}: mask must be an RGB image, got mode {im.mode}")
        rgb = np.asarray(im)
    return AvMask(artery=rgb[..., 0] >= 128, vein=rgb[..., 2] >= 128)


def encode_mask(mask: AvMask) -> np.ndarray:
    """RGB rendering: red = artery, blue = vein, green always 0."""
    rgb = np.zeros(mask.shape + (3,), np.uint8)
    rgb[..., 0] = mask.artery * 255
    rgb[..., 2] = mask.vein * 255
    return rgb


def save_mask(mask: AvMask, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(encode_mask(mask), mode="RGB").save(path)


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------


def _source_coords(n_out: int, n_in: int) -> np.ndarray:
    # pixel-centre alignment; identity when n_out == n_in
    scale = n_in / n_out
    return np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0, n_in - 1)


def resize_bilinear(image: np.ndarray, size: Sequence[int]) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    h, w = size
    if image.shape == (h, w):
        return image.copy()
    rows = _source_coords(h, image.shape[0])
    cols = _source_coords(w, image.shape[1])
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(image, [rr, cc], order=1, mode="nearest")


def resize_nearest(image: np.ndarray, size: Sequence[int]) -> np.ndarray:
    image = np.asarray(image)
    h, w = size
    rows = np.minimum(np.floor((np.arange(h) + 0.5) * image.shape[0] / h), image.shape[0] - 1)
    cols = np.minimum(np.floor((np.arange(w) + 0.5) * image.shape[1] / w), image.shape[1] - 1)
    return image[rows.astype(int)[:, None], cols.astype(int)[None, :]]


def resize_mask(mask: AvMask, size) -> AvMask:
    return AvMask(resize_nearest(mask.artery, size), resize_nearest(mask.vein, size))


def temporal_grid(n_frames: int, fps: float, target_fps: float) -> np.ndarray:
    """Uniform sample times from t=0 with spacing 1/target_fps, not past the last frame."""
    duration = (n_frames - 1) / fps
    n_out = int(math.floor(duration * target_fps + 1e-9)) + 1
    return np.arange(n_out) / target_fps


def resample_time(frames: np.ndarray, fps: float, target_fps: float) -> np.ndarray:
    n = frames.shape[0]
    if n == 1:
        return frames.astype(np.float64, copy=True)
    t_out = temporal_grid(n, fps, target_fps)
    pos = np.clip(t_out * fps, 0, n - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    w = (pos - lo)[:, None, None]
    frames = frames.astype(np.float64)
    return (1.0 - w) * frames[lo] + w * frames[hi]


def normalize_intensity(frames: np.ndarray, intensity_range=(0.0, 255.0)) -> np.ndarray:
    """Per-series min-max onto ``intensity_range``; a constant series maps to the lower bound."""
    lo, hi = intensity_range
    fmin, fmax = float(frames.min()), float(frames.max())
    if fmax == fmin:
        return np.full(frames.shape, lo, dtype=np.float64)
    return lo + (frames - fmin) / (fmax - fmin) * (hi - lo)


def preprocess(series: DsaSeries, cfg: Optional[PreprocessConfig] = None) -> DsaSeries:
    cfg = cfg or PreprocessConfig()
    frames = np.stack([resize_bilinear(f, cfg.target_size) for f in series.frames])
    frames = resample_time(frames, series.fps, cfg.target_fps)
    frames = normalize_intensity(frames, cfg.intensity_range)
    return replace(series, frames=frames, fps=float(cfg.target_fps))


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------


@dataclass
class AugmentParams:
    """Drawn augmentation; ``None`` means the transform did not fire."""

    hflip: bool = False
    translate: Optional[Tuple[float, float]] = None  # (dy, dx) as fractions of H, W
    scale: Optional[float] = None  # multiplicative zoom factor
    rotate: Optional[float] = None  # degrees

    @property
    def is_identity(self) -> bool:
        return not self.hflip and self.translate is None and self.scale is None and self.rotate is None

    @property
    def has_warp(self) -> bool:
        return self.translate is not None or self.scale is not None or self.rotate is not None


def sample_augment_params(
    rng: np.random.Generator,
    p: float = 0.5,
    max_translate: float = 0.05,
    max_scale: float = 0.05,
    max_rotate: float = 10.0,
) -> AugmentParams:
    # every transform draws its parameter regardless of firing, so the random
    # stream is independent of which transforms fire
    fire = rng.random(4) < p
    translate = tuple(rng.uniform(-max_translate, max_translate, size=2))
    scale = 1.0 + rng.uniform(-max_scale, max_scale)
    rotate = rng.uniform(-max_rotate, max_rotate)
    return AugmentParams(
        hflip=bool(fire[0]),
        translate=translate if fire[1] else None,
        scale=scale if fire[2] else None,
        rotate=rotate if fire[3] else None,
    )


def warp_matrix(params: AugmentParams, shape) -> Tuple[np.ndarray, np.ndarray]:
    """Output->input affine map (matrix, offset) in (row, col) coordinates.

    The forward transform scales and rotates about the image centre, then
    translates.
    """
    h, w = shape
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    s = params.scale if params.scale is not None else 1.0
    theta = math.radians(params.rotate) if params.rotate is not None else 0.0
    dy, dx = params.translate if params.translate is not None else (0.0, 0.0)
    shift = np.array([dy * h, dx * w])
    c, sn = math.cos(theta), math.sin(theta)
    forward = s * np.array([[c, -sn], [sn, c]])
    inverse = np.linalg.inv(forward)
    # out = F (in - centre) + centre + shift  =>  in = F^-1 (out - centre - shift) + centre
    offset = centre - inverse @ (centre + shift)
    return inverse, offset


def _warp(image: np.ndarray, params: AugmentParams, order: int, mode: str) -> np.ndarray:
    matrix, offset = warp_matrix(params, image.shape)
    return ndimage.affine_transform(image, matrix, offset=offset, order=order, mode=mode)


def apply_augment(series: DsaSeries, mask: AvMask, params: AugmentParams) -> Tuple[DsaSeries, AvMask]:
    frames = np.asarray(series.frames)
    artery, vein = mask.artery, mask.vein
    if params.is_identity:
        return replace(series, frames=frames.copy()), AvMask(artery.copy(), vein.copy())
    if params.hflip:
        frames = frames[:, :, ::-1]
        artery, vein = artery[:, ::-1], vein[:, ::-1]
    if params.has_warp:
        dtype = frames.dtype
        frames = np.stack([_warp(f.astype(np.float64), params, 1, "nearest") for f in frames])
        if dtype == np.uint8:
            frames = to_uint8(frames)
        artery = _warp(artery.astype(np.uint8), params, 0, "grid-constant").astype(bool)
        vein = _warp(vein.astype(np.uint8), params, 0, "grid-constant").astype(bool)
    return (
        replace(series, frames=np.ascontiguousarray(frames)),
        AvMask(np.ascontiguousarray(artery), np.ascontiguousarray(vein)),
    )


def augment(series: DsaSeries, mask: AvMask, seed) -> Tuple[DsaSeries, AvMask]:
    """Random flip / translate / scale / rotate, each with p=0.5, shared by frames and mask."""
    if series.shape != mask.shape:
        raise DsaValidationError(f"series {series.shape} and mask {mask.shape} not aligned")
    params = sample_augment_params(np.random.default_rng(seed))
    return apply_augment(series, mask, params)


# --------------------------------------------------------------------------
# derived views
# --------------------------------------------------------------------------


def min_intensity_projection(series: DsaSeries) -> np.ndarray:
    return np.asarray(series.frames).min(axis=0)


def extract_tic(series: DsaSeries, location) -> Tic:
    row, col = location
    h, w = series.shape
    if not (0 <= row < h and 0 <= col < w):
        raise IndexError(f"location {location} outside image of shape {(h, w)}")
    trace = np.asarray(series.frames[:, row, col], dtype=np.float64)
    return Tic(values=255.0 - trace, location=(int(row), int(col)))


def extract_tics(series: DsaSeries, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """All TICs under a binary mask: ``([N, T] curves, [N, 2] row/col coordinates)``."""
    coords = np.argwhere(np.asarray(mask, bool))
    frames = np.asarray(series.frames, dtype=np.float64)
    curves = 255.0 - frames[:, coords[:, 0], coords[:, 1]].T
    return curves, coords
