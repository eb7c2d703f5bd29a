"""Grayscale BUS rasters: loading, invalid-scan rejection, dual-view splitting and crop/normalize."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError


class ImageError(ValueError):
    """Raised with a short reason code, e.g. ``corrupt_raster``."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass(frozen=True, eq=False)
class GrayImage:
    pixels: np.ndarray
    image_id: str = ""
    patient_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"pixels must be a non-empty 2-D grid, got shape {px.shape}")
        if px.dtype != np.uint8:
            if not np.issubdtype(px.dtype, np.integer) or px.min() < 0 or px.max() > 255:
                raise ValueError("pixels must be 8-bit intensities")
            px = px.astype(np.uint8)
        px = np.array(px, dtype=np.uint8, copy=True)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return (self.image_id, self.patient_id) == (other.image_id, other.patient_id) and np.array_equal(
            self.pixels, other.pixels
        )

    __hash__ = None


@dataclass(frozen=True)
class CleaningConfig:
    blank_intensity: int = 5
    blank_fraction: float = 0.98
    min_side: int = 64
    separator_max_mean: float = 5.0
    flank_min_mean: float = 20.0
    central_fraction: float = 0.2


@dataclass(frozen=True)
class CleaningVerdict:
    status: str  # valid | invalid | dual_view
    reason: str = ""
    sub_images: tuple[GrayImage, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.status not in ("valid", "invalid", "dual_view"):
            raise ValueError(f"bad status {self.status!r}")
        if self.status == "dual_view" and len(self.sub_images) != 2:
            raise ValueError("a dual-view verdict needs exactly two sub-images")


def load_image(path, image_id: str | None = None, patient_id: str = "") -> GrayImage:
    """Read an 8-bit single-channel PNG or PGM without altering pixel values."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            mode = im.mode
            if mode in ("RGB", "RGBA", "LA", "P", "CMYK", "YCbCr", "HSV", "LAB", "PA", "RGBX"):
                raise ImageError("multichannel", f"{path.name} has mode {mode}")
            if mode != "L":
                raise ImageError("not_8bit", f"{path.name} has mode {mode}")
            im.load()
            pixels = np.asarray(im, dtype=np.uint8)
    except ImageError:
        raise
    except FileNotFoundError:
        raise ImageError("unreadable", f"{path} does not exist") from None
    except UnidentifiedImageError:
        raise ImageError("corrupt_raster", f"{path.name} is not a recognizable raster") from None
    except (OSError, ValueError, SyntaxError, EOFError) as err:
        raise ImageError("corrupt_raster", f"{path.name}: {err}") from None
    return GrayImage(pixels, image_id=path.stem if image_id is None else image_id, patient_id=patient_id)


def save_png(img: GrayImage, path) -> None:
    Image.fromarray(np.ascontiguousarray(img.pixels), mode="L").save(path, format="PNG")


def detect_invalid(img: GrayImage, config: CleaningConfig = CleaningConfig()) -> CleaningVerdict:
    """Flag scans that are too small, nearly blank or perfectly flat."""
    px = img.pixels
    if img.width < config.min_side or img.height < config.min_side:
        return CleaningVerdict("invalid", "too_small")
    if np.mean(px <= config.blank_intensity) > config.blank_fraction:
        return CleaningVerdict("invalid", "near_blank")
    if px.min() == px.max():
        return CleaningVerdict("invalid", "zero_variance")
    return CleaningVerdict("valid", "", (img,))


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Inclusive (start, end) index pairs of the True runs in a 1-D mask."""
    padded = np.concatenate(([False], mask, [False])).astype(np.int8)
    d = np.diff(padded)
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def find_separator(img: GrayImage, config: CleaningConfig = CleaningConfig()) -> tuple[int, int] | None:
    """Locate a dark vertical band between two bright panels, as inclusive column bounds."""
    w = img.width
    col_mean = img.pixels.mean(axis=0)
    half = config.central_fraction / 2
    lo = int(np.floor((0.5 - half) * w))
    hi = int(np.ceil((0.5 + half) * w))  # exclusive
    dark = col_mean <= config.separator_max_mean
    best = None
    for start, end in _runs(dark):
        if end < lo or start >= hi:
            continue
        if start == 0 or end == w - 1:
            continue
        if col_mean[start - 1] < config.flank_min_mean or col_mean[end + 1] < config.flank_min_mean:
            continue
        dist = abs((start + end) / 2 - (w - 1) / 2)
        if best is None or dist < best[0]:
            best = (dist, start, end)
    return None if best is None else (best[1], best[2])


def split_dual_view(img: GrayImage, config: CleaningConfig = CleaningConfig()) -> CleaningVerdict:
    """Split a side-by-side dual-view scan at a dark separator in the central columns."""
    band = find_separator(img, config)
    if band is None:
        return CleaningVerdict("valid", "", (img,))
    start, end = band
    left = GrayImage(img.pixels[:, :start], f"{img.image_id}_L", img.patient_id)
    right = GrayImage(img.pixels[:, end + 1:], f"{img.image_id}_R", img.patient_id)
    return CleaningVerdict("dual_view", f"separator_cols_{start}_{end}", (left, right))


def clean_image(img: GrayImage, config: CleaningConfig = CleaningConfig()) -> CleaningVerdict:
    """Invalid-scan removal followed by dual-view splitting (the uncurated cleaning path)."""
    verdict = detect_invalid(img, config)
    if verdict.status == "invalid":
        return verdict
    return split_dual_view(img, config)


CLEANING_LOG_COLUMNS = ("image_id", "status", "reason", "output_ids")


def write_cleaning_log(rows, path) -> None:
    """rows: iterable of (image_id, CleaningVerdict)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CLEANING_LOG_COLUMNS)
        for image_id, v in rows:
            w.writerow([image_id, v.status, v.reason, ";".join(s.image_id for s in v.sub_images)])


# --- deep-model style geometry ------------------------------------------------------------


def resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centers and edge clamping; returns float64."""
    src = np.asarray(pixels, dtype=np.float64)
    in_h, in_w = src.shape

    def coords(n_out, n_in):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0, n_in - 1)
        i0 = np.floor(x).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, x - i0

    y0, y1, fy = coords(out_h, in_h)
    x0, x1, fx = coords(out_w, in_w)
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def resized_shape(height: int, width: int, side: int) -> tuple[int, int]:
    """Shape after bringing a short edge below ``side`` up to ``side`` (aspect kept, round half up)."""
    short = min(height, width)
    if short >= side:
        return height, width
    scale = side / short
    if height <= width:
        return side, int(np.floor(width * scale + 0.5))
    return int(np.floor(height * scale + 0.5)), side


def minmax_normalize(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def preprocess(
    img: GrayImage,
    side: int = 224,
    mode: str = "center_crop",
    seed: int = 0,
    jitter: tuple[float, float] | None = None,
) -> np.ndarray:
    """Resize-if-small, crop to side x side, then per-image min-max normalize to [0, 1].

    ``jitter=(brightness, contrast)`` applies a seeded random gain/offset before
    normalization; it is off by default.
    """
    if side < 1:
        raise ValueError("side must be >= 1")
    if mode not in ("center_crop", "random_crop"):
        raise ValueError(f"unknown crop mode {mode!r}")
    rng = np.random.default_rng(seed)
    h, w = resized_shape(img.height, img.width, side)
    a = img.pixels.astype(np.float64) if (h, w) == img.pixels.shape else resize_bilinear(img.pixels, h, w)
    if mode == "center_crop":
        top, left = (h - side) // 2, (w - side) // 2
    else:
        top, left = int(rng.integers(0, h - side + 1)), int(rng.integers(0, w - side + 1))
    a = a[top:top + side, left:left + side]
    if jitter is not None:
        b, c = jitter
        gain = rng.uniform(1 - c, 1 + c)
        offset = rng.uniform(-b, b) * 255
        a = np.clip((a - a.mean()) * gain + a.mean() + offset, 0, 255)
    return minmax_normalize(a)
