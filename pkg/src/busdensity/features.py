"""16-bin gray-level histogram features."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .imaging import GrayImage

N_BINS = 16
BIN_WIDTH = 256 // N_BINS
FEATURE_COLUMNS = ("image_id", "patient_id", "normalized_input") + tuple(f"b{k}" for k in range(N_BINS))


@dataclass(frozen=True, eq=False)
class HistogramFeatures:
    bins: np.ndarray
    normalized_input: bool
    image_id: str = ""
    patient_id: str = ""


def minmax_rescale_255(pixels: np.ndarray) -> np.ndarray:
    """Stretch intensities so min -> 0 and max -> 255, rounding half away from zero.

    Integer arithmetic keeps the rounding exact. A constant image maps to zeros.
    """
    p = np.asarray(pixels, dtype=np.int64)
    lo, hi = int(p.min()), int(p.max())
    if hi == lo:
        return np.zeros(p.shape, dtype=np.uint8)
    den = hi - lo
    # round((p - lo) * 255 / den) for non-negative values
    return ((2 * (p - lo) * 255 + den) // (2 * den)).astype(np.uint8)


def histogram_counts(img: GrayImage, normalize_first: bool = False) -> np.ndarray:
    """Pixel counts per bin [16k, 16k + 15]."""
    px = minmax_rescale_255(img.pixels) if normalize_first else img.pixels
    return np.bincount((px // BIN_WIDTH).ravel(), minlength=N_BINS)


def gray_level_histogram(img: GrayImage, normalize_first: bool = False) -> HistogramFeatures:
    counts = histogram_counts(img, normalize_first)
    bins = counts / counts.sum()
    bins.setflags(write=False)
    return HistogramFeatures(bins, bool(normalize_first), img.image_id, img.patient_id)


def write_features(features, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FEATURE_COLUMNS)
        for f in features:
            w.writerow([f.image_id, f.patient_id, int(f.normalized_input)] + [repr(float(b)) for b in f.bins])


def read_features(path) -> list[HistogramFeatures]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != FEATURE_COLUMNS:
            raise ValueError(f"{path}: feature CSV header mismatch")
        out = []
        for row in reader:
            bins = np.array([float(row[f"b{k}"]) for k in range(N_BINS)])
            out.append(HistogramFeatures(bins, row["normalized_input"] == "1", row["image_id"], row["patient_id"]))
    return out


def feature_matrix(features) -> np.ndarray:
    return np.vstack([f.bins for f in features]) if features else np.empty((0, N_BINS))
