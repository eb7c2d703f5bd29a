from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from busdensity.features import (
    FEATURE_COLUMNS, HistogramFeatures, feature_matrix, gray_level_histogram, histogram_counts,
    minmax_rescale_255, read_features, write_features,
)
from busdensity.imaging import GrayImage
from oracles import hand_histogram

small_images = arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)))


def test_all_zero_image():
    h = gray_level_histogram(GrayImage(np.zeros((5, 5), np.uint8)))
    assert h.bins.tolist() == [1.0] + [0.0] * 15


def test_half_black_half_white():
    px = np.array([[0, 255], [0, 255]], np.uint8)
    h = gray_level_histogram(GrayImage(px))
    assert h.bins[0] == 0.5 and h.bins[15] == 0.5 and h.bins[1:15].sum() == 0


def test_four_pixel_example():
    h = gray_level_histogram(GrayImage(np.array([[10, 20], [200, 250]], np.uint8)))
    expected = np.zeros(16)
    expected[[0, 1, 12, 15]] = 0.25
    assert h.bins.tolist() == expected.tolist()
    assert h.normalized_input is False


def test_bin_edges():
    px = np.array([[15, 16, 31, 32, 239, 240]], np.uint8)
    counts = histogram_counts(GrayImage(px))
    assert counts[0] == 1 and counts[1] == 2 and counts[2] == 1 and counts[14] == 1 and counts[15] == 1


def test_constant_image_normalized_goes_to_bin0():
    h = gray_level_histogram(GrayImage(np.full((4, 4), 180, np.uint8)), normalize_first=True)
    assert h.bins[0] == 1.0 and h.normalized_input


def test_minmax_rescale_rounds_half_up():
    # (1 - 0) * 255 / 2 = 127.5 -> 128
    assert minmax_rescale_255(np.array([0, 1, 2])).tolist() == [0, 128, 255]


@given(small_images)
def test_matches_hand_binning(px):
    assert gray_level_histogram(GrayImage(px)).bins.tolist() == hand_histogram(px)


@given(small_images)
def test_bins_sum_to_one_exactly_in_rationals(px):
    counts = histogram_counts(GrayImage(px))
    assert sum(Fraction(int(c), px.size) for c in counts) == 1
    h = gray_level_histogram(GrayImage(px), normalize_first=True)
    assert abs(h.bins.sum() - 1) < 1e-9 and np.all((h.bins >= 0) & (h.bins <= 1))


@given(small_images, st.integers(0, 2**31 - 1), st.booleans())
def test_permutation_invariance(px, seed, norm):
    shuffled = np.random.default_rng(seed).permutation(px.ravel()).reshape(px.shape)
    a = gray_level_histogram(GrayImage(px), norm).bins
    b = gray_level_histogram(GrayImage(shuffled), norm).bins
    assert np.array_equal(a, b)


@given(arrays(np.uint8, (6, 6), elements=st.integers(0, 60)), st.integers(1, 4), st.integers(0, 10))
def test_normalized_histogram_ignores_integer_affine_maps(px, a, b):
    mapped = px.astype(int) * a + b
    h1 = gray_level_histogram(GrayImage(px), normalize_first=True).bins
    h2 = gray_level_histogram(GrayImage(mapped), normalize_first=True).bins
    assert np.array_equal(h1, h2)


@given(arrays(np.uint8, (6, 6), elements=st.integers(0, 100)), st.floats(0.5, 2.5), st.floats(0, 30))
def test_normalized_histogram_affine_within_one_bin(px, a, b):
    mapped = np.floor(px * a + b + 0.5).astype(int)
    bins1 = minmax_rescale_255(px) // 16
    bins2 = minmax_rescale_255(mapped) // 16
    assert np.max(np.abs(bins1.astype(int) - bins2.astype(int))) <= 1


def test_feature_csv_roundtrip(tmp_path, rng):
    feats = [gray_level_histogram(GrayImage(rng.integers(0, 256, (9, 7)), f"i{k}", "p"), k % 2 == 0) for k in range(5)]
    write_features(feats, tmp_path / "f.csv")
    back = read_features(tmp_path / "f.csv")
    assert np.array_equal(feature_matrix(back), feature_matrix(feats))
    assert [f.normalized_input for f in back] == [f.normalized_input for f in feats]
    assert (tmp_path / "f.csv").read_text().splitlines()[0] == ",".join(FEATURE_COLUMNS)


def test_feature_csv_header_checked(tmp_path):
    (tmp_path / "bad.csv").write_text("image_id,b0\nx,1\n")
    with pytest.raises(ValueError):
        read_features(tmp_path / "bad.csv")


def test_empty_feature_matrix():
    assert feature_matrix([]).shape == (0, 16)
    assert isinstance(gray_level_histogram(GrayImage(np.zeros((1, 1), np.uint8))), HistogramFeatures)
