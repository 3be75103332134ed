import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from autogeo.errors import GlcmUndefined
from autogeo.features import (
    build_feature_matrix,
    build_feature_vector,
    glcm_contrast,
    glcm_counts,
    quantize_band,
    write_feature_csv,
)
from autogeo.query import DEFAULT_FEATURES, FeatureSpec
from oracles import glcm_contrast_bruteforce, glcm_contrast_exact, quantize_bruteforce

ROLES = ("red", "green", "blue", "nir")


@st.composite
def quantised(draw):
    levels = draw(st.sampled_from([2, 4, 8]))
    k = draw(st.sampled_from([2, 3, 4, 8, 16]))
    q = draw(arrays(np.int64, (k, k), elements=st.integers(0, levels - 1)))
    return q, levels


@given(quantised())
def test_contrast_equals_bruteforce_bit_for_bit(case):
    q, levels = case
    got = glcm_contrast(q, levels)
    assert got == glcm_contrast_bruteforce(q.tolist(), levels)
    assert got == float(glcm_contrast_exact(q.tolist(), levels))


@given(quantised())
def test_glcm_counts_cover_every_horizontal_pair(case):
    q, levels = case
    counts = glcm_counts(q, levels)
    assert counts.sum() == q.shape[0] * (q.shape[1] - 1)
    assert counts[q[0, 0], q[0, 1]] >= 1


def test_contrast_reference_values():
    # alternating columns 0/1: every pair differs by one level
    assert glcm_contrast(np.tile([0, 1], (4, 2)), 2) == 1.0
    assert glcm_contrast(np.zeros((4, 4), dtype=int), 8) == 0.0
    assert glcm_contrast(np.array([[0, 7], [7, 0]]), 8) == 49.0
    # vertical stripes only: horizontal contrast sees them, transposed it does not
    stripes = np.tile([0, 0, 3, 3], (4, 1))
    assert glcm_contrast(stripes, 4) == pytest.approx(9 * 4 / 12)
    assert glcm_contrast(stripes.T, 4) == 0.0


def test_glcm_needs_two_by_two():
    with pytest.raises(GlcmUndefined):
        glcm_contrast(np.zeros((1, 5), dtype=int), 2)
    with pytest.raises(GlcmUndefined):
        glcm_counts(np.zeros((3, 1), dtype=int), 2)


@given(arrays(np.float32, (5, 6), elements=st.floats(-1e3, 1e3, width=32)),
       st.sampled_from([2, 4, 8, 16]))
def test_quantisation_matches_oracle(band, levels):
    q = quantize_band(band, levels)
    assert q.tolist() == quantize_bruteforce(band.astype(np.float64).tolist(), levels)
    assert q.min() >= 0 and q.max() <= levels - 1


def test_quantisation_extremes_and_errors():
    q = quantize_band(np.array([[0.0, 1.0, 2.0, 3.0]]), 4)
    assert q.tolist() == [[0, 1, 2, 3]]
    assert quantize_band(np.full((3, 3), 5.0), 8).max() == 0
    with pytest.raises(ValueError):
        quantize_band(np.zeros((2, 2)), 1)


def test_feature_vector_order_and_values():
    rng = np.random.default_rng(3)
    v = rng.uniform(1, 100, (8, 8, 4)).astype(np.float32)
    vec = build_feature_vector(v, DEFAULT_FEATURES, ROLES)
    assert vec.shape == (14,)
    x = v.astype(np.float64)
    ndvi = (x[..., 3] - x[..., 0]) / (x[..., 3] + x[..., 0])
    means = [x[..., i].mean() for i in range(4)] + [ndvi.mean()]
    stds = [x[..., i].std() for i in range(4)] + [ndvi.std()]
    contrasts = [glcm_contrast_bruteforce(quantize_bruteforce(x[..., i].tolist(), 8), 8)
                 for i in range(4)]
    assert np.allclose(vec, means + stds + contrasts, rtol=1e-12, atol=0)
    assert DEFAULT_FEATURES.names() == (
        [f"mean:{s}" for s in (0, 1, 2, 3, "ndvi")] + [f"std:{s}" for s in (0, 1, 2, 3, "ndvi")]
        + [f"glcm:contrast:{i}" for i in range(4)])


def test_contrast_on_ndvi_is_rejected():
    v = np.ones((4, 4, 4), dtype=np.float32)
    with pytest.raises(ValueError):
        build_feature_vector(v, FeatureSpec(glcm_contrast=("ndvi",)), ROLES)


def test_feature_matrix_and_csv(tmp_path):
    rng = np.random.default_rng(0)
    stack = rng.uniform(1, 100, (5, 4, 4, 4)).astype(np.float32)
    m = build_feature_matrix(stack, DEFAULT_FEATURES, band_roles=ROLES)
    assert m.shape == (5, 14) and m.dtype == np.float32
    assert build_feature_matrix([], DEFAULT_FEATURES).shape == (0, 14)
    path = tmp_path / "f.csv"
    write_feature_csv(path, m, DEFAULT_FEATURES, labels=list("abcde"))
    rows = list(csv.reader(open(path)))
    assert rows[0] == DEFAULT_FEATURES.names() + ["label"]
    assert len(rows) == 6 and rows[3][-1] == "c"
    assert float(rows[1][0]) == float(m[0, 0])
