"""Hand-crafted patch features: band/NDVI mean and std, horizontal GLCM contrast."""

from __future__ import annotations

import csv

import numpy as np

from .errors import GlcmUndefined, StatsUndefined
from .query import FeatureSpec
from .quality import band_index, compute_ndvi


def quantize_band(band, levels: int = 8, valid=None):
    """Linear min-max quantisation of the valid pixels into ``levels`` bins.

    ``floor(levels * (v - min) / (max - min))`` clamped to ``levels - 1``;
    a constant band maps to level 0. Invalid pixels are set to 0.
    """
    if levels < 2:
        raise ValueError("need at least 2 quantisation levels")
    band = np.asarray(band, dtype=np.float64)
    if valid is None:
        valid = np.isfinite(band)
    v = band[valid]
    if v.size == 0:
        raise StatsUndefined("cannot quantise a band with no valid pixels")
    lo, hi = v.min(), v.max()
    out = np.zeros(band.shape, dtype=np.int64)
    if hi > lo:
        q = np.floor(levels * (v - lo) / (hi - lo)).astype(np.int64)
        out[valid] = np.minimum(q, levels - 1)
    return out


def glcm_counts(quantized, levels: int):
    """Integer co-occurrence counts of horizontal pairs (r, c) -> (r, c + 1)."""
    q = np.asarray(quantized, dtype=np.int64)
    if q.ndim != 2 or q.shape[1] < 2:
        raise GlcmUndefined("horizontal GLCM needs at least two columns")
    left = q[:, :-1].ravel()
    right = q[:, 1:].ravel()
    return np.bincount(left * levels + right, minlength=levels * levels).reshape(levels, levels)


def glcm_contrast(quantized, levels: int) -> float:
    """Sum over i, j of P(i, j) * (i - j)^2 with P the normalised horizontal GLCM.

    Weighted counts are summed as integers and divided once, so the result
    does not depend on summation order.
    """
    q = np.asarray(quantized)
    if q.ndim != 2 or min(q.shape) < 2:
        raise GlcmUndefined("GLCM contrast needs a window of at least 2 x 2")
    counts = glcm_counts(q, levels)
    i, j = np.indices(counts.shape)
    weighted = int(np.sum(counts * (i - j) ** 2))
    return weighted / int(counts.sum())


def build_feature_vector(values, spec: FeatureSpec, band_roles=None, *, red_index=None,
                         nir_index=None, valid=None):
    """Feature vector for one k x k x c patch, in (means, stds, contrasts) order."""
    if hasattr(values, "values") and hasattr(values, "valid"):
        valid = values.valid if valid is None else valid
        values = values.values
    values = np.asarray(values)
    c = values.shape[-1]
    roles = tuple(band_roles) if band_roles is not None else ("other",) * c
    if valid is None:
        valid = np.all(np.isfinite(values), axis=-1)

    cache = {}

    def channel(sel):
        if sel not in cache:
            if sel == "ndvi":
                r = band_index("red", roles) if red_index is None else red_index
                n = band_index("nir", roles) if nir_index is None else nir_index
                ndvi, nvalid = compute_ndvi(values, r, n)
                cache[sel] = (ndvi, nvalid & valid)
            else:
                cache[sel] = (values[..., band_index(sel, roles)].astype(np.float64), valid)
        return cache[sel]

    out = []
    for sel in spec.mean:
        x, m = channel(sel)
        if not m.any():
            raise StatsUndefined(f"no valid pixels for mean:{sel}")
        out.append(x[m].mean())
    for sel in spec.std:
        x, m = channel(sel)
        if not m.any():
            raise StatsUndefined(f"no valid pixels for std:{sel}")
        v = x[m]
        out.append(np.sqrt(np.mean((v - v.mean()) ** 2)))
    for sel in spec.glcm_contrast:
        if sel == "ndvi":
            raise ValueError("GLCM contrast is only defined on bands, not on 'ndvi'")
        x, m = channel(sel)
        out.append(glcm_contrast(quantize_band(x, spec.glcm_levels, m), spec.glcm_levels))
    return np.asarray(out, dtype=np.float64)


def build_feature_matrix(patches, spec: FeatureSpec, *, band_roles=None, red_index=None,
                         nir_index=None):
    """Stack feature vectors of a PatchSet (or an N x k x k x c array) as float32."""
    if hasattr(patches, "patches"):
        band_roles = patches.band_roles if band_roles is None else band_roles
        rows = [build_feature_vector(p, spec, band_roles, red_index=red_index,
                                     nir_index=nir_index) for p in patches]
    else:
        rows = [build_feature_vector(v, spec, band_roles, red_index=red_index,
                                     nir_index=nir_index) for v in patches]
    if not rows:
        return np.zeros((0, len(spec)), dtype=np.float32)
    return np.asarray(rows, dtype=np.float32)


def write_feature_csv(path, matrix, spec: FeatureSpec, labels=None):
    """CSV with one column per feature, headed ``stat:selector``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = spec.names() + (["label"] if labels is not None else [])
        writer.writerow(header)
        for i, row in enumerate(np.asarray(matrix)):
            cells = [repr(float(v)) for v in row]
            if labels is not None:
                cells.append(labels[i])
            writer.writerow(cells)
