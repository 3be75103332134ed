"""Vegetation index, per-sample statistics and bound-based sample filtering."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import StatsUndefined, UnknownBandRole
from .query import DERIVED_INDICES, FilterSpec


def band_index(selector, band_roles) -> int:
    """Resolve a band selector (index or role name) to a layer index."""
    if isinstance(selector, (int, np.integer)):
        if not 0 <= selector < len(band_roles):
            raise IndexError(f"band index {selector} out of range for {len(band_roles)} layers")
        return int(selector)
    if selector in band_roles:
        return list(band_roles).index(selector)
    raise UnknownBandRole(f"no layer has band role {selector!r} (roles: {list(band_roles)})")


def ndvi_bands(band_roles, override=None) -> tuple[int, int]:
    """(red_index, nir_index) from layer band roles, optionally overridden."""
    override = override or {}
    try:
        red = override["red"] if "red" in override else band_index("red", band_roles)
        nir = override["nir"] if "nir" in override else band_index("nir", band_roles)
    except UnknownBandRole as exc:
        raise UnknownBandRole(f"NDVI needs red and nir layers: {exc}") from None
    return int(red), int(nir)


def compute_ndvi(values, red_index: int, nir_index: int):
    """(NIR - Red) / (NIR + Red) per pixel.

    ``values`` is a k x k x c array (or a Patch). Returns ``(ndvi, valid)``;
    pixels whose denominator is zero are 0 and marked invalid.
    """
    valid_in = None
    if hasattr(values, "values") and hasattr(values, "valid"):
        valid_in = values.valid
        values = values.values
    c = values.shape[-1]
    for idx in (red_index, nir_index):
        if not 0 <= idx < c:
            raise IndexError(f"band index {idx} out of range for {c} layers")
    red = values[..., red_index].astype(np.float64)
    nir = values[..., nir_index].astype(np.float64)
    denom = nir + red
    valid = denom != 0
    valid &= np.isfinite(denom)
    if valid_in is not None:
        valid &= valid_in
    ndvi = np.zeros(denom.shape, dtype=np.float64)
    np.divide(nir - red, denom, out=ndvi, where=valid)
    return ndvi, valid


@dataclass(frozen=True)
class Stat:
    min: float
    max: float
    mean: float
    std: float

    def get(self, name):
        return getattr(self, name)


def _stat(x, where):
    v = x[where]
    if v.size == 0:
        raise StatsUndefined(f"no valid pixels for {where}")
    mean = float(v.mean())
    return Stat(float(v.min()), float(v.max()), mean, float(np.sqrt(np.mean((v - mean) ** 2))))


def patch_stats(patch, derived=("ndvi",), *, band_roles=None, red_index=None, nir_index=None):
    """min/max/mean/std (population) over valid pixels, per band and derived index.

    Keys are band indices and derived index names.
    """
    values = patch.values
    valid = patch.valid
    out = {}
    for i in range(values.shape[-1]):
        out[i] = _stat(values[..., i].astype(np.float64), valid)
    for name in derived:
        if name != "ndvi":
            raise ValueError(f"unknown derived index {name!r}")
        if red_index is None or nir_index is None:
            red_index, nir_index = ndvi_bands(band_roles or ())
        ndvi, nvalid = compute_ndvi(values, red_index, nir_index)
        try:
            out["ndvi"] = _stat(ndvi, nvalid & valid)
        except StatsUndefined:
            raise StatsUndefined("no valid NDVI pixels in patch") from None
    return out


def _fmt(v):
    return repr(float(v))


def check_bounds(stats, filt: FilterSpec, band_roles):
    """Return the first violated bound as a reason string, or None."""
    for b in filt.bounds:
        key = b.selector if b.selector in DERIVED_INDICES else band_index(b.selector, band_roles)
        value = stats[key].get(b.statistic)
        if b.min is not None and value < b.min:
            return f"{b.name} < {_fmt(b.min)}"
        if b.max is not None and value > b.max:
            return f"{b.name} > {_fmt(b.max)}"
    return None


def apply_filters(patches, filt: FilterSpec, *, band_roles_override=None):
    """Split a PatchSet into (retained, rejected).

    A sample is retained iff it assembled cleanly and every bound holds.
    Both outputs keep input order; rejected patches carry the reason.
    """
    roles = patches.band_roles
    needs_ndvi = any(b.selector == "ndvi" for b in filt.bounds)
    for b in filt.bounds:
        if not (b.selector in DERIVED_INDICES):
            band_index(b.selector, roles)
    red = nir = None
    if needs_ndvi:
        red, nir = ndvi_bands(roles, band_roles_override)
    retained, rejected = [], []
    for p in patches:
        if not p.ok:
            rejected.append(p)
            continue
        if not filt.bounds:
            retained.append(p)
            continue
        try:
            stats = patch_stats(p, ("ndvi",) if needs_ndvi else (), red_index=red, nir_index=nir)
        except StatsUndefined as exc:
            rejected.append(p.reject(str(exc)))
            continue
        reason = check_bounds(stats, filt, roles)
        if reason is None:
            retained.append(p)
        else:
            rejected.append(p.reject(reason))
    return patches.subset(retained), patches.subset(rejected)


def write_rejection_report(rejected, path):
    """One JSON object per line: index, location, label, reason."""
    with open(Path(path), "w", encoding="utf-8") as fh:
        for p in rejected:
            fh.write(json.dumps(rejection_record(p)) + "\n")


def rejection_record(p):
    return {"index": p.index, "lat": p.point.lat, "lon": p.point.lon,
            "label": p.point.label, "reason": p.reason}
