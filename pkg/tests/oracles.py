"""
Independent reference implementations used as test oracles.

Each one is deliberately naive (pure Python loops, enumeration, finite
differences) and shares no code with the package beyond plain data.
"""

from __future__ import annotations

import math
from fractions import Fraction


def glcm_contrast_bruteforce(q, levels):
    """Pair-count every horizontal neighbour pair, then sum P(i, j) (i - j)^2."""
    rows, cols = len(q), len(q[0])
    counts = [[0] * levels for _ in range(levels)]
    pairs = 0
    for r in range(rows):
        for c in range(cols - 1):
            counts[int(q[r][c])][int(q[r][c + 1])] += 1
            pairs += 1
    weighted = 0
    for i in range(levels):
        for j in range(levels):
            weighted += counts[i][j] * (i - j) ** 2
    return weighted / pairs


def glcm_contrast_exact(q, levels):
    """Same quantity as an exact rational, for tolerance-free comparison."""
    rows, cols = len(q), len(q[0])
    total = Fraction(0)
    pairs = 0
    for r in range(rows):
        for c in range(cols - 1):
            total += (int(q[r][c]) - int(q[r][c + 1])) ** 2
            pairs += 1
    return total / pairs


def quantize_bruteforce(values, levels):
    """Per-pixel min-max quantisation, written out with Python floats."""
    flat = [v for row in values for v in row]
    lo, hi = min(flat), max(flat)
    out = []
    for row in values:
        qrow = []
        for v in row:
            if hi == lo:
                qrow.append(0)
            else:
                qrow.append(min(int(math.floor(levels * (v - lo) / (hi - lo))), levels - 1))
        out.append(qrow)
    return out


def ndvi_scalar(red, nir):
    """NDVI of one pixel; None when the denominator vanishes."""
    red, nir = float(red), float(nir)
    if nir + red == 0:
        return None
    return (nir - red) / (nir + red)


def closest_snapshot(stamps, requested, window):
    """Exhaustive argmin of |t - requested| over stamps within window; earlier wins ties."""
    best = None
    for t in sorted(stamps):
        d = abs(t - requested)
        if d > window:
            continue
        if best is None or d < best[0]:
            best = (d, t)
    return None if best is None else best[1]


def best_stump(X, y):
    """Exhaustive depth-1 search: the training accuracy of the best single threshold."""
    n = len(y)
    classes = sorted(set(y))
    best = 0.0
    for f in range(len(X[0])):
        for thr in sorted({row[f] for row in X}):
            left = [y[i] for i in range(n) if X[i][f] <= thr]
            right = [y[i] for i in range(n) if X[i][f] > thr]
            hits = 0
            for side in (left, right):
                if side:
                    hits += max(side.count(c) for c in classes)
            best = max(best, hits / n)
    return best


def nearest_centroid_accuracy(X_train, y_train, X_test, y_test):
    """Classify each test row by the closest class mean (Euclidean) of the training rows."""
    sums, counts = {}, {}
    for row, label in zip(X_train, y_train):
        acc = sums.setdefault(label, [0.0] * len(row))
        for i, v in enumerate(row):
            acc[i] += float(v)
        counts[label] = counts.get(label, 0) + 1
    centroids = {c: [v / counts[c] for v in s] for c, s in sums.items()}
    hits = 0
    for row, label in zip(X_test, y_test):
        best = min(centroids, key=lambda c: sum((float(a) - b) ** 2
                                                for a, b in zip(row, centroids[c])))
        hits += best == label
    return hits / len(y_test)


def finite_difference_grads(loss_fn, params, eps):
    """Central differences of ``loss_fn()`` with respect to every entry of every tensor.

    ``params`` is a list of torch tensors modified in place and restored.
    """
    import torch

    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss_fn().item()
                flat[i] = old - eps
                down = loss_fn().item()
                flat[i] = old
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return grads
