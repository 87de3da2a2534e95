"""Independent reference implementations used to freeze expected test values.

Everything here is deliberately written the slow, obvious way (scalar loops,
exhaustive dynamic programming) and stays independent of the library code
paths it checks.
"""

from __future__ import annotations

import math

import numpy as np


def weight_mask_oracle(delta, v2, alpha: float, epsilon: float) -> list[bool]:
    """Scalar evaluation of the weight-prune rule for one layer."""
    mags = sorted(abs(float(d)) for d in delta)
    n = len(mags)
    if n == 0:
        return []
    if n % 2:
        median = mags[n // 2]
    else:
        median = (mags[n // 2 - 1] + mags[n // 2]) / 2
    keep = []
    for d, v in zip(delta, v2):
        threshold = alpha / math.sqrt(float(v) + epsilon) * median
        keep.append(abs(float(d)) > threshold)
    return keep


def momentum_mask_oracle(indicator, weight_keep, beta: float) -> list[bool]:
    """Scalar evaluation of the momentum-prune rule for one layer."""
    values = [float(v) for v in indicator]
    if not values:
        return []
    mean = math.fsum(values) / len(values)
    return [v > beta * mean and bool(w) for v, w in zip(values, weight_keep)]


def dp_kmeans(values, k: int) -> tuple[float, np.ndarray]:
    """Exact 1-D k-means by dynamic programming over sorted split points.

    Returns (optimal SSE, centers).  O(k * n^2) — fine for n <= ~2000.
    """
    x = np.sort(np.asarray(values, dtype=np.float64))
    n = len(x)
    k = min(k, n)
    prefix = np.concatenate([[0.0], np.cumsum(x)])
    prefix2 = np.concatenate([[0.0], np.cumsum(x * x)])

    def segment_cost(i: np.ndarray, j: int) -> np.ndarray:
        # cost of clustering x[i:j] (half-open) into one cluster, vector over i
        count = j - i
        total = prefix[j] - prefix[i]
        sq = prefix2[j] - prefix2[i]
        return sq - total * total / count

    best = np.full((k + 1, n + 1), np.inf)
    split = np.zeros((k + 1, n + 1), dtype=np.int64)
    best[0, 0] = 0.0
    for m in range(1, k + 1):
        for j in range(m, n + 1):
            starts = np.arange(m - 1, j)
            costs = best[m - 1, starts] + segment_cost(starts, j)
            idx = int(np.argmin(costs))
            best[m, j] = costs[idx]
            split[m, j] = starts[idx]
    # backtrack for the centers
    centers = []
    j = n
    for m in range(k, 0, -1):
        i = split[m, j]
        centers.append(float(np.mean(x[i:j])))
        j = i
    return float(best[k, n]), np.array(sorted(centers))


def adam_step_oracle(theta, m, v, grad, t, lr, beta1, beta2, eps):
    """Scalar bias-corrected Adam update."""
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
    return theta, m, v


def pack_codes_oracle(codes, bits: int) -> bytes:
    """Bit-by-bit little-first packing."""
    out = bytearray((len(codes) * bits + 7) // 8)
    for i, code in enumerate(codes):
        position = i * bits
        out[position // 8] |= (int(code) << (position % 8)) & 0xFF
    return bytes(out)


def nearest_center_oracle(value: float, codebook) -> int:
    """Code for one value: 0 for zero, else 1 + argmin distance, ties lower."""
    if value == 0:
        return 0
    best_idx, best_dist = 0, abs(value - float(codebook[0]))
    for idx in range(1, len(codebook)):
        dist = abs(value - float(codebook[idx]))
        if dist < best_dist:
            best_idx, best_dist = idx, dist
    return best_idx + 1
