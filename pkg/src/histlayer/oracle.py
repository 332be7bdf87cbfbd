"""Brute-force histogram reference used only for verification.

Deliberately shares no code with histlayer.histogram: plain Python loops
over samples, classes, bins and pixels.
"""

from __future__ import annotations

import numpy as np


def hist_oracle(likelihood: np.ndarray, centers: np.ndarray, slopes: np.ndarray) -> np.ndarray:
    """Triple-nested-loop evaluation of the soft histogram.

    likelihood: (N, K, H, W) array; centers/slopes: (K, B) arrays.
    Returns (N, K*B) with layout index k*B + b.
    """
    likelihood = np.asarray(likelihood, dtype=np.float64)
    n, k_classes, h, w = likelihood.shape
    k2, b_bins = centers.shape
    assert k2 == k_classes
    out = np.zeros((n, k_classes * b_bins))
    for sample in range(n):
        for k in range(k_classes):
            for b in range(b_bins):
                mu = float(centers[k, b])
                s = float(slopes[k, b])
                total = 0.0
                for i in range(h):
                    for j in range(w):
                        x = float(likelihood[sample, k, i, j])
                        vote = 1.0 - s * abs(x - mu)
                        if vote > 0.0:
                            total += vote
                out[sample, k * b_bins + b] = total / (h * w)
    return out
