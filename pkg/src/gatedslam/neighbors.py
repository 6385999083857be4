"""Nearest-neighbor queries shared by covisibility, ICP, and map metrics.

Thin wrapper over scipy's cKDTree so callers never depend on scipy directly
and the brute-force test oracles have a single seam to check against.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


def nn_query(ref: np.ndarray, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest neighbor of each query point in ref.

    Returns (distances, indices), both of length len(query).  ref must be
    non-empty.
    """
    ref = np.asarray(ref, dtype=float).reshape(-1, 3)
    query = np.asarray(query, dtype=float).reshape(-1, 3)
    if len(ref) == 0:
        raise ValueError("reference point set is empty")
    dists, idxs = cKDTree(ref).query(query, k=1)
    return np.asarray(dists, dtype=float), np.asarray(idxs, dtype=int)


def fraction_within(ref: np.ndarray, query: np.ndarray, radius: float) -> float:
    """Fraction of query points whose nearest ref point is within radius."""
    if len(query) == 0:
        return 0.0
    dists, _ = nn_query(ref, query)
    return float(np.count_nonzero(dists <= radius)) / len(query)
