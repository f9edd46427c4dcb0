"""Latency percentiles, hit-ratio aggregation and overlap heatmaps."""

from __future__ import annotations

import math

import numpy as np

from .grouping import hash_similarity


def nearest_rank(values, p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    vals = sorted(values)
    if not vals:
        return float("nan")
    if not 0 < p <= 100:
        raise ValueError("percentile must be in (0, 100]")
    return vals[max(1, math.ceil(p / 100.0 * len(vals))) - 1]


def percentiles(values, ps=(50, 95, 99, 100)) -> dict:
    return {f"p{p:g}": nearest_rank(values, p) for p in ps}


def overlap_heatmap(cluster_sets) -> np.ndarray:
    """Pairwise Jaccard of probed cluster sets in execution order."""
    return hash_similarity([tuple(s) for s in cluster_sets])


def adjacent_vs_far(sim: np.ndarray, threshold=0.5) -> dict:
    """Share of adjacent and of non-adjacent pairs whose similarity reaches ``threshold``."""
    n = sim.shape[0]
    if n < 3:
        return {"adjacent": float("nan"), "non_adjacent": float("nan")}
    adj = np.array([sim[i, i + 1] for i in range(n - 1)])
    iu = np.triu_indices(n, 2)
    far = sim[iu]
    return {"adjacent": float((adj >= threshold).mean()), "non_adjacent": float((far >= threshold).mean())}


def load_imbalance(thread_seconds) -> float:
    """Makespan over mean busy time; 1.0 is perfectly balanced."""
    t = np.asarray(thread_seconds, dtype=float)
    if t.size == 0 or t.mean() == 0:
        return 1.0
    return float(t.max() / t.mean())
