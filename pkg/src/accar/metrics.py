"""Evaluation metrics: overlap, surface distance, sparsification and feature RMSD."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np
from scipy import ndimage


def dice(a: np.ndarray, b: np.ndarray, label: int = 1) -> float:
    """2|A∩B| / (|A| + |B|) for one label; 1.0 when both are empty."""
    a = np.asarray(a) == label
    b = np.asarray(b) == label
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


def foreground_dice(a: np.ndarray, b: np.ndarray, labels=None) -> float:
    """Mean Dice over the structure labels (every label except background 0)."""
    if labels is None:
        labels = sorted(set(np.unique(a)) | set(np.unique(b)))
    labels = [int(l) for l in labels if l != 0]
    return float(np.mean([dice(a, b, l) for l in labels])) if labels else 1.0


def boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels of ``mask`` with a 4-neighbour outside it (the image border counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1)
    inner = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return mask & ~inner


def _directed_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # distance from every pixel to the nearest dst pixel
    dist = ndimage.distance_transform_edt(~dst)
    return dist[src]


def hd95(a: np.ndarray, b: np.ndarray, label: int = 1) -> float:
    """Symmetric 95th-percentile boundary Hausdorff distance (pixels)."""
    ba = boundary(np.asarray(a) == label)
    bb = boundary(np.asarray(b) == label)
    if not ba.any() or not bb.any():
        raise ValueError(f"label {label} is empty in at least one mask")
    d_ab = np.percentile(_directed_distances(ba, bb), 95)
    d_ba = np.percentile(_directed_distances(bb, ba), 95)
    return float(max(d_ab, d_ba))


@dataclass
class SparsificationCurve:
    fractions_removed: np.ndarray
    remaining_mse: np.ndarray
    oracle_mse: np.ndarray

    @property
    def sparsification_error(self) -> np.ndarray:
        return self.remaining_mse - self.oracle_mse

    @property
    def area_between(self) -> float:
        """Trapezoidal area between the model curve and the oracle curve."""
        return float(np.trapezoid(self.sparsification_error, self.fractions_removed))

    def fraction_non_increasing(self, tol: float = 0.0) -> float:
        steps = np.diff(self.remaining_mse)
        return float(np.mean(steps <= tol))


def _remaining_means(values: np.ndarray, order: np.ndarray, removed: np.ndarray) -> np.ndarray:
    ranked = values[order]
    # mean of ranked[k:] for each k, via a reversed cumulative sum
    tail_sums = np.cumsum(ranked[::-1])[::-1]
    n = ranked.size
    return tail_sums[removed] / (n - removed)


def sparsification_curve(sq_error: np.ndarray, variance: np.ndarray, n_steps: int = 20) -> SparsificationCurve:
    """MSE of the pixels left after removing the highest-variance fraction.

    Pixels are removed in order of decreasing ``variance`` (ties: lower flat
    index first); the oracle ranks by ``sq_error`` itself.
    """
    if n_steps < 2:
        raise ValueError("n_steps must be >= 2")
    err = np.asarray(sq_error, dtype=np.float64).ravel()
    var = np.asarray(variance, dtype=np.float64).ravel()
    if err.shape != var.shape:
        raise ValueError("sq_error and variance must have the same shape")
    n = err.size
    fractions = np.arange(n_steps) / n_steps
    removed = np.floor(fractions * n + 1e-9).astype(np.int64)
    model = _remaining_means(err, np.argsort(-var, kind="stable"), removed)
    oracle = _remaining_means(err, np.argsort(-err, kind="stable"), removed)
    return SparsificationCurve(fractions, model, oracle)


def feature_rmsd(features) -> tuple[list[float], float]:
    """RMSD for every ordered pair of distinct features, and their mean."""
    feats = [np.asarray(getattr(f, "data", f), dtype=np.float64) for f in features]
    if len(feats) < 2:
        raise ValueError("need at least two features")
    if len({f.shape for f in feats}) != 1:
        raise ValueError("features must share one shape")
    pairs = [float(np.sqrt(np.mean((feats[i] - feats[j]) ** 2))) for i, j in permutations(range(len(feats)), 2)]
    return pairs, float(np.mean(pairs))
