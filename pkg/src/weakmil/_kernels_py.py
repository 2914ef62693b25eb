"""Pure NumPy implementations of the hot kernels.

These are the reference versions; ``_kernels.pyx`` mirrors them loop for loop
so that both backends round identically.
"""
import numpy as np


def sparsemax_rows(z):
    """Project every row of a 2-D float64 array onto the probability simplex."""
    z = np.ascontiguousarray(z, dtype=np.float64)
    n_rows, n = z.shape
    zs = -np.sort(-z, axis=1, kind="stable")
    cssv = np.cumsum(zs, axis=1)
    ind = np.arange(1, n + 1, dtype=np.float64)
    cond = 1.0 + ind * zs > cssv
    # support size is the last index satisfying the condition
    k = n - np.argmax(cond[:, ::-1], axis=1)
    tau = (cssv[np.arange(n_rows), k - 1] - 1.0) / k
    return np.maximum(z - tau[:, None], 0.0)


def sparsemax_rows_vjp(p, u):
    """Row-wise sparsemax vector-Jacobian product given outputs ``p``."""
    p = np.ascontiguousarray(p, dtype=np.float64)
    u = np.ascontiguousarray(u, dtype=np.float64)
    support = p > 0.0
    size = support.sum(axis=1)
    if np.any(size == 0):
        raise RuntimeError("sparsemax output with empty support")
    # sequential sum, matching the compiled loop's rounding
    mean = np.cumsum(np.where(support, u, 0.0), axis=1)[:, -1] / size
    return np.where(support, u - mean[:, None], 0.0)


def greedy_match(ious, thresholds):
    """Greedy rank-order matching of detections to ground truths.

    ``ious`` is (n_det, n_gt) with detections already in rank order. Returns an
    int array (n_thresholds, n_det) holding the matched ground-truth index or -1.
    """
    ious = np.ascontiguousarray(ious, dtype=np.float64)
    thresholds = np.ascontiguousarray(thresholds, dtype=np.float64)
    n_det, n_gt = ious.shape
    out = np.full((len(thresholds), n_det), -1, dtype=np.int64)
    for t_idx, t in enumerate(thresholds):
        taken = np.zeros(n_gt, dtype=bool)
        for d in range(n_det):
            best = -1
            best_iou = 0.0
            for g in range(n_gt):
                if taken[g]:
                    continue
                v = ious[d, g]
                if v >= t and (best < 0 or v > best_iou):
                    best = g
                    best_iou = v
            if best >= 0:
                taken[best] = True
                out[t_idx, d] = best
    return out
