"""Classical robust aggregation rules used as comparison points.

Every rule maps a RoundBatch to a single LayeredVector. FoolsGold and the
residual-based rule additionally expose their per-client weights since the
simulator logs them.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy.special import ndtr

from .errors import UsageError
from .params import LayeredVector, RoundBatch

log = logging.getLogger(__name__)


def fedavg(batch: RoundBatch) -> LayeredVector:
    """Unweighted arithmetic mean; shard sizes are hidden from the server."""
    return LayeredVector(batch.schema, batch.matrix().mean(axis=0))


def coord_median(batch: RoundBatch) -> LayeredVector:
    """Coordinate-wise median (even n averages the two middle values)."""
    return LayeredVector(batch.schema, np.median(batch.matrix(), axis=0))


def geo_median(batch: RoundBatch, tol=1e-8, max_iter=100, smoothing=1e-10) -> LayeredVector:
    """Smoothed Weiszfeld iteration for the geometric median.

    Starts from the arithmetic mean and stops once the iterate moves less
    than tol; if max_iter is exhausted the last iterate is returned and a
    warning is logged.
    """
    points = batch.matrix()
    y = points.mean(axis=0)
    converged = False
    for _ in range(max_iter):
        dist = np.linalg.norm(points - y, axis=1)
        inv = 1.0 / np.maximum(dist, smoothing)
        y_next = (inv[:, None] * points).sum(axis=0) / inv.sum()
        step = np.linalg.norm(y_next - y)
        y = y_next
        if step < tol:
            converged = True
            break
    if not converged:
        log.warning("geometric median did not converge within %d iterations", max_iter)
    return LayeredVector(batch.schema, y)


def krum_scores(points, m):
    """Sum of squared distances to each point's n-m-2 nearest neighbors."""
    n = points.shape[0]
    sq = ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    neighbors = max(n - m - 2, 1)
    scores = np.empty(n)
    for i in range(n):
        others = np.sort(np.delete(sq[i], i))
        scores[i] = others[:neighbors].sum()
    return scores


def multi_krum(batch: RoundBatch, m) -> LayeredVector:
    """Average of the m lowest-scoring updates; ties favor the lower index."""
    n = batch.n
    if n < 4:
        raise UsageError("multi-krum needs at least 4 clients")
    if not 1 <= m <= n - 2:
        raise UsageError(f"m must be in [1, {n - 2}], got {m}")
    scores = krum_scores(batch.matrix(), m)
    chosen = np.argsort(scores, kind="stable")[:m]
    return LayeredVector(batch.schema, batch.matrix()[chosen].mean(axis=0))


def default_krum_m(n):
    return max(n // 2 - 2, 1)


class FoolsGoldHistory:
    """Per-client cumulative update sums carried across rounds."""

    def __init__(self):
        self.sums = {}

    def add(self, client_id, flat_update):
        if client_id in self.sums:
            self.sums[client_id] = self.sums[client_id] + flat_update
        else:
            self.sums[client_id] = flat_update.copy()

    def get(self, client_id):
        return self.sums[client_id]


def foolsgold(batch: RoundBatch, history: FoolsGoldHistory, kappa=1.0):
    """Cosine-similarity collusion filter over cumulative client histories.

    Updates the history with the current round, then derives per-client
    credibility from the maximum pairwise similarity (with pardoning),
    squashes it through a shifted logit with confidence kappa, clips to
    [0,1] and aggregates with the normalized weights.

    Returns (aggregate, weights).
    """
    matrix = batch.matrix()
    n = batch.n
    for i, cid in enumerate(batch.client_ids):
        history.add(cid, matrix[i])
    hist = np.stack([history.get(cid) for cid in batch.client_ids])
    norms = np.linalg.norm(hist, axis=1)
    if np.all(norms == 0):
        weights = np.full(n, 1.0 / n)
        return weighted_average(batch, weights), weights
    safe = np.where(norms == 0, 1.0, norms)
    unit = hist / safe[:, None]
    cs = unit @ unit.T
    np.fill_diagonal(cs, 0.0)
    v = cs.max(axis=1)
    # Pardoning: a client maximally similar to a more-suspect one is excused.
    for i in range(n):
        for j in range(n):
            if v[j] > v[i] and v[j] > 0:
                cs[i, j] *= v[i] / v[j]
    wv = np.clip(1.0 - cs.max(axis=1), 0.0, 1.0)
    top = wv.max()
    if top <= 0:
        weights = np.full(n, 1.0 / n)
        return weighted_average(batch, weights), weights
    wv = wv / top
    wv[wv == 1.0] = 0.99
    with np.errstate(divide="ignore"):
        wv = kappa * (np.log(wv / (1.0 - wv)) + 0.5)
    wv = np.clip(np.nan_to_num(wv, nan=0.0, posinf=1.0, neginf=0.0), 0.0, 1.0)
    total = wv.sum()
    weights = np.full(n, 1.0 / n) if total <= 0 else wv / total
    return weighted_average(batch, weights), weights


def weighted_average(batch: RoundBatch, weights) -> LayeredVector:
    return LayeredVector(batch.schema, np.asarray(weights) @ batch.matrix())


def _repeated_median_fit(y, x):
    """Repeated-median slope/intercept for columns of y against positions x.

    y: (n, d) values, x: (n,) distinct abscissae. Vectorized over columns.
    """
    n = y.shape[0]
    dy = y[:, None, :] - y[None, :, :]  # (n, n, d)
    dx = x[:, None] - x[None, :]  # (n, n)
    with np.errstate(divide="ignore", invalid="ignore"):
        slopes = dy / dx[:, :, None]
    eye = np.eye(n, dtype=bool)
    slopes[eye] = np.nan
    slope = np.nanmedian(np.nanmedian(slopes, axis=1), axis=0)  # (d,)
    intercept = np.median(y - slope[None, :] * x[:, None], axis=0)  # (d,)
    return slope, intercept


def residual_reweigh(batch: RoundBatch, lam=2.0, delta=0.1):
    """Line-fit residual confidence aggregation.

    Per coordinate, the sorted client values are fit by a repeated-median
    line over their ranks; standardized residuals feed a standard-normal
    interval confidence P(|Z - e| <= lam), normalized so zero residual means
    full confidence. A client's weight is its mean confidence across
    coordinates, zeroed below delta, then renormalized.

    Returns (aggregate, weights).
    """
    n = batch.n
    if n < 3:
        raise UsageError("residual reweighing needs at least 3 clients")
    matrix = batch.matrix()  # (n, d)
    ranks = np.argsort(np.argsort(matrix, axis=0, kind="stable"), axis=0, kind="stable")
    # Each client's abscissa per coordinate is its 1-based rank.
    slope, intercept = _repeated_median_fit_sorted(matrix)
    fitted = intercept[None, :] + slope[None, :] * (ranks + 1)
    residual = matrix - fitted
    abs_sorted = np.sort(np.abs(residual), axis=0)
    scale_core = np.median(abs_sorted[1:], axis=0) if n > 1 else abs_sorted[0]
    tau = 1.4826 * (1.0 + 5.0 / max(n - 2, 1)) * scale_core + 1e-12
    e = residual / tau[None, :]
    conf = (ndtr(e + lam) - ndtr(e - lam)) / (2.0 * ndtr(lam) - 1.0)
    client_conf = conf.mean(axis=1)
    weights = np.where(client_conf < delta, 0.0, client_conf)
    total = weights.sum()
    weights = np.full(n, 1.0 / n) if total <= 0 else weights / total
    return weighted_average(batch, weights), weights


def _repeated_median_fit_sorted(matrix):
    """Repeated-median line through each coordinate's sorted values vs rank."""
    n = matrix.shape[0]
    y_sorted = np.sort(matrix, axis=0)
    x = np.arange(1, n + 1, dtype=np.float64)
    return _repeated_median_fit(y_sorted, x)
