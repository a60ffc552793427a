"""Layer-wise PCA of a round's updates into fixed-width per-client features.

Each layer block is reduced independently: the n stacked client blocks are
decomposed by SVD (no mean-centering by default, since updates are deltas and
treated as already centered) and every client keeps its coefficients on the
top k_pc right singular vectors. Concatenating the per-layer coefficients in
canonical layer order gives one fixed-width feature row per client, so the
encoder input width stays k_pc * n_layers regardless of how many clients
report.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SchemaError, UsageError
from .params import LayeredVector, RoundBatch, Schema


@dataclass(frozen=True)
class ProjectedBatch:
    features: np.ndarray  # (n, k_pc * n_layers)
    basis: tuple  # per layer: (name, (k_pc, d_layer) component matrix)
    k_pc: int
    schema: Schema
    means: tuple = None  # per-layer column means when centering was requested

    @property
    def width(self):
        return self.features.shape[1]


def _fix_signs(components):
    """Flip each component so its largest-magnitude entry is non-negative."""
    if components.size == 0:
        return components
    lead = np.abs(components).argmax(axis=1)
    signs = np.sign(components[np.arange(components.shape[0]), lead])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


def _layer_components(block_matrix, k_pc):
    """Top-k_pc right singular vectors of an (n, d) block, zero-padded past the rank."""
    n, d = block_matrix.shape
    out = np.zeros((k_pc, d))
    if not block_matrix.any():
        return out
    _, s, vt = np.linalg.svd(block_matrix, full_matrices=False)
    tol = s[0] * max(n, d) * np.finfo(np.float64).eps
    rank = int((s > tol).sum())
    keep = min(rank, k_pc)
    out[:keep] = _fix_signs(vt[:keep])
    return out


def project(batch: RoundBatch, k_pc: int, center=False) -> ProjectedBatch:
    """Per-layer PCA coefficients of every client update.

    k_pc must lie in [1, n]. Rank-deficient layers (or layers narrower than
    k_pc) contribute zero components and zero coefficients in the padded
    slots. center=True subtracts the per-layer column mean first; off by
    default.
    """
    if not 1 <= k_pc <= batch.n:
        raise UsageError(f"k_pc must be in [1, {batch.n}], got {k_pc}")
    matrix = batch.matrix()
    basis = []
    feats = []
    means = []
    for name, sl in batch.schema.slices():
        block = matrix[:, sl]
        mean = block.mean(axis=0) if center else np.zeros(block.shape[1])
        means.append(mean)
        block = block - mean
        comps = _layer_components(block, k_pc)
        basis.append((name, comps))
        feats.append(block @ comps.T)
    return ProjectedBatch(
        np.hstack(feats), tuple(basis), k_pc, batch.schema, tuple(means) if center else None
    )


def project_query(q: LayeredVector, projected: ProjectedBatch) -> np.ndarray:
    """Coefficients of a single vector in an existing per-layer basis."""
    if q.schema != projected.schema:
        raise SchemaError("query vector schema differs from the projected batch")
    parts = []
    for i, ((name, sl), (basis_name, comps)) in enumerate(
        zip(q.schema.slices(), projected.basis)
    ):
        assert name == basis_name
        block = q.data[sl]
        if projected.means is not None:
            block = block - projected.means[i]
        parts.append(comps @ block)
    return np.concatenate(parts)


def reconstruct(projected: ProjectedBatch) -> np.ndarray:
    """Map feature rows back to flat update vectors (exact when rank <= k_pc)."""
    n = projected.features.shape[0]
    out = np.zeros((n, projected.schema.total_dim))
    col = 0
    for i, ((_, sl), (_, comps)) in enumerate(zip(projected.schema.slices(), projected.basis)):
        coeff = projected.features[:, col : col + projected.k_pc]
        out[:, sl] = coeff @ comps
        if projected.means is not None:
            out[:, sl] += projected.means[i]
        col += projected.k_pc
    return out
