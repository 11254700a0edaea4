"""Region-adaptive hierarchical transform over per-block latent rows.

The analysis pass walks the partition tree bottom-up, replacing each parent by
the weighted mean of its occupied children and recording the right-child
difference at every two-child node.  Synthesis inverts it top-down using the
zero-mean constraint on sibling differences.  Single-child chains pass values
through and contribute no coefficient.

``scale_factors`` returns the diagonal that orthonormalizes the pair under the
occupancy-weighted inner product: dividing coefficients by it preserves the
weighted energy sum(w_n * |z_n|^2), which is what makes one uniform step size
allocate precision by geometric weight.  All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .partition import PartitionTree

__all__ = [
    "CoefficientSet",
    "analyze",
    "synthesize",
    "synthesize_values",
    "synthesize_adjoint",
    "scale_factors",
    "dense_transforms",
]

DENSE_LIMIT = 256


@dataclass(frozen=True)
class CoefficientSet:
    """Root DC row plus right-child delta rows in canonical order.

    ``values`` row 0 is the DC; rows 1.. are deltas, level-major from the root
    down and Morton-ordered within each level.  ``levels`` labels each row (0
    for the DC, the child level for deltas).
    """

    values: np.ndarray  # (num_coefficients, C) float64
    levels: np.ndarray  # (num_coefficients,) int64

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def root_dc(self) -> np.ndarray:
        return self.values[0]

    @property
    def deltas(self) -> np.ndarray:
        return self.values[1:]


def coefficient_levels(tree: PartitionTree) -> np.ndarray:
    return np.concatenate(([0], tree.delta_levels()))


def analyze(tree: PartitionTree, Z: np.ndarray) -> CoefficientSet:
    """Bottom-up transform of block-latent rows into DC + delta coefficients."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] != tree.num_blocks:
        raise ValueError(f"Z must be ({tree.num_blocks}, C), got {Z.shape}")
    deltas_by_level = [None] * tree.target_level
    z = Z
    for level in range(tree.target_level - 1, -1, -1):
        link = tree.links[level]
        n_parent = tree.prefixes[level].shape[0]
        zp = np.empty((n_parent, Z.shape[1]))
        zp[link.single_parent] = z[link.single_child]
        if link.branching.size:
            wl = link.w_left[:, None]
            wr = link.w_right[:, None]
            mean = (wl * z[link.left_child] + wr * z[link.right_child]) / (wl + wr)
            zp[link.branching] = mean
            deltas_by_level[level] = z[link.right_child] - mean
        else:
            deltas_by_level[level] = np.empty((0, Z.shape[1]))
        z = zp
    values = np.concatenate([z] + deltas_by_level, axis=0)
    return CoefficientSet(values=values, levels=coefficient_levels(tree))


def synthesize_values(tree: PartitionTree, values: np.ndarray) -> np.ndarray:
    """Top-down inverse on a raw coefficient matrix (row 0 = DC)."""
    values = np.asarray(values)
    if values.ndim != 2 or values.shape[0] != tree.num_coefficients:
        raise ValueError(
            f"coefficient matrix must be ({tree.num_coefficients}, C), got {values.shape}"
        )
    C = values.shape[1]
    z = values[0:1]
    row = 1
    for level in range(tree.target_level):
        link = tree.links[level]
        n_child = tree.prefixes[level + 1].shape[0]
        zc = np.empty((n_child, C), dtype=values.dtype)
        zc[link.single_child] = z[link.single_parent]
        nb = link.branching.shape[0]
        if nb:
            dzr = values[row : row + nb]
            row += nb
            parent = z[link.branching]
            ratio = (link.w_right / link.w_left)[:, None]
            zc[link.left_child] = parent - ratio * dzr
            zc[link.right_child] = parent + dzr
        z = zc
    return z


def synthesize(tree: PartitionTree, coeffs: CoefficientSet) -> np.ndarray:
    return synthesize_values(tree, coeffs.values)


def synthesize_adjoint(tree: PartitionTree, grad_Z: np.ndarray) -> np.ndarray:
    """Transpose of the synthesis map applied to a block-row gradient.

    Runs the top-down recursion in reverse: sibling gradients merge into the
    parent slot, and each right-child delta receives g_R - (w_R/w_L) * g_L.
    """
    g = np.asarray(grad_Z)
    if g.ndim != 2 or g.shape[0] != tree.num_blocks:
        raise ValueError(f"gradient must be ({tree.num_blocks}, C), got {g.shape}")
    C = g.shape[1]
    grads_by_level = [None] * tree.target_level
    for level in range(tree.target_level - 1, -1, -1):
        link = tree.links[level]
        n_parent = tree.prefixes[level].shape[0]
        gp = np.empty((n_parent, C), dtype=g.dtype)
        gp[link.single_parent] = g[link.single_child]
        if link.branching.size:
            gl = g[link.left_child]
            gr = g[link.right_child]
            gp[link.branching] = gl + gr
            ratio = (link.w_right / link.w_left)[:, None]
            grads_by_level[level] = gr - ratio * gl
        else:
            grads_by_level[level] = np.empty((0, C), dtype=g.dtype)
        g = gp
    return np.concatenate([g] + grads_by_level, axis=0)


def scale_factors(tree: PartitionTree) -> np.ndarray:
    """Per-coefficient normalization, aligned with the canonical row order.

    The DC entry is ``(total points)^(-1/2)``.  A right-child delta gets
    ``(w_R (w_L + w_R) / w_L)^(-1/2)``, the form under which dividing the
    coefficients restores the weighted Parseval identity (the weight roles are
    swapped relative to the left-child expression; the two agree only for
    equal sibling weights).
    """
    parts = [np.array([1.0 / np.sqrt(float(tree.point_count))])]
    for link in tree.links:
        wl, wr = link.w_left, link.w_right
        parts.append(1.0 / np.sqrt(wr * (wl + wr) / wl))
    return np.concatenate(parts)


def dense_transforms(tree: PartitionTree) -> tuple[np.ndarray, np.ndarray]:
    """Materialize the analysis/synthesis matrices column by column.

    Test-scale only (N <= 256): column j of the analysis matrix is the
    transform of the j-th unit block row, and likewise for synthesis.
    """
    n = tree.num_blocks
    if n > DENSE_LIMIT:
        raise ValueError(f"dense materialization limited to N <= {DENSE_LIMIT}, got {n}")
    eye = np.eye(n)
    Ta = analyze(tree, eye).values  # analyze acts column-wise on channels
    Ts = synthesize_values(tree, eye)
    return Ta, Ts
