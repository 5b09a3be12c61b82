"""Post-training loss terms for the latent-aligned expert mixture.

Four components combine into the training objective:

  - chunk MSE between predicted and demonstrated action chunks
  - distance consistency: the pairwise cosine-distance matrix of the routing
    rows is pulled toward the cosine-distance matrix of the task latents,
    squared Frobenius mismatch normalized by B^2
  - entropy of the routing distribution (natural log), pushing experts to
    specialize
  - group sparsity: each routing vector is reshaped into a near-square grid,
    squared, smoothed with a Gaussian lowpass filter, square-rooted, and
    summed

Batch versions of the entropy and group-sparse terms are means over rows so
the loss weights stay batch-size independent. All functions accept diffcore
Nodes (or raw arrays, which are lifted to constants) and return scalar
Nodes, differentiable everywhere the training loop can reach.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Node

COSINE_NORM_EPS = 1e-12
SIGMA_IDENTITY_CUTOFF = 0.05


@dataclass
class LossWeights:
    """Coefficients of the regularizers and the Gaussian filter width."""

    lambda_dc: float = 1.0
    lambda_h: float = 0.01
    lambda_g: float = 0.01
    sigma: float = 1.0

    def __post_init__(self):
        for name in ("lambda_dc", "lambda_h", "lambda_g"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if not np.isfinite(self.sigma) or self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


def cosine_distance_matrix(rows) -> Node:
    """Pairwise cosine distances D[i, j] = 1 - cos(row_i, row_j).

    Rows are the B samples of a batch (B >= 2). Norms are guarded by a tiny
    epsilon inside the square root and the diagonal is masked to exactly
    zero, which it is in exact arithmetic.
    """
    rows = dc.as_node(rows)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise ValueError(f"need a batch of >= 2 rows, got shape {rows.shape}")
    b = rows.shape[0]
    gram = dc.matmul(rows, dc.transpose(rows))
    norms = dc.row_norm(rows, eps=COSINE_NORM_EPS, keepdims=True)
    denom = dc.matmul(norms, dc.transpose(norms))
    cos = dc.divide(gram, denom)
    off_diagonal = Node(1.0 - np.eye(b), op="const")
    return dc.multiply(dc.subtract(Node(np.asarray(1.0)), cos), off_diagonal)


def distance_consistency_loss(latents, routing) -> Node:
    """Squared Frobenius mismatch of the two cosine-distance matrices,
    divided by B^2. Zero iff the latent and routing geometries agree."""
    latents, routing = dc.as_node(latents), dc.as_node(routing)
    if latents.shape[0] != routing.shape[0]:
        raise dc.ShapeMismatch("distance_consistency_loss", latents.shape, routing.shape)
    b = latents.shape[0]
    diff = dc.subtract(cosine_distance_matrix(latents), cosine_distance_matrix(routing))
    return dc.scalar_multiply(dc.reduce_sum(dc.multiply(diff, diff)), 1.0 / (b * b))


def _validate_simplex(p: np.ndarray):
    if p.min() < -1e-9:
        raise ValueError(f"routing entry {p.min():.3e} below zero")
    sums = p.sum(axis=-1)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise ValueError(f"routing rows must sum to 1 (max dev {np.abs(sums - 1.0).max():.3e})")


def entropy_loss(p) -> Node:
    """Shannon entropy -sum(p log p), natural log, 0 log 0 = 0 via the
    epsilon inside `log`. Batches return the mean over rows."""
    p = dc.as_node(p)
    _validate_simplex(p.value)
    per_row = dc.scalar_multiply(dc.reduce_sum(dc.multiply(p, dc.log(p)), axis=-1), -1.0)
    if per_row.ndim == 0:
        return per_row
    return dc.reduce_mean(per_row)


def routing_grid_shape(n: int):
    """Near-square grid for n experts: R = floor(sqrt(n)) rows, C = ceil(n/R)
    columns, row-major fill with a zero-padded tail."""
    r = max(int(np.floor(np.sqrt(n))), 1)
    c = int(np.ceil(n / r))
    return r, c


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 2D Gaussian of size (2 ceil(2 sigma) + 1)^2. Below the
    identity cutoff the kernel degenerates to [[1]] (no smoothing)."""
    if sigma < SIGMA_IDENTITY_CUTOFF:
        return np.ones((1, 1))
    half = int(np.ceil(2 * sigma))
    ax = np.arange(-half, half + 1, dtype=np.float64)
    gauss = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma**2))
    return gauss / gauss.sum()


def group_sparse_loss(p, sigma: float) -> Node:
    """Sum over the grid of sqrt(gaussian-smoothed squared routing map).

    Each routing vector is reshaped row-major into the near-square grid
    (zero-padded tail), squared elementwise, convolved with the normalized
    Gaussian kernel (zero-padded borders, same-size output), square-rooted,
    and summed. Batches return the mean over rows. With the identity kernel
    this collapses to sum(|p_i|) = 1 on the simplex.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    p = dc.as_node(p)
    single = p.ndim == 1
    rows = dc.reshape(p, (1, p.size)) if single else p
    b, n = rows.shape
    r, c = routing_grid_shape(n)
    if r * c > n:
        rows = dc.concatenate([rows, Node(np.zeros((b, r * c - n)), op="const")], axis=1)
    grid = dc.reshape(rows, (b, r, c))
    smoothed = dc.conv2d_same(dc.multiply(grid, grid), gaussian_kernel(sigma))
    per_row = dc.reduce_sum(dc.sqrt(smoothed), axis=(1, 2))
    if single:
        return dc.reshape(per_row, ())
    return dc.reduce_mean(per_row)


def total_loss(pred_chunks, target_chunks, latents, routing, weights: LossWeights):
    """Weighted combination of the four terms.

    Returns (total, components) where components maps "mse", "dc", "h", "g"
    to the unweighted scalar Nodes. The total equals
    mse + lambda_dc * dc + lambda_h * h + lambda_g * g.
    """
    components = {
        "mse": dc.mse(pred_chunks, target_chunks),
        "dc": distance_consistency_loss(latents, routing),
        "h": entropy_loss(routing),
        "g": group_sparse_loss(routing, weights.sigma),
    }
    total = components["mse"]
    for lam, key in ((weights.lambda_dc, "dc"), (weights.lambda_h, "h"), (weights.lambda_g, "g")):
        total = dc.add(total, dc.scalar_multiply(components[key], lam))
    return total, components
