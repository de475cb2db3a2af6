"""Batch contrastive alignment loss.

Given two batches of embeddings whose rows are paired, normalize both,
take the pairwise similarity matrix, and score each row against its own
diagonal entry with softmax cross-entropy.  Matching rows are pulled
together while every other pairing in the batch acts as a negative.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError, DimensionError
from .tensor import (Tensor, as_tensor, matmul, row_normalize, scale,
                     softmax_cross_entropy_rows, transpose)


@dataclass(frozen=True)
class ContrastiveConfig:
    """Loss settings.

    temperature divides the similarities before the softmax; smaller
    values sharpen the distribution.  symmetric averages the row-wise
    loss with the column-wise loss (both retrieval directions).
    """

    temperature: float = 1.0
    symmetric: bool = False

    def __post_init__(self):
        if not (self.temperature > 0.0):
            raise ConfigError(f"temperature must be positive, got {self.temperature}")


def contrastive_loss(z1, z2, config: ContrastiveConfig = ContrastiveConfig()) -> Tensor:
    """Scalar alignment loss between two paired [B x d] batches.

    Gradients flow to both inputs.  The loss is invariant to rescaling
    either batch row-wise (rows are normalized first) and to permuting
    both batches by the same row order.
    """
    z1, z2 = as_tensor(z1), as_tensor(z2)
    if z1.ndim != 2 or z2.ndim != 2:
        raise DimensionError(
            f"contrastive loss needs 2-D batches, got shapes {z1.shape} and {z2.shape}")
    if z1.shape != z2.shape:
        raise DimensionError(
            f"paired batches must share a shape, got {z1.shape} and {z2.shape}")
    batch = z1.shape[0]
    if batch < 1:
        raise DimensionError(f"contrastive loss needs at least one row, got {z1.shape}")

    logits = scale(matmul(row_normalize(z1), transpose(row_normalize(z2))),
                   1.0 / config.temperature)
    targets = range(batch)
    loss = softmax_cross_entropy_rows(logits, targets)
    if config.symmetric:
        reverse = softmax_cross_entropy_rows(transpose(logits), targets)
        loss = scale(loss + reverse, 0.5)
    return loss
