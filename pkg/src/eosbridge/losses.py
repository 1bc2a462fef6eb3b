"""Training objectives: shifted masked-token prediction, masked-patch
reconstruction, their weighted warm-up combination, and the contrastive
pair loss over bridge-token embeddings."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import BatchConstructionError, ShapeError

MAE_WEIGHT = 0.5
INFONCE_TAU = 0.02


@dataclass(frozen=True)
class LossBreakdown:
    """Per-step scalars for the metrics log; total must equal the stage's
    combination of the components."""
    total: float
    mntp: float = 0.0
    mae: float = 0.0
    infonce: float = 0.0
    n_masked_tokens: int = 0
    n_masked_patches: int = 0
    n_pairs: int = 0

    @classmethod
    def warmup(cls, mntp: float, mae: float, w: float,
               n_tokens: int, n_patches: int) -> "LossBreakdown":
        return cls(total=mntp + w * mae, mntp=mntp, mae=mae,
                   n_masked_tokens=n_tokens, n_masked_patches=n_patches)

    @classmethod
    def reconstruction(cls, mntp: float, n_tokens: int) -> "LossBreakdown":
        return cls(total=mntp, mntp=mntp, n_masked_tokens=n_tokens)

    @classmethod
    def contrastive(cls, infonce: float, n_pairs: int) -> "LossBreakdown":
        return cls(total=infonce, infonce=infonce, n_pairs=n_pairs)


def _zero_scalar() -> Tensor:
    return Tensor(np.zeros(()))


def mntp_loss(predecessor_logits: Tensor, target_ids) -> Tensor:
    """Mean -log p(target | state one position before it).

    Callers supply the LM logits computed at the predecessor rows; targets
    are the pre-masking token ids. Zero masked positions contribute zero,
    never NaN.
    """
    targets = list(target_ids)
    if predecessor_logits.shape[0] != len(targets):
        raise ShapeError(f"{predecessor_logits.shape[0]} logit rows for "
                         f"{len(targets)} targets")
    if not targets:
        return _zero_scalar()
    return ad.cross_entropy_from_logits(predecessor_logits, targets)


def mae_loss(predicted: Tensor, original) -> Tensor:
    """Mean per-patch squared error over the masked patches (equals the
    elementwise mean since every patch has the same width)."""
    target = original if isinstance(original, Tensor) else Tensor(original)
    if predicted.shape[0] == 0 and target.shape[0] == 0:
        return _zero_scalar()
    return ad.mse(predicted, target)


def warmup_loss(mntp: Tensor, mae: Tensor, w: float = MAE_WEIGHT) -> Tensor:
    if w < 0:
        raise ValueError(f"reconstruction weight must be >= 0, got {w}")
    return ad.add(mntp, ad.scale(mae, w))


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """dot(a, b) / (|a| |b|); degenerate on zero-norm input."""
    return ad.sum_all(ad.multiply(ad.l2_normalize(a), ad.l2_normalize(b)))


def infonce(queries: Tensor, targets: Tensor,
            tau: float = INFONCE_TAU) -> Tensor:
    """Mean row-wise cross-entropy over the cosine-similarity matrix at
    temperature tau, diagonal entries as positives, all other targets in the
    batch as negatives. One-directional (query -> target)."""
    if queries.shape != targets.shape:
        raise ShapeError(f"query batch {queries.shape} vs target batch "
                         f"{targets.shape}")
    b = queries.shape[0]
    if b < 2:
        raise BatchConstructionError(
            f"contrastive batch needs >= 2 pairs for negatives, got {b}")
    sims = ad.matmul(ad.l2_normalize(queries),
                     ad.transpose(ad.l2_normalize(targets)))
    return ad.cross_entropy_from_logits(ad.scale(sims, 1.0 / tau),
                                        list(range(b)))
