"""Training objective: multi-scale MSE, smooth-L1, least-squares adversarial terms.

All predictions and targets are in normalized dose units (dose divided by
the prescription dose).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .tensor import (
    ShapeError,
    Tensor,
    add,
    mean_all,
    scalar_add,
    scalar_mul,
    smooth_l1,
    square,
    sub,
)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 2.0
    lambda2: float = 1.0
    lambda3: float = 0.5
    delta: float = 1.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda3 < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")


@dataclass
class LossReport:
    """Scalar loss values recorded for one training step."""

    total: float
    l_g: float
    l_final: float
    l_ds: float
    l_adv_g: float
    l_adv_d: float
    ds_terms: list[float] = field(default_factory=list)

    FIELDS = ("total", "l_g", "l_final", "l_ds", "l_adv_g", "l_adv_d")

    def as_row(self) -> tuple[float, ...]:
        return tuple(getattr(self, name) for name in self.FIELDS)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    return mean_all(square(sub(pred, target)))


def deep_supervision_terms(heads: Sequence[Tensor], targets: Sequence[Tensor]) -> list[Tensor]:
    if len(heads) != len(targets):
        raise ShapeError(f"deep supervision: {len(heads)} heads but {len(targets)} targets")
    return [mse(h, t) for h, t in zip(heads, targets)]


def deep_supervision_loss(heads: Sequence[Tensor], targets: Sequence[Tensor]) -> Tensor:
    """Sum over scales of the per-scale mean squared error."""
    terms = deep_supervision_terms(heads, targets)
    if not terms:
        raise ShapeError("deep supervision: no scales")
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


def smooth_l1_loss(pred: Tensor, target: Tensor, delta: float = 1.0) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    return mean_all(smooth_l1(sub(target, pred), delta))


def discriminator_loss(scores_real: Tensor, scores_fake: Tensor) -> Tensor:
    """mean((D(y) - 1)^2) + mean(D(G(x))^2)."""
    if scores_real.size == 0 or scores_fake.size == 0:
        raise ShapeError("adversarial loss: empty batch")
    return add(mean_all(square(scalar_add(scores_real, -1.0))), mean_all(square(scores_fake)))


def generator_adversarial_loss(scores_fake: Tensor) -> Tensor:
    """mean((D(G(x)) - 1)^2)."""
    if scores_fake.size == 0:
        raise ShapeError("adversarial loss: empty batch")
    return mean_all(square(scalar_add(scores_fake, -1.0)))


def adversarial_losses(scores_real: Tensor, scores_fake: Tensor) -> tuple[Tensor, Tensor]:
    """Least-squares GAN pair ``(l_adv_d, l_adv_g)``."""
    return discriminator_loss(scores_real, scores_fake), generator_adversarial_loss(scores_fake)


def generator_loss(l_final: Tensor, l_ds: Tensor, w: LossWeights) -> Tensor:
    return add(l_final, scalar_mul(l_ds, w.lambda3))


def total_generator_loss(l_final: Tensor, l_ds: Tensor, l_adv_g: Tensor, w: LossWeights) -> Tensor:
    """lambda1 * (l_final + lambda3 * l_ds) + lambda2 * l_adv_g."""
    l_g = generator_loss(l_final, l_ds, w)
    return add(scalar_mul(l_g, w.lambda1), scalar_mul(l_adv_g, w.lambda2))
