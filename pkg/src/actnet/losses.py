"""Training objectives for the student network.

Three ingredients, combined by student_total_loss:

  * supervised_loss: soft multiclass dice + pixelwise cross-entropy on
    the labeled slices,
  * kd_consistency_loss: MSE between temperature-softened student and
    frozen-teacher probability maps,
  * co_consistency_loss: MSE between plain (temperature 1) student and
    EMA co-teacher probability maps.

Target branches (teacher, co-teacher) are always detached here, so a
caller cannot accidentally backpropagate into them.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    """Trade-off weights and shaping constants for the total objective."""

    lambda_kd: float = 0.5
    lambda_co: float = 0.5
    temperature: float = 20.0
    dice_smooth: float = 1e-5

    def __post_init__(self) -> None:
        if self.lambda_kd < 0 or self.lambda_co < 0:
            raise ValueError("loss weights must be non-negative")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.dice_smooth <= 0:
            raise ValueError("dice_smooth must be positive")


@dataclass
class SoftPrediction:
    """Class probability maps [B, C, H, W] produced at a known temperature."""

    probs: torch.Tensor
    temperature: float


def _check_logits(logits: torch.Tensor) -> None:
    if logits.ndim != 4:
        raise ValueError(f"expected logits of shape [B, C, H, W], got {tuple(logits.shape)}")
    if not torch.isfinite(logits).all():
        raise ValueError("logits contain non-finite values")


def soft_prediction(logits: torch.Tensor, temperature: float = 1.0) -> SoftPrediction:
    """Temperature-softened class probabilities: softmax(logits / T)."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    _check_logits(logits)
    return SoftPrediction(F.softmax(logits / temperature, dim=1), temperature)


def _mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"prediction shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b.detach()).pow(2).mean()


def kd_consistency_loss(student: SoftPrediction, teacher: SoftPrediction) -> torch.Tensor:
    """Distillation term: mean squared error over all softened elements.

    Both sides must have been softened at the same temperature; mixing
    temperatures silently changes what is being matched, so it is an
    error rather than a warning.
    """
    if student.temperature != teacher.temperature:
        raise ValueError(
            f"temperature mismatch: student {student.temperature} "
            f"vs teacher {teacher.temperature}"
        )
    return _mse(student.probs, teacher.probs)


def co_consistency_loss(
    student_probs: torch.Tensor, coteacher_probs: torch.Tensor
) -> torch.Tensor:
    """Self-ensembling term: MSE between unsoftened probability maps."""
    return _mse(student_probs, coteacher_probs)


def dice_loss(logits: torch.Tensor, labels: torch.Tensor, smooth: float = 1e-5) -> torch.Tensor:
    """Soft multiclass dice loss, averaged over classes (background included)."""
    _check_logits(logits)
    _check_labels(logits, labels)
    num_classes = logits.shape[1]
    probs = F.softmax(logits, dim=1)
    onehot = F.one_hot(labels, num_classes).permute(0, 3, 1, 2).to(probs.dtype)
    dims = (0, 2, 3)
    intersection = (probs * onehot).sum(dims)
    cardinality = probs.sum(dims) + onehot.sum(dims)
    dice = (2.0 * intersection + smooth) / (cardinality + smooth)
    return 1.0 - dice.mean()


def cross_entropy_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean pixelwise cross-entropy."""
    _check_logits(logits)
    _check_labels(logits, labels)
    return F.cross_entropy(logits, labels)


def _check_labels(logits: torch.Tensor, labels: torch.Tensor) -> None:
    if labels.ndim != 3 or labels.shape[0] != logits.shape[0] or labels.shape[-2:] != logits.shape[-2:]:
        raise ValueError(
            f"labels of shape {tuple(labels.shape)} do not match logits "
            f"{tuple(logits.shape)}"
        )
    if labels.dtype != torch.long:
        raise ValueError(f"labels must be int64 class indices, got {labels.dtype}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(
            f"label values must lie in [0, {logits.shape[1]}), "
            f"found range [{int(labels.min())}, {int(labels.max())}]"
        )


def supervised_loss(
    logits: torch.Tensor, labels: torch.Tensor, smooth: float = 1e-5
) -> torch.Tensor:
    """Dice + cross-entropy on labeled slices, equally weighted."""
    return dice_loss(logits, labels, smooth) + cross_entropy_loss(logits, labels)


def student_total_loss(
    seg: torch.Tensor,
    kd: torch.Tensor | None,
    co: torch.Tensor | None,
    weights: LossWeights,
) -> torch.Tensor:
    """Combined objective: seg + lambda_kd * kd + lambda_co * co.

    Pass None for a term that is inactive in the current training mode;
    a missing term contributes exactly nothing (not a zero tensor that
    would still appear in the graph).
    """
    total = seg
    if kd is not None:
        total = total + weights.lambda_kd * kd
    if co is not None:
        total = total + weights.lambda_co * co
    if not torch.isfinite(total):
        raise ValueError("total loss is non-finite")
    return total
