"""Show how the three loss terms behave on toy inputs.

The student objective is

    total = seg + lambda_kd * kd + lambda_co * co

where seg is dice plus cross-entropy on labeled slices, kd compares
temperature-softened probability maps against a frozen teacher, and co
compares unsoftened maps against the student's own moving average.
"""

import torch

from actnet import (
    LossWeights,
    co_consistency_loss,
    kd_consistency_loss,
    soft_prediction,
    student_total_loss,
    supervised_loss,
)

torch.manual_seed(0)


def show_softening():
    logits = torch.tensor([[3.0, 0.5, -1.0, -2.5]]).view(1, 4, 1, 1)
    print("one pixel, four classes, logits", logits.flatten().tolist())
    for tau in (1.0, 5.0, 20.0):
        probs = soft_prediction(logits, tau).probs.flatten()
        print(f"  tau {tau:>4.0f}: " + " ".join(f"{p:.3f}" for p in probs))
    print("high temperature keeps the ranking but exposes the tail mass")


def show_terms():
    student = torch.randn(2, 4, 8, 8)
    teacher = student + 0.3 * torch.randn_like(student)
    labels = torch.randint(0, 4, (2, 8, 8))

    seg = supervised_loss(student, labels)
    kd = kd_consistency_loss(soft_prediction(student, 20.0), soft_prediction(teacher, 20.0))
    co = co_consistency_loss(
        soft_prediction(student).probs, soft_prediction(teacher).probs
    )

    weights = LossWeights()
    total = student_total_loss(seg, kd, co, weights)
    print(f"\nseg {seg:.4f}  kd {kd:.6f}  co {co:.6f}")
    print(f"total = {seg:.4f} + {weights.lambda_kd} * {kd:.6f} "
          f"+ {weights.lambda_co} * {co:.6f} = {total:.4f}")

    # Softening shrinks the raw MSE a lot, which is why the kd term is
    # numerically tiny next to seg even when teacher and student differ.
    raw = co_consistency_loss(
        soft_prediction(student).probs, soft_prediction(teacher).probs
    )
    softened = kd_consistency_loss(
        soft_prediction(student, 20.0), soft_prediction(teacher, 20.0)
    )
    print(f"\nsame pair, tau 1 mse {raw:.6f} vs tau 20 mse {softened:.8f}")


def show_agreement_is_zero():
    logits = torch.randn(1, 4, 4, 4)
    kd = kd_consistency_loss(
        soft_prediction(logits, 20.0), soft_prediction(logits.clone(), 20.0)
    )
    print(f"\nperfect agreement: kd term {kd.item():.1f}")


if __name__ == "__main__":
    show_softening()
    show_terms()
    show_agreement_is_zero()
