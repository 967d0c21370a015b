"""Watch the co-teacher shadow chase the student.

The shadow is a full copy of the student whose weights follow

    shadow <- decay * shadow + (1 - decay) * student

after every optimizer step. With decay 0.99 the shadow averages over
roughly the last hundred iterations, which is what makes it a steadier
consistency target than the student itself.
"""

import torch

from actnet import EmaCoTeacher, ModelSpec, build_model


def first_weight(module):
    return next(module.parameters()).flatten()[0].item()


def main():
    student = build_model(ModelSpec(2, 4, input_side=16), seed=0)
    shadow = EmaCoTeacher(student, decay=0.99)

    # Freeze the student at a shifted point and watch the gap contract
    # geometrically.
    with torch.no_grad():
        for p in student.parameters():
            p.add_(1.0)

    start_gap = first_weight(student) - first_weight(shadow.model)
    print(f"{'step':>5} {'gap':>10} {'gap/start':>10}")
    for step in range(1, 501):
        shadow.update(student)
        if step in (1, 10, 100, 250, 500):
            gap = first_weight(student) - first_weight(shadow.model)
            print(f"{step:>5} {gap:>10.6f} {gap / start_gap:>10.6f}")
    print(f"expected after 500 steps: {0.99 ** 500:.6f} of the initial gap")

    # Rampup mode trusts the student more in the first few dozen steps,
    # which matters when the student starts from random weights.
    fresh = build_model(ModelSpec(2, 4, input_side=16), seed=1)
    ramped = EmaCoTeacher(fresh, decay=0.99, rampup=True)
    print("\neffective decay with rampup on:")
    for step in (0, 5, 50, 500):
        ramped.step_count = step
        print(f"  step {step:>4}: {ramped.effective_decay():.4f}")


if __name__ == "__main__":
    main()
