"""Run both training phases end to end at toy scale.

Phase 1 pretrains the large network and the small student separately
with the mean-teacher recipe on a mostly unlabeled synthetic dataset.
Phase 2 restarts the student from its own phase-1 weights and trains it
against three signals at once: the labels, the frozen large network,
and its own moving average. Takes a few minutes on a laptop CPU.
"""

import tempfile
from pathlib import Path

from actnet import (
    ModelSpec,
    TrainConfig,
    evaluate_model,
    generate_synthetic,
    load_dataset,
    model_from_checkpoint,
    pretrain_mean_teacher,
    train_act,
)

ITERS = 400


def main():
    workdir = Path(tempfile.mkdtemp(prefix="two_phase_"))
    data_dir = workdir / "data"
    generate_synthetic(data_dir, count=60, side=32, seed=1, labeled_fraction=0.15)
    data = load_dataset(data_dir, expected_classes=4)
    print(data.summary())

    shared = dict(
        student_layers=2,
        student_width=4,
        teacher_layers=3,
        teacher_width=8,
        input_side=32,
        t_max=ITERS,
        labeled_batch=4,
        unlabeled_batch=4,
        eval_every=100,
        base_lr=0.005,
    )

    print(f"\nphase 1a: mean-teacher pretraining of the large network, {ITERS} iters")
    teacher_cfg = TrainConfig(mode="MT", seed=0, **shared)
    result, teacher_ckpt = pretrain_mean_teacher(
        ModelSpec(3, 8, input_side=32), data, teacher_cfg
    )
    print(f"  best val DSC {result.best['mean_dsc']:.4f} at iter {result.best['iteration']}")

    print(f"\nphase 1b: mean-teacher pretraining of the student, {ITERS} iters")
    pre_cfg = TrainConfig(mode="MT", seed=0, **shared)
    result, pre_ckpt = pretrain_mean_teacher(
        ModelSpec(2, 4, input_side=32), data, pre_cfg
    )
    print(f"  best val DSC {result.best['mean_dsc']:.4f} at iter {result.best['iteration']}")

    print(f"\nphase 2: student distillation from its phase-1 weights, {ITERS} iters")
    act_cfg = TrainConfig(mode="ACT", seed=0, **shared)
    result, student_ckpt = train_act(
        data, act_cfg, teacher_checkpoint=teacher_ckpt, student_init=pre_ckpt
    )
    print(f"  best val DSC {result.best['mean_dsc']:.4f} at iter {result.best['iteration']}")

    print("\nheld-out comparison:")
    for name, ckpt in (
        ("teacher", teacher_ckpt),
        ("student, phase 1 only", pre_ckpt),
        ("student, both phases", student_ckpt),
    ):
        model = model_from_checkpoint(ckpt)
        report = evaluate_model(model, list(data.test), split="test")
        params = sum(p.numel() for p in model.parameters())
        print(f"  {name:>22}: {params:>7,} params, test mean DSC {report.mean_dsc:.4f}")
    print(f"\nartifacts under {workdir}")


if __name__ == "__main__":
    main()
