"""Dice overlap evaluation.

DSC is computed per 2D slice and averaged per class over the slices
whose ground truth actually contains that class; background is never
reported. Two empty masks agree perfectly, so that pair scores 1.0.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import SliceSample

DEFAULT_CLASS_NAMES = ("RV", "MYO", "LV")


def class_names_for(num_classes: int) -> tuple[str, ...]:
    """Foreground class names for a label space of the given size."""
    if num_classes < 2:
        raise ValueError("need at least one foreground class")
    if num_classes == 4:
        return DEFAULT_CLASS_NAMES
    return tuple(f"class{i}" for i in range(1, num_classes))


def dsc(pred_mask: np.ndarray, gt_mask: np.ndarray, class_id: int) -> float:
    """Dice similarity for one class: 2|P and G| / (|P| + |G|)."""
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(
            f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}"
        )
    pred = pred_mask == class_id
    gt = gt_mask == class_id
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / denom


@dataclass
class EvalReport:
    split: str
    sample_count: int
    class_names: tuple[str, ...]
    per_class_dsc: dict[str, float] = field(default_factory=dict)
    per_class_support: dict[str, int] = field(default_factory=dict)
    mean_dsc: float = math.nan

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        cols = [*self.per_class_dsc.keys(), "Mean"]
        vals = [*self.per_class_dsc.values(), self.mean_dsc]
        head = "  ".join(f"{c:>8}" for c in cols)
        body = "  ".join(f"{v:8.4f}" for v in vals)
        return f"{head}\n{body}"


def evaluate_model(
    model: torch.nn.Module,
    samples: list[SliceSample],
    class_names: tuple[str, ...] = DEFAULT_CLASS_NAMES,
    split: str = "val",
    batch_size: int = 8,
) -> EvalReport:
    """Score a model over a list of labeled slices.

    Classes absent from every ground-truth mask are left out of the
    report (their average would be over an empty set); mean_dsc averages
    the classes that do appear.
    """
    if not samples:
        raise ValueError("cannot evaluate on an empty sample list")
    for s in samples:
        if s.mask is None:
            raise ValueError(f"sample {s.sample_id!r} has no mask to score against")

    was_training = model.training
    model.eval()
    scores: dict[int, list[float]] = {i + 1: [] for i in range(len(class_names))}
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            images = torch.from_numpy(np.stack([s.image for s in chunk]))
            pred = model(images).argmax(dim=1).numpy()
            for k, s in enumerate(chunk):
                for class_id in scores:
                    if (s.mask == class_id).any():
                        scores[class_id].append(dsc(pred[k], s.mask, class_id))
    if was_training:
        model.train()

    report = EvalReport(split=split, sample_count=len(samples), class_names=class_names)
    for class_id, vals in scores.items():
        if vals:
            name = class_names[class_id - 1]
            report.per_class_dsc[name] = float(np.mean(vals))
            report.per_class_support[name] = len(vals)
    if report.per_class_dsc:
        report.mean_dsc = float(np.mean(list(report.per_class_dsc.values())))
    return report


def write_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(report.to_json())
