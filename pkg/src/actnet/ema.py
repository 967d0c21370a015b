"""Exponential moving average co-teacher.

The co-teacher is a full shadow copy of the student. After every
optimizer step its parameters move toward the student's:

    shadow = decay * shadow + (1 - decay) * student

Batchnorm running statistics are copied outright rather than averaged;
averaging second moments of two different parameter sets has no clean
interpretation, and the copy keeps the shadow model usable for
inference at any point.
"""

from __future__ import annotations

import copy

import torch
from torch import nn


class EmaCoTeacher:
    """Shadow model plus the bookkeeping needed to update and restore it."""

    def __init__(self, student: nn.Module, decay: float = 0.99, rampup: bool = False):
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"decay must lie in [0, 1), got {decay}")
        self.decay = decay
        self.rampup = rampup
        self.step_count = 0
        self.model = copy.deepcopy(student)
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    def effective_decay(self) -> float:
        # Optional warm-up: trust the raw student more while the shadow
        # has seen few updates. Off by default.
        if not self.rampup:
            return self.decay
        return min(self.decay, (self.step_count + 1) / (self.step_count + 10))

    @torch.no_grad()
    def update(self, student: nn.Module) -> None:
        decay = self.effective_decay()
        shadow_params = list(self.model.parameters())
        student_params = list(student.parameters())
        if len(shadow_params) != len(student_params):
            raise ValueError("student and shadow models have different parameter sets")
        for shadow, live in zip(shadow_params, student_params):
            if shadow.shape != live.shape:
                raise ValueError(
                    f"shape mismatch between shadow {tuple(shadow.shape)} "
                    f"and student {tuple(live.shape)}"
                )
            shadow.mul_(decay).add_(live.detach(), alpha=1.0 - decay)
        for shadow_buf, live_buf in zip(self.model.buffers(), student.buffers()):
            shadow_buf.copy_(live_buf)
        self.step_count += 1

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Inference-mode logits from the shadow parameters."""
        self.model.eval()
        return self.model(images)

    def state_dict(self) -> dict:
        return {
            "decay": self.decay,
            "rampup": self.rampup,
            "step_count": self.step_count,
            "model": self.model.state_dict(),
        }

    def load_state_dict(self, state: dict) -> None:
        self.decay = state["decay"]
        self.rampup = state["rampup"]
        self.step_count = state["step_count"]
        self.model.load_state_dict(state["model"])


def init_ema(student: nn.Module, decay: float = 0.99, rampup: bool = False) -> EmaCoTeacher:
    """Start a co-teacher as an exact copy of the student."""
    return EmaCoTeacher(student, decay=decay, rampup=rampup)


def ema_update(state: EmaCoTeacher, student: nn.Module) -> None:
    """One averaging step; call once per optimizer step."""
    state.update(student)


def coteacher_forward(state: EmaCoTeacher, images: torch.Tensor) -> torch.Tensor:
    """Forward through the shadow model without building a graph."""
    return state.forward(images)
