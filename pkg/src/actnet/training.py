"""Two-phase training: mean-teacher pretraining, then asymmetric co-teaching.

Phase 1 (pretrain_mean_teacher) trains a single network on the
semi-supervised pool with an EMA partner providing the consistency
target. Phase 2 (train_act) trains the small student against two
teachers at once: the frozen phase-1 big model through temperature-
softened distillation, and its own EMA shadow through plain
consistency.

One TrainingRun instance owns everything that changes during training
(model, EMA partner, optimizer, sampler, perturbation RNG) and can
serialize all of it, which is what makes mid-run checkpoints resume to
bitwise-identical trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .config import ConfigError, TrainConfig, config_digest, config_from_text, config_to_text
from .data import DatasetSplits, SemiBatch, SemiBatchSampler, add_noise, apply_geometry, sample_geometry
from .ema import EmaCoTeacher, coteacher_forward, ema_update, init_ema
from .losses import (
    co_consistency_loss,
    kd_consistency_loss,
    soft_prediction,
    student_total_loss,
    supervised_loss,
)
from .metrics import EvalReport, class_names_for, evaluate_model
from .models import ModelSpec, build_model

CHECKPOINT_FORMAT = 1


class TrainingDivergedError(RuntimeError):
    """Loss or gradients went non-finite at a known iteration."""

    def __init__(self, iteration: int, detail: str):
        super().__init__(f"training diverged at iteration {iteration}: {detail}")
        self.iteration = iteration


def lr_at(iteration: int, base_lr: float = 0.01, t_max: int = 30000, power: float = 0.9) -> float:
    """Polynomial decay: base_lr * (1 - t / t_max) ** power."""
    if t_max < 1:
        raise ValueError(f"t_max must be at least 1, got {t_max}")
    if not 0 <= iteration <= t_max:
        raise ValueError(f"iteration {iteration} outside [0, {t_max}]")
    return base_lr * (1.0 - iteration / t_max) ** power


def sgd_step(
    params: list[torch.Tensor],
    grads: list[torch.Tensor],
    velocity: list[torch.Tensor],
    lr: float,
    momentum: float,
    names: list[str] | None = None,
) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    """One momentum-SGD update: v <- m v + g, then p <- p - lr v.

    Updates tensors in place and returns them. This is the reference
    update rule; the training loop delegates to torch.optim.SGD, which
    implements the identical recurrence (a test pins that equivalence).
    """
    if not (len(params) == len(grads) == len(velocity)):
        raise ValueError("params, grads and velocity must have equal lengths")
    for i, (p, g, v) in enumerate(zip(params, grads, velocity)):
        label = names[i] if names else f"param[{i}]"
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(
                f"{label}: shape mismatch, param {tuple(p.shape)}, "
                f"grad {tuple(g.shape)}, velocity {tuple(v.shape)}"
            )
        if not torch.isfinite(g).all():
            raise ValueError(f"{label}: non-finite gradient")
        with torch.no_grad():
            v.mul_(momentum).add_(g)
            p.add_(v, alpha=-lr)
    return params, velocity


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    config: TrainConfig
    digest: str
    iteration: int
    student_state: dict
    ema_state: dict | None
    optimizer_state: dict
    sampler_state: dict
    perturb_rng_state: dict
    best: dict | None  # iteration, mean_dsc, student_state
    format_version: int = CHECKPOINT_FORMAT


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    payload = {
        "format_version": ckpt.format_version,
        "config_text": config_to_text(ckpt.config),
        "digest": ckpt.digest,
        "iteration": ckpt.iteration,
        "student_state": ckpt.student_state,
        "ema_state": ckpt.ema_state,
        "optimizer_state": ckpt.optimizer_state,
        "sampler_state": ckpt.sampler_state,
        "perturb_rng_state": ckpt.perturb_rng_state,
        "best": ckpt.best,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {version!r} in {path}")
    config = config_from_text(payload["config_text"])
    stored = payload["digest"]
    if config_digest(config) != stored:
        raise ValueError(f"checkpoint digest mismatch in {path}; file corrupt?")
    return Checkpoint(
        config=config,
        digest=stored,
        iteration=payload["iteration"],
        student_state=payload["student_state"],
        ema_state=payload["ema_state"],
        optimizer_state=payload["optimizer_state"],
        sampler_state=payload["sampler_state"],
        perturb_rng_state=payload["perturb_rng_state"],
        best=payload["best"],
    )


def trained_params_from(ckpt: Checkpoint) -> dict:
    """Best-validation parameters if a best was recorded, else final."""
    if ckpt.best is not None:
        return ckpt.best["student_state"]
    return ckpt.student_state


def model_from_checkpoint(ckpt: Checkpoint, use_best: bool = True):
    """Rebuild the trained network from a checkpoint for inference."""
    model = build_model(ckpt.config.student_spec(), seed=ckpt.config.seed)
    model.load_state_dict(trained_params_from(ckpt) if use_best else ckpt.student_state)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# The training loop


@dataclass
class IterationStats:
    iteration: int
    lr: float
    loss_seg: float
    loss_kd: float | None
    loss_co: float | None
    loss_total: float
    val_mean_dsc: float | None = None


@dataclass
class TrainResult:
    config: TrainConfig
    iterations: int
    best: dict | None
    final_val: EvalReport | None
    history: list[IterationStats]


class _MetricsWriter:
    """Append-mode CSV with a timestamp comment line above the header."""

    COLUMNS = ("iteration", "lr", "loss_seg", "loss_kd", "loss_co", "loss_total", "val_mean_dsc")

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = open(self.path, "a")
        if fresh:
            stamp = datetime.now(timezone.utc).isoformat()
            self._fh.write(f"# written {stamp}\n")
            self._fh.write(",".join(self.COLUMNS) + "\n")
            self._fh.flush()

    def write(self, stats: IterationStats) -> None:
        def fmt(v):
            return "" if v is None else repr(v)

        row = (
            str(stats.iteration),
            repr(stats.lr),
            repr(stats.loss_seg),
            fmt(stats.loss_kd),
            fmt(stats.loss_co),
            repr(stats.loss_total),
            fmt(stats.val_mean_dsc),
        )
        self._fh.write(",".join(row) + "\n")

    def close(self) -> None:
        self._fh.flush()
        self._fh.close()


class TrainingRun:
    """All mutable training state for one phase, steppable one iteration at a time.

    teacher_state supplies the frozen big model's parameters and is
    required whenever the distillation pathway is active (KD or ACT mode
    with lambda_kd > 0). student_init overrides the seeded construction
    of the trainable network, which is how phase 2 starts from the
    phase-1 checkpoint.
    """

    def __init__(
        self,
        config: TrainConfig,
        data: DatasetSplits,
        teacher_state: dict | None = None,
        student_init: dict | None = None,
    ):
        self.config = config
        self.data = data
        self.iteration = 0
        self.weights = config.loss_weights()
        self.perturbation_spec = config.perturbation()

        self.kd_active = config.mode in ("KD", "ACT") and config.lambda_kd > 0
        self.co_active = config.mode in ("MT", "ACT") and config.lambda_co > 0
        if self.kd_active and teacher_state is None:
            raise ConfigError(
                f"mode {config.mode} with lambda_kd={config.lambda_kd} "
                "needs a pretrained teacher"
            )

        self.student = build_model(config.student_spec(), seed=config.seed)
        if student_init is not None:
            self.student.load_state_dict(student_init)

        self.teacher = None
        if self.kd_active:
            self.teacher = build_model(config.teacher_spec(), seed=config.seed)
            self.teacher.load_state_dict(teacher_state)
            self.teacher.eval()
            for p in self.teacher.parameters():
                p.requires_grad_(False)

        self.ema: EmaCoTeacher | None = None
        if self.co_active:
            self.ema = init_ema(self.student, config.ema_decay, config.ema_rampup)

        self.optimizer = torch.optim.SGD(
            self.student.parameters(), lr=config.base_lr, momentum=config.momentum
        )

        # Unlabeled slices contribute only through consistency terms, so
        # when neither term is active the batch carries none. This also
        # keeps the RNG streams of an ACT run with both weights at zero
        # aligned with a plain fully-supervised run.
        self.unlabeled_quota = (
            config.unlabeled_batch if (self.kd_active or self.co_active) else 0
        )
        self.sampler = SemiBatchSampler(
            data.train_labeled,
            data.train_unlabeled if self.unlabeled_quota else [],
            config.labeled_batch,
            self.unlabeled_quota,
            seed=np.random.SeedSequence([config.seed, 0]),
        )
        self.perturb_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))

        self.best: dict | None = None
        self.class_names = class_names_for(config.num_classes)

    # -- one iteration ------------------------------------------------

    def _build_views(self, batch: SemiBatch):
        """Perturb one batch into the per-network input views.

        Draw order is fixed: geometry for every sample (labeled first),
        then the student's noise fields, then the co-teacher's. The
        teacher reads the geometric view without noise. Masks go through
        the same geometric draw as their image.
        """
        samples = batch.labeled + batch.unlabeled
        geoms = [sample_geometry(self.perturbation_spec, self.perturb_rng) for _ in samples]
        bases = [apply_geometry(s.image, g) for s, g in zip(samples, geoms)]
        labels = [
            apply_geometry(s.mask, g) for s, g in zip(batch.labeled, geoms[: len(batch.labeled)])
        ]

        sigma = self.perturbation_spec.noise_sigma
        student_in = np.stack([add_noise(b, sigma, self.perturb_rng) for b in bases])
        cot_in = None
        if self.co_active:
            cot_in = np.stack([add_noise(b, sigma, self.perturb_rng) for b in bases])
        teacher_in = np.stack(bases) if self.kd_active else None

        to_t = lambda arr: None if arr is None else torch.from_numpy(arr)
        return (
            to_t(student_in),
            torch.from_numpy(np.stack(labels)),
            to_t(cot_in),
            to_t(teacher_in),
        )

    def step(self) -> IterationStats:
        cfg = self.config
        if self.iteration >= cfg.t_max:
            raise RuntimeError(f"run already finished its {cfg.t_max} iterations")
        lr = lr_at(self.iteration, cfg.base_lr, cfg.t_max)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

        batch = self.sampler.next_batch()
        student_in, labels, cot_in, teacher_in = self._build_views(batch)
        n_lab = len(batch.labeled)

        self.student.train()
        logits = self.student(student_in)
        if not torch.isfinite(logits).all():
            raise TrainingDivergedError(self.iteration, "non-finite student logits")
        seg = supervised_loss(logits[:n_lab], labels, self.weights.dice_smooth)

        kd = None
        if self.kd_active:
            with torch.no_grad():
                teacher_logits = self.teacher(teacher_in)
            kd = kd_consistency_loss(
                soft_prediction(logits, self.weights.temperature),
                soft_prediction(teacher_logits, self.weights.temperature),
            )

        co = None
        if self.co_active:
            coteacher_logits = coteacher_forward(self.ema, cot_in)
            co = co_consistency_loss(
                soft_prediction(logits).probs, soft_prediction(coteacher_logits).probs
            )

        try:
            total = student_total_loss(seg, kd, co, self.weights)
        except ValueError as exc:
            raise TrainingDivergedError(self.iteration, str(exc)) from exc

        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        for name, p in self.student.named_parameters():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise TrainingDivergedError(self.iteration, f"non-finite gradient in {name}")
        self.optimizer.step()
        if self.ema is not None:
            ema_update(self.ema, self.student)

        stats = IterationStats(
            iteration=self.iteration,
            lr=lr,
            loss_seg=seg.item(),
            loss_kd=None if kd is None else kd.item(),
            loss_co=None if co is None else co.item(),
            loss_total=total.item(),
        )
        self.iteration += 1
        return stats

    # -- validation and the full loop ----------------------------------

    def evaluate(self, samples=None, split: str = "val") -> EvalReport:
        samples = self.data.val if samples is None else samples
        return evaluate_model(self.student, samples, self.class_names, split=split)

    def _consider_best(self, mean_dsc: float) -> None:
        if self.best is None or mean_dsc > self.best["mean_dsc"]:
            self.best = {
                "iteration": self.iteration,
                "mean_dsc": mean_dsc,
                "student_state": {
                    k: v.detach().clone() for k, v in self.student.state_dict().items()
                },
            }

    def _record_val(self, stats: IterationStats) -> None:
        report = self.evaluate()
        stats.val_mean_dsc = report.mean_dsc
        self._consider_best(report.mean_dsc)

    def run(
        self,
        out_path: str | Path | None = None,
        metrics_path: str | Path | None = None,
        progress: Callable[[IterationStats], None] | None = None,
    ) -> TrainResult:
        """Train from the current iteration to t_max."""
        cfg = self.config
        writer = _MetricsWriter(metrics_path) if metrics_path else None
        history: list[IterationStats] = []
        can_validate = bool(self.data.val)
        # Periodic validation also scores the starting weights, so a run
        # warm started from a good checkpoint keeps that checkpoint as
        # the incumbent best until training actually beats it. Random
        # inits never win this. Evaluation draws no random numbers, so
        # the training trajectory is unaffected.
        if can_validate and cfg.eval_every and self.iteration == 0:
            self._consider_best(self.evaluate().mean_dsc)
        try:
            while self.iteration < cfg.t_max:
                stats = self.step()
                due = cfg.eval_every and self.iteration % cfg.eval_every == 0
                if can_validate and (due or self.iteration == cfg.t_max):
                    self._record_val(stats)
                if writer:
                    writer.write(stats)
                if progress:
                    progress(stats)
                history.append(stats)
                if (
                    out_path
                    and cfg.checkpoint_every
                    and self.iteration % cfg.checkpoint_every == 0
                    and self.iteration < cfg.t_max
                ):
                    save_checkpoint(self.to_checkpoint(), out_path)
        finally:
            if writer:
                writer.close()
        if out_path:
            save_checkpoint(self.to_checkpoint(), out_path)
        final_val = None
        if can_validate and history:
            final_val = self.evaluate()
        return TrainResult(
            config=cfg,
            iterations=self.iteration,
            best=self.best,
            final_val=final_val,
            history=history,
        )

    # -- state --------------------------------------------------------

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.config,
            digest=config_digest(self.config),
            iteration=self.iteration,
            student_state=self.student.state_dict(),
            ema_state=None if self.ema is None else self.ema.state_dict(),
            optimizer_state=self.optimizer.state_dict(),
            sampler_state=self.sampler.state(),
            perturb_rng_state=self.perturb_rng.bit_generator.state,
            best=self.best,
        )

    def load_checkpoint_state(self, ckpt: Checkpoint) -> None:
        """Restore mid-run state; the checkpoint must match this run's config."""
        if config_digest(self.config) != ckpt.digest:
            raise ConfigError(
                "checkpoint was written under a different configuration "
                f"(digest {ckpt.digest[:12]} vs {config_digest(self.config)[:12]})"
            )
        self.iteration = ckpt.iteration
        self.student.load_state_dict(ckpt.student_state)
        if (self.ema is None) != (ckpt.ema_state is None):
            raise ConfigError("checkpoint EMA state does not match the run's mode")
        if self.ema is not None:
            self.ema.load_state_dict(ckpt.ema_state)
        self.optimizer.load_state_dict(ckpt.optimizer_state)
        self.sampler.restore(ckpt.sampler_state)
        self.perturb_rng.bit_generator.state = ckpt.perturb_rng_state
        self.best = ckpt.best


def resume_run(
    ckpt: Checkpoint, data: DatasetSplits, teacher_state: dict | None = None
) -> TrainingRun:
    """Rebuild a TrainingRun exactly as it was when the checkpoint was saved."""
    run = TrainingRun(ckpt.config, data, teacher_state=teacher_state)
    run.load_checkpoint_state(ckpt)
    return run


# ---------------------------------------------------------------------------
# The two phases


def pretrain_mean_teacher(
    spec: ModelSpec,
    data: DatasetSplits,
    config: TrainConfig,
    out_path: str | Path | None = None,
    metrics_path: str | Path | None = None,
    progress: Callable[[IterationStats], None] | None = None,
) -> tuple[TrainResult, Checkpoint]:
    """Phase 1: train one network of the given spec with an EMA partner.

    The returned checkpoint's best-validation parameters are what phase
    2 consumes, either as the frozen teacher or as the student's
    starting point.
    """
    if config.mode not in ("MT", "FS"):
        raise ConfigError(f"pretraining runs in MT or FS mode, not {config.mode}")
    config = replace(
        config,
        student_layers=spec.num_encoder_layers,
        student_width=spec.initial_channels,
        in_channels=spec.in_channels,
        num_classes=spec.num_classes,
        input_side=spec.input_side,
    )
    run = TrainingRun(config, data)
    result = run.run(out_path=out_path, metrics_path=metrics_path, progress=progress)
    return result, run.to_checkpoint()


def train_act(
    data: DatasetSplits,
    config: TrainConfig,
    teacher_checkpoint: Checkpoint | str | Path | None,
    student_init: Checkpoint | str | Path | None = None,
    out_path: str | Path | None = None,
    metrics_path: str | Path | None = None,
    progress: Callable[[IterationStats], None] | None = None,
) -> tuple[TrainResult, Checkpoint]:
    """Phase 2: co-teach the student from the frozen teacher and its own EMA.

    The teacher checkpoint must describe the same architecture the
    config names as the teacher. The student usually starts from its own
    phase-1 checkpoint (student_init); passing None trains from scratch.
    The learning-rate schedule and the EMA partner start fresh either
    way.
    """
    if config.mode not in ("ACT", "KD"):
        raise ConfigError(f"train_act runs in ACT or KD mode, not {config.mode}")

    teacher_state = None
    if isinstance(teacher_checkpoint, (str, Path)):
        teacher_checkpoint = load_checkpoint(teacher_checkpoint)
    if teacher_checkpoint is not None:
        trained_spec = teacher_checkpoint.config.student_spec()
        if trained_spec != config.teacher_spec():
            raise ConfigError(
                f"teacher checkpoint holds {trained_spec.label()} but the config "
                f"expects {config.teacher_spec().label()}"
            )
        teacher_state = trained_params_from(teacher_checkpoint)

    init_state = None
    if isinstance(student_init, (str, Path)):
        student_init = load_checkpoint(student_init)
    if student_init is not None:
        init_spec = student_init.config.student_spec()
        if init_spec != config.student_spec():
            raise ConfigError(
                f"student init checkpoint holds {init_spec.label()} but the config "
                f"expects {config.student_spec().label()}"
            )
        init_state = trained_params_from(student_init)

    run = TrainingRun(config, data, teacher_state=teacher_state, student_init=init_state)
    result = run.run(out_path=out_path, metrics_path=metrics_path, progress=progress)
    return result, run.to_checkpoint()
