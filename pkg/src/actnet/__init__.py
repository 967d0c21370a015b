"""Asymmetric co-teaching for small segmentation networks.

A compact student U-Net learns simultaneously from scarce labels, from
a frozen large teacher through temperature-softened distillation, and
from an exponential-moving-average copy of itself through consistency
under input perturbations.
"""

from .config import ConfigError, TrainConfig, config_digest, load_config, save_config
from .data import (
    DatasetError,
    DatasetSplits,
    Perturbation,
    SemiBatch,
    SemiBatchSampler,
    SliceSample,
    generate_synthetic,
    load_dataset,
    perturb,
)
from .ema import EmaCoTeacher, coteacher_forward, ema_update, init_ema
from .losses import (
    LossWeights,
    SoftPrediction,
    co_consistency_loss,
    cross_entropy_loss,
    dice_loss,
    kd_consistency_loss,
    soft_prediction,
    student_total_loss,
    supervised_loss,
)
from .metrics import EvalReport, dsc, evaluate_model
from .models import (
    ComplexityReport,
    InvalidSpecError,
    LayerCost,
    ModelSpec,
    SegmentationModel,
    analytic_param_count,
    build_model,
    channel_schedule,
    count_parameters,
    estimate_flops,
    flops_breakdown,
    parameter_bytes,
)
from .training import (
    Checkpoint,
    TrainingDivergedError,
    TrainingRun,
    TrainResult,
    load_checkpoint,
    lr_at,
    model_from_checkpoint,
    pretrain_mean_teacher,
    resume_run,
    save_checkpoint,
    sgd_step,
    train_act,
)

__version__ = "0.1.0"
