"""coforge: a CPU lab for catastrophic overfitting in fast adversarial training."""

from .attacks import AttackSpec, fgsm, init_perturbation, pgd, random_label_fgsm, step_size_sweep
from .data import Dataset, load_cifar10, subset, synthetic_dataset
from .diagnostics import (
    ChannelVarianceReport,
    PruneReport,
    accuracy_delta_report,
    channel_variance,
    co_sweep,
    parameter_variance,
    prune_and_retrain,
    prune_channel,
)
from .nn import Model, ModelConfig, build_model, first_layer_features, forward, load_checkpoint, save_checkpoint
from .tensor import Tape, Tensor, backward, no_grad
from .training import EpochMetrics, TrainConfig, first_co_epoch, grad_align_penalty, lr_at, sgd_step, train

__version__ = "0.1.0"
