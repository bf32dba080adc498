"""Adversarial training with latent feature relation consistency, on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .errors import (ConfigError, DimensionError, FormatError, IncompatibleCheckpointError, InputError, LabError,
                     NumericalError, UndefinedCorrelationError)
from .tensor import Tensor, no_grad, grad, finite_difference_grad
from .models import ModelSpec, Model, init_model, mini_resnet_spec, mlp_spec, forward, forward_with_taps, predict
from .attacks import AttackConfig, fgsm, pgd, fgsm_config, pgd_config, cw_config, run_attack
from .lfrc import MetricKind, SimilarityMatrix, feature_similarity, lfrc_loss, similarity_matrix, total_loss
from .data import Dataset, load_csv, load_idx, synthetic_gaussians, synthetic_images, augment
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train
from .analysis import (accuracy, ds_da_scatter, export_heatmap, pearson, robust_accuracy, similarity_difference,
                       accuracy_difference, transfer_eval)
