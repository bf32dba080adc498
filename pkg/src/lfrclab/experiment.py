"""The λ-comparison experiment on synthetic Gaussian images.

Trains one mini-resnet per (seed, λ) pair under PGD-10 adversarial training
and measures, on a held-out test split, the mean similarity-matrix
difference at the last tap and PGD-20 robust accuracy.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .analysis import accuracy, ds_da_scatter, robust_accuracy
from .attacks import AttackConfig, pgd_config
from .checkpoint import model_from_checkpoint
from .data import synthetic_images
from .models import mini_resnet_spec
from .trainer import TrainConfig, train


@dataclass(frozen=True)
class ComparisonSetup:
    classes: int = 4
    size: int = 16
    train_per_class: int = 500
    test_per_class: int = 125
    val_per_class: int = 50
    noise: float = 0.3
    contrast: float = 0.5
    epochs: int = 10
    lr: float = 0.02
    batch_size: int = 64
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    train_iterations: int = 10
    eval_iterations: int = 20
    analysis_batch: int = 100
    # post-activation taps collapse under a large λ without normalization layers
    tap_after_activation: bool = False


@dataclass(frozen=True)
class RunSummary:
    seed: int
    lam: float
    mean_ds: float
    clean_acc: float
    robust_acc: float
    seconds: float
    history: tuple


def comparison_data(setup: ComparisonSetup):
    """(train, validation, test) splits sharing one set of class prototypes."""
    make = lambda n, seed: synthetic_images(setup.classes, n, setup.size, noise=setup.noise,
                                            contrast=setup.contrast, seed=seed, prototype_seed=0)
    return make(setup.train_per_class, 1), make(setup.val_per_class, 3), make(setup.test_per_class, 2)


def comparison_config(setup: ComparisonSetup, lam: float, seed: int) -> TrainConfig:
    spec = mini_resnet_spec((1, setup.size, setup.size), setup.classes)
    spec = replace(spec, tap_after_activation=setup.tap_after_activation)
    attack = AttackConfig(setup.epsilon, setup.step_size, setup.train_iterations, True)
    return TrainConfig(spec, attack, epochs=setup.epochs, batch_size=setup.batch_size, lr=setup.lr, lam=lam, seed=seed)


def run_comparison(setup: ComparisonSetup = ComparisonSetup(), seeds=(0, 1, 2), lams=(0.0, 100.0),
                   progress=None) -> list:
    """Train and evaluate every (seed, λ) pair; returns :class:`RunSummary` objects.

    Evaluation uses the last checkpoint, so no test data leaks into model
    selection.
    """
    train_set, val_set, test_set = comparison_data(setup)
    test = test_set.astype(np.float32)
    attack = pgd_config(setup.epsilon, setup.step_size, setup.eval_iterations)
    out = []
    for seed in seeds:
        for lam in lams:
            start = time.perf_counter()
            result = train(comparison_config(setup, lam, seed), train_set, val_set)
            model = model_from_checkpoint(result.last)
            diags = ds_da_scatter(model, test, attack, setup.analysis_batch, seed=seed)
            summary = RunSummary(seed, float(lam), float(np.mean([d.ds for d in diags])), accuracy(model, test),
                                 robust_accuracy(model, test, attack, seed=seed), time.perf_counter() - start,
                                 tuple(result.history))
            out.append(summary)
            if progress is not None:
                progress(summary)
    return out
