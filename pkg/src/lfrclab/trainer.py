"""Adversarial training with the relation consistency regularizer.

Each step draws a shuffled mini-batch, crafts adversarial examples with PGD,
feeds natural and adversarial batches through the network, and takes an SGD
step on ``CE(f(x'), y) + lam * sum_l LFRC_l(x, x')``.  All randomness comes
from generators keyed on ``(seed, stream, epoch, batch)``, so a run is
bit-reproducible.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, asdict
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .analysis import accuracy, robust_accuracy
from .attacks import AttackConfig, pgd
from .checkpoint import Checkpoint, checkpoint_from_model
from .data import Dataset, augment as augment_batch, iterate_batches
from .errors import ConfigError, NumericalError
from .lfrc import MetricKind, feature_similarity, lfrc_loss, total_loss, DEFAULT_EPS_NORM
from .models import Model, ModelSpec, forward_with_taps, init_model

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "lr", "train_ce", "train_lfrc", "val_clean_acc", "val_robust_acc")

# random streams
_SHUFFLE, _ATTACK, _AUGMENT, _VALIDATION = 0, 1, 2, 3


@dataclass(frozen=True)
class TrainConfig:
    model: ModelSpec
    attack: AttackConfig
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.1
    lr_milestones: tuple | None = None
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    lam: float = 100.0
    metric: str = "exp"
    seed: int = 0
    val_attack: AttackConfig | None = None
    lfrc_enabled: bool = True
    detach_natural: bool = False
    augment: bool = False
    eps_norm: float = DEFAULT_EPS_NORM
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch size must be >= 2 for a similarity matrix")
        if not self.lr >= 0:
            raise ConfigError("learning rate must be non-negative")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        MetricKind(self.metric)
        if self.lr_milestones is not None:
            object.__setattr__(self, "lr_milestones", tuple(int(m) for m in self.lr_milestones))
        if self.val_attack is None:
            object.__setattr__(self, "val_attack", AttackConfig(
                self.attack.epsilon, self.attack.step_size, 10, True, "cross-entropy", self.attack.data_range))

    @property
    def tap_points(self) -> tuple:
        return self.model.tap_points

    @property
    def milestones(self) -> tuple:
        if self.lr_milestones is not None:
            return self.lr_milestones
        return (int(math.floor(0.75 * self.epochs)), int(math.floor(0.90 * self.epochs)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["attack"] = self.attack.to_dict()
        d["val_attack"] = self.val_attack.to_dict()
        d["lr_milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelSpec.from_dict(d["model"])
        d["attack"] = AttackConfig.from_dict(d["attack"])
        if d.get("val_attack") is not None:
            d["val_attack"] = AttackConfig.from_dict(d["val_attack"])
        if d.get("lr_milestones") is not None:
            d["lr_milestones"] = tuple(d["lr_milestones"])
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_ce: float
    train_lfrc: float
    val_clean_acc: float
    val_robust_acc: float


class TrainResult(NamedTuple):
    best: Checkpoint
    last: Checkpoint
    history: list


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Piecewise-constant rate: ``lr * decay ** (#milestones <= epoch)``."""
    passed = sum(1 for m in config.milestones if epoch >= m)
    return config.lr * config.lr_decay ** passed


def sgd_step(params, grads, state: dict, lr: float, momentum: float, weight_decay: float, decay_mask=None) -> None:
    """In-place SGD with momentum: ``v = m*v + g + wd*p``; ``p -= lr*v``.

    ``decay_mask[i]`` false exempts parameter ``i`` from weight decay.
    ``state`` maps parameter index to its velocity buffer.
    """
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise ConfigError(f"gradient of shape {g.shape} for parameter of shape {p.data.shape}")
        d = g
        if weight_decay and (decay_mask is None or decay_mask[i]):
            d = d + weight_decay * p.data
        v = state.get(i)
        v = d if v is None or momentum == 0 else momentum * v + d
        state[i] = v
        p.data = (p.data - lr * v).astype(p.data.dtype, copy=False)


def _check_adversarial(x_adv, x, attack: AttackConfig, epoch, batch):
    # float32 rounding of x +/- eps can overshoot the ball by half an ulp
    tol = 1e-9 if x.dtype == np.float64 else 1e-6
    gap = float(np.max(np.abs(x_adv.astype(np.float64) - x))) if x.size else 0.0
    lo, hi = attack.data_range
    if gap > attack.epsilon + tol or x_adv.min() < lo or x_adv.max() > hi:
        raise RuntimeError(f"epoch {epoch} batch {batch}: adversarial batch leaves the eps-ball or data range "
                           f"(max |x'-x| = {gap}, eps = {attack.epsilon})")


def batch_loss(model: Model, config: TrainConfig, x, x_adv, y):
    """Total loss plus its cross-entropy and unweighted consistency components."""
    logits_adv, taps_adv = forward_with_taps(model, x_adv)
    ce = T.softmax_cross_entropy(logits_adv, y)
    terms = []
    if config.lfrc_enabled:
        if config.detach_natural:
            with T.no_grad():
                _, taps_nat = forward_with_taps(model, x)
        else:
            _, taps_nat = forward_with_taps(model, x)
        for tap in config.tap_points:
            m_nat = feature_similarity(taps_nat[tap], y, tap, config.eps_norm)
            m_adv = feature_similarity(taps_adv[tap], y, tap, config.eps_norm)
            terms.append(lfrc_loss(m_nat, m_adv, config.metric))
    total = total_loss(ce, terms, config.lam) if config.lfrc_enabled else ce
    lfrc_value = float(np.sum([t.item() for t in terms])) if terms else math.nan
    return total, ce.item(), lfrc_value


def _weights_only(model: Model) -> list:
    return [not name.endswith(".bias") for name in model.parameters]


def train(config: TrainConfig, train_set: Dataset, val_set: Dataset, model: Model | None = None,
          progress=None) -> TrainResult:
    """Run the full training loop and return best/last checkpoints and per-epoch history.

    ``model`` defaults to ``init_model(config.model, config.seed)``.
    ``progress(record)`` is called after each epoch.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigError("training and validation sets must be non-empty")
    if len(train_set) < config.batch_size:
        raise ConfigError(f"batch size {config.batch_size} exceeds training set size {len(train_set)}")
    dtype = np.dtype(config.dtype)
    model = model or init_model(config.model, config.seed, dtype=dtype)
    x_all = train_set.inputs.astype(dtype)
    y_all = train_set.labels
    val = val_set.astype(dtype)
    params = list(model.parameters.values())
    decay_mask = _weights_only(model)
    chash = config.config_hash()
    state: dict = {}
    history = []
    best = None
    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config)
        ce_sum, lfrc_sum, nb = 0.0, 0.0, 0
        for b, idx in enumerate(iterate_batches(len(y_all), config.batch_size, rng=[config.seed, _SHUFFLE, epoch])):
            xb, yb = x_all[idx], y_all[idx]
            if config.augment:
                xb = augment_batch(xb, np.random.default_rng([config.seed, _AUGMENT, epoch, b]))
            x_adv = pgd(model, xb, yb, config.attack, np.random.default_rng([config.seed, _ATTACK, epoch, b]))
            _check_adversarial(x_adv, xb, config.attack, epoch, b)
            total, ce_val, lfrc_val = batch_loss(model, config, xb, x_adv, yb)
            if not math.isfinite(total.item()):
                raise NumericalError(f"non-finite loss at epoch {epoch} batch {b}: "
                                     f"total={total.item()} ce={ce_val} lfrc={lfrc_val} lambda={config.lam}")
            grads = T.grad(total, params)
            sgd_step(params, grads, state, lr, config.momentum, config.weight_decay, decay_mask)
            ce_sum += ce_val
            lfrc_sum += lfrc_val
            nb += 1
        val_clean = accuracy(model, val)
        val_robust = robust_accuracy(model, val, config.val_attack, seed=[config.seed, _VALIDATION, epoch])
        record = EpochRecord(epoch, lr, ce_sum / nb, lfrc_sum / nb, val_clean, val_robust)
        history.append(record)
        log.info("epoch %d lr %.4g ce %.4f lfrc %.4f clean %.4f robust %.4f", epoch, lr, record.train_ce,
                 record.train_lfrc, val_clean, val_robust)
        if progress is not None:
            progress(record)
        if best is None or val_robust > best.metric:
            best = checkpoint_from_model(model, epoch, "best", val_robust, chash, config.seed)
    last = checkpoint_from_model(model, config.epochs - 1, "last", history[-1].val_robust_acc, chash, config.seed)
    return TrainResult(best, last, history)


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for r in history:
            w.writerow([r.epoch] + ["%.12g" % getattr(r, c) for c in HISTORY_COLUMNS[1:]])


def read_history_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochRecord(int(r["epoch"]), *(float(r[c]) for c in HISTORY_COLUMNS[1:])) for r in rows]
