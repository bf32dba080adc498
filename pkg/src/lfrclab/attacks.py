"""White-box L-infinity attacks: FGSM, PGD and the CW margin loss.

Attacks take and return numpy arrays in the model's input layout.  They only
ask the engine for the input gradient, so model parameters (and their
``.grad`` slots) are never touched.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, InputError
from .models import Model, forward
from .tensor import Tensor

INNER_LOSSES = ("cross-entropy", "cw-margin")
IMAGE_RANGE = (0.0, 1.0)
UNBOUNDED = (-np.inf, np.inf)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    step_size: float
    iterations: int = 10
    random_start: bool = True
    inner_loss: str = "cross-entropy"
    data_range: tuple = IMAGE_RANGE

    def __post_init__(self):
        object.__setattr__(self, "data_range", (float(self.data_range[0]), float(self.data_range[1])))
        if not self.epsilon >= 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if not self.step_size > 0:
            raise ConfigError(f"step size must be > 0, got {self.step_size}")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ConfigError(f"iterations must be a positive integer, got {self.iterations}")
        if self.inner_loss not in INNER_LOSSES:
            raise ConfigError(f"unknown inner loss {self.inner_loss!r}; expected one of {INNER_LOSSES}")
        lo, hi = self.data_range
        if not lo < hi:
            raise ConfigError(f"data range needs lo < hi, got {self.data_range}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data_range"] = list(self.data_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        d["data_range"] = tuple(d.get("data_range", IMAGE_RANGE))
        return cls(**d)


def fgsm_config(epsilon, data_range=IMAGE_RANGE) -> AttackConfig:
    """FGSM expressed as a single projected step of size epsilon without random start."""
    return AttackConfig(epsilon, epsilon if epsilon > 0 else 1.0, 1, False, "cross-entropy", data_range)


def pgd_config(epsilon=8 / 255, step_size=2 / 255, iterations=20, random_start=True, data_range=IMAGE_RANGE) -> AttackConfig:
    return AttackConfig(epsilon, step_size, iterations, random_start, "cross-entropy", data_range)


def cw_config(epsilon=8 / 255, step_size=2 / 255, iterations=20, random_start=True, data_range=IMAGE_RANGE) -> AttackConfig:
    return AttackConfig(epsilon, step_size, iterations, random_start, "cw-margin", data_range)


def _arr(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def project_linf(x_adv, x, eps, data_range=IMAGE_RANGE):
    """Clamp ``x_adv`` into the eps-ball around ``x`` intersected with the data range."""
    wrap = isinstance(x_adv, Tensor)
    xa, xn = _arr(x_adv), _arr(x)
    if xa.shape != xn.shape:
        raise InputError(f"project_linf: shapes {xa.shape} and {xn.shape} differ")
    out = np.clip(np.clip(xa, xn - eps, xn + eps), data_range[0], data_range[1])
    return Tensor(out, dtype=out.dtype) if wrap else out


def cw_margin_loss(logits, labels) -> Tensor:
    """Mean over the batch of ``max_{j != y} z_j - z_y`` (no confidence margin)."""
    logits = T.as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cw margin expects B x k logits, got {logits.shape}")
    B, k = logits.shape
    if k < 2:
        raise ConfigError("cw margin loss needs at least 2 classes")
    y = np.asarray(labels)
    if y.shape != (B,) or y.dtype.kind not in "iu" or (B and (y.min() < 0 or y.max() >= k)):
        raise InputError(f"cw margin: labels must be {B} integers in [0, {k})")
    rows = np.arange(B)
    z = logits.data
    masked = z.copy()
    masked[rows, y] = -np.inf
    other = masked.argmax(axis=1)  # first index wins ties
    loss = np.asarray((z[rows, other] - z[rows, y]).mean(), dtype=z.dtype)

    def _bw(g, needs):
        gz = np.zeros_like(z)
        gz[rows, other] += g / B
        gz[rows, y] -= g / B
        return (gz,)

    return Tensor._from_op(loss, (logits,), _bw, "cw_margin")


def attack_loss(logits, labels, kind: str) -> Tensor:
    if kind == "cross-entropy":
        return T.softmax_cross_entropy(logits, labels)
    if kind == "cw-margin":
        return cw_margin_loss(logits, labels)
    raise ConfigError(f"unknown inner loss {kind!r}")


def input_gradient(model: Model, x, y, kind: str = "cross-entropy"):
    """Gradient of the batch attack loss with respect to the input, and the loss value."""
    xt = Tensor(np.asarray(x, dtype=model.dtype), requires_grad=True)
    loss = attack_loss(forward(model, xt), y, kind)
    (g,) = T.grad(loss, [xt])
    return g, loss.item()


def fgsm(model: Model, x, y, eps, data_range=IMAGE_RANGE) -> np.ndarray:
    """One signed-gradient step of size ``eps`` on the cross-entropy, clamped to the data range."""
    if eps < 0:
        raise ConfigError("epsilon must be >= 0")
    x = np.asarray(_arr(x), dtype=model.dtype)
    if eps == 0:
        return x.copy()
    g, _ = input_gradient(model, x, y)
    return np.clip(x + eps * np.sign(g), data_range[0], data_range[1])


def pgd(model: Model, x, y, cfg: AttackConfig, rng=0) -> np.ndarray:
    """Projected signed-gradient ascent on ``cfg.inner_loss`` inside the eps-ball.

    ``rng`` is a seed or :class:`numpy.random.Generator` used for the random start.
    """
    x = np.asarray(_arr(x), dtype=model.dtype)
    eps, lo, hi = cfg.epsilon, cfg.data_range[0], cfg.data_range[1]
    if eps == 0:
        return x.copy()
    if cfg.random_start:
        rng = np.random.default_rng(rng)
        noise = rng.uniform(-eps, eps, size=x.shape).astype(x.dtype)
        x_adv = np.clip(x + noise, lo, hi)
    else:
        x_adv = x.copy()
    lower, upper = x - eps, x + eps
    for _ in range(int(cfg.iterations)):
        g, _ = input_gradient(model, x_adv, y, cfg.inner_loss)
        x_adv = x_adv + cfg.step_size * np.sign(g)
        x_adv = np.clip(np.clip(x_adv, lower, upper), lo, hi)
    return x_adv


def run_attack(model: Model, x, y, cfg: AttackConfig | None, rng=0) -> np.ndarray:
    """Dispatch: ``None`` is the identity attack, otherwise :func:`pgd`."""
    x = np.asarray(_arr(x), dtype=model.dtype)
    if cfg is None:
        return x.copy()
    return pgd(model, x, y, cfg, rng)
