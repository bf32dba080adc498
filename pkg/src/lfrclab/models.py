"""Small classifiers with named tap points exposing latent features.

Two architectures are available:

* ``mlp``: dense layers ``widths[0] -> ... -> widths[-1]`` with ReLU between
  them.  Every hidden layer is a block named ``hidden1``, ``hidden2``, ...
  and its features are returned as ``B x C x 1 x 1`` so global average
  pooling applies uniformly.
* ``mini-resnet``: a stack of residual blocks ``block1 ... blockN``
  (defaults to four blocks of 8/16/32/64 channels), stride-2 downsampling
  from the second block on, global average pooling and a dense head.  No
  batch normalization.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .tensor import Tensor

ARCHITECTURES = ("mlp", "mini-resnet")
DEFAULT_RESNET_CHANNELS = (8, 16, 32, 64)


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of a classifier.

    For ``mlp`` the ``widths`` list includes the input and output sizes, e.g.
    ``(2, 8, 2)``.  For ``mini-resnet`` it lists the block channel counts.
    ``tap_points`` defaults to the last block.
    """

    kind: str
    widths: tuple
    num_classes: int
    input_shape: tuple
    tap_points: tuple = ()
    tap_after_activation: bool = True
    input_mean: float = 0.0
    input_std: float = 1.0
    branch_init_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "num_classes", int(self.num_classes))
        object.__setattr__(self, "input_mean", float(self.input_mean))
        object.__setattr__(self, "input_std", float(self.input_std))
        object.__setattr__(self, "branch_init_scale", float(self.branch_init_scale))
        taps = tuple(self.tap_points) if self.tap_points else ()
        if not taps and self.block_names():
            taps = (self.block_names()[-1],)
        object.__setattr__(self, "tap_points", taps)
        self.validate()

    def block_names(self) -> tuple:
        if self.kind == "mlp":
            return tuple(f"hidden{i}" for i in range(1, len(self.widths) - 1))
        if self.kind == "mini-resnet":
            return tuple(f"block{i}" for i in range(1, len(self.widths) + 1))
        return ()

    def validate(self) -> None:
        if self.kind not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.kind!r}; expected one of {ARCHITECTURES}")
        if self.num_classes < 2:
            raise ConfigError("a classifier needs at least 2 classes")
        if not self.input_std > 0:
            raise ConfigError("input_std must be positive")
        if not self.branch_init_scale >= 0:
            raise ConfigError("branch_init_scale must be non-negative")
        if any(w < 1 for w in self.widths):
            raise ConfigError(f"layer widths must be positive, got {self.widths}")
        if self.kind == "mlp":
            if len(self.widths) < 3:
                raise ConfigError("mlp widths need input, at least one hidden layer, and output")
            if self.widths[-1] != self.num_classes:
                raise ConfigError(f"mlp output width {self.widths[-1]} != num_classes {self.num_classes}")
            if int(np.prod(self.input_shape)) != self.widths[0]:
                raise ConfigError(f"mlp input width {self.widths[0]} does not match input shape {self.input_shape}")
        else:
            if len(self.widths) < 1:
                raise ConfigError("mini-resnet needs at least one block")
            if len(self.input_shape) != 3:
                raise ConfigError(f"mini-resnet input shape must be (C, H, W), got {self.input_shape}")
        unknown = [t for t in self.tap_points if t not in self.block_names()]
        if unknown:
            raise ConfigError(f"tap points {unknown} are not blocks of this model {self.block_names()}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["input_shape"] = list(self.input_shape)
        d["tap_points"] = list(self.tap_points)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            kind=d["kind"],
            widths=tuple(d["widths"]),
            num_classes=d["num_classes"],
            input_shape=tuple(d["input_shape"]),
            tap_points=tuple(d.get("tap_points", ())),
            tap_after_activation=bool(d.get("tap_after_activation", True)),
            input_mean=d.get("input_mean", 0.0),
            input_std=d.get("input_std", 1.0),
            branch_init_scale=d.get("branch_init_scale", 1.0),
        )

    def with_taps(self, taps) -> "ModelSpec":
        d = self.to_dict()
        d["tap_points"] = list(taps)
        return ModelSpec.from_dict(d)


def mini_resnet_spec(input_shape, num_classes, channels=DEFAULT_RESNET_CHANNELS, tap_points=(),
                     input_mean=0.5, input_std=0.25, branch_init_scale=0.1) -> ModelSpec:
    """Image classifier; inputs in [0, 1] are standardized with fixed constants.

    Without normalization layers a freshly initialised residual stack has
    large logits, and adversarial training tends to kill every unit in the
    first few steps.  Shrinking the last conv of each branch and the head
    (``branch_init_scale``) keeps the initial function close to the
    shortcut path.
    """
    return ModelSpec("mini-resnet", tuple(channels), num_classes, tuple(input_shape), tuple(tap_points),
                     input_mean=input_mean, input_std=input_std, branch_init_scale=branch_init_scale)


def mlp_spec(widths, tap_points=()) -> ModelSpec:
    widths = tuple(widths)
    return ModelSpec("mlp", widths, widths[-1], (widths[0],), tuple(tap_points))


def _resnet_layout(spec: ModelSpec):
    """Yield (block name, in channels, out channels, stride)."""
    in_ch = spec.input_shape[0]
    for i, out_ch in enumerate(spec.widths):
        stride = 1 if i == 0 else 2
        yield f"block{i + 1}", in_ch, out_ch, stride
        in_ch = out_ch


def parameter_shapes(spec: ModelSpec) -> dict:
    """Ordered mapping parameter name -> shape implied by ``spec``."""
    shapes = {}
    if spec.kind == "mlp":
        for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
            name = f"hidden{i + 1}" if i < len(spec.widths) - 2 else "head"
            shapes[f"{name}.weight"] = (fan_in, fan_out)
            shapes[f"{name}.bias"] = (fan_out,)
        return shapes
    for name, cin, cout, stride in _resnet_layout(spec):
        shapes[f"{name}.conv1.weight"] = (cout, cin, 3, 3)
        shapes[f"{name}.conv1.bias"] = (cout,)
        shapes[f"{name}.conv2.weight"] = (cout, cout, 3, 3)
        shapes[f"{name}.conv2.bias"] = (cout,)
        if cin != cout or stride != 1:
            shapes[f"{name}.shortcut.weight"] = (cout, cin, 1, 1)
            shapes[f"{name}.shortcut.bias"] = (cout,)
    shapes["head.weight"] = (spec.widths[-1], spec.num_classes)
    shapes["head.bias"] = (spec.num_classes,)
    return shapes


def _fan_in(shape) -> int:
    # dense weights are (in, out); conv kernels are (out, in, kh, kw)
    if len(shape) == 2:
        return shape[0]
    return int(np.prod(shape[1:]))


class Model:
    """A classifier: a :class:`ModelSpec` plus named parameter tensors."""

    def __init__(self, spec: ModelSpec, parameters: dict):
        expected = parameter_shapes(spec)
        if list(parameters) != list(expected):
            missing = sorted(set(expected) - set(parameters))
            extra = sorted(set(parameters) - set(expected))
            raise ConfigError(f"parameter names do not match spec (missing {missing}, unexpected {extra})")
        for name, shape in expected.items():
            if tuple(parameters[name].shape) != shape:
                raise ConfigError(f"parameter {name} has shape {parameters[name].shape}, spec requires {shape}")
        self.spec = spec
        self.parameters = dict(parameters)

    @property
    def dtype(self):
        return next(iter(self.parameters.values())).dtype

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters.values()))

    def __call__(self, x) -> Tensor:
        return forward(self, x)

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.parameters.items()}

    def load_state_dict(self, state: dict) -> None:
        for name, p in self.parameters.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ConfigError(f"parameter {name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, p in self.parameters.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def copy(self) -> "Model":
        return Model(self.spec, {n: Tensor(p.data, requires_grad=True) for n, p in self.parameters.items()})


def init_model(spec: ModelSpec, seed: int, dtype=None) -> Model:
    """He-initialised weights (fan-in scaling) and zero biases.

    Residual-branch output convs and the head weights are further multiplied
    by ``spec.branch_init_scale``.
    """
    if not isinstance(spec, ModelSpec):
        raise ConfigError("init_model needs a ModelSpec")
    spec.validate()
    dtype = np.dtype(dtype) if dtype is not None else T.default_dtype()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(spec).items():
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            data = rng.standard_normal(shape) * np.sqrt(2.0 / _fan_in(shape))
            if name.endswith("conv2.weight") or name == "head.weight":
                data = data * spec.branch_init_scale
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    return Model(spec, params)


def _as_input(model: Model, x) -> Tensor:
    x = T.as_tensor(x, dtype=model.dtype)
    if tuple(x.shape[1:]) != model.spec.input_shape:
        raise InputError(f"input of shape {x.shape} does not match model input (B, {', '.join(map(str, model.spec.input_shape))})")
    mean, std = model.spec.input_mean, model.spec.input_std
    if mean == 0.0 and std == 1.0:
        return x
    return T.add(T.scale(x, 1.0 / std), np.full(x.shape, -mean / std, dtype=x.dtype))


def _residual_block(p: dict, name: str, x: Tensor, stride: int):
    h = T.relu(T.conv2d(x, p[f"{name}.conv1.weight"], p[f"{name}.conv1.bias"], stride=stride, padding=1))
    h = T.conv2d(h, p[f"{name}.conv2.weight"], p[f"{name}.conv2.bias"], stride=1, padding=1)
    if f"{name}.shortcut.weight" in p:
        sc = T.conv2d(x, p[f"{name}.shortcut.weight"], p[f"{name}.shortcut.bias"], stride=stride)
    else:
        sc = x
    pre = T.add(h, sc)
    return pre, T.relu(pre)


def forward_with_taps(model: Model, x):
    """Logits plus the features of every configured tap point.

    Taps are taken after the block activation unless
    ``spec.tap_after_activation`` is false.
    """
    spec = model.spec
    p = model.parameters
    x = _as_input(model, x)
    taps = {}
    wanted = set(spec.tap_points)
    if spec.kind == "mlp":
        h = T.flatten(x) if x.ndim > 2 else x
        hidden = spec.block_names()
        for name in hidden:
            pre = T.add(T.matmul(h, p[f"{name}.weight"]), p[f"{name}.bias"])
            h = T.relu(pre)
            if name in wanted:
                feat = h if spec.tap_after_activation else pre
                taps[name] = T.reshape(feat, (feat.shape[0], feat.shape[1], 1, 1))
        logits = T.add(T.matmul(h, p["head.weight"]), p["head.bias"])
        return logits, taps
    h = x
    for name, _, _, stride in _resnet_layout(spec):
        pre, h = _residual_block(p, name, h, stride)
        if name in wanted:
            taps[name] = h if spec.tap_after_activation else pre
    pooled = T.mean(h, axis=(2, 3))
    logits = T.add(T.matmul(pooled, p["head.weight"]), p["head.bias"])
    return logits, taps


def forward(model: Model, x) -> Tensor:
    return forward_with_taps(model, x)[0]


def predict(model: Model, x, batch_size: int = 512) -> np.ndarray:
    """Predicted class indices, computed without recording a graph."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    out = []
    with T.no_grad():
        for start in range(0, len(x), batch_size):
            out.append(forward(model, x[start:start + batch_size]).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
