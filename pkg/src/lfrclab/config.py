"""INI run configuration for the command line.

A run file has the sections ``[model]``, ``[train]``, ``[attack]``,
``[val_attack]``, ``[data]`` and ``[output]``.  Every key is optional except
the data source; unknown sections or keys are rejected.  Relative paths are
resolved against the directory holding the file.

Example::

    [model]
    kind = mini-resnet
    widths = 8, 16, 32, 64

    [train]
    epochs = 10
    lambda = 100

    [attack]
    epsilon = 0.0313725490196
    step_size = 0.0078431372549

    [data]
    source = synthetic-images
    classes = 4

    [output]
    dir = runs/lfrc
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

from .attacks import IMAGE_RANGE, UNBOUNDED, AttackConfig
from .data import Dataset, load_csv, load_idx, synthetic_gaussians, synthetic_images
from .errors import ConfigError
from .models import ModelSpec
from .trainer import TrainConfig

SOURCES = ("csv", "idx", "synthetic-gaussians", "synthetic-images")


def _ints(text: str) -> tuple:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _names(text: str) -> tuple:
    return tuple(t for t in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _join(values) -> str:
    return ", ".join(str(v) for v in values)


# key -> parser, per section
SCHEMA = {
    "model": {
        "kind": str, "widths": _ints, "taps": _names, "tap_after_activation": _bool,
        "input_mean": float, "input_std": float, "branch_init_scale": float,
    },
    "train": {
        "epochs": int, "batch_size": int, "lr": float, "lr_milestones": _ints, "lr_decay": float,
        "momentum": float, "weight_decay": float, "lambda": float, "metric": str, "seed": int,
        "lfrc_enabled": _bool, "detach_natural": _bool, "augment": _bool, "dtype": str, "eps_norm": float,
    },
    "attack": {
        "epsilon": float, "step_size": float, "iterations": int, "random_start": _bool, "inner_loss": str,
    },
    "data": {
        "source": str, "train": str, "val": str, "train_images": str, "train_labels": str,
        "val_images": str, "val_labels": str, "classes": int, "n_per_class": int, "val_per_class": int,
        "dim": int, "separation": float, "size": int, "channels": int, "noise": float, "contrast": float,
        "seed": int, "val_seed": int, "prototype_seed": int,
    },
    "output": {"dir": str},
}
SCHEMA["val_attack"] = dict(SCHEMA["attack"])
PATH_KEYS = {("data", k) for k in ("train", "val", "train_images", "train_labels", "val_images", "val_labels")}
PATH_KEYS.add(("output", "dir"))

DATA_DEFAULTS = {
    "synthetic-gaussians": {"classes": 2, "n_per_class": 200, "val_per_class": 100, "dim": 2,
                            "separation": 10.0, "seed": 0, "val_seed": 1},
    "synthetic-images": {"classes": 4, "n_per_class": 500, "val_per_class": 125, "size": 16, "channels": 1,
                         "noise": 0.3, "contrast": 0.5, "seed": 1, "val_seed": 2, "prototype_seed": 0},
}


@dataclass
class RunConfig:
    """Parsed run file: typed values per section plus where it came from."""

    values: dict = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path.cwd)

    def get(self, section: str, key: str, default=None):
        return self.values.get(section, {}).get(key, default)

    def set(self, section: str, key: str, value) -> None:
        if key not in SCHEMA.get(section, {}):
            raise ConfigError(f"unknown config key [{section}] {key}")
        self.values.setdefault(section, {})[key] = value


def parse_run_config(text: str, base_dir=None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}".splitlines()[0]) from None
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    cfg = RunConfig({}, base)
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]; expected one of {sorted(SCHEMA)}")
        for key, raw in parser.items(section):
            parse = SCHEMA[section].get(key)
            if parse is None:
                raise ConfigError(f"unknown config key [{section}] {key}")
            try:
                value = parse(raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from None
            if (section, key) in PATH_KEYS:
                value = str((base / value).resolve())
            cfg.values.setdefault(section, {})[key] = value
    return cfg


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_run_config(path.read_text(), base_dir=path.parent.resolve())


def load_datasets(cfg: RunConfig) -> tuple:
    """(train, validation) datasets described by the ``[data]`` section."""
    data = dict(cfg.values.get("data", {}))
    source = data.get("source")
    if source is None:
        raise ConfigError("[data] source is required")
    if source not in SOURCES:
        raise ConfigError(f"[data] source must be one of {SOURCES}, got {source!r}")
    k = data.get("classes")
    if source == "csv":
        for key in ("train", "val"):
            if key not in data:
                raise ConfigError(f"[data] {key} is required for csv data")
        return load_csv(data["train"], k), load_csv(data["val"], k)
    if source == "idx":
        for key in ("train_images", "train_labels", "val_images", "val_labels"):
            if key not in data:
                raise ConfigError(f"[data] {key} is required for idx data")
        return (load_idx(data["train_images"], data["train_labels"], k),
                load_idx(data["val_images"], data["val_labels"], k))
    d = {**DATA_DEFAULTS[source], **data}
    if source == "synthetic-gaussians":
        make = lambda n, seed: synthetic_gaussians(d["classes"], n, d["dim"], d["separation"], seed)
    else:
        make = lambda n, seed: synthetic_images(d["classes"], n, d["size"], d["channels"], d["noise"],
                                                d["contrast"], seed=seed, prototype_seed=d["prototype_seed"])
    return make(d["n_per_class"], d["seed"]), make(d["val_per_class"], d["val_seed"])


def materialize_data(cfg: RunConfig) -> None:
    """Fill in generator defaults so the banner fully determines the data."""
    data = cfg.values.setdefault("data", {})
    for key, value in DATA_DEFAULTS.get(data.get("source"), {}).items():
        data.setdefault(key, value)


def _attack_from(section: dict, fallback: AttackConfig, data_range) -> AttackConfig:
    eps = section.get("epsilon", fallback.epsilon)
    step = fallback.step_size if "epsilon" not in section else (eps / 4 if eps > 0 else 1.0)
    return AttackConfig(
        epsilon=eps,
        step_size=section.get("step_size", step),
        iterations=section.get("iterations", fallback.iterations),
        random_start=section.get("random_start", fallback.random_start),
        inner_loss=section.get("inner_loss", fallback.inner_loss),
        data_range=tuple(data_range),
    )


def build_train_config(cfg: RunConfig, train_set: Dataset) -> TrainConfig:
    """Combine the parsed file with dataset facts (input shape, classes, range)."""
    m = cfg.values.get("model", {})
    t = cfg.values.get("train", {})
    image = train_set.is_image
    kind = m.get("kind", "mini-resnet" if image else "mlp")
    if kind == "mini-resnet":
        widths = m.get("widths", (8, 16, 32, 64))
        spec = ModelSpec(kind, widths, train_set.num_classes, train_set.input_shape, m.get("taps", ()),
                         m.get("tap_after_activation", True), m.get("input_mean", 0.5),
                         m.get("input_std", 0.25), m.get("branch_init_scale", 0.1))
    else:
        hidden = m.get("widths", (32,))
        widths = (int(train_set.inputs[0].size),) + tuple(hidden) + (train_set.num_classes,)
        spec = ModelSpec(kind, widths, train_set.num_classes, (widths[0],), m.get("taps", ()),
                         m.get("tap_after_activation", True), m.get("input_mean", 0.0),
                         m.get("input_std", 1.0), m.get("branch_init_scale", 1.0))
    data_range = IMAGE_RANGE if image else UNBOUNDED
    a = cfg.values.get("attack", {})
    if "epsilon" not in a and not image:
        raise ConfigError("[attack] epsilon is required for tabular data (no natural pixel scale)")
    default_attack = AttackConfig(8 / 255, 2 / 255, 10, True, "cross-entropy", data_range)
    attack = _attack_from(a, default_attack, data_range)
    val_attack = _attack_from(cfg.values.get("val_attack", {}), replace(attack, iterations=10), data_range)
    kwargs = {
        "epochs": t.get("epochs"), "batch_size": t.get("batch_size"), "lr": t.get("lr"),
        "lr_milestones": t.get("lr_milestones"), "lr_decay": t.get("lr_decay"), "momentum": t.get("momentum"),
        "weight_decay": t.get("weight_decay"), "lam": t.get("lambda"), "metric": t.get("metric"),
        "seed": t.get("seed"), "lfrc_enabled": t.get("lfrc_enabled"), "detach_natural": t.get("detach_natural"),
        "augment": t.get("augment"), "dtype": t.get("dtype"), "eps_norm": t.get("eps_norm"),
    }
    kwargs = {k: v for k, v in kwargs.items() if v is not None}
    if kwargs.get("augment") and not image:
        raise ConfigError("augmentation needs image data")
    return TrainConfig(model=spec, attack=attack, val_attack=val_attack, **kwargs)


def effective_config_text(cfg: RunConfig, train_config: TrainConfig) -> str:
    """A complete run file with every default written out."""
    tc = train_config
    spec = tc.model
    out = configparser.ConfigParser(interpolation=None)
    out.optionxform = str
    model = {"kind": spec.kind, "taps": _join(spec.tap_points),
             "tap_after_activation": str(spec.tap_after_activation).lower(),
             "input_mean": repr(spec.input_mean), "input_std": repr(spec.input_std),
             "branch_init_scale": repr(spec.branch_init_scale)}
    model["widths"] = _join(spec.widths if spec.kind == "mini-resnet" else spec.widths[1:-1])
    out["model"] = model
    out["train"] = {
        "epochs": str(tc.epochs), "batch_size": str(tc.batch_size), "lr": repr(tc.lr),
        "lr_milestones": _join(tc.milestones), "lr_decay": repr(tc.lr_decay), "momentum": repr(tc.momentum),
        "weight_decay": repr(tc.weight_decay), "lambda": repr(tc.lam), "metric": tc.metric, "seed": str(tc.seed),
        "lfrc_enabled": str(tc.lfrc_enabled).lower(), "detach_natural": str(tc.detach_natural).lower(),
        "augment": str(tc.augment).lower(), "dtype": tc.dtype, "eps_norm": repr(tc.eps_norm),
    }
    for name, a in (("attack", tc.attack), ("val_attack", tc.val_attack)):
        out[name] = {"epsilon": repr(a.epsilon), "step_size": repr(a.step_size), "iterations": str(a.iterations),
                     "random_start": str(a.random_start).lower(), "inner_loss": a.inner_loss}
    out["data"] = {k: _join(v) if isinstance(v, tuple) else str(v) for k, v in cfg.values.get("data", {}).items()}
    out["output"] = {k: str(v) for k, v in cfg.values.get("output", {}).items()}
    buf = io.StringIO()
    out.write(buf)
    return buf.getvalue()
