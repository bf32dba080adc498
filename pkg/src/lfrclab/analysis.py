"""Diagnostics: similarity-matrix difference, accuracy difference, correlation,
robust and transfer accuracy, and heatmap export of similarity matrices."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, run_attack
from .data import Dataset, iterate_batches
from .errors import ConfigError, DimensionError, InputError, UndefinedCorrelationError
from .lfrc import SimilarityMatrix, feature_similarity
from .models import Model, forward_with_taps, predict

FLOAT_FMT = "%.12g"


def _fmt(v: float) -> str:
    return FLOAT_FMT % v


def _matrix(m) -> np.ndarray:
    if isinstance(m, SimilarityMatrix):
        return m.values.data
    if isinstance(m, T.Tensor):
        return m.data
    return np.asarray(m, dtype=np.float64)


@dataclass(frozen=True)
class BatchDiagnostic:
    batch_index: int
    layer: str
    ds: float
    da: int


def similarity_difference(m_nat, m_adv) -> float:
    """Mean absolute entrywise difference of two B x B similarity matrices."""
    a, b = _matrix(m_nat), _matrix(m_adv)
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionError(f"similarity_difference: matrices {a.shape} and {b.shape} differ")
    return float(np.mean(np.abs(b - a)))


def accuracy_difference(model: Model, x, x_adv, y) -> int:
    """Correct predictions on the natural batch minus those on the adversarial batch."""
    y = np.asarray(y)
    nat = predict(model, x) == y
    adv = predict(model, x_adv) == y
    return int(nat.sum()) - int(adv.sum())


def pearson(xs, ys) -> float:
    """Sample Pearson correlation coefficient (two-pass)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InputError(f"pearson needs two equal-length series, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise InputError("pearson needs at least 2 points")
    # test constancy directly: the rounded mean of equal values can be off by an ulp
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelationError("correlation is undefined for a constant series")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    r = float(dx @ dy) / (math.sqrt(sxx) * math.sqrt(syy))
    return min(1.0, max(-1.0, r))


def least_squares_line(xs, ys) -> tuple:
    """Slope and intercept of the least-squares fit ``y = slope * x + intercept``."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.size == 0 or np.all(x == x[0]):
        raise UndefinedCorrelationError("least-squares slope is undefined for a constant x series")
    dx = x - x.mean()
    sxx = float(dx @ dx)
    slope = float(dx @ (y - y.mean())) / sxx
    return slope, float(y.mean() - slope * x.mean())


def _xy(dataset):
    if isinstance(dataset, Dataset):
        return dataset.inputs, dataset.labels
    x, y = dataset
    return np.asarray(x), np.asarray(y)


def accuracy(model: Model, dataset, batch_size: int = 256) -> float:
    x, y = _xy(dataset)
    if len(y) == 0:
        raise InputError("accuracy of an empty dataset")
    return float(np.mean(predict(model, x, batch_size) == y))


def robust_accuracy(model: Model, dataset, attack: AttackConfig | None, batch_size: int = 256, seed=0) -> float:
    """Fraction of examples still classified correctly after ``attack`` (``None`` = clean)."""
    return transfer_eval(model, model, dataset, attack, batch_size, seed)


def transfer_eval(surrogate: Model, target: Model, dataset, attack: AttackConfig | None,
                  batch_size: int = 256, seed=0) -> float:
    """Accuracy of ``target`` on adversarial examples crafted against ``surrogate``.

    Batch ``i`` draws its random start from ``default_rng([seed, i])``.
    """
    if surrogate.spec.input_shape != target.spec.input_shape or surrogate.spec.num_classes != target.spec.num_classes:
        raise ConfigError("surrogate and target must share input shape and class count")
    x, y = _xy(dataset)
    if len(y) == 0:
        raise InputError("robust accuracy of an empty dataset")
    correct = 0
    for b, idx in enumerate(iterate_batches(len(y), batch_size, drop_last=False)):
        x_adv = run_attack(surrogate, x[idx], y[idx], attack, np.random.default_rng([seed, b]))
        correct += int(np.sum(predict(target, x_adv, batch_size) == y[idx]))
    return correct / len(y)


def with_taps(model: Model, taps) -> Model:
    """A view of ``model`` sharing its parameters but extracting other tap points."""
    if tuple(taps) == model.spec.tap_points:
        return model
    return Model(model.spec.with_taps(taps), model.parameters)


def batch_similarity(model: Model, x, y, tap: str):
    with T.no_grad():
        _, taps = forward_with_taps(model, x)
    return feature_similarity(taps[tap], y, tap)


def ds_da_scatter(model: Model, dataset, attack: AttackConfig | None, batch_size: int = 256, tap: str | None = None,
                  seed=0, on_batch=None) -> list:
    """One :class:`BatchDiagnostic` per full batch of ``dataset`` (in order).

    ``on_batch(index, m_nat, m_adv)`` is called with both similarity matrices
    when given.
    """
    x, y = _xy(dataset)
    if batch_size < 2:
        raise InputError("batch size must be at least 2")
    if batch_size > len(y):
        raise InputError(f"batch size {batch_size} exceeds dataset size {len(y)}")
    tap = tap or model.spec.block_names()[-1]
    if tap not in model.spec.block_names():
        raise ConfigError(f"unknown tap {tap!r}; model blocks are {model.spec.block_names()}")
    probe = with_taps(model, (tap,))
    out = []
    for b, idx in enumerate(iterate_batches(len(y), batch_size, drop_last=True)):
        xb, yb = x[idx], y[idx]
        x_adv = run_attack(model, xb, yb, attack, np.random.default_rng([seed, b]))
        m_nat = batch_similarity(probe, xb, yb, tap)
        m_adv = batch_similarity(probe, x_adv, yb, tap)
        out.append(BatchDiagnostic(b, tap, similarity_difference(m_nat, m_adv), accuracy_difference(model, xb, x_adv, yb)))
        if on_batch is not None:
            on_batch(b, m_nat, m_adv)
    return out


def scatter_summary(diags) -> dict:
    """PCC and least-squares line of DA against DS; ``None`` where undefined."""
    ds = [d.ds for d in diags]
    da = [d.da for d in diags]
    summary = {"pcc": None, "slope": None, "intercept": None}
    if len(diags) >= 2:
        try:
            summary["pcc"] = pearson(ds, da)
        except UndefinedCorrelationError:
            pass
        try:
            summary["slope"], summary["intercept"] = least_squares_line(ds, da)
        except UndefinedCorrelationError:
            pass
    return summary


UNDEFINED = "undefined (constant series)"


def write_scatter_csv(diags, path) -> dict:
    """Write ``batch_index,ds,da`` rows followed by ``# key=value`` footer lines."""
    summary = scatter_summary(diags)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["batch_index", "ds", "da"])
        for d in diags:
            w.writerow([d.batch_index, _fmt(d.ds), d.da])
        for key in ("pcc", "slope", "intercept"):
            v = summary[key]
            fh.write(f"# {key}={UNDEFINED if v is None else _fmt(v)}\n")
    return summary


def read_scatter_csv(path):
    """Rows as (batch_index, ds, da) tuples plus the footer as a dict of strings."""
    rows, footer = [], {}
    with open(path) as fh:
        lines = fh.read().splitlines()
    for line in lines[1:]:
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            footer[key] = value
        elif line:
            i, ds, da = line.split(",")
            rows.append((int(i), float(ds), int(da)))
    return rows, footer


# ---------------------------------------------------------------------------
# heatmaps


def grouping_order(labels) -> np.ndarray:
    """Stable sort permutation grouping rows by label."""
    return np.argsort(np.asarray(labels), kind="stable")


def to_gray(values) -> np.ndarray:
    """Map [-1, 1] linearly onto 0..255."""
    return np.clip(np.rint((np.asarray(values) + 1.0) * 127.5), 0, 255).astype(np.int64)


def export_heatmap(m: SimilarityMatrix, path):
    """Write ``<path>.pgm`` (plain P2) and ``<path>.csv`` with rows/columns grouped by label.

    The CSV holds the raw values in display order; its first two columns give
    each row's original batch index and label, and its header lists the
    original index of each column.
    """
    values = _matrix(m)
    n = values.shape[0]
    labels = np.zeros(n, dtype=np.int64) if getattr(m, "labels", None) is None else np.asarray(m.labels)
    order = grouping_order(labels)
    shown = values[np.ix_(order, order)]
    base = Path(path)
    if base.suffix in (".pgm", ".csv"):
        base = base.with_suffix("")
    pgm_path, csv_path = base.with_suffix(".pgm"), base.with_suffix(".csv")
    gray = to_gray(shown)
    layer = getattr(m, "layer", None) or "unknown"
    lines = ["P2", f"# similarity matrix, layer {layer}, grouped by label", f"{n} {n}", "255"]
    lines += [" ".join(str(v) for v in row) for row in gray]
    pgm_path.write_text("\n".join(lines) + "\n")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label"] + [str(i) for i in order])
        for i in order:
            w.writerow([int(i), int(labels[i])] + [_fmt(v) for v in values[i, order]])
    return pgm_path, csv_path


def read_heatmap_csv(path):
    """Undo the grouping of an exported CSV: (values in batch order, labels)."""
    with open(path) as fh:
        rows = list(csv.reader(fh))
    cols = [int(c) for c in rows[0][2:]]
    n = len(cols)
    values = np.zeros((n, n))
    labels = np.zeros(n, dtype=np.int64)
    for row in rows[1:]:
        i = int(row[0])
        labels[i] = int(row[1])
        values[i, cols] = [float(v) for v in row[2:]]
    return values, labels


def read_pgm(path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0]
        tokens.extend(line.split())
    if tokens[0] != "P2":
        raise ValueError("not a plain PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return np.asarray(tokens[4:4 + w * h], dtype=np.int64).reshape(h, w)
