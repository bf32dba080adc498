"""Batch feature similarity matrices and the relation consistency loss.

The pipeline for one tap point is::

    features (B x C x H x W) -> gap -> l2_normalize -> Q Q^T -> M (B x B)

and the consistency loss compares the natural-batch matrix with the
adversarial-batch matrix entrywise through an ``exp``, ``l1`` or ``l2``
metric.  The matrix computation always runs in float64, whatever the width
of the network, so that the matrix invariants (symmetry, unit diagonal) hold
to 1e-6; the resulting loss is cast back to the width of the other loss terms
in :func:`total_loss`.
"""

from __future__ import annotations

import contextlib
import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, InputError
from .tensor import Tensor

DEFAULT_EPS_NORM = 1e-12


class MetricKind(str, enum.Enum):
    EXP = "exp"
    L1 = "l1"
    L2 = "l2"


@dataclass
class SimilarityMatrix:
    values: Tensor
    labels: np.ndarray | None = None
    layer: str | None = None

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def numpy(self) -> np.ndarray:
        return self.values.data.copy()

    def invariant_errors(self) -> dict:
        """Worst deviations from symmetry, unit diagonal and the [-1, 1] range."""
        m = self.values.data
        return {
            "asymmetry": float(np.max(np.abs(m - m.T))) if m.size else 0.0,
            "diagonal": float(np.max(np.abs(np.diag(m) - 1.0))) if m.size else 0.0,
            "range": float(max(np.max(np.abs(m)) - 1.0, 0.0)) if m.size else 0.0,
        }


_watchers: list = []


@contextlib.contextmanager
def watch_similarity_matrices():
    """Collect :meth:`SimilarityMatrix.invariant_errors` of every matrix built inside the block."""
    records: list = []
    _watchers.append(records)
    try:
        yield records
    finally:
        _watchers.remove(records)


def gap(features) -> Tensor:
    """Global average pooling: mean over the spatial axes of ``B x C x H x W``."""
    features = T.as_tensor(features)
    if features.ndim == 2:
        return features
    if features.ndim != 4:
        raise DimensionError(f"gap expects B x C x H x W features, got {features.shape}")
    return T.mean(features, axis=(2, 3))


def l2_normalize(a, eps_norm: float = DEFAULT_EPS_NORM) -> Tensor:
    """Divide each row by ``max(||row||_2, eps_norm)``."""
    if eps_norm <= 0:
        raise InputError("eps_norm must be positive")
    a = T.as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"l2_normalize expects a B x C matrix, got {a.shape}")
    norm = np.sqrt(np.einsum("ij,ij->i", a.data, a.data))
    active = norm > eps_norm
    denom = np.where(active, norm, eps_norm)[:, None]
    q = a.data / denom

    def _bw(g, needs):
        # rows on the unit sphere get the tangent projection; guarded rows are linear
        radial = np.einsum("ij,ij->i", g, q)[:, None] * active[:, None]
        return ((g - q * radial) / denom,)

    return Tensor._from_op(q, (a,), _bw, "l2_normalize")


def similarity_matrix(q, labels=None, layer: str | None = None) -> SimilarityMatrix:
    """Cosine similarity matrix ``Q Q^T`` of unit-normalized rows."""
    q = T.as_tensor(q)
    if q.ndim != 2:
        raise DimensionError(f"similarity_matrix expects B x C rows, got {q.shape}")
    if q.shape[0] == 0:
        raise InputError("similarity matrix of an empty batch")
    m = SimilarityMatrix(T.matmul(q, T.transpose(q)), None if labels is None else np.asarray(labels), layer)
    for records in _watchers:
        records.append(m.invariant_errors())
    return m


def feature_similarity(features, labels=None, layer=None, eps_norm: float = DEFAULT_EPS_NORM) -> SimilarityMatrix:
    """Full pipeline from raw tap features to the similarity matrix (float64)."""
    a = gap(T.astype(T.as_tensor(features), np.float64))
    return similarity_matrix(l2_normalize(a, eps_norm), labels, layer)


def _values(m) -> Tensor:
    return m.values if isinstance(m, SimilarityMatrix) else T.as_tensor(m)


def lfrc_loss(m_nat, m_adv, metric="exp") -> Tensor:
    """Mean over all ``B^2`` entries of ``metric(M_adv - M_nat)``."""
    metric = MetricKind(metric)
    nat, adv = _values(m_nat), _values(m_adv)
    if nat.shape != adv.shape or nat.ndim != 2:
        raise DimensionError(f"lfrc_loss: similarity matrices {nat.shape} and {adv.shape} differ")
    if isinstance(m_nat, SimilarityMatrix) and isinstance(m_adv, SimilarityMatrix):
        if m_nat.layer is not None and m_adv.layer is not None and m_nat.layer != m_adv.layer:
            raise DimensionError(f"lfrc_loss: matrices come from layers {m_nat.layer!r} and {m_adv.layer!r}")
    diff = T.sub(adv, nat)
    if metric is MetricKind.EXP:
        return T.mean(T.exp(T.absolute(diff)))
    if metric is MetricKind.L1:
        return T.mean(T.absolute(diff))
    return T.mean(T.square(diff))


def total_loss(ce_adv, lfrc_per_layer, lam: float) -> Tensor:
    """Cross-entropy on adversarial data plus ``lam`` times the summed consistency losses."""
    if lam < 0:
        raise InputError("lambda must be non-negative")
    ce_adv = T.as_tensor(ce_adv)
    terms = list(lfrc_per_layer)
    if not terms:
        return ce_adv
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return T.add(ce_adv, T.astype(T.scale(acc, lam), ce_adv.dtype))
