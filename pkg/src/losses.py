# Copyright (c) 2026 Mark Ferrell. MIT License.
"""Feature- and prediction-matching losses used for distillation.

Feature losses compare student features ``M [n×d]`` (after the adapter) with
teacher features ``Y [n×d]``. The teacher side is always treated as a
constant target: gradients reach ``M`` only.

CKA is evaluated per minibatch::

    1 - tr(PHTH) / sqrt(tr(PHPH) · tr(THTH))

with ``P``, ``T`` the Gram matrices of ``M``, ``Y`` and ``H = I - 11ᵀ/n``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike

from src.errors import DegenerateError, DimensionError, NumericError
from src.tensor import (
    FloatArray,
    Tensor,
    as_tensor,
    exp,
    log_softmax,
    matmul,
    mean,
    power,
    relu,
    reshape,
    row_scale,
    sqrt,
    transpose,
    tsum,
)

logger = logging.getLogger(__name__)

KernelKind = Literal["linear", "rbf"]
FeatureLossKind = Literal["cka", "l2", "cosine", "none"]

COSINE_EPS = 1e-12
# tr(HPHP) below this fraction of ‖P‖² means the centred kernel vanished
DEGENERATE_RATIO = 1e-24


@dataclass(frozen=True)
class KernelSpec:
    """Kernel for CKA Gram matrices.

    For ``rbf``, ``sigma`` fixes the bandwidth; otherwise it is
    ``median_fraction`` × the median nonzero pairwise distance of the batch.
    """

    kind: KernelKind = "rbf"
    median_fraction: float = 0.5
    sigma: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("linear", "rbf"):
            raise ValueError(f"Unknown kernel '{self.kind}'")
        if self.sigma is not None and self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.sigma is None and self.median_fraction <= 0:
            raise ValueError(f"median_fraction must be positive, got {self.median_fraction}")


def _target(value: Tensor | ArrayLike) -> FloatArray:
    return value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)


def _require_finite(x: FloatArray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"Non-finite values in {what}")


def squared_distances(x: FloatArray) -> FloatArray:
    """Pairwise squared Euclidean distances, clamped at zero."""
    sq = np.sum(x * x, axis=1)
    return np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)


def median_pairwise_distance(x: FloatArray) -> float:
    """Median of the nonzero pairwise distances ``‖x_i - x_j‖``, ``i < j``.

    An even count averages the two central values.

    Raises:
        NumericError: If ``x`` holds NaN or Inf.
        DegenerateError: If every pair of rows coincides.
    """
    _require_finite(x, "bandwidth input")
    n = x.shape[0]
    upper = np.sqrt(squared_distances(x)[np.triu_indices(n, k=1)])
    nonzero = upper[upper > 0]
    if nonzero.size == 0:
        raise DegenerateError("All rows are identical; the median-distance bandwidth is zero")
    return float(np.median(nonzero))


def bandwidth(x: FloatArray, spec: KernelSpec) -> float:
    if spec.sigma is not None:
        return spec.sigma
    return spec.median_fraction * median_pairwise_distance(x)


def gram(x: Tensor | ArrayLike, spec: KernelSpec) -> Tensor:
    """Kernel (Gram) matrix of the rows of ``x``.

    Linear: ``X·Xᵀ``. RBF: ``exp(-‖x_i - x_j‖² / (2σ²))`` with an exact unit
    diagonal; ``σ`` is a constant with respect to gradients.

    Raises:
        DimensionError: Fewer than two rows.
        DegenerateError: Median bandwidth of identical rows.
    """
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DimensionError(f"gram needs an [n×d] matrix with n >= 2, got {x.shape}")
    if spec.kind == "linear":
        return matmul(x, transpose(x))

    n = x.shape[0]
    sigma = bandwidth(x.data, spec)
    sq = reshape(tsum(x * x, axis=1), (n, 1))
    rows = matmul(sq, Tensor(np.ones((1, n))))
    dist = rows + transpose(rows) - matmul(x, transpose(x)) * 2.0
    dist = relu(dist) * Tensor(1.0 - np.eye(n))
    return exp(dist * (-0.5 / (sigma * sigma)))


def centering_matrix(n: int) -> FloatArray:
    """``H = I_n - (1/n)·11ᵀ``."""
    return np.eye(n) - np.full((n, n), 1.0 / n)


def cka_dissimilarity(m: Tensor | ArrayLike, y: Tensor | ArrayLike, spec: KernelSpec) -> Tensor:
    """``1 - CKA(M, Y)`` over one minibatch; gradient flows to ``M`` only.

    Raises:
        DimensionError: Row counts differ or fewer than two rows.
        NumericError: Either side holds NaN or Inf.
        DegenerateError: A centred kernel is zero (constant features).

    Examples:
        >>> m = Tensor(np.random.default_rng(0).normal(size=(5, 3)))
        >>> abs(cka_dissimilarity(m, m, KernelSpec("linear")).item()) < 1e-10
        True
    """
    m = as_tensor(m)
    y_data = _target(y)
    if m.ndim != 2 or y_data.ndim != 2 or m.shape[0] != y_data.shape[0]:
        raise DimensionError(f"CKA needs matching row counts, got {m.shape} and {y_data.shape}")
    n = m.shape[0]
    if n < 2:
        raise DimensionError("CKA needs at least two samples")
    _require_finite(m.data, "student features")
    _require_finite(y_data, "target features")

    h = Tensor(centering_matrix(n))
    p = gram(m, spec)
    t = gram(y_data, spec).data
    p_c = matmul(matmul(h, p), h)
    t_c = h.data @ t @ h.data

    den_p = tsum(p_c * p_c)
    den_t = float(np.sum(t_c * t_c))
    if den_p.item() <= DEGENERATE_RATIO * float(np.sum(p.data**2)) or den_t <= DEGENERATE_RATIO * float(
        np.sum(t**2)
    ):
        raise DegenerateError("Centred kernel is zero; features are constant over the batch")
    num = tsum(p_c * Tensor(t_c))
    return 1.0 - num * (1.0 / np.sqrt(den_t)) * power(den_p, -0.5)


def l2_feature_loss(m: Tensor | ArrayLike, y: Tensor | ArrayLike) -> Tensor:
    """Mean over samples of ``‖m_i - y_i‖²``."""
    m = as_tensor(m)
    y_data = _target(y)
    if m.shape != y_data.shape or m.ndim != 2:
        raise DimensionError(f"l2 loss shape mismatch: {m.shape} vs {y_data.shape}")
    diff = m - Tensor(y_data)
    return tsum(diff * diff) * (1.0 / m.shape[0])


def _unit_rows(x: Tensor) -> Tensor:
    norms = sqrt(tsum(x * x, axis=1))
    if np.any(norms.data == 0):
        raise NumericError("Zero-norm row in cosine loss")
    return row_scale(x, power(norms + COSINE_EPS, -1.0))


def cosine_feature_loss(m: Tensor | ArrayLike, y: Tensor | ArrayLike) -> Tensor:
    """Mean over samples of ``1 - cos(m_i, y_i)`` (``ε = 1e-12`` added to norms).

    Raises:
        NumericError: If a row has zero norm.
    """
    m = as_tensor(m)
    y_data = _target(y)
    if m.shape != y_data.shape or m.ndim != 2:
        raise DimensionError(f"cosine loss shape mismatch: {m.shape} vs {y_data.shape}")
    cos = tsum(_unit_rows(m) * _unit_rows(Tensor(y_data)), axis=1)
    return mean(1.0 - cos)


def _log_softmax_array(z: FloatArray) -> FloatArray:
    shifted = z - z.max(axis=1, keepdims=True)
    out: FloatArray = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return out


def kl_pred_loss(student_logits: Tensor, teacher_logits: Tensor | ArrayLike) -> Tensor:
    """Mean over samples of ``KL(softmax(teacher) ‖ softmax(student))``.

    Temperature 1; the teacher side is a constant target.

    Raises:
        NumericError: NaN or Inf logits.
    """
    teacher = _target(teacher_logits)
    if student_logits.shape != teacher.shape:
        raise DimensionError(f"KL shape mismatch: {student_logits.shape} vs {teacher.shape}")
    if not np.all(np.isfinite(teacher)):
        raise NumericError("KL received NaN or Inf teacher logits")
    log_p = _log_softmax_array(teacher)
    p = np.exp(log_p)
    log_q = log_softmax(student_logits)
    terms = Tensor(p) * (Tensor(log_p) - log_q)
    return tsum(terms) * (1.0 / student_logits.shape[0])


def one_hot(labels: ArrayLike, num_classes: int) -> FloatArray:
    """Rows of the identity selected by ``labels``.

    Raises:
        ValueError: If a label falls outside ``[0, num_classes)``.
    """
    idx = np.asarray(labels, dtype=np.int64)
    if idx.ndim != 1 or np.any(idx < 0) or np.any(idx >= num_classes):
        raise ValueError(f"Labels must lie in [0, {num_classes})")
    out: FloatArray = np.eye(num_classes)[idx]
    return out


def cross_entropy(logits: Tensor, labels: ArrayLike) -> Tensor:
    """Mean negative log-probability of the true class.

    Examples:
        >>> round(cross_entropy(Tensor(np.zeros((2, 4))), [0, 3]).item(), 6)
        1.386294
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy needs [n×C] logits, got {logits.shape}")
    targets = one_hot(labels, logits.shape[1])
    if targets.shape[0] != logits.shape[0]:
        raise DimensionError(f"{targets.shape[0]} labels for {logits.shape[0]} rows")
    return -tsum(Tensor(targets) * log_softmax(logits)) * (1.0 / logits.shape[0])


def feature_loss(kind: FeatureLossKind, m: Tensor, y: Tensor | ArrayLike, spec: KernelSpec | None = None) -> Tensor:
    """Dispatch to the named feature-matching loss.

    Raises:
        ValueError: For ``none`` or an unknown kind.
    """
    if kind == "cka":
        return cka_dissimilarity(m, y, spec or KernelSpec())
    if kind == "l2":
        return l2_feature_loss(m, y)
    if kind == "cosine":
        return cosine_feature_loss(m, y)
    raise ValueError(f"No feature loss for kind '{kind}'")


__all__ = [
    "KernelSpec",
    "bandwidth",
    "centering_matrix",
    "cka_dissimilarity",
    "cosine_feature_loss",
    "cross_entropy",
    "feature_loss",
    "gram",
    "kl_pred_loss",
    "l2_feature_loss",
    "median_pairwise_distance",
    "one_hot",
    "squared_distances",
]
