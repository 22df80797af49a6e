"""Mahalanobis metric head.

The metric matrix is kept in factored form ``M = W W^T`` so it stays
positive semi-definite without any projection step. A distance is the
Euclidean norm of ``W^T (x1 - x2)``, i.e. a bias-free linear layer applied
to the feature difference followed by an L2 norm.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

DEFAULT_LAMBDA = 1e-2
LAMBDA_SWEEP = (1e2, 1e1, 1e0, 1e-2, 1e-3, 1e-4, 0.0)


@dataclass
class MetricLayer:
    W: Tensor
    lam: float = DEFAULT_LAMBDA
    b: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        w = self.W.data
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise DimensionError(f"W must be square, got {w.shape}")
        if self.b is None:
            self.b = np.zeros(w.shape[0])
        self.W.requires_grad = True

    @classmethod
    def identity(cls, dim: int = 64, lam: float = DEFAULT_LAMBDA) -> "MetricLayer":
        return cls(Tensor(np.eye(dim), requires_grad=True, name="metric.W"), lam)

    @property
    def dim(self) -> int:
        return self.W.shape[0]

    def copy(self) -> "MetricLayer":
        return MetricLayer(Tensor(self.W.data.copy(), requires_grad=True, name="metric.W"), self.lam)


def _vec(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def distance(x1, x2, layer: MetricLayer) -> float:
    """``||W^T (x1 - x2)||_2`` for two feature vectors."""
    a, b = _vec(x1), _vec(x2)
    if a.shape != (layer.dim,) or b.shape != (layer.dim,):
        raise DimensionError(f"features must have length {layer.dim}, got {a.shape} and {b.shape}")
    y = layer.W.data.T @ (a - b)
    return float(np.sqrt(y @ y))


def mahalanobis(x1, x2, M: np.ndarray) -> float:
    """``sqrt((x1 - x2)^T M (x1 - x2))`` from an explicit metric matrix."""
    d = _vec(x1) - _vec(x2)
    return float(np.sqrt(max(d @ M @ d, 0.0)))


def pairwise_distances(a: np.ndarray, b: np.ndarray, layer: MetricLayer) -> np.ndarray:
    """Distance between every row of ``a`` and every row of ``b``."""
    pa = np.asarray(a, dtype=np.float64) @ layer.W.data
    pb = np.asarray(b, dtype=np.float64) @ layer.W.data
    diff = pa[:, None, :] - pb[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def batch_distance(x1: Tensor, x2: Tensor, layer: MetricLayer) -> Tensor:
    """Row-wise distances of two ``N x D`` feature tensors, differentiable.

    Rows are projected as ``(x1 - x2) W``, the row form of ``W^T (x1 - x2)``.
    The zero-distance subgradient is 0.
    """
    if x1.shape != x2.shape or x1.shape[-1] != layer.dim:
        raise DimensionError(f"feature shapes {x1.shape} and {x2.shape} do not fit W {layer.W.shape}")
    return T.row_norms(T.matmul(T.sub(x1, x2), layer.W))


def pair_loss(d_pos: float, d_neg: float, margin: float | None = None) -> float:
    """Positive distance minus negative distance (optional hinge clamp)."""
    if margin is None:
        return d_pos - d_neg
    return max(0.0, margin + d_pos - d_neg)


def constraint_penalty(W, lam: float) -> float:
    """``(lam / 2) * ||W W^T - I||_F^2``."""
    W = _vec(W)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise DimensionError(f"W must be square, got {W.shape}")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    R = W @ W.T - np.eye(W.shape[0])
    return 0.5 * lam * float(np.sum(R * R))


def constraint_gradient(W, lam: float) -> np.ndarray:
    """Exact gradient of ``constraint_penalty``: ``2 lam (W W^T - I) W``.

    ``W`` enters the penalty twice through ``W W^T``, hence the factor 2.
    """
    W = _vec(W)
    return 2.0 * lam * (W @ W.T - np.eye(W.shape[0])) @ W


def metric_matrix(layer: MetricLayer) -> np.ndarray:
    W = layer.W.data
    M = W @ W.T
    return 0.5 * (M + M.T)


def spectrum(layer: MetricLayer) -> np.ndarray:
    """Singular values of ``M`` in non-increasing order.

    For symmetric ``M`` these are the absolute eigenvalues.
    """
    vals = np.abs(np.linalg.eigvalsh(metric_matrix(layer)))
    return np.sort(vals)[::-1]


def write_spectrum_csv(values, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "singular_value"])
        for i, v in enumerate(values, start=1):
            w.writerow([i, repr(float(v))])
