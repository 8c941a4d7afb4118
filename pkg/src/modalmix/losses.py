"""Soft similarity labels, batch-softmax probabilities, and the training losses.

Labels are built from target-target similarities and treated as constants:
no gradient flows through label generation.  The contrastive loss blends a
hard cross-entropy on the batch diagonal (1/B) with a soft cross-entropy
over all pairs (1/B^2), weighted by lambda.  Distillation is the row-mean
KL divergence from a constant teacher distribution to the student's.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ParameterError, ShapeError

KERNELS = ("dot", "euclidean", "sigmoid")


@dataclass(frozen=True)
class SoftLabels:
    """Label matrix with a unit diagonal, plus the raw kernel weights.

    ``matrix`` is the exported label artifact (diagonal forced to 1).  The
    soft cross-entropy term consumes ``weights``, the kernel values for
    every pair as generated, diagonal included.
    """

    matrix: np.ndarray
    weights: np.ndarray
    kernel: str


def soft_label_matrix(targets, tau, kernel="dot"):
    """Batch of target features [B, C] -> SoftLabels (constants, no graph)."""
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    if t.ndim != 2:
        raise ShapeError(f"target batch must be [B, C], got {t.shape}")
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    if kernel not in KERNELS:
        raise ParameterError(f"unknown soft-label kernel {kernel!r}, pick one of {KERNELS}")
    b = t.shape[0]
    dots = t @ t.T
    if kernel == "euclidean":
        sq = np.sum(t * t, axis=1)
        sims = -(sq[:, None] + sq[None, :] - 2.0 * dots)
    else:
        sims = dots
    if kernel == "sigmoid":
        weights = 1.0 / (1.0 + np.exp(-sims / tau))
    else:
        z = sims / tau
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        weights = e / e.sum(axis=1, keepdims=True)
    matrix = weights.copy()
    np.fill_diagonal(matrix, 1.0)
    return SoftLabels(matrix=matrix, weights=weights, kernel=kernel)


def similarity_probs(f_comb, f_tgt, tau):
    """Row-softmax of query-target dot products / tau -> [B, B] probabilities."""
    f_comb, f_tgt = ad.as_tensor(f_comb), ad.as_tensor(f_tgt)
    if f_comb.ndim != 2 or f_tgt.ndim != 2 or f_comb.shape[1] != f_tgt.shape[1]:
        raise ShapeError(f"feature widths disagree: {f_comb.shape} vs {f_tgt.shape}")
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    sims = ad.scale(ad.matmul(f_comb, ad.transpose(f_tgt)), 1.0 / tau)
    return ad.softmax(sims, axis=1)


def contrastive_loss(probs, labels, lam):
    """lambda-weighted hard + soft cross-entropy over a [B, B] probability matrix."""
    probs = ad.as_tensor(probs)
    if not 0.0 < lam <= 1.0:
        raise ParameterError(f"lambda must be in (0, 1], got {lam}")
    b = probs.shape[0]
    if probs.ndim != 2 or probs.shape != (b, b):
        raise ShapeError(f"probability matrix must be square, got {probs.shape}")
    if labels.weights.shape != (b, b):
        raise ShapeError(f"labels are {labels.weights.shape}, probabilities {probs.shape}")
    if not np.all(probs.data > 0.0) or not np.all(np.isfinite(probs.data)):
        raise ContractError("probability matrix has nonpositive or non-finite entries")
    coeff = (lam / b) * np.eye(b) + ((1.0 - lam) / (b * b)) * labels.weights
    return ad.scale(ad.reduce_sum(ad.mul(Tensor(coeff), ad.log(probs))), -1.0)


def distillation_loss(teacher, probs):
    """Mean KL(teacher_row || student_row); the teacher is a constant."""
    t = teacher.data if isinstance(teacher, Tensor) else np.asarray(teacher, dtype=np.float64)
    probs = ad.as_tensor(probs)
    if t.shape != probs.shape or t.ndim != 2:
        raise ShapeError(f"teacher {t.shape} and student {probs.shape} must be equal [B, B]")
    if not np.all(t > 0.0) or not np.all(probs.data > 0.0):
        raise ContractError("distillation needs strictly positive probabilities")
    b = t.shape[0]
    entropy = float(np.sum(t * np.log(t)) / b)
    cross = ad.scale(ad.reduce_sum(ad.mul(Tensor(t), ad.log(probs))), -1.0 / b)
    return ad.add(cross, entropy)


def total_loss(l_contrastive, l_distill):
    """Plain sum of the per-stream loss terms."""
    return ad.add(l_contrastive, l_distill)
