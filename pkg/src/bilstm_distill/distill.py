"""Distillation objective: logit regression blended with cross-entropy.

The student is penalized with the squared Euclidean distance between its
logits and the teacher's (a sum over the k classes, not a mean), optionally
blended with a one-hot cross-entropy term:

    loss = alpha * CE(z_student, target) + (1 - alpha) * ||z_teacher - z_student||^2

alpha defaults to 0: pure logit matching. Teacher logits are constants;
gradients flow only into the student.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, ShapeError, Tensor


@dataclass
class DistillConfig:
    """Blend weight for the cross-entropy term."""

    alpha: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass
class TeacherSignal:
    """Teacher logits plus the label the teacher predicts (their argmax)."""

    logits: np.ndarray
    predicted_label: int

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 1 or self.logits.shape[0] < 2:
            raise ValueError(f"teacher logits must be a vector of length >= 2, got shape {self.logits.shape}")
        expected = int(np.argmax(self.logits))  # ties resolve to the lowest index
        if self.predicted_label != expected:
            raise ValueError(
                f"predicted_label {self.predicted_label} is not argmax(logits) = {expected}")

    @classmethod
    def from_logits(cls, logits) -> "TeacherSignal":
        logits = np.asarray(logits, dtype=np.float64)
        return cls(logits=logits, predicted_label=int(np.argmax(logits)))


def pseudo_label(scores) -> np.ndarray:
    """One-hot vector at the argmax of a probability or logit vector.

    Ties break toward the lowest index. Softmax is monotone, so feeding
    probabilities or raw logits gives the same answer.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ValueError(f"pseudo_label expects a non-empty vector, got shape {scores.shape}")
    if np.isnan(scores).any():
        raise NumericError("pseudo_label input contains NaN")
    onehot = np.zeros_like(scores)
    onehot[int(np.argmax(scores))] = 1.0
    return onehot


def distill_loss(z_student: Tensor, z_teacher) -> Tensor:
    """||z_teacher - z_student||^2, summed over the k logits.

    Differentiable in the student logits; the teacher side is constant.
    """
    z_teacher = np.asarray(z_teacher, dtype=z_student.dtype)
    if z_teacher.shape != z_student.shape:
        raise ShapeError(
            f"distill_loss: logit lengths differ, student {z_student.shape} vs teacher {z_teacher.shape}")
    diff = ad.sub(z_student, ad.constant(z_teacher, dtype=z_student.dtype))
    return ad.sum_all(ad.mul(diff, diff))


def cross_entropy(z_student: Tensor, target) -> Tensor:
    """-log softmax(z)[argmax target], via log-sum-exp for stability."""
    target = np.asarray(target, dtype=z_student.dtype)
    if target.shape != z_student.shape:
        raise ShapeError(
            f"cross_entropy: lengths differ, logits {z_student.shape} vs target {target.shape}")
    lse = ad.logsumexp_last(z_student)
    picked = ad.sum_last(ad.mul(z_student, ad.constant(target, dtype=z_student.dtype)))
    return ad.sub(lse, picked)


def combined_loss(z_student: Tensor, target, z_teacher, cfg: DistillConfig) -> Tensor:
    """alpha * cross_entropy + (1 - alpha) * distill_loss.

    The endpoints are exact: alpha=0 is pure logit matching and alpha=1 is
    pure cross-entropy (the other term is not even evaluated).
    """
    if cfg.alpha == 0.0:
        return distill_loss(z_student, z_teacher)
    if cfg.alpha == 1.0:
        return cross_entropy(z_student, target)
    return ad.add(
        ad.scale(cross_entropy(z_student, target), cfg.alpha),
        ad.scale(distill_loss(z_student, z_teacher), 1.0 - cfg.alpha),
    )


def per_example_losses(z_batch: Tensor, targets: np.ndarray, teacher_logits: np.ndarray | None,
                       cfg: DistillConfig) -> Tensor:
    """Vector of per-example combined losses for a [B, k] logit batch.

    `targets` is a [B, k] one-hot matrix; `teacher_logits` is [B, k] (may be
    None when alpha=1, i.e. plain cross-entropy training).
    """
    if z_batch.values.ndim != 2:
        raise ShapeError(f"per_example_losses expects [B, k] logits, got {z_batch.shape}")
    dtype = z_batch.dtype

    def ce_vec() -> Tensor:
        targets_arr = np.asarray(targets, dtype=dtype)
        if targets_arr.shape != z_batch.shape:
            raise ShapeError(f"targets shape {targets_arr.shape} != logits shape {z_batch.shape}")
        lse = ad.logsumexp_last(z_batch)
        picked = ad.sum_last(ad.mul(z_batch, ad.constant(targets_arr, dtype=dtype)))
        return ad.sub(lse, picked)

    def mse_vec() -> Tensor:
        teacher_arr = np.asarray(teacher_logits, dtype=dtype)
        if teacher_arr.shape != z_batch.shape:
            raise ShapeError(f"teacher logits shape {teacher_arr.shape} != logits shape {z_batch.shape}")
        diff = ad.sub(z_batch, ad.constant(teacher_arr, dtype=dtype))
        return ad.sum_last(ad.mul(diff, diff))

    if cfg.alpha == 0.0:
        return mse_vec()
    if cfg.alpha == 1.0:
        return ce_vec()
    return ad.add(ad.scale(ce_vec(), cfg.alpha), ad.scale(mse_vec(), 1.0 - cfg.alpha))
