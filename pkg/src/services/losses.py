"""
Training losses and their gradients.

Each `*_with_grad` function returns (value, gradient w.r.t. its first argument);
the plain versions return the value only.
"""

import numpy as np
from scipy.special import logsumexp

from src.core.errors import DataValidationError, UndefinedLossError


def _check_label(label: int, n_classes: int) -> None:
    if not 0 <= label < n_classes:
        raise DataValidationError(f"label {label} out of range for {n_classes} classes")


def cross_entropy_with_grad(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """-log softmax(logits)[label]; the gradient is softmax minus the one-hot label."""
    _check_label(label, len(logits))
    lse = logsumexp(logits)
    grad = np.exp(logits - lse)
    grad[label] -= 1.0
    return float(lse - logits[label]), grad


def loss_ce(logits: np.ndarray, label: int) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise DataValidationError("logits must be finite")
    return cross_entropy_with_grad(logits, label)[0]


def supcon_with_grad(
    z: np.ndarray, labels: np.ndarray, tau: float
) -> tuple[float, np.ndarray]:
    """
    Supervised contrastive loss over a batch of unit vectors [batch x dim].

    Anchors without a positive in the batch are left out of the anchor mean.
    Raises UndefinedLossError when no anchor has a positive.
    """
    if tau <= 0:
        raise DataValidationError(f"tau must be > 0, got {tau}")
    labels = np.asarray(labels)
    batch = len(labels)
    off_diagonal = ~np.eye(batch, dtype=bool)
    positives = (labels[:, None] == labels[None, :]) & off_diagonal
    n_positives = positives.sum(axis=1)
    anchors = n_positives > 0
    if not anchors.any():
        raise UndefinedLossError(
            f"no anchor in a batch of {batch} has a positive of the same label"
        )

    similarity = (z @ z.T) / tau
    masked = np.where(off_diagonal, similarity, -np.inf)
    lse = logsumexp(masked, axis=1)
    log_prob = similarity - lse[:, None]

    per_anchor = -np.where(positives, log_prob, 0.0).sum(axis=1) / np.maximum(n_positives, 1)
    n_anchors = int(anchors.sum())
    value = float(per_anchor[anchors].sum() / n_anchors)

    prob = np.where(off_diagonal, np.exp(masked - lse[:, None]), 0.0)
    coeff = (prob - positives / np.maximum(n_positives, 1)[:, None]) / n_anchors
    coeff[~anchors] = 0.0
    grad = (coeff + coeff.T) @ z / tau
    return value, grad.astype(z.dtype, copy=False)


def loss_supcon(z: np.ndarray, labels: np.ndarray, tau: float = 0.1) -> float:
    return supcon_with_grad(np.asarray(z, dtype=np.float64), labels, tau)[0]


def alignment_with_grad(
    speech: np.ndarray, text: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Cosine distance between unit vectors, 1 - s.t, with gradients for both."""
    return float(1.0 - np.dot(speech, text)), -text, -speech
