"""Classification losses built from tensor primitives."""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from . import tensor as T
from .tensor import Tensor


def _check_labels(logits: Tensor, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or labels.size != logits.shape[0]:
        raise DimensionError(f"logits {logits.shape} vs {labels.size} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        bad = labels[(labels < 0) | (labels >= logits.shape[1])][0]
        raise IndexError(f"label {bad} outside [0, {logits.shape[1]})")
    return labels


def log_softmax(logits: Tensor) -> Tensor:
    return logits - T.logsumexp(logits, axis=1)


def log_prob_of(logits: Tensor, labels) -> Tensor:
    """Per-sample log-probability of the given class, shape ``[batch]``."""
    labels = _check_labels(logits, labels)
    lse = T.reshape(T.logsumexp(logits, axis=1), (logits.shape[0],))
    return T.take(logits, labels) - lse


def xent_per_sample(logits: Tensor, labels) -> Tensor:
    return -log_prob_of(logits, labels)


def softmax_xent(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy (nats) of the true class."""
    return T.mean(xent_per_sample(logits, labels))


def kl_divergence(logits_p: Tensor, logits_q: Tensor) -> Tensor:
    """Batch mean of KL(softmax(p) || softmax(q)), rows as distributions."""
    if logits_p.shape != logits_q.shape:
        raise DimensionError(f"kl_divergence shape mismatch: {logits_p.shape} vs {logits_q.shape}")
    logp = log_softmax(logits_p)
    logq = log_softmax(logits_q)
    rows = T.tsum(T.exp(logp) * (logp - logq), axis=1)
    # rounding can leave tiny negatives; the true value and its gradient are 0 there
    return T.mean(T.relu(rows))
