from typing import Sequence, Tuple

import numpy as np

from core.errors import ShapeMismatchError
from core.tensor import Tensor, ensure_finite


def softmax(logits: Tensor) -> Tensor:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_loss(logits: Tensor, labels: Sequence[int]) -> Tuple[float, Tensor]:
    """Mean softmax cross-entropy and its gradient (softmax - onehot) / batch."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatchError("cross_entropy_loss", expected=(len(labels), "classes"), actual=logits.shape)
    batch, classes = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ShapeMismatchError("label out of range", expected=f"[0, {classes})",
                                 actual=(int(labels.min()), int(labels.max())))
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    loss = float(-log_probs[np.arange(batch), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(batch), labels] -= 1.0
    grad /= batch
    return loss, ensure_finite(grad, "cross_entropy_loss")


def mse_loss(a: Tensor, b: Tensor) -> Tuple[float, Tensor]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError("mse_loss", expected=a.shape, actual=b.shape)
    diff = a - b
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size
