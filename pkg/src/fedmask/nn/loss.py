"""Softmax cross-entropy over a trailing class axis."""

from __future__ import annotations

import numpy as np


class LabelRangeError(ValueError):
    pass


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray, per_sample: bool = False
) -> tuple[np.ndarray | float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to the logits.

    ``logits`` has shape (batch, ..., classes) with the class axis last;
    ``labels`` holds integer class indices of shape (batch, ...). The loss is
    the mean negative log-likelihood over every prediction site. With
    ``per_sample=True`` the loss is a (batch,) vector of per-sample means and
    the gradient is scaled so that row b is exactly d loss[b] / d logits[b].
    """
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelRangeError(f"label indices must lie in [0, {k})")

    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    nll = -np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]

    probs = np.exp(logp)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)

    if per_sample:
        b = logits.shape[0]
        sites = nll[0].size if nll.ndim > 1 else 1
        loss = nll.reshape(b, -1).mean(axis=1)
        dlogits = (probs - onehot) / sites
    else:
        loss = float(nll.mean())
        dlogits = (probs - onehot) / nll.size
    return loss, dlogits
