"""Group coordinator: support-set embeddings -> domain weights.

The coordinator sees the mean of the support set's global-worker
embeddings and outputs a probability vector over the R domain workers
(never the global worker). Selection is either hard argmax or a
renormalized top-k blend.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ValidationError
from .tensor import Tensor

HIDDEN = 64


@dataclass
class CoordinatorWeights:
    """Two fully-connected layers, embed_dim -> 64 -> R, ReLU between."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def num_domains(self):
        return self.w2.data.shape[1]

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class DomainWeights:
    """Simplex weights over the R domain workers for one task."""

    w_hat: np.ndarray
    logits: Tensor | None = None
    source: str = ""


@dataclass
class WorkerSelection:
    mode: str                      # "hard" | "blend"
    index: int | None = None       # hard: chosen worker
    indices: np.ndarray | None = None
    weights: np.ndarray | None = None
    k: int = 1


def coordinator_init(embed_dim, num_domains, seed):
    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=(fan_in, fan_out))

    return CoordinatorWeights(
        w1=Tensor(glorot(embed_dim, HIDDEN)), b1=Tensor(np.zeros(HIDDEN)),
        w2=Tensor(glorot(HIDDEN, num_domains)),
        b2=Tensor(np.zeros(num_domains)))


def coordinate(support_embeddings, weights, source=""):
    """Mean-pool the support embeddings and map them to domain weights.

    The pooled MLP output is kept as logits on the returned value so the
    training loss can use log-softmax numerics.
    """
    if not isinstance(support_embeddings, Tensor):
        support_embeddings = Tensor(support_embeddings)
    if support_embeddings.data.ndim != 2 or support_embeddings.data.shape[0] == 0:
        raise ValidationError(
            f"expected a nonempty Bxd embedding matrix, "
            f"got shape {support_embeddings.shape}")
    pooled = T.mean(support_embeddings, axis=0, keepdims=True)
    h = T.relu(T.matmul(pooled, weights.w1) + weights.b1)
    logits = T.matmul(h, weights.w2) + weights.b2
    probs = T.softmax(logits, axis=-1)
    return DomainWeights(w_hat=probs.data[0].copy(), logits=logits, source=source)


def select_worker(w, k=1, mode="hard"):
    """Hard argmax (lowest index on ties) or renormalized top-k blend."""
    w_hat = w.w_hat if isinstance(w, DomainWeights) else np.asarray(w, dtype=np.float64)
    r = w_hat.shape[0]
    if not 1 <= k <= r:
        raise ValidationError(f"k must be in [1, {r}], got {k}")
    if mode == "hard":
        return WorkerSelection(mode="hard", index=int(np.argmax(w_hat)), k=1)
    if mode != "blend":
        raise ValidationError(f"unknown selection mode {mode!r}")
    # stable top-k: sort by (-weight, index) so ties prefer lower indices
    order = np.lexsort((np.arange(r), -w_hat))[:k]
    order = np.sort(order)
    top = w_hat[order]
    total = top.sum()
    if total <= 0:
        raise ValidationError("top-k weights sum to zero; cannot renormalize")
    return WorkerSelection(mode="blend", indices=order, weights=top / total, k=k)


def full_blend_weights(selection, num_domains):
    """Expand a selection to a length-R weight vector over all workers."""
    w = np.zeros(num_domains)
    if selection.mode == "hard":
        w[selection.index] = 1.0
    else:
        w[selection.indices] = selection.weights
    return w


def coordinator_loss(w_hat, w):
    """Cross-entropy -sum(w * log w_hat) against a one-hot target.

    Accepts a DomainWeights (preferred: uses the stored logits with
    log-softmax numerics) or a bare probability vector.
    """
    target = np.asarray(w, dtype=np.float64).reshape(-1)
    if target.sum() <= 0:
        raise ValidationError("target weights are all zero")
    if isinstance(w_hat, DomainWeights) and w_hat.logits is not None:
        logp = T.log_softmax_data(w_hat.logits.data)[0]
        probs = w_hat.w_hat
    else:
        probs = (w_hat.w_hat if isinstance(w_hat, DomainWeights)
                 else np.asarray(w_hat, dtype=np.float64).reshape(-1))
        logp = np.log(np.maximum(probs, 1e-300))
    if target.shape != probs.shape:
        raise ValidationError(
            f"target shape {target.shape} != prediction shape {probs.shape}")
    return float(-(target * logp).sum())
