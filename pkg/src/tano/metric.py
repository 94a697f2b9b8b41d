"""Prototypical-network head: class prototypes and distance classification."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionError, ValidationError
from .tensor import Tensor


def compute_prototypes(support_embeddings, support_labels, n_way, n_shot):
    """Per-class mean of the support embeddings, class order 0..n_way-1."""
    if not isinstance(support_embeddings, Tensor):
        support_embeddings = Tensor(support_embeddings)
    labels = np.asarray(support_labels)
    b = support_embeddings.data.shape[0]
    if b != n_way * n_shot:
        raise ValidationError(
            f"expected {n_way * n_shot} support embeddings, got {b}")
    assign = np.zeros((n_way, b))
    for c in range(n_way):
        members = np.flatnonzero(labels == c)
        if members.size != n_shot:
            raise ValidationError(
                f"class {c} has {members.size} support examples, expected {n_shot}")
        assign[c, members] = 1.0 / n_shot
    return T.matmul(Tensor(assign), support_embeddings)


def classify_query(query_embeddings, prototypes):
    """Logits = negative squared Euclidean distance to each prototype."""
    if not isinstance(query_embeddings, Tensor):
        query_embeddings = Tensor(query_embeddings)
    if not isinstance(prototypes, Tensor):
        prototypes = Tensor(prototypes)
    if query_embeddings.data.shape[1] != prototypes.data.shape[1]:
        raise DimensionError(
            f"embedding dims disagree: queries {query_embeddings.shape} "
            f"vs prototypes {prototypes.shape}")
    qq = T.sum_(T.square(query_embeddings), axis=1, keepdims=True)
    pp = T.reshape(T.sum_(T.square(prototypes), axis=1), (1, -1))
    cross = T.matmul(query_embeddings, T.transpose(prototypes))
    return -(qq + pp - 2.0 * cross)


def episode_loss(query_logits, query_labels, w_hat_logits, w_label, v_r=1.0):
    """Joint task loss: v_r * (mean query CE + coordinator CE).

    ``w_hat_logits`` are the coordinator's pre-softmax outputs (1xR);
    ``w_label`` is the task's true or pseudo domain index.
    """
    if v_r <= 0:
        raise ValidationError(f"domain loss weight v_r must be positive, got {v_r}")
    query_ce = T.cross_entropy(query_logits, np.asarray(query_labels))
    coord_ce = T.cross_entropy(w_hat_logits, np.array([int(w_label)]))
    return v_r * (query_ce + coord_ce)
