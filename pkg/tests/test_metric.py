"""Prototypical head: closed-form prototypes, distances, and episode loss."""

import numpy as np
import pytest

from tano import tensor as T
from tano.errors import DimensionError, ValidationError
from tano.metric import classify_query, compute_prototypes, episode_loss
from tano.tensor import Tensor


def test_prototypes_are_class_means():
    emb = np.array([[0.0, 0.0], [2.0, 2.0], [4.0, 0.0], [6.0, 2.0]])
    labels = np.array([0, 0, 1, 1])
    protos = compute_prototypes(emb, labels, n_way=2, n_shot=2)
    np.testing.assert_allclose(protos.data, [[1.0, 1.0], [5.0, 1.0]])


def test_prototypes_one_shot_identity_in_label_order():
    emb = np.array([[3.0, 1.0], [0.0, 2.0]])
    protos = compute_prototypes(emb, [1, 0], n_way=2, n_shot=1)
    np.testing.assert_allclose(protos.data, [[0.0, 2.0], [3.0, 1.0]])


def test_prototypes_validation():
    with pytest.raises(ValidationError):
        compute_prototypes(np.ones((3, 2)), [0, 0, 1], n_way=2, n_shot=2)
    with pytest.raises(ValidationError):
        compute_prototypes(np.ones((4, 2)), [0, 0, 0, 1], n_way=2, n_shot=2)


def test_classify_query_is_negative_squared_distance():
    protos = np.array([[0.0, 0.0], [3.0, 4.0]])
    queries = np.array([[0.0, 0.0], [3.0, 3.0]])
    logits = classify_query(queries, protos)
    np.testing.assert_allclose(logits.data, [[0.0, -25.0], [-18.0, -1.0]],
                               atol=1e-10)
    assert logits.data.argmax(axis=1).tolist() == [0, 1]


def test_classify_query_dim_mismatch():
    with pytest.raises(DimensionError):
        classify_query(np.ones((2, 3)), np.ones((2, 2)))


def test_episode_loss_closed_form():
    # uniform query logits over 5 ways and uniform coordinator over 4 workers
    qlogits = Tensor(np.zeros((10, 5)))
    wlogits = Tensor(np.zeros((1, 4)))
    loss = episode_loss(qlogits, np.zeros(10, dtype=int), wlogits, 0, v_r=1.0)
    np.testing.assert_allclose(loss.data, np.log(5) + np.log(4), atol=1e-12)
    scaled = episode_loss(qlogits, np.zeros(10, dtype=int), wlogits, 0, v_r=2.0)
    np.testing.assert_allclose(scaled.data, 2 * (np.log(5) + np.log(4)),
                               atol=1e-12)


def test_episode_loss_rejects_bad_weight():
    with pytest.raises(ValidationError):
        episode_loss(Tensor(np.zeros((2, 5))), [0, 1],
                     Tensor(np.zeros((1, 4))), 0, v_r=0.0)


def test_episode_loss_gradients():
    rng = np.random.default_rng(0)
    emb = Tensor(rng.normal(size=(4, 3)))
    wlogits = Tensor(rng.normal(size=(1, 4)))

    def f():
        protos = compute_prototypes(emb[:2], [0, 1], n_way=2, n_shot=1)
        logits = classify_query(emb[2:], protos)
        return episode_loss(logits, [0, 1], wlogits, 2, v_r=1.3)

    from tano.tensor import finite_diff_check
    assert finite_diff_check(f, [emb, wlogits]) < 1e-4
