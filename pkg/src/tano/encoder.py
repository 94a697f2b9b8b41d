"""Convolutional feature extractor with bank-injected BN parameters.

Three conv blocks (3 -> 16 -> 32 -> 32, 3x3 kernels, padding 1), each
conv -> BN -> ReLU -> 2x2 max pool, operating on 16x16 RGB inputs and
flattening to a 128-d embedding. BN parameters are not owned by the
encoder; every forward pass borrows them from a group worker.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .normalization import (GroupWorker, adabn_adapt, bn_apply,
                            compute_batch_stats, update_running_stats)
from .tensor import Tensor

CHANNELS = (3, 16, 32, 32)
KERNEL = 3
IMAGE_SIZE = 16
EMBED_DIM = CHANNELS[-1] * 2 * 2
NUM_BN_LAYERS = len(CHANNELS) - 1


@dataclass
class EncoderWeights:
    """Conv kernels and biases for the three blocks (no BN state)."""

    kernels: list[Tensor]
    biases: list[Tensor]

    def parameters(self):
        return list(self.kernels) + list(self.biases)


def encoder_init(seed):
    """Glorot-uniform kernels, zero biases, reproducible from the seed."""
    rng = np.random.default_rng(seed)
    kernels, biases = [], []
    for cin, cout in zip(CHANNELS[:-1], CHANNELS[1:]):
        fan_in = cin * KERNEL * KERNEL
        fan_out = cout * KERNEL * KERNEL
        a = np.sqrt(6.0 / (fan_in + fan_out))
        kernels.append(Tensor(rng.uniform(-a, a, size=(cout, cin, KERNEL, KERNEL))))
        biases.append(Tensor(np.zeros(cout)))
    return EncoderWeights(kernels=kernels, biases=biases)


def encode(images, weights, worker, mode="train", update_running=None):
    """Embed a batch of images using one group worker's BN parameters.

    Train mode normalizes by batch statistics and (by default) folds them
    into the worker's running averages; eval mode is deterministic per
    sample. Only the supplied worker is ever read or written.
    """
    if not isinstance(images, Tensor):
        images = Tensor(images)
    if images.data.ndim != 4 or images.data.shape[1:] != (3, IMAGE_SIZE, IMAGE_SIZE):
        raise DimensionError(
            f"encoder expects Bx3x{IMAGE_SIZE}x{IMAGE_SIZE} images, "
            f"got shape {images.shape}")
    if update_running is None:
        update_running = mode == "train"
    x = images
    for j in range(NUM_BN_LAYERS):
        params = worker.layers[j]
        x = T.conv2d(x, weights.kernels[j], stride=1, padding=1)
        x = x + T.reshape(weights.biases[j], (1, -1, 1, 1))
        if update_running:
            update_running_stats(params, compute_batch_stats(x.data))
        x = bn_apply(x, params, mode=mode)
        x = T.relu(x)
        x = T.max_pool2(x)
    return T.reshape(x, (x.data.shape[0], EMBED_DIM))


def adapt_worker_to_batch(weights, worker, pool_images):
    """AdaBN over the whole encoder: cascade batch statistics layer-wise.

    Each layer's running stats are replaced by the statistics of the pool
    features reaching it (computed with earlier layers already adapted).
    Returns a new worker; the input worker is untouched.
    """
    x = Tensor(np.asarray(pool_images, dtype=np.float64))
    adapted = []
    for j in range(NUM_BN_LAYERS):
        x = T.conv2d(x, weights.kernels[j], stride=1, padding=1)
        x = x + T.reshape(weights.biases[j], (1, -1, 1, 1))
        layer = adabn_adapt(worker.layers[j], x.data)
        adapted.append(layer)
        x = T.max_pool2(T.relu(bn_apply(x, layer, mode="eval")))
    return GroupWorker(layers=adapted, worker_index=worker.worker_index)
