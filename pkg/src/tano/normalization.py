"""Batch normalization with externally banked parameters (group workers).

A group worker is a complete set of BN parameters (gamma, beta, running
mean, running variance) for every BN layer of the encoder. A bank holds
R domain workers plus one global worker at index R. Workers are selected
or blended per task; the bank itself is never mutated by blending.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError, ValidationError
from .tensor import Tensor

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-5
DEFAULT_MOMENTUM = 0.1


@dataclass
class BNLayerParams:
    """Per-channel BN state for one layer: learnable affine + running stats."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = DEFAULT_EPSILON
    momentum: float = DEFAULT_MOMENTUM

    @classmethod
    def identity(cls, channels, epsilon=DEFAULT_EPSILON, momentum=DEFAULT_MOMENTUM):
        return cls(gamma=Tensor(np.ones(channels)),
                   beta=Tensor(np.zeros(channels)),
                   running_mean=np.zeros(channels),
                   running_var=np.ones(channels),
                   epsilon=epsilon, momentum=momentum)

    @property
    def channels(self):
        return self.gamma.data.shape[0]


@dataclass
class GroupWorker:
    """One BN parameter set per encoder layer, specialized to one domain."""

    layers: list[BNLayerParams]
    worker_index: int


@dataclass
class GroupWorkerBank:
    """R domain workers plus the global worker at index ``num_domains``."""

    workers: list[GroupWorker]
    num_domains: int

    @classmethod
    def create(cls, channel_counts, num_domains,
               epsilon=DEFAULT_EPSILON, momentum=DEFAULT_MOMENTUM):
        workers = [
            GroupWorker(layers=[BNLayerParams.identity(c, epsilon, momentum)
                                for c in channel_counts],
                        worker_index=r)
            for r in range(num_domains + 1)
        ]
        return cls(workers=workers, num_domains=num_domains)

    @property
    def global_worker(self):
        return self.workers[self.num_domains]

    @property
    def domain_workers(self):
        return self.workers[:self.num_domains]

    def copy(self):
        return copy.deepcopy(self)


@dataclass
class BatchStats:
    """Per-channel first and second moments of one batch."""

    mean: np.ndarray
    var: np.ndarray
    m: int


def compute_batch_stats(z):
    """Biased per-channel mean/variance of an NCHW batch (divisor N*H*W)."""
    data = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    if data.ndim != 4:
        raise DimensionError(f"expected NCHW input, got shape {data.shape}")
    n, c, h, w = data.shape
    m = n * h * w
    if m < 1:
        raise ValidationError("batch has no elements to normalize over")
    mean = data.mean(axis=(0, 2, 3))
    var = ((data - mean.reshape(1, c, 1, 1)) ** 2).mean(axis=(0, 2, 3))
    return BatchStats(mean=mean, var=var, m=m)


def _per_channel(vec, like):
    return vec.reshape(1, -1, 1, 1)


def bn_apply(z, params, mode="train", stats=None):
    """Normalize ``z`` with one worker layer's parameters.

    Training mode standardizes by batch statistics, computed with tensor
    ops so gradients flow through the moments into gamma, beta, and z.
    Eval mode uses the stored running statistics as constants, so each
    sample's output is independent of batch composition. Passing
    ``stats`` overrides the statistics in either mode (used by the
    analysis report to swap mismatched stats in deliberately).
    """
    if not isinstance(z, Tensor):
        z = Tensor(z)
    if z.data.ndim != 4:
        raise DimensionError(f"expected NCHW input, got shape {z.shape}")
    c = z.data.shape[1]
    if c != params.channels:
        raise DimensionError(
            f"channel mismatch: input has {c}, params have {params.channels}")
    gamma = T.reshape(params.gamma, (1, c, 1, 1))
    beta = T.reshape(params.beta, (1, c, 1, 1))
    if mode == "train" and stats is None:
        mu = T.mean(z, axis=(0, 2, 3), keepdims=True)
        var = T.mean(T.square(z - mu), axis=(0, 2, 3), keepdims=True)
        sigma = T.sqrt(var + params.epsilon)
    else:
        if stats is None:
            s_mean, s_var = params.running_mean, params.running_var
        else:
            s_mean, s_var = stats.mean, stats.var
        mu = Tensor(_per_channel(s_mean, z))
        sigma = Tensor(np.sqrt(_per_channel(s_var, z) + params.epsilon))
    return gamma * ((z - mu) / sigma) + beta


def update_running_stats(params, stats):
    """Exponential moving-average update of the running statistics."""
    if stats.mean.shape[0] != params.channels:
        raise DimensionError(
            f"channel mismatch: stats have {stats.mean.shape[0]}, "
            f"params have {params.channels}")
    rho = params.momentum
    params.running_mean = (1.0 - rho) * params.running_mean + rho * stats.mean
    params.running_var = (1.0 - rho) * params.running_var + rho * stats.var
    return params


def blend_workers(bank, weights, exact_variance=False):
    """Convex combination of the R domain workers' parameters.

    One-hot weights reproduce a single worker exactly. Variances blend
    linearly by default; ``exact_variance`` uses the mixture identity
    sum(w*(var+mu^2)) - mu_blend^2 instead.
    """
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != bank.num_domains:
        raise ValidationError(
            f"need {bank.num_domains} weights, got {w.shape[0]}")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValidationError(f"blend weights must sum to 1, got {w.sum()!r}")
    if (w < -1e-12).any():
        raise ValidationError("blend weights must be nonnegative")
    layers = []
    for j in range(len(bank.workers[0].layers)):
        parts = [bank.workers[r].layers[j] for r in range(bank.num_domains)]
        gamma = sum(w[r] * parts[r].gamma.data for r in range(len(parts)))
        beta = sum(w[r] * parts[r].beta.data for r in range(len(parts)))
        mu = sum(w[r] * parts[r].running_mean for r in range(len(parts)))
        if exact_variance:
            second = sum(w[r] * (parts[r].running_var + parts[r].running_mean ** 2)
                         for r in range(len(parts)))
            var = second - mu ** 2
        else:
            var = sum(w[r] * parts[r].running_var for r in range(len(parts)))
        layers.append(BNLayerParams(
            gamma=Tensor(gamma), beta=Tensor(beta),
            running_mean=mu, running_var=np.maximum(var, 0.0),
            epsilon=parts[0].epsilon, momentum=parts[0].momentum))
    return GroupWorker(layers=layers, worker_index=-1)


def adabn_adapt(params, target_batch):
    """Replace running stats with the target batch's statistics.

    Gamma and beta are preserved; this is the AdaBN baseline applied to
    one layer, given the features that reach it.
    """
    stats = compute_batch_stats(target_batch)
    if stats.m < 32:
        log.warning("adabn_adapt on only %d elements per channel; "
                    "statistics will be noisy", stats.m)
    return BNLayerParams(
        gamma=Tensor(params.gamma.data.copy()),
        beta=Tensor(params.beta.data.copy()),
        running_mean=stats.mean.copy(),
        running_var=stats.var.copy(),
        epsilon=params.epsilon,
        momentum=params.momentum)


def sphere_residual(z_normalized, gamma, beta, var, epsilon):
    """Distance of a normalized channel vector from its expected sphere.

    A length-m vector standardized by its own biased statistics satisfies
    ||(z_hat - beta) / gamma||^2 = m * var / (var + eps) exactly; with
    eps = 0 the radius is sqrt(m). Returns the absolute defect.
    """
    if gamma == 0:
        raise ValidationError("gamma = 0 gives a degenerate sphere")
    z = np.asarray(z_normalized, dtype=np.float64).reshape(-1)
    m = z.shape[0]
    back = (z - beta) / gamma
    target = m * var / (var + epsilon)
    return abs(float(back @ back) - target)
